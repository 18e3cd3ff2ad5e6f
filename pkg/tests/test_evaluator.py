"""Evaluation reports: accuracy, confusion counts, and serialization."""
import json

import numpy as np
import pytest

from protofew.errors import NoLabels
from protofew.evaluator import (
    evaluate,
    markdown_table,
    report_from_json,
    report_to_json,
)
from protofew.model import MixtureHyperparams, init_model
from protofew.store import QuerySet, SupportSet, TextPromptBank
from protofew.synthetic import ClusterSpec, make_cluster_dataset

HP = MixtureHyperparams(alpha=0.5, beta=10.0)


class TestEvaluate:
    def test_support_rows_as_queries_are_perfect(self):
        ds = make_cluster_dataset(ClusterSpec(seed=40))
        state = init_model(ds.support, ds.text)
        queries = QuerySet(embeddings=ds.support.embeddings,
                           labels=ds.support.labels, num_classes=ds.vocab.size)
        report = evaluate(state, queries, MixtureHyperparams(alpha=1.0, beta=3.0))
        assert report.overall_accuracy == 1.0

    def test_all_wrong_confusion_layout(self):
        # model whose prototypes force every class-0 query to predict class 1
        support = SupportSet(
            embeddings=np.array([[1, 0], [0, 1]], dtype=np.float32),
            labels=np.array([0, 1]), num_classes=2)
        text = TextPromptBank(
            embeddings=np.array([[1, 0], [0, 1]], dtype=np.float32),
            labels=np.array([0, 1]), num_classes=2)
        state = init_model(support, text)
        queries = QuerySet(
            embeddings=np.tile(np.array([[0, 1]], dtype=np.float32), (4, 1)),
            labels=np.zeros(4, dtype=np.int64), num_classes=2)
        report = evaluate(state, queries, HP)
        assert report.overall_accuracy == 0.0
        np.testing.assert_array_equal(report.confusion, [[0, 4], [0, 0]])
        assert report.per_class_accuracy == [0.0, None]

    def test_requires_labels(self):
        ds = make_cluster_dataset(ClusterSpec(seed=41))
        state = init_model(ds.support, ds.text)
        unlabeled = QuerySet(embeddings=ds.test.embeddings, labels=None,
                             num_classes=ds.vocab.size)
        with pytest.raises(NoLabels):
            evaluate(state, unlabeled, HP)

    def test_order_invariance(self, rng):
        ds = make_cluster_dataset(ClusterSpec(seed=42, noise=0.3,
                                              min_center_distance=0.7))
        state = init_model(ds.support, ds.text)
        report = evaluate(state, ds.test, HP)
        perm = rng.permutation(ds.test.size)
        shuffled = QuerySet(embeddings=ds.test.embeddings[perm],
                            labels=ds.test.labels[perm],
                            num_classes=ds.vocab.size)
        report_p = evaluate(state, shuffled, HP)
        assert report.overall_accuracy == report_p.overall_accuracy
        np.testing.assert_array_equal(report.confusion, report_p.confusion)

    def test_accuracy_equals_independent_mean(self):
        from protofew.model import classify_batch

        ds = make_cluster_dataset(ClusterSpec(seed=43, noise=0.4,
                                              min_center_distance=0.7))
        state = init_model(ds.support, ds.text)
        report = evaluate(state, ds.test, HP)
        _, pred = classify_batch(state, ds.test.embeddings, HP)
        independent = float(np.mean(pred == ds.test.labels))
        assert report.overall_accuracy == pytest.approx(independent, abs=1e-12)

    def test_confusion_rows_sum_to_class_counts(self):
        ds = make_cluster_dataset(ClusterSpec(seed=44))
        state = init_model(ds.support, ds.text)
        report = evaluate(state, ds.test, HP)
        counts = np.bincount(ds.test.labels, minlength=ds.vocab.size)
        np.testing.assert_array_equal(report.confusion.sum(axis=1), counts)
        trace_acc = np.trace(report.confusion) / report.confusion.sum()
        assert report.overall_accuracy == pytest.approx(trace_acc, abs=1e-12)

    def test_model_unchanged_by_evaluate(self):
        ds = make_cluster_dataset(ClusterSpec(seed=45))
        state = init_model(ds.support, ds.text, adapter_kind="mlp", seed=1)
        before = {k: t.data.copy() for k, t in state.named_tensors().items()}
        evaluate(state, ds.test, HP)
        for k, t in state.named_tensors().items():
            assert t.data.tobytes() == before[k].tobytes()


class TestReportSerialization:
    def test_json_round_trip(self):
        ds = make_cluster_dataset(ClusterSpec(seed=46))
        state = init_model(ds.support, ds.text)
        report = evaluate(state, ds.test, HP,
                          config_echo={"variant": "training-free", "shots": 4})
        text = report_to_json(report)
        back = report_from_json(text)
        assert back.overall_accuracy == report.overall_accuracy
        np.testing.assert_array_equal(back.confusion, report.confusion)
        assert back.config == report.config
        # deterministic serialization
        assert report_to_json(back) == text

    def test_json_is_valid_and_sorted(self):
        ds = make_cluster_dataset(ClusterSpec(seed=47))
        state = init_model(ds.support, ds.text)
        payload = json.loads(report_to_json(evaluate(state, ds.test, HP)))
        assert set(payload) == {"overall_accuracy", "per_class_accuracy",
                                "confusion", "config"}

    def test_markdown_table_rows(self):
        ds = make_cluster_dataset(ClusterSpec(seed=48))
        state = init_model(ds.support, ds.text)
        reports = []
        for shots in (1, 2, 4):
            reports.append(evaluate(state, ds.test, HP,
                                    config_echo={"dataset": "toy",
                                                 "variant": "training-free",
                                                 "shots": shots}))
        table = markdown_table(reports)
        lines = table.strip().splitlines()
        assert len(lines) == 2 + 3  # header + separator + one row per report
        assert lines[0].startswith("| dataset | variant ")
        assert "| 4 |" in lines[4]
