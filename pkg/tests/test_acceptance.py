"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its measured margin and runtime.

Tolerances are pinned here and nowhere else:
  gradients   rel err < 1e-4 vs central differences (float64, step 1e-5)
  pipeline    mixture probabilities within 1e-6 of a monolithic oracle
  closed forms within 1e-6
  scaling     probabilities within 1e-5 under (x2 embeddings, beta/4)
"""
import math
import shutil
import time

import numpy as np
import pytest

from conftest import random_instance
from oracles import (
    finite_difference_grads,
    mixture_probabilities,
    relative_error,
    unit_rows,
)

from protofew.autodiff import Tape, Tensor
from protofew.errors import (
    BadMagic,
    CorruptCheckpoint,
    NonFinite,
    Truncated,
    VersionMismatch,
)
from protofew.evaluator import evaluate, report_to_json
from protofew.losses import LossConfig, loss_l2, loss_l3
from protofew.model import (
    MixtureHyperparams,
    PrototypeSet,
    classify_batch,
    compute_prototypes,
    init_model,
)
from protofew.store import (
    SupportSet,
    TextPromptBank,
    read_container,
    write_container,
)
from protofew.synthetic import ClusterSpec, make_cluster_dataset
from protofew.trainer import (
    Checkpoint,
    TrainConfig,
    build_training_loss,
    load_checkpoint,
    save_checkpoint,
    train,
    write_loss_trace,
)


def _report(name, started, detail=""):
    elapsed = time.perf_counter() - started
    print(f"PASS {name} ({elapsed:.2f}s){' ' + detail if detail else ''}")


class TestAcceptance:
    def test_gradient_correctness(self, rng):
        """Every learnable parameter gradient matches finite differences."""
        started = time.perf_counter()
        n, k, dim = 3, 2, 16
        support, text = random_instance(rng, n=n, k=k, dim=dim)
        hp = MixtureHyperparams(alpha=0.5, beta=8.0)
        cfg = LossConfig(True, True, True)
        worst = 0.0
        for kind in ("mlp", "conv2"):
            state = init_model(support, text, adapter_kind=kind,
                               train_text=True, seed=5).as_dtype(np.float64)
            queries = support.embeddings.astype(np.float64)
            labels = support.labels

            def loss_value():
                tape = Tape()
                total, _ = build_training_loss(
                    tape, state, Tensor(queries), labels, hp, cfg)
                return total.item()

            tape = Tape()
            total, _ = build_training_loss(
                tape, state, Tensor(queries), labels, hp, cfg)
            tape.backward(total)
            for name, p in state.named_tensors().items():
                assert p.requires_grad and p.grad is not None, name
                fd = finite_difference_grads(loss_value, [p.data], step=1e-5)[0]
                err = relative_error(p.grad, fd).max()
                worst = max(worst, float(err))
                assert err < 1e-4, f"{kind}/{name}: rel err {err:.3e}"
        assert time.perf_counter() - started < 30.0
        _report("gradient-correctness", started, f"worst rel err {worst:.2e}")

    def test_oracle_equivalence(self, rng):
        """Pipeline probabilities match the monolithic evaluation on 100
        random instances; argmax labels identical."""
        started = time.perf_counter()
        worst = 0.0
        for trial in range(100):
            n = int(rng.integers(2, 7))
            k = int(rng.integers(1, 4))
            dim = int(rng.integers(4, 33))
            support, text = random_instance(
                rng, n=n, k=k, prompts_per_class=int(rng.integers(1, 4)), dim=dim)
            alpha = float(rng.uniform())
            beta = float(rng.uniform(0.5, 30.0))
            queries = unit_rows(rng.standard_normal((5, dim)))
            state = init_model(support, text)
            probs, labels = classify_batch(state, queries,
                                           MixtureHyperparams(alpha, beta))
            expected = mixture_probabilities(
                support.embeddings, support.labels,
                text.embeddings, text.labels, queries, n, alpha, beta)
            diff = np.abs(probs - expected).max()
            worst = max(worst, float(diff))
            assert diff < 1e-6, f"trial {trial}: prob diff {diff:.3e}"
            assert np.array_equal(labels, np.argmax(expected, axis=1)), trial
        assert time.perf_counter() - started < 10.0
        _report("oracle-equivalence", started, f"worst prob diff {worst:.2e}")

    def test_mixture_endpoints(self, rng):
        """alpha=1 reproduces the nearest-image-prototype rule, alpha=0 the
        nearest-text-prototype rule."""
        started = time.perf_counter()
        for trial in range(50):
            n = int(rng.integers(2, 6))
            support, text = random_instance(rng, n=n, k=2, dim=12)
            state = init_model(support, text)
            queries = unit_rows(rng.standard_normal((6, 12)))
            protos = compute_prototypes(Tape(), state.as_dtype(np.float64).bank)
            for alpha, block in ((1.0, protos.image_prototypes.data),
                                 (0.0, protos.text_prototypes.data)):
                _, labels = classify_batch(
                    state, queries, MixtureHyperparams(alpha, 5.0))
                dists = ((queries[:, None, :] - block[None, :, :]) ** 2).sum(-1)
                assert np.array_equal(labels, np.argmin(dists, axis=1)), \
                    f"trial {trial} alpha={alpha}"
        _report("mixture-endpoints", started)

    def test_infonce_closed_forms(self):
        """Aligned orthonormal prototypes give log(1+(N-1)/e); coincident
        prototypes give log N; both alignment losses, N in {2, 5, 10}."""
        started = time.perf_counter()
        for n in (2, 5, 10):
            aligned = PrototypeSet(
                image_prototypes=Tensor(np.eye(n, 16)),
                text_prototypes=Tensor(np.eye(n, 16)))
            expected = math.log(1.0 + (n - 1) * math.exp(-1.0))
            for fn in (loss_l2, loss_l3):
                got = fn(Tape(), aligned).item()
                assert abs(got - expected) < 1e-6, f"N={n}: {got} vs {expected}"
            v = np.ones((n, 16)) / 4.0
            coincident = PrototypeSet(image_prototypes=Tensor(v),
                                      text_prototypes=Tensor(v))
            for fn in (loss_l2, loss_l3):
                got = fn(Tape(), coincident).item()
                assert abs(got - math.log(n)) < 1e-6, f"N={n} coincident: {got}"
        _report("infonce-closed-forms", started)

    def test_synthetic_end_to_end(self):
        """5-way 4-shot unit-norm clusters: perfect training-free accuracy,
        strictly decreasing loss, and increasing cross-modal alignment."""
        started = time.perf_counter()
        hp = MixtureHyperparams(alpha=0.5, beta=10.0)

        # training-free: 100% test accuracy
        easy = make_cluster_dataset(ClusterSpec(
            n_classes=5, k_shot=4, noise=0.01, min_center_distance=1.0, seed=60))
        free = init_model(easy.support, easy.text)
        acc = evaluate(free, easy.test, hp).overall_accuracy
        assert acc == 1.0, f"training-free accuracy {acc}"

        # fine-tuning strictly decreases the total loss
        tuned = init_model(easy.support, easy.text, adapter_kind="mlp",
                           train_text=True, seed=61)
        cfg = TrainConfig(epochs=50, seed=62, train_text=True, adapter_kind="mlp")
        tuned, trace = train(tuned, easy.support, cfg, hp)
        assert trace[-1].total < trace[0].total

        # alignment increases when modalities start apart
        def mean_cos(state):
            protos = compute_prototypes(Tape(), state.as_dtype(np.float64).bank)
            img = unit_rows(protos.image_prototypes.data)
            txt = unit_rows(protos.text_prototypes.data)
            return float((img * txt).sum(axis=1).mean())

        apart = make_cluster_dataset(ClusterSpec(
            n_classes=5, k_shot=4, dim=32, noise=0.01,
            min_center_distance=1.0, max_modality_cos=0.5, seed=63))
        model = init_model(apart.support, apart.text, adapter_kind="mlp",
                           train_text=True, seed=64)
        cos_before = mean_cos(model)
        assert cos_before < 0.5
        model, _ = train(model, apart.support,
                         TrainConfig(epochs=50, seed=65, train_text=True,
                                     adapter_kind="mlp"), hp)
        cos_after = mean_cos(model)
        assert cos_after > cos_before
        assert time.perf_counter() - started < 60.0
        _report("synthetic-end-to-end", started,
                f"cos {cos_before:.3f} -> {cos_after:.3f}")

    def test_determinism(self, tmp_path):
        """Two identically seeded runs produce bitwise-identical checkpoints,
        loss traces, and evaluation reports."""
        started = time.perf_counter()
        ds = make_cluster_dataset(ClusterSpec(seed=70))
        hp = MixtureHyperparams(alpha=0.4, beta=8.0)

        def run(tag):
            state = init_model(ds.support, ds.text, adapter_kind="conv2",
                               train_text=True, seed=71)
            cfg = TrainConfig(epochs=10, seed=72, batch_size=8,
                              train_text=True, adapter_kind="conv2")
            state, trace = train(state, ds.support, cfg, hp)
            out = tmp_path / tag
            ckpt = Checkpoint(state=state, classes=ds.vocab.names,
                              alpha=hp.alpha, beta=hp.beta, epoch=9,
                              final_losses={"total": trace[-1].total},
                              config={"seed": 72})
            save_checkpoint(ckpt, out)
            write_loss_trace(trace, out / "loss_trace.csv")
            report = evaluate(state, ds.test, hp, config_echo={"seed": 72})
            (out / "report.json").write_text(report_to_json(report))
            return out

        out_a, out_b = run("a"), run("b")
        compared = 0
        for f in sorted(p.name for p in out_a.iterdir()):
            assert (out_a / f).read_bytes() == (out_b / f).read_bytes(), f
            compared += 1
        assert compared >= 4
        _report("determinism", started, f"{compared} files bitwise equal")

    def test_format_round_trips(self, rng, tmp_path):
        """Containers and checkpoints round-trip bit-exactly; corrupted
        files fail with typed errors, never wrong numbers."""
        started = time.perf_counter()

        # container round trip
        m = rng.standard_normal((64, 48)).astype(np.float32)
        path = tmp_path / "m.pce1"
        write_container(m, path)
        assert read_container(path).tobytes() == m.tobytes()

        # typed container errors
        path.write_bytes(b"ZZZZ" + path.read_bytes()[4:])
        with pytest.raises(BadMagic):
            read_container(path)
        write_container(m, path)
        path.write_bytes(path.read_bytes()[:-4])
        with pytest.raises(Truncated):
            read_container(path)
        bad = bytearray()
        bad += b"PCE1" + np.array([1, 2], dtype="<u4").tobytes()
        bad += np.array([1.0, np.nan], dtype="<f4").tobytes()
        path.write_bytes(bytes(bad))
        with pytest.raises(NonFinite):
            read_container(path)

        # checkpoint round trip and typed errors
        ds = make_cluster_dataset(ClusterSpec(seed=80))
        state = init_model(ds.support, ds.text, adapter_kind="mlp", seed=81)
        ckpt = Checkpoint(state=state, classes=ds.vocab.names, alpha=0.5,
                          beta=5.0, epoch=-1, final_losses={}, config={})
        ckpt_dir = tmp_path / "ckpt"
        save_checkpoint(ckpt, ckpt_dir)
        restored = load_checkpoint(ckpt_dir)
        for name, t in state.named_tensors().items():
            assert restored.state.named_tensors()[name].data.tobytes() == \
                t.data.tobytes(), name

        import json
        header = json.loads((ckpt_dir / "header.json").read_text())
        header["version"] = 2
        (ckpt_dir / "header.json").write_text(json.dumps(header))
        with pytest.raises(VersionMismatch):
            load_checkpoint(ckpt_dir)
        header["version"] = 1
        (ckpt_dir / "header.json").write_text(json.dumps(header))
        tensor_file = ckpt_dir / "image_memory.pce1"
        tensor_file.write_bytes(tensor_file.read_bytes()[:-8])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(ckpt_dir)
        shutil.rmtree(ckpt_dir)
        _report("format-round-trips", started)

    def test_beta_scaling_identity(self, rng):
        """Scaling every embedding by 2 while dividing beta by 4 leaves the
        training-free probabilities unchanged within 1e-5."""
        started = time.perf_counter()
        worst = 0.0
        for trial in range(30):
            n = int(rng.integers(2, 6))
            support, text = random_instance(rng, n=n, k=2, dim=10)
            queries = unit_rows(rng.standard_normal((5, 10)))
            beta = float(rng.uniform(0.5, 20.0))
            alpha = float(rng.uniform())
            base_probs, base_labels = classify_batch(
                init_model(support, text), queries,
                MixtureHyperparams(alpha, beta))

            c = 2.0
            scaled_support = SupportSet(embeddings=support.embeddings * c,
                                        labels=support.labels, num_classes=n)
            scaled_text = TextPromptBank(embeddings=text.embeddings * c,
                                         labels=text.labels, num_classes=n)
            scaled_probs, scaled_labels = classify_batch(
                init_model(scaled_support, scaled_text), queries * c,
                MixtureHyperparams(alpha, beta / c**2))
            diff = np.abs(base_probs - scaled_probs).max()
            worst = max(worst, float(diff))
            assert diff < 1e-5, f"trial {trial}: {diff:.3e}"
            assert np.array_equal(base_labels, scaled_labels)
        _report("beta-scaling-identity", started, f"worst prob diff {worst:.2e}")
