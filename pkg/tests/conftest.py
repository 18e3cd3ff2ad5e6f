import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from protofew.store import SupportSet, TextPromptBank, l2_normalize_rows


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def random_instance(rng, n=3, k=2, prompts_per_class=2, dim=16):
    """A small random well-formed (support, text) pair with unit rows."""
    support = SupportSet(
        embeddings=l2_normalize_rows(
            rng.standard_normal((n * k, dim)).astype(np.float32)),
        labels=np.repeat(np.arange(n), k),
        num_classes=n,
    )
    text = TextPromptBank(
        embeddings=l2_normalize_rows(
            rng.standard_normal((n * prompts_per_class, dim)).astype(np.float32)),
        labels=np.repeat(np.arange(n), prompts_per_class),
        num_classes=n,
    )
    return support, text
