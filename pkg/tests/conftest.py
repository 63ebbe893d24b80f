import numpy as np
import pytest

from sfa_parser import FIXTURE_DIR, TrainConfig
from sfa_parser import autodiff as ad
from sfa_parser.corpus import load_corpus


def weighted_sum(out: ad.Tensor, seed: int = 0) -> ad.Tensor:
    """Generic scalar read-out so every output entry matters to the gradient."""
    w = np.random.default_rng(seed).normal(size=out.shape)
    return (out * ad.tensor(w)).sum()


def tiny_config(**changes) -> TrainConfig:
    base = dict(
        word_dim=4, pos_dim=3, lemma_dim=3, char_dim=4, lstm_hidden=3, lstm_layers=1,
        repr_dim=5, heads=2, window=3, rank=2, dropout=0.0, dtype="float64", seed=3,
    )
    base.update(changes)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def fixture_train():
    return load_corpus(FIXTURE_DIR / "train.json")


@pytest.fixture(scope="session")
def fixture_all():
    return [item for split in ("train", "dev", "test") for item in load_corpus(FIXTURE_DIR / f"{split}.json")]
