from pathlib import Path

import numpy as np
import pytest

from aboots.services.config import TrainingConfig
from aboots.services.corpus import EOS, DialogueExample
from aboots.services.model import HredModel

REPO_ROOT = Path(__file__).resolve().parent.parent
TOY_DATA = REPO_ROOT / "data" / "toy"
TOY_CONFIG = REPO_ROOT / "configs" / "toy.cfg"


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: full toy-corpus training runs (deselect with -m \"not slow\")")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_data_dir() -> Path:
    return TOY_DATA


@pytest.fixture
def tiny_config() -> TrainingConfig:
    """A config small enough for a handful of steps in a unit test."""
    return TrainingConfig(
        hidden=6,
        layers=1,
        vocab_size=50,
        top_k=3,
        batch_size=4,
        max_turn_len=8,
        max_turns=2,
        max_decode_len=6,
        max_epochs=2,
        holdout=False,
        checkpoint_every=0,
        seed=7,
    )


@pytest.fixture
def tiny_model() -> HredModel:
    """V=12, h=5, two layers: enough to reach every parameter."""
    return HredModel.initialize(12, 5, 2, np.random.default_rng(0))


@pytest.fixture
def tiny_example() -> DialogueExample:
    return DialogueExample(
        context=((4, 5, EOS), (6, 7, 8, EOS)),
        target=(9, 10, EOS),
        distractor=(11, EOS),
    )


def write_corpus(directory: Path, lines, name: str = "corpus.txt") -> Path:
    """Writes TAB-separated conversations into `directory/name`."""
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / name
    path.write_text("\n".join("\t".join(turns) for turns in lines) + "\n", encoding="utf-8")
    return directory


@pytest.fixture
def split_corpus_dir(tmp_path) -> Path:
    """40 distinct conversations, enough for a 90/5/5 split."""
    words = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel"]
    lines = []
    for number in range(40):
        first = words[number % len(words)]
        second = words[(number // len(words)) % len(words)]
        lines.append((f"{first} says {second}", f"reply {second} to {first} {number}"))
    return write_corpus(tmp_path / "corpus", lines)


@pytest.fixture
def corpus_writer():
    return write_corpus


@pytest.fixture
def toy_config_path() -> Path:
    return TOY_CONFIG
