"""Structured sentiment analysis as dependency graph parsing with sparse fuzzy attention."""
from pathlib import Path

from .config import TrainConfig, load_config
from .corpus import (
    DepGraph,
    LabelSet,
    Sentence,
    SentimentTuple,
    Vocab,
    build_vocab,
    graph_to_tuples,
    load_corpus,
    tuples_to_graph,
)
from .model import Parser

__version__ = "0.1.0"

FIXTURE_DIR = Path(__file__).parent / "data" / "fixture"
FIXTURE_CONFIG = Path(__file__).parent / "data" / "fixture.toml"
