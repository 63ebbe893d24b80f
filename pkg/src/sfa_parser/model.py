"""The full parser: encoder, first-order scorer and optional second-order refinement."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import Tensor
from .config import TrainConfig
from .corpus import LabelSet, Sentence, Vocab
from .decoder import decode_graph, decode_tuples
from .encoder import Encoder, Features, featurize
from .scorers import FirstOrderScorer, ScoreSet
from .second_order import SecondOrderScorer


class Parser:
    def __init__(
        self,
        cfg: TrainConfig,
        vocab: Vocab,
        labels: Optional[LabelSet] = None,
        external: Optional[tuple] = None,
    ):
        self.cfg = cfg
        self.vocab = vocab
        self.labels = labels or LabelSet()
        rng = np.random.default_rng(cfg.seed)
        self.encoder = Encoder(cfg, vocab, rng, external=external, middle=cfg.second_order)
        self.first = FirstOrderScorer(cfg, len(self.labels), rng)
        self.second = SecondOrderScorer(cfg, rng) if cfg.second_order else None
        self.params: dict[str, Tensor] = dict(self.named_parameters())

    def named_parameters(self):
        yield from self.encoder.named_parameters("encoder.")
        yield from self.first.named_parameters("first.")
        if self.second is not None:
            yield from self.second.named_parameters("second.")

    def parameters(self) -> list:
        return list(self.params.values())

    def featurize(self, sentence: Sentence) -> Features:
        return featurize(sentence, self.vocab, self.encoder.external)

    def scores(self, feats: Features, train: bool = False, rng=None) -> ScoreSet:
        reps = self.encoder(feats, train, rng)
        hh, hd = reps[0], reps[1]
        s = self.first(hh, hd)
        if self.second is not None:
            s = ScoreSet(self.second(s.edge, hh, reps[2], hd), s.label)
        return s

    def predict(self, sentence: Sentence, report=None) -> tuple:
        """Returns ``(DepGraph, [SentimentTuple])`` for one sentence."""
        s = self.scores(self.featurize(sentence))
        graph = decode_graph(s.edge, s.label, self.labels, self.cfg.threshold)
        return graph, decode_tuples(graph, self.cfg.head_rule, report)
