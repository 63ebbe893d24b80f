"""Finite-difference gradient suite over every op and every model path.

Used by the ``gradcheck`` subcommand and the acceptance tests.  Everything
runs in float64 on 4-6 token inputs.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from . import autodiff as ad
from .config import TrainConfig
from .corpus import Sentence, SentimentTuple, build_vocab, tuples_to_graph
from .gradcheck import grad_check_many
from .model import Parser
from .scorers import BiaffineScorer, SfaScorer
from .second_order import SecondOrderScorer

SHAPES = ((4, 3), (5, 2), (6, 4))
# finite differences of whole model paths run in extended precision
WIDE = np.longdouble
SUITE_SENTENCE = Sentence("grad", ["they", "love", "the", "menu"], pos=["P", "V", "D", "N"])
SUITE_TUPLES = [SentimentTuple((0, 1), (2, 4), (1, 2), "Positive")]


def suite_config(**changes) -> TrainConfig:
    base = dict(
        word_dim=4, pos_dim=3, lemma_dim=3, char_dim=4, lstm_hidden=3, lstm_layers=2, repr_dim=5,
        heads=2, window=3, rank=2, dropout=0.0, dtype="float64", seed=11,
    )
    base.update(changes)
    return TrainConfig(**base)


def _op_cases(rng: np.random.Generator) -> dict[str, Callable[[tuple], tuple]]:
    """Each case maps a base shape (n, k) to ``(f, params)``."""

    def p(*shape):
        return ad.parameter(rng.normal(size=shape))

    def unary(fn):
        def case(shape):
            x = p(*shape)
            w = rng.normal(size=shape)
            return (lambda: (fn(x) * ad.tensor(w)).sum()), [x]

        return case

    def matmul(shape):
        a, b = p(*shape), p(shape[1], 2)
        w = rng.normal(size=(shape[0], 2))
        return (lambda: (ad.matmul(a, b) * ad.tensor(w)).sum()), [a, b]

    def binary(fn):
        def case(shape):
            a, b = p(*shape), p(*shape)
            w = rng.normal(size=shape)
            return (lambda: (fn(a, b) * ad.tensor(w)).sum()), [a, b]

        return case

    def affine(shape):
        x, w, b = p(*shape), p(shape[1], 3), p(3)
        r = rng.normal(size=(shape[0], 3))
        return (lambda: (ad.affine(x, w, b) * ad.tensor(r)).sum()), [x, w, b]

    def concat(shape):
        a, b = p(*shape), p(shape[0], 2)
        r = rng.normal(size=(shape[0], shape[1] + 2))
        return (lambda: (ad.concat([a, b], axis=1) * ad.tensor(r)).sum()), [a, b]

    def gather(shape):
        x = p(*shape)
        idx = rng.integers(0, shape[0], size=5)
        r = rng.normal(size=(5, shape[1]))
        return (lambda: (x[idx] * ad.tensor(r)).sum()), [x]

    def window(shape):
        x = p(shape[0])
        r = rng.normal(size=shape[0])
        return (lambda: (ad.window_mean(x, 3) * ad.tensor(r)).sum()), [x]

    def cross_entropy(shape):
        x = p(*shape)
        target = rng.integers(0, shape[1], size=shape[0])
        return (lambda: ad.cross_entropy(x, target)), [x]

    def bce(shape):
        x = p(*shape)
        target = (rng.random(shape) > 0.5).astype(float)
        return (lambda: ad.binary_cross_entropy(x, target)), [x]

    def einsum(shape):
        a, b, c = p(shape[0], shape[1]), p(shape[1], 2), p(shape[0], 2)
        return (lambda: ad.einsum("ia,aq,jq->ij", a, b, c).sum()), [a, b, c]

    def lstm(shape):
        x = p(1, shape[0], shape[1])
        w_ih, w_hh, b = p(shape[1], 8), p(2, 8), p(8)
        r = rng.normal(size=(1, shape[0], 2))
        return (lambda: (ad.lstm(x, w_ih, w_hh, b, reverse=True) * ad.tensor(r)).sum()), [x, w_ih, w_hh, b]

    return {
        "op.add": binary(ad.add),
        "op.sub": binary(ad.sub),
        "op.mul": binary(ad.mul),
        "op.matmul": matmul,
        "op.affine": affine,
        "op.concat": concat,
        "op.gather": gather,
        "op.sum_mean": unary(lambda x: x.sum(axis=1).reshape(x.shape[0], 1) * x.mean()),
        "op.transpose": unary(lambda x: x.T.T),
        "op.sigmoid": unary(ad.sigmoid),
        "op.tanh": unary(ad.tanh),
        "op.exp": unary(ad.exp),
        "op.log_sigmoid": unary(ad.log_sigmoid),
        "op.softmax_over_positions": unary(ad.softmax_over_positions),
        "op.max_over_heads": unary(lambda x: ad.max_over_heads(x, axis=1).reshape(x.shape[0], 1) * x),
        "op.window_mean": window,
        "op.cross_entropy": cross_entropy,
        "op.binary_cross_entropy": bce,
        "op.einsum": einsum,
        "op.lstm": lstm,
    }


def check_ops(seed: int = 0) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    report = {}
    for name, case in _op_cases(rng).items():
        worst = 0.0
        for shape in SHAPES:
            f, params = case(shape)
            worst = max(worst, max(grad_check_many(f, params).values()))
        report[name] = worst
    return report


def check_first_order(seed: int = 0, n_tokens: int = 5) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    d, classes = 4, 3
    hh = ad.parameter(rng.normal(size=(n_tokens + 1, d)))
    hd = ad.parameter(rng.normal(size=(n_tokens + 1, d)))
    sfa_edge = SfaScorer(rng, d, 1, 2, 3, np.float64)
    sfa_label = SfaScorer(rng, d, classes, 2, 3, np.float64)
    biaf = BiaffineScorer(rng, d, classes, True, np.float64)
    for t in biaf.params.values():
        t.data[...] = rng.normal(size=t.shape)
    w_label = rng.normal(size=(n_tokens + 1, n_tokens + 1, classes))
    w_edge = rng.normal(size=(n_tokens + 1, n_tokens + 1))

    def biaffine_out():
        s = biaf(hh, hd)
        return (s.edge * ad.tensor(w_edge)).sum() + (s.label * ad.tensor(w_label)).sum()

    return {
        "sfa.edge_path": max(
            grad_check_many(lambda: sfa_edge(hh, hd).sum(), [hh, hd, *sfa_edge.params.values()], precision=WIDE).values()
        ),
        "sfa.label_path": max(
            grad_check_many(
                lambda: (sfa_label(hh, hd) * ad.tensor(w_label)).sum(), [hh, hd, *sfa_label.params.values()], precision=WIDE
            ).values()
        ),
        "biaffine.path": max(grad_check_many(biaffine_out, [hh, hd, *biaf.params.values()]).values()),
    }


def check_second_order(seed: int = 0, n_tokens: int = 4) -> dict[str, float]:
    rng = np.random.default_rng(seed)
    cfg = suite_config(second_order=True, rank=2)
    scorer = SecondOrderScorer(cfg, rng)
    n = n_tokens + 1
    reps = [ad.parameter(rng.normal(size=(n, cfg.repr_dim))) for _ in range(3)]
    edge = ad.parameter(rng.normal(size=(n, n)))
    target = (rng.random((n, n)) > 0.7).astype(float)
    errs = grad_check_many(
        lambda: ad.binary_cross_entropy(scorer(edge, *reps), target),
        [edge, *reps, *scorer.params.values()],
        precision=WIDE,
    )
    return {"second_order.path": max(errs.values())}


def check_end_to_end(seed: int = 0, max_coords: int = 30) -> dict[str, float]:
    """Total loss of the full model (encoder, SFA scorers, second order) on a 4-token sentence."""
    from .training import compute_loss  # training imports this module's siblings

    report = {}
    for name, cfg in (
        ("model.sfa2o_loss", suite_config(second_order=True)),
        ("model.biaffine_loss", suite_config(scorer="biaffine")),
    ):
        model = Parser(cfg, build_vocab([SUITE_SENTENCE]))
        rng = np.random.default_rng(seed)
        for t in model.params.values():
            t.data[...] = rng.normal(size=t.shape)  # zero-initialised biaffine weights included
        feats = model.featurize(SUITE_SENTENCE)
        gold = tuples_to_graph(SUITE_SENTENCE, SUITE_TUPLES)
        errs = grad_check_many(
            lambda: compute_loss(model.scores(feats), gold, model.labels),
            model.parameters(),
            max_coords=max_coords,
            rng=np.random.default_rng(seed),
            precision=WIDE,
        )
        report[name] = max(errs.values())
    return report


def run_suite(seed: int = 0) -> dict[str, float]:
    """Worst relative error per component."""
    report = check_ops(seed)
    report.update(check_first_order(seed))
    report.update(check_second_order(seed))
    report.update(check_end_to_end(seed))
    return report
