"""Span, targeted, parsing-graph and sentiment-graph F1.

Every metric is an exact-match set comparison keyed by sentence id, so
sentence order and tuple order do not matter.  Gold and predicted sides are
either mappings ``{sent_id: items}`` or sequences of ``(sent_id, items)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass

ROLES = ("holder", "target", "expression")


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class PRF:
    precision: float
    recall: float
    f1: float


def _as_dict(side) -> dict:
    if isinstance(side, dict):
        return side
    out = {}
    for sent_id, items in side:
        if sent_id in out:
            raise EvaluationError(f"duplicate sentence id {sent_id!r}")
        out[sent_id] = items
    return out


def _aligned(gold, pred) -> tuple:
    gold, pred = _as_dict(gold), _as_dict(pred)
    if set(gold) != set(pred):
        missing = sorted(set(gold) - set(pred))[:5]
        extra = sorted(set(pred) - set(gold))[:5]
        raise EvaluationError(f"gold and predictions cover different sentences (missing {missing}, extra {extra})")
    return gold, pred


def prf(gold: set, pred: set) -> PRF:
    tp = len(gold & pred)
    p = tp / len(pred) if pred else 0.0
    r = tp / len(gold) if gold else 0.0
    # 2PR/(P+R) == 2tp/(|gold|+|pred|); one integer division rounds exactly once
    f = 2 * tp / (len(gold) + len(pred)) if tp else 0.0
    return PRF(p, r, f)


def _collect(side: dict, key) -> set:
    return {item for sent_id, tuples in side.items() for t in tuples for item in key(sent_id, t)}


def span_f1(gold, pred, role: str) -> PRF:
    if role not in ROLES:
        raise ValueError(f"role must be one of {ROLES}")
    gold, pred = _aligned(gold, pred)

    def key(sent_id, t):
        span = getattr(t, role)
        return [] if span is None else [(sent_id, span[0], span[1])]

    return prf(_collect(gold, key), _collect(pred, key))


def targeted_f1(gold, pred) -> PRF:
    gold, pred = _aligned(gold, pred)

    def key(sent_id, t):
        return [] if t.target is None else [(sent_id, t.target, t.polarity)]

    return prf(_collect(gold, key), _collect(pred, key))


def sentiment_graph_f1(gold, pred) -> PRF:
    gold, pred = _aligned(gold, pred)

    def key(sent_id, t):
        return [(sent_id, t.holder, t.target, t.expression, t.polarity)]

    return prf(_collect(gold, key), _collect(pred, key))


def labeled_edge_f1(gold, pred) -> PRF:
    gold, pred = _aligned(gold, pred)

    def quads(side):
        return {(sent_id, h, d, lab) for sent_id, g in side.items() for (h, d), lab in g.edges.items()}

    return prf(quads(gold), quads(pred))


def evaluate(gold_tuples, pred_tuples, gold_graphs=None, pred_graphs=None) -> dict:
    """All metric families as a flat ``{name: value}`` dict."""
    out = {}
    for role in ROLES:
        r = span_f1(gold_tuples, pred_tuples, role)
        out[f"{role}_f1"] = r.f1
    out["span_avg_f1"] = sum(out[f"{role}_f1"] for role in ROLES) / 3
    out["targeted_f1"] = targeted_f1(gold_tuples, pred_tuples).f1
    sg = sentiment_graph_f1(gold_tuples, pred_tuples)
    out["sentiment_graph_p"] = sg.precision
    out["sentiment_graph_r"] = sg.recall
    out["sentiment_graph_f1"] = sg.f1
    if gold_graphs is not None and pred_graphs is not None:
        out["parsing_graph_f1"] = labeled_edge_f1(gold_graphs, pred_graphs).f1
    return out


def format_report(metrics: dict) -> str:
    """``key=value`` lines followed by one JSON line with the same numbers."""
    lines = [f"{k}={v:.6f}" for k, v in metrics.items()]
    lines.append(json.dumps(metrics, sort_keys=True))
    return "\n".join(lines)
