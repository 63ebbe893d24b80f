"""Thresholded graph decoding and tuple recovery."""
from __future__ import annotations

from typing import Optional

import numpy as np

from .autodiff import Tensor, _sigmoid
from .corpus import DecodeReport, DepGraph, LabelSet, graph_to_tuples


def _array(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


def decode_graph(edge, label, labels: LabelSet, threshold: float = 0.5) -> DepGraph:
    """Keep ``i -> j`` when ``sigmoid(edge[i, j]) > threshold``; label by argmax.

    Edges into the root and self-loops are never produced.  ``np.argmax``
    resolves label ties to the lowest index.
    """
    s = _array(edge)
    probs = _sigmoid(s.astype(np.float64))
    keep = probs > threshold
    keep[:, 0] = False
    np.fill_diagonal(keep, False)
    best = np.argmax(_array(label), axis=-1)
    graph = DepGraph(s.shape[0])
    for i, j in zip(*np.nonzero(keep)):
        graph.edges[(int(i), int(j))] = labels.label(int(best[i, j]))
    return graph


def decode_tuples(graph: DepGraph, head_rule: str = "final", report: Optional[DecodeReport] = None) -> list:
    return graph_to_tuples(graph, head_rule=head_rule, report=report)
