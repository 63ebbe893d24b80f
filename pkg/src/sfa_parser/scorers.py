"""First-order edge and label scorers: biaffine baseline and sparse fuzzy attention.

Scores are laid out head-major: ``edge[i, j]`` scores the edge from node
``i`` to node ``j`` and ``label[i, j, c]`` its class-``c`` label.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import Module, glorot


@dataclass
class ScoreSet:
    edge: Tensor  # (n+1, n+1)
    label: Tensor  # (n+1, n+1, c)


def _with_bias(h: Tensor) -> Tensor:
    ones = ad.tensor(np.ones((h.shape[0], 1)), h.dtype)
    return ad.concat([h, ones], axis=-1)


def biaffine_score(hh: Tensor, hd: Tensor, w_edge: Tensor, w_label: Tensor, bias: bool = True) -> ScoreSet:
    """``S^e_ij = hh_i W^e hd_j`` and ``S^l_ijc = hh_i W^l_c hd_j``.

    With ``bias`` a constant 1 feature is appended to both inputs, so the
    weights are (d+1, d+1) and (d+1, c, d+1).
    """
    if bias:
        hh, hd = _with_bias(hh), _with_bias(hd)
    edge = ad.einsum("ia,ab,jb->ij", hh, w_edge, hd)
    label = ad.einsum("ia,acb,jb->ijc", hh, w_label, hd)
    return ScoreSet(edge, label)


def sfa_project(h: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Per-class projection (n, d) -> (c, n, d') with weights (c, d, d') and bias (c, d')."""
    return ad.einsum("nd,cde->cne", h, w) + b.reshape(b.shape[0], 1, b.shape[1])


def sfa_base_scores(hh: Tensor, hd: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Dot-product scores per class, (n, n, c).

    The same projection is applied to the head and dependent streams.
    """
    return ad.einsum("cie,cje->ijc", sfa_project(hh, w, b), sfa_project(hd, w, b))


def attention_pool(e: Tensor, window: int) -> Tensor:
    """Softmax over positions, max over heads, forward window mean.

    ``e`` holds attention logits of shape (..., n, a); returns (..., n).
    """
    pos_axis = e.ndim - 2
    probs = ad.softmax_over_positions(e, axis=pos_axis)
    return ad.window_mean(ad.max_over_heads(probs, axis=-1), window, axis=pos_axis)


def sfa_attention(ph: Tensor, pd: Tensor, wh: Tensor, bh: Tensor, wd: Tensor, bd: Tensor, window: int) -> tuple:
    """Head and dependent attention vectors, each (c, n).

    ``ph``/``pd`` are the projected streams (c, n, d); ``wh``/``wd`` are
    (c, d, a) and ``bh``/``bd`` are (c, a).
    """
    c, a = bh.shape
    eh = ad.einsum("cnd,cda->cna", ph, wh) + bh.reshape(c, 1, a)
    ed = ad.einsum("cnd,cda->cna", pd, wd) + bd.reshape(c, 1, a)
    return attention_pool(eh, window), attention_pool(ed, window)


def sfa_mask_and_combine(s: Tensor, ah: Tensor, ad_: Tensor) -> Tensor:
    """Multiply (n, n, c) scores by the per-class outer product of attentions."""
    return s * ad.einsum("cj,ck->jkc", ah, ad_)


class SfaScorer(Module):
    """Sparse fuzzy attention scorer for ``classes`` score channels."""

    def __init__(self, rng, dim: int, classes: int, heads: int, window: int, dtype):
        super().__init__()
        self.window = window
        self.classes = classes
        self.add("proj_w", np.stack([glorot(rng, dim, dim, dtype) for _ in range(classes)]))
        self.add("proj_b", np.zeros((classes, dim), dtype=dtype))
        for role in ("head", "dep"):
            self.add(f"att_{role}_w", np.stack([glorot(rng, dim, heads, dtype) for _ in range(classes)]))
            self.add(f"att_{role}_b", np.zeros((classes, heads), dtype=dtype))

    def __call__(self, hh: Tensor, hd: Tensor, mask: bool = True) -> Tensor:
        p = self.params
        ph = sfa_project(hh, p["proj_w"], p["proj_b"])
        pd = sfa_project(hd, p["proj_w"], p["proj_b"])
        base = ad.einsum("cie,cje->ijc", ph, pd)
        if not mask:
            return base
        ah, adep = sfa_attention(
            ph, pd, p["att_head_w"], p["att_head_b"], p["att_dep_w"], p["att_dep_b"], self.window
        )
        return sfa_mask_and_combine(base, ah, adep)


class BiaffineScorer(Module):
    def __init__(self, rng, dim: int, classes: int, bias: bool, dtype):
        super().__init__()
        self.bias = bias
        width = dim + 1 if bias else dim
        # zero init is the usual choice for biaffine classifiers
        self.add("edge_w", np.zeros((width, width), dtype=dtype))
        self.add("label_w", np.zeros((width, classes, width), dtype=dtype))

    def __call__(self, hh: Tensor, hd: Tensor) -> ScoreSet:
        return biaffine_score(hh, hd, self.params["edge_w"], self.params["label_w"], self.bias)


class FirstOrderScorer(Module):
    """Selects between the biaffine and SFA paths; both return a :class:`ScoreSet`."""

    def __init__(self, cfg, classes: int, rng):
        super().__init__()
        dtype = np.dtype(cfg.dtype)
        self.kind = cfg.scorer
        self.mask = cfg.sfa_first_order
        if self.kind == "biaffine":
            self.biaffine = BiaffineScorer(rng, cfg.repr_dim, classes, cfg.biaffine_bias, dtype)
        else:
            self.edge = SfaScorer(rng, cfg.repr_dim, 1, cfg.heads, cfg.window, dtype)
            self.label = SfaScorer(rng, cfg.repr_dim, classes, cfg.heads, cfg.window, dtype)

    def named_parameters(self, prefix: str = ""):
        if self.kind == "biaffine":
            yield from self.biaffine.named_parameters(prefix + "biaffine.")
        else:
            yield from self.edge.named_parameters(prefix + "edge.")
            yield from self.label.named_parameters(prefix + "label.")

    def __call__(self, hh: Tensor, hd: Tensor) -> ScoreSet:
        if self.kind == "biaffine":
            return self.biaffine(hh, hd)
        edge = self.edge(hh, hd, self.mask)
        n = edge.shape[0]
        return ScoreSet(edge.reshape(n, n), self.label(hh, hd, self.mask))
