"""Second-order potentials and mean-field refinement of edge scores.

Potentials are indexed ``V[i, j, k]`` with edge ``i -> j`` as the anchor:

* sibling      ``i -> j`` and ``i -> k``
* co-parent    ``i -> j`` and ``k -> j``
* grandparent  ``i -> j`` and ``j -> k``
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoder import Module, glorot
from .scorers import attention_pool

RELATIONS = ("sib", "cop", "grp")


def trilinear_scores(hh: Tensor, hm: Tensor, hd: Tensor, uh: Tensor, um: Tensor, ud: Tensor) -> Tensor:
    """Rank-r trilinear form ``V_ijk = sum_q (hh U_h)_iq (hm U_m)_jq (hd U_d)_kq``."""
    return ad.einsum("iq,jq,kq->ijk", hh @ uh, hm @ um, hd @ ud)


def sfa_triple_mask(v: Tensor, ah: Tensor, am: Tensor, ad_: Tensor) -> Tensor:
    return v * ad.einsum("i,j,k->ijk", ah, am, ad_)


def distinct_mask(n: int, dtype=np.float64) -> np.ndarray:
    """1 where i, j, k are pairwise distinct, else 0."""
    i, j, k = np.ogrid[:n, :n, :n]
    return ((i != j) & (j != k) & (i != k)).astype(dtype)


def mfvi(edge: Tensor, v_sib: Tensor, v_cop: Tensor, v_grp: Tensor, iterations: int = 3) -> Tensor:
    """Unrolled mean-field updates; returns the final edge logits.

    ``q = sigmoid(edge)``, then ``iterations`` times
    ``g_ij = edge_ij + sum_k q_ik sib_ijk + q_kj cop_ijk + q_jk grp_ijk`` and
    ``q = sigmoid(g)``.
    """
    if iterations < 0:
        raise ValueError(f"iterations must be >= 0, got {iterations}")
    logits = edge
    q = ad.sigmoid(edge)
    for _ in range(iterations):
        logits = (
            edge
            + ad.einsum("ik,ijk->ij", q, v_sib)
            + ad.einsum("kj,ijk->ij", q, v_cop)
            + ad.einsum("jk,ijk->ij", q, v_grp)
        )
        q = ad.sigmoid(logits)
    return logits


class SecondOrderScorer(Module):
    def __init__(self, cfg, rng):
        super().__init__()
        dtype = np.dtype(cfg.dtype)
        self.window = cfg.window
        self.mask = cfg.sfa_second_order
        self.iterations = cfg.mfvi_iterations
        d = cfg.repr_dim
        for rel in RELATIONS:
            for role in ("h", "m", "d"):
                self.add(f"{rel}.u_{role}", glorot(rng, d, cfg.rank, dtype))
                self.add(f"{rel}.att_{role}_w", glorot(rng, d, cfg.heads, dtype))
                self.add(f"{rel}.att_{role}_b", np.zeros(cfg.heads, dtype=dtype))

    def attention(self, h: Tensor, rel: str, role: str) -> Tensor:
        p = self.params
        return attention_pool(ad.affine(h, p[f"{rel}.att_{role}_w"], p[f"{rel}.att_{role}_b"]), self.window)

    def potentials(self, hh: Tensor, hm: Tensor, hd: Tensor) -> dict:
        p = self.params
        keep = ad.tensor(distinct_mask(hh.shape[0]), hh.dtype)
        out = {}
        for rel in RELATIONS:
            v = trilinear_scores(hh, hm, hd, p[f"{rel}.u_h"], p[f"{rel}.u_m"], p[f"{rel}.u_d"])
            if self.mask:
                v = sfa_triple_mask(
                    v, self.attention(hh, rel, "h"), self.attention(hm, rel, "m"), self.attention(hd, rel, "d")
                )
            out[rel] = v * keep
        return out

    def __call__(self, edge: Tensor, hh: Tensor, hm: Tensor, hd: Tensor) -> Tensor:
        v = self.potentials(hh, hm, hd)
        return mfvi(edge, v["sib"], v["cop"], v["grp"], self.iterations)
