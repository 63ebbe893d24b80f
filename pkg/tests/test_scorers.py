import math

import numpy as np
import pytest

from sfa_parser import autodiff as ad
from sfa_parser.gradcheck import grad_check_many
from sfa_parser.scorers import (
    FirstOrderScorer,
    SfaScorer,
    attention_pool,
    biaffine_score,
    sfa_attention,
    sfa_base_scores,
    sfa_mask_and_combine,
    sfa_project,
)

from conftest import tiny_config, weighted_sum

RNG = np.random.default_rng(99)


def t(x):
    return ad.tensor(np.asarray(x, dtype=np.float64))


def naive_attention(p, w, b, window):
    """Loop oracle for softmax-over-positions, max-over-heads, forward window mean."""
    n, heads = p.shape[0], w.shape[1]
    logits = [[sum(p[j, k] * w[k, a] for k in range(p.shape[1])) + b[a] for a in range(heads)] for j in range(n)]
    probs = [[0.0] * heads for _ in range(n)]
    for a in range(heads):
        z = [math.exp(logits[j][a]) for j in range(n)]
        total = sum(z)
        for j in range(n):
            probs[j][a] = z[j] / total
    pooled = [max(probs[j]) for j in range(n)]
    return np.array([sum(pooled[j + k] for k in range(window) if j + k < n) / window for j in range(n)])


# ------------------------------------------------------------------ biaffine


def test_biaffine_orthogonal_and_identity():
    e1, e2 = np.eye(3)[0], np.eye(3)[1]
    s = biaffine_score(t([e1]), t([e2]), t(np.eye(3)), t(np.zeros((3, 1, 3))), bias=False)
    assert s.edge.data[0, 0] == 0.0
    s = biaffine_score(t([e1]), t([e1]), t(np.eye(3)), t(np.zeros((3, 1, 3))), bias=False)
    assert s.edge.data[0, 0] == 1.0


def test_biaffine_matches_loops():
    n, d, c = 3, 4, 2
    hh, hd = RNG.normal(size=(n, d)), RNG.normal(size=(n, d))
    we, wl = RNG.normal(size=(d + 1, d + 1)), RNG.normal(size=(d + 1, c, d + 1))
    s = biaffine_score(t(hh), t(hd), t(we), t(wl), bias=True)
    xh = np.hstack([hh, np.ones((n, 1))])
    xd = np.hstack([hd, np.ones((n, 1))])
    for i in range(n):
        for j in range(n):
            edge = sum(xh[i, a] * we[a, b] * xd[j, b] for a in range(d + 1) for b in range(d + 1))
            assert abs(s.edge.data[i, j] - edge) <= 1e-10
            for k in range(c):
                lab = sum(xh[i, a] * wl[a, k, b] * xd[j, b] for a in range(d + 1) for b in range(d + 1))
                assert abs(s.label.data[i, j, k] - lab) <= 1e-10


# ------------------------------------------------------------ SFA base scores


def test_sfa_base_identity_projection():
    hh, hd = RNG.normal(size=(4, 3)), RNG.normal(size=(4, 3))
    s = sfa_base_scores(t(hh), t(hd), t(np.eye(3)[None]), t(np.zeros((1, 3))))
    np.testing.assert_allclose(s.data[:, :, 0], hh @ hd.T, atol=1e-14)


def test_sfa_base_shape():
    s = sfa_base_scores(t(np.ones((4, 5))), t(np.ones((4, 5))), t(np.ones((6, 5, 5))), t(np.zeros((6, 5))))
    assert s.shape == (4, 4, 6)


def test_sfa_base_matches_loops():
    n, d, c = 4, 3, 2
    hh, hd = RNG.normal(size=(n, d)), RNG.normal(size=(n, d))
    w, b = RNG.normal(size=(c, d, d)), RNG.normal(size=(c, d))
    s = sfa_base_scores(t(hh), t(hd), t(w), t(b)).data
    for k in range(c):
        ph = [[sum(hh[i, a] * w[k, a, e] for a in range(d)) + b[k, e] for e in range(d)] for i in range(n)]
        pd = [[sum(hd[j, a] * w[k, a, e] for a in range(d)) + b[k, e] for e in range(d)] for j in range(n)]
        for i in range(n):
            for j in range(n):
                assert abs(s[i, j, k] - sum(ph[i][e] * pd[j][e] for e in range(d))) <= 1e-10


# ------------------------------------------------------------- SFA attention


def test_single_position_attention_is_one_third():
    p = t(RNG.normal(size=(1, 1, 4)))
    ah, adep = sfa_attention(p, p, t(RNG.normal(size=(1, 4, 2))), t(np.zeros((1, 2))),
                             t(RNG.normal(size=(1, 4, 2))), t(np.zeros((1, 2))), window=3)
    np.testing.assert_allclose(ah.data, [[1 / 3]], atol=1e-15)
    np.testing.assert_allclose(adep.data, [[1 / 3]], atol=1e-15)


def test_uniform_logits_single_head_no_window():
    n = 5
    out = attention_pool(t(np.zeros((n, 1))), window=1)
    np.testing.assert_allclose(out.data, np.full(n, 1 / n), atol=1e-15)


def test_one_head_unit_window_is_raw_softmax():
    e = RNG.normal(size=(6, 1))
    out = attention_pool(t(e), window=1).data
    np.testing.assert_allclose(out, np.exp(e[:, 0]) / np.exp(e[:, 0]).sum(), atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_sfa_attention_matches_loop(seed):
    rng = np.random.default_rng(seed)
    n, d, a, c, window = 6, 4, 3, 2, 3
    ph, pd = rng.normal(size=(c, n, d)), rng.normal(size=(c, n, d))
    wh, wd = rng.normal(size=(c, d, a)), rng.normal(size=(c, d, a))
    bh, bd = rng.normal(size=(c, a)), rng.normal(size=(c, a))
    ah, adep = sfa_attention(t(ph), t(pd), t(wh), t(bh), t(wd), t(bd), window)
    for k in range(c):
        assert np.max(np.abs(ah.data[k] - naive_attention(ph[k], wh[k], bh[k], window))) <= 1e-12
        assert np.max(np.abs(adep.data[k] - naive_attention(pd[k], wd[k], bd[k], window))) <= 1e-12


# --------------------------------------------------------------- SFA masking


def test_ones_mask_leaves_scores():
    s = RNG.normal(size=(3, 3, 2))
    out = sfa_mask_and_combine(t(s), t(np.ones((2, 3))), t(np.ones((2, 3))))
    np.testing.assert_array_equal(out.data, s)


def test_zero_head_attention_annihilates_row():
    s = RNG.normal(size=(4, 4, 1))
    ah = np.ones((1, 4))
    ah[0, 2] = 0.0
    out = sfa_mask_and_combine(t(s), t(ah), t(RNG.random((1, 4)))).data
    assert np.all(out[2] == 0.0)


def test_mask_matches_loop():
    n, c = 4, 3
    s, ah, adep = RNG.normal(size=(n, n, c)), RNG.random((c, n)), RNG.random((c, n))
    out = sfa_mask_and_combine(t(s), t(ah), t(adep)).data
    for i in range(n):
        for j in range(n):
            for k in range(c):
                assert out[i, j, k] == s[i, j, k] * (ah[k, i] * adep[k, j])


def test_mask_bounds_on_random_scorers():
    cfg = tiny_config()
    scorer = SfaScorer(np.random.default_rng(0), cfg.repr_dim, 3, cfg.heads, cfg.window, np.float64)
    hh, hd = t(RNG.normal(size=(5, cfg.repr_dim))), t(RNG.normal(size=(5, cfg.repr_dim)))
    masked = scorer(hh, hd, mask=True).data
    base = scorer(hh, hd, mask=False).data
    assert np.all(np.abs(masked) <= np.abs(base))
    assert np.all(np.sign(masked) == np.sign(base))


# ----------------------------------------------------------------- gradients


def test_full_sfa_edge_path_gradient():
    d = 4
    hh, hd = ad.parameter(RNG.normal(size=(5, d)), "hh"), ad.parameter(RNG.normal(size=(5, d)), "hd")
    scorer = SfaScorer(np.random.default_rng(1), d, 1, 2, 3, np.float64)
    params = [hh, hd] + list(scorer.params.values())
    errs = grad_check_many(lambda: scorer(hh, hd).sum(), params, precision=np.longdouble)
    assert max(errs.values()) < 1e-4


def test_label_path_gradient():
    d = 3
    hh, hd = ad.parameter(RNG.normal(size=(4, d))), ad.parameter(RNG.normal(size=(4, d)))
    scorer = SfaScorer(np.random.default_rng(2), d, 3, 2, 2, np.float64)
    errs = grad_check_many(
        lambda: weighted_sum(scorer(hh, hd)), [hh, hd] + list(scorer.params.values()), precision=np.longdouble
    )
    assert max(errs.values()) < 1e-4


def test_biaffine_gradient():
    d = 3
    hh, hd = ad.parameter(RNG.normal(size=(4, d))), ad.parameter(RNG.normal(size=(4, d)))
    we, wl = ad.parameter(RNG.normal(size=(d + 1, d + 1))), ad.parameter(RNG.normal(size=(d + 1, 2, d + 1)))
    errs = grad_check_many(
        lambda: weighted_sum(biaffine_score(hh, hd, we, wl).edge) + weighted_sum(biaffine_score(hh, hd, we, wl).label, 1),
        [hh, hd, we, wl],
    )
    assert max(errs.values()) < 1e-6


def test_projection_gradient():
    h = ad.parameter(RNG.normal(size=(4, 3)))
    w, b = ad.parameter(RNG.normal(size=(2, 3, 3))), ad.parameter(RNG.normal(size=(2, 3)))
    errs = grad_check_many(lambda: weighted_sum(sfa_project(h, w, b)), [h, w, b])
    assert max(errs.values()) < 1e-6


def test_attention_bias_gradient_is_structurally_zero():
    d = 3
    hh, hd = ad.parameter(RNG.normal(size=(4, d))), ad.parameter(RNG.normal(size=(4, d)))
    scorer = SfaScorer(np.random.default_rng(2), d, 2, 2, 3, np.float64)
    for p in scorer.params.values():
        p.zero_grad()
    with ad.Tape() as tape:
        tape.backward(weighted_sum(scorer(hh, hd)))
    assert np.max(np.abs(scorer.params["att_head_b"].grad)) < 1e-12
    assert np.max(np.abs(scorer.params["att_dep_b"].grad)) < 1e-12


# ----------------------------------------------------------------- selection


@pytest.mark.parametrize("scorer", ["sfa", "biaffine"])
def test_paths_share_shapes(scorer):
    cfg = tiny_config(scorer=scorer)
    first = FirstOrderScorer(cfg, 6, np.random.default_rng(0))
    n = 4
    s = first(t(RNG.normal(size=(n, cfg.repr_dim))), t(RNG.normal(size=(n, cfg.repr_dim))))
    assert s.edge.shape == (n, n)
    assert s.label.shape == (n, n, 6)
    assert np.all(np.isfinite(s.edge.data)) and np.all(np.isfinite(s.label.data))
