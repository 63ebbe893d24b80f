"""Central finite-difference checks for the reverse-mode engine."""
from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from .autodiff import Tape, Tensor

GUARD = 1e-8


def _analytic(f: Callable[[], Tensor], params: list[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        out = f()
        if out.data.size != 1:
            raise ValueError(f"grad_check needs a scalar-valued function, got shape {out.shape}")
        tape.backward(out)
    return [p.grad.copy() for p in params]


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GUARD)
    return np.abs(analytic - numeric) / denom


def grad_check_many(
    f: Callable[[], Tensor],
    params: Iterable[Tensor],
    h: float = 1e-5,
    max_coords: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    precision=None,
) -> dict[str, float]:
    """Worst relative error per parameter, keyed by name (or position).

    With ``max_coords`` only that many coordinates per parameter are probed,
    drawn from ``rng``.  ``precision`` (e.g. ``np.longdouble``) evaluates the
    finite differences in a wider float type: deep paths have coordinates
    with gradients near 1e-9, where float64 cancellation noise at h=1e-5
    (about 1e-11) would swamp a 1e-4 relative tolerance.  The analytic
    gradient always comes from the parameters' own dtype.
    """
    params = list(params)
    grads = _analytic(f, params)
    rng = rng or np.random.default_rng(0)
    originals = [p.data for p in params]
    if precision is not None:
        for p in params:
            p.data = p.data.astype(precision)
    try:
        return _numeric_report(f, params, grads, h, max_coords, rng)
    finally:
        for p, data in zip(params, originals):
            p.data = data


def _numeric_report(f, params, grads, h, max_coords, rng) -> dict[str, float]:
    report = {}
    for k, (p, g) in enumerate(zip(params, grads)):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
        numeric = np.empty(coords.size)
        for n, idx in enumerate(coords):
            orig = flat[idx]
            flat[idx] = orig + h
            plus = f().data
            flat[idx] = orig - h
            minus = f().data
            flat[idx] = orig
            numeric[n] = (plus - minus) / (2 * h)
        errs = relative_errors(g.reshape(-1)[coords], numeric)
        report[p.name or str(k)] = float(errs.max()) if errs.size else 0.0
    return report


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-5) -> float:
    """Worst elementwise relative error between reverse-mode and numeric gradients.

    Elements where both gradients vanish score zero thanks to the
    ``max(|analytic|, |numeric|, 1e-8)`` denominator.
    """
    if not x.requires_grad:
        x.requires_grad = True
        x.zero_grad()
    return grad_check_many(lambda: f(x), [x], h=h)[x.name or "0"]
