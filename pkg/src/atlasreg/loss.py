"""Registration losses with analytic gradients.

All three terms work on plain arrays or on the volcore value types. The
image-similarity term is minimized as ``-ncc`` so that lower is better for
every term.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .volcore import as_array, check_same_dims
from .xform import pullback, pullback_grad

Reduction = Literal["sum", "mean"]


class DegenerateInputWarning(RuntimeWarning):
    """Correlation requested for a constant image."""


@dataclass(frozen=True)
class LossWeights:
    cc: float = 0.1
    gd: float = 0.85
    ls: float = 0.05

    def __post_init__(self):
        w = (self.cc, self.gd, self.ls)
        if any(not np.isfinite(x) or x < 0 for x in w):
            raise ValueError(f"loss weights must be non-negative, got {w}")
        if max(w) <= 0:
            raise ValueError("at least one loss weight must be positive")


DEFAULT_WEIGHTS = LossWeights()


@dataclass
class LossBreakdown:
    """Values of each term and the gradient of ``total`` with respect to ``u``.

    ``cc`` is the raw correlation and ``cc_term = -cc`` is what enters the sum.
    """

    cc: float
    cc_term: float
    gd: float
    ls: float
    total: float
    weights: LossWeights
    grad: np.ndarray = field(repr=False)
    warped: np.ndarray = field(repr=False)
    ncc_degenerate: bool = False

    def as_row(self) -> dict:
        return {"cc": self.cc, "cc_term": self.cc_term, "gd": self.gd,
                "ls": self.ls, "total": self.total}


# ---------------------------------------------------------------------------
# cross-correlation


def _centered(m, w):
    m = as_array(m).astype(np.float64, copy=False)
    w = as_array(w).astype(np.float64, copy=False)
    if m.shape != w.shape:
        raise ValueError(f"shape mismatch: {m.shape} vs {w.shape}")
    a = m - m.mean()
    b = w - w.mean()
    return a, b, float(np.sum(a * a)), float(np.sum(b * b))


def _ncc_parts(m, w):
    a, b, saa, sbb = _centered(m, w)
    if saa == 0.0 or sbb == 0.0:
        return a, b, saa, sbb, None
    r = float(np.sum(a * b)) / np.sqrt(saa * sbb)
    return a, b, saa, sbb, float(np.clip(r, -1.0, 1.0))


def ncc(m, w) -> float:
    """Global Pearson correlation over all voxels.

    A constant argument makes the correlation undefined; 0 is returned and a
    :class:`DegenerateInputWarning` is emitted.
    """
    *_, r = _ncc_parts(m, w)
    if r is None:
        warnings.warn("constant image in ncc; returning 0", DegenerateInputWarning, stacklevel=2)
        return 0.0
    return r


def ncc_loss_and_grad(m, w):
    """Return ``(-ncc(m, w), d/dw, degenerate)``.

    Degenerate inputs give loss 0 with a zero gradient.
    """
    a, b, saa, sbb, r = _ncc_parts(m, w)
    if r is None:
        return 0.0, np.zeros_like(b), True
    # d r / d w_i = a_i / sqrt(saa sbb) - r b_i / sbb (mean terms cancel since sum(a) = 0)
    grad = a / np.sqrt(saa * sbb) - r * b / sbb
    return -r, -grad, False


# ---------------------------------------------------------------------------
# smoothness


def _field(u) -> np.ndarray:
    u = as_array(u).astype(np.float64, copy=False)
    if u.ndim != 4 or u.shape[3] != 3:
        raise ValueError(f"field must have shape (nx, ny, nz, 3), got {u.shape}")
    return u


def _n_diff_terms(shape) -> int:
    nx, ny, nz = shape
    return (nx - 1) * ny * nz + nx * (ny - 1) * nz + nx * ny * (nz - 1)


def grad_smoothness(u, reduction: Reduction = "mean") -> float:
    """Squared forward differences of the field summed over the three axes.

    ``reduction="mean"`` divides by the number of difference terms. A grid
    with every axis of length 1 has no terms and returns 0 with a warning.
    """
    u = _field(u)
    total = 0.0
    for axis in range(3):
        d = np.diff(u, axis=axis)
        total += float(np.sum(d * d))
    count = _n_diff_terms(u.shape[:3])
    if count == 0:
        warnings.warn("field has a single voxel; smoothness is zero", DegenerateInputWarning,
                      stacklevel=2)
        return 0.0
    if reduction == "mean":
        return total / count
    if reduction == "sum":
        return total
    raise ValueError(f"unknown reduction {reduction!r}")


def grad_smoothness_grad(u, reduction: Reduction = "mean") -> np.ndarray:
    u = _field(u)
    g = np.zeros_like(u)
    for axis in range(3):
        d = np.diff(u, axis=axis)
        lo = [slice(None)] * 4
        hi = [slice(None)] * 4
        lo[axis] = slice(None, -1)
        hi[axis] = slice(1, None)
        g[tuple(hi)] += 2.0 * d
        g[tuple(lo)] -= 2.0 * d
    count = _n_diff_terms(u.shape[:3])
    if reduction == "mean":
        return g / count if count else g
    if reduction == "sum":
        return g
    raise ValueError(f"unknown reduction {reduction!r}")


# ---------------------------------------------------------------------------
# level-set region term


def _band_coeffs(beta, mu) -> np.ndarray:
    beta = as_array(beta).astype(bool)
    mu = as_array(mu).astype(bool)
    if beta.shape != mu.shape:
        raise ValueError(f"mask shapes differ: {beta.shape} vs {mu.shape}")
    n_band = int(mu.sum())
    if n_band == 0:
        raise ValueError("band mask is empty")
    if np.any(beta & ~mu):
        raise ValueError("band mask must contain the structure mask")
    # +1 inside the structure, -1 on the band background, 0 elsewhere
    coeff = mu * (2.0 * beta - 1.0)
    return coeff / n_band


def levelset_loss(w, beta, mu) -> float:
    """Negative foreground-minus-background contrast of ``w`` inside the band ``mu``."""
    w = as_array(w).astype(np.float64, copy=False)
    coeff = _band_coeffs(beta, mu)
    if w.shape != coeff.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {coeff.shape}")
    return -float(np.sum(w * coeff))


def levelset_grad(w, beta, mu) -> np.ndarray:
    w = as_array(w)
    coeff = _band_coeffs(beta, mu)
    if w.shape != coeff.shape:
        raise ValueError(f"shape mismatch: {w.shape} vs {coeff.shape}")
    return -coeff


# ---------------------------------------------------------------------------


def total_loss(m, p, u, beta, mu, weights: LossWeights = DEFAULT_WEIGHTS,
               reduction: Reduction = "mean") -> LossBreakdown:
    """Weighted sum of the three terms for the pair ``(m, p)`` under field ``u``.

    The level-set term is always evaluated so it can be logged even when its
    weight is zero.
    """
    check_same_dims(m, u, beta, mu)
    warped, jac = pullback(as_array(p), u)
    cc_term, d_cc, degenerate = ncc_loss_and_grad(m, warped)
    ls = levelset_loss(warped, beta, mu)
    gd = grad_smoothness(u, reduction)

    d_warped = weights.cc * d_cc + weights.ls * levelset_grad(warped, beta, mu)
    grad = pullback_grad(d_warped, jac) + weights.gd * grad_smoothness_grad(u, reduction)
    total = weights.cc * cc_term + weights.gd * gd + weights.ls * ls
    return LossBreakdown(cc=-cc_term if not degenerate else 0.0, cc_term=cc_term, gd=gd, ls=ls,
                         total=total, weights=weights, grad=grad, warped=warped,
                         ncc_degenerate=degenerate)
