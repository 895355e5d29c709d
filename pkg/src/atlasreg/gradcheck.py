"""Central finite-difference audits of every analytic gradient in the package.

Relative error of one entry is ``|a - n| / max(|a|, |n|, floor)`` with
``floor = 1e-8``, so entries whose true gradient is exactly zero are judged
on an absolute scale.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import loss as LS
from .net import layers as L
from .net.model import NetConfig, UNet3D
from .xform import pullback, pullback_grad

REL_FLOOR = 1e-8
LOSS_TOL = 1e-5
LAYER_TOL = 1e-5
END_TO_END_TOL = 1e-4


def rel_error(analytic, numeric, floor: float = REL_FLOOR) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def numeric_grad(f: Callable[[], float], x: np.ndarray, indices, h: float = 1e-4) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x[idx]`` (``x`` mutated and restored)."""
    out = np.empty(len(indices))
    for k, idx in enumerate(indices):
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        out[k] = (fp - fm) / (2.0 * h)
    return out


def sample_indices(rng, shape, n: int) -> list[tuple]:
    """``n`` distinct multi-indices (all of them if the array is smaller)."""
    total = int(np.prod(shape))
    flat = rng.choice(total, size=min(n, total), replace=False)
    return [np.unravel_index(i, shape) for i in np.sort(flat)]


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tol: float
    n_checked: int

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_err < self.tol)


def _audit(name, f, x, analytic, rng, tol, n=120, h=1e-4) -> CheckResult:
    idx = sample_indices(rng, x.shape, n)
    num = numeric_grad(f, x, idx, h)
    ana = np.array([analytic[i] for i in idx])
    return CheckResult(name, float(rel_error(ana, num).max()), tol, len(idx))


def kink_free_field(rng, dims, scale: float = 1.5, margin: float = 0.05) -> np.ndarray:
    """Random displacement whose sample coordinates stay ``margin`` away from voxel boundaries.

    Trilinear sampling is piecewise linear in each coordinate, so this keeps
    every finite-difference probe of size < ``margin`` inside a single cell.
    """
    dims = tuple(dims)
    grid = np.stack(np.meshgrid(*[np.arange(n) for n in dims], indexing="ij"), axis=-1)
    u = rng.uniform(-scale, scale, size=dims + (3,))
    target = grid + u
    hi = np.asarray(dims, dtype=float) - 1
    # keep targets interior, then push fractional parts off the integers
    target = np.clip(target, margin, hi - margin)
    frac = target - np.floor(target)
    frac = np.clip(frac, margin, 1 - margin)
    target = np.floor(target) + frac
    target = np.minimum(target, hi - margin)
    return target - grid


def random_pair(rng, dims=(6, 6, 6)):
    """Atlas, patient, kink-free field and a structure/band mask pair on a small grid."""
    m = rng.standard_normal(dims)
    p = rng.standard_normal(dims)
    u = kink_free_field(rng, dims)
    beta = np.zeros(dims, dtype=bool)
    c = [d // 2 for d in dims]
    beta[c[0] - 1:c[0] + 1, c[1] - 1:c[1] + 1, c[2] - 1:c[2] + 1] = True
    mu = np.zeros(dims, dtype=bool)
    mu[max(c[0] - 2, 0):c[0] + 2, max(c[1] - 2, 0):c[1] + 2, max(c[2] - 2, 0):c[2] + 2] = True
    return m, p, u, beta, mu


def check_losses(seed: int = 0, dims=(6, 6, 6)) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    m, p, u, beta, mu = random_pair(rng, dims)
    results = []

    w = rng.standard_normal(dims)
    _, g, _ = LS.ncc_loss_and_grad(m, w)
    results.append(_audit("ncc_loss/dw", lambda: LS.ncc_loss_and_grad(m, w)[0], w, g, rng, LOSS_TOL))

    for red in ("mean", "sum"):
        uu = rng.standard_normal(dims + (3,))
        g = LS.grad_smoothness_grad(uu, red)
        results.append(_audit(f"grad_smoothness[{red}]/du", lambda: LS.grad_smoothness(uu, red),
                              uu, g, rng, LOSS_TOL))

    w = rng.standard_normal(dims)
    g = LS.levelset_grad(w, beta, mu)
    results.append(_audit("levelset/dw", lambda: LS.levelset_loss(w, beta, mu), w, g, rng, LOSS_TOL))

    uu = u.copy()

    def cc_of_u():
        return LS.ncc_loss_and_grad(m, pullback(p, uu)[0])[0]

    warped, jac = pullback(p, uu)
    _, dw, _ = LS.ncc_loss_and_grad(m, warped)
    results.append(_audit("ncc_loss(pullback)/du", cc_of_u, uu, pullback_grad(dw, jac), rng,
                          LOSS_TOL))

    def ls_of_u():
        return LS.levelset_loss(pullback(p, uu)[0], beta, mu)

    results.append(_audit("levelset(pullback)/du", ls_of_u, uu,
                          pullback_grad(LS.levelset_grad(warped, beta, mu), jac), rng, LOSS_TOL))

    br = LS.total_loss(m, p, uu, beta, mu)
    results.append(_audit("total_loss/du", lambda: LS.total_loss(m, p, uu, beta, mu).total, uu,
                          br.grad, rng, LOSS_TOL))
    return results


def check_layers(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    h = 1e-5

    x = rng.standard_normal((2, 3, 6, 4, 4))
    w = rng.standard_normal((4, 3, 3, 3, 3))
    b = rng.standard_normal(4)
    up = rng.standard_normal((2, 4, 6, 4, 4))
    _, c = L.conv3d_forward(x, w, b)
    dx, dw, db = L.conv3d_backward(up, c)

    def f():
        return float(np.sum(L.conv3d_forward(x, w, b)[0] * up))

    results += [_audit("conv3d/dx", f, x, dx, rng, LAYER_TOL, h=h),
                _audit("conv3d/dw", f, w, dw, rng, LAYER_TOL, h=h),
                _audit("conv3d/db", f, b, db, rng, LAYER_TOL, h=h)]

    x = rng.standard_normal((2, 3, 4, 4, 4))
    up = rng.standard_normal(x.shape)
    _, c = L.leaky_relu_forward(x)
    results.append(_audit("leaky_relu/dx", lambda: float(np.sum(L.leaky_relu_forward(x)[0] * up)),
                          x, L.leaky_relu_backward(up, c), rng, LAYER_TOL, h=h))

    up = rng.standard_normal((2, 3, 2, 2, 2))
    _, c = L.maxpool3d_forward(x)
    results.append(_audit("maxpool3d/dx", lambda: float(np.sum(L.maxpool3d_forward(x)[0] * up)),
                          x, L.maxpool3d_backward(up, c), rng, LAYER_TOL, h=h))

    up = rng.standard_normal((2, 3, 8, 8, 8))
    _, c = L.upsample_trilinear_forward(x)
    results.append(_audit("upsample/dx",
                          lambda: float(np.sum(L.upsample_trilinear_forward(x)[0] * up)),
                          x, L.upsample_trilinear_backward(up, c), rng, LAYER_TOL, h=h))

    gamma = rng.standard_normal(3)
    beta = rng.standard_normal(3)
    up = rng.standard_normal(x.shape)
    for mode in ("train", "infer"):
        rm, rv = rng.standard_normal(3), rng.uniform(0.5, 2.0, 3)

        def fbn():
            return float(np.sum(L.batchnorm3d_forward(x, gamma, beta, rm.copy(), rv.copy(),
                                                      mode=mode)[0] * up))

        _, c = L.batchnorm3d_forward(x, gamma, beta, rm.copy(), rv.copy(), mode=mode)
        dx, dg, dbeta = L.batchnorm3d_backward(up, c)
        results += [_audit(f"batchnorm[{mode}]/dx", fbn, x, dx, rng, LAYER_TOL, h=h),
                    _audit(f"batchnorm[{mode}]/dgamma", fbn, gamma, dg, rng, LAYER_TOL, h=h),
                    _audit(f"batchnorm[{mode}]/dbeta", fbn, beta, dbeta, rng, LAYER_TOL, h=h)]

    a = rng.standard_normal((1, 2, 2, 2, 2))
    bb = rng.standard_normal((1, 3, 2, 2, 2))
    up = rng.standard_normal((1, 5, 2, 2, 2))
    _, c = L.concat_forward(a, bb)
    da, dbb = L.concat_backward(up, c)

    def fcat():
        return float(np.sum(L.concat_forward(a, bb)[0] * up))

    results += [_audit("concat/da", fcat, a, da, rng, LAYER_TOL, h=h),
                _audit("concat/db", fcat, bb, dbb, rng, LAYER_TOL, h=h)]
    return results


def tiny_net_config(seed: int = 0) -> NetConfig:
    # larger final init so the end-to-end audit sees a non-trivial field
    return NetConfig(base_channels=2, final_init_scale=0.05, seed=seed)


def check_end_to_end(seed: int = 0, dims=(8, 8, 8), n_params: int = 60) -> CheckResult:
    """d(total_loss)/d(params) through pullback and the whole network."""
    rng = np.random.default_rng(seed)
    m, p, _, beta, mu = random_pair(rng, dims)
    net = UNet3D(tiny_net_config(seed))

    def f():
        u = net.forward_volume(p, mode="train")
        return LS.total_loss(m, p, u, beta, mu).total

    net.zero_grad()
    u = net.forward_volume(p, mode="train")
    br = LS.total_loss(m, p, u, beta, mu)
    net.backward_field(br.grad)

    keys = sorted(net.params)
    sizes = np.array([net.params[k].size for k in keys])
    picks = rng.choice(int(sizes.sum()), size=n_params, replace=False)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    ana, num = [], []
    for flat in np.sort(picks):
        j = int(np.searchsorted(starts, flat, side="right") - 1)
        arr = net.params[keys[j]]
        idx = np.unravel_index(int(flat - starts[j]), arr.shape)
        num.append(numeric_grad(f, arr, [idx], h=1e-6)[0])
        ana.append(net.grads[keys[j]][idx])
    return CheckResult("end_to_end/dparams", float(rel_error(ana, num).max()), END_TO_END_TOL,
                       n_params)


def run_scope(scope: str, seed: int = 0) -> list[CheckResult]:
    if scope == "losses":
        return check_losses(seed)
    if scope == "layers":
        return check_layers(seed)
    if scope == "end-to-end":
        return [check_end_to_end(seed)]
    raise ValueError(f"unknown gradcheck scope {scope!r}")
