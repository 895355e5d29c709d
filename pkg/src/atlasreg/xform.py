"""Trilinear resampling through a displacement field.

One field ``u`` on the atlas grid plays both roles: the patient image is
pulled back by sampling it at ``x + u(x)``, and atlas mesh vertices are
pushed forward to ``v + u(v)``. No field inversion is ever needed.
"""

from __future__ import annotations

import numpy as np

from .volcore import DimensionError, DisplacementField, Mask3D, SurfaceMesh, Volume3D, as_array


def _axis_weights(c: np.ndarray, n: int):
    """Lower index, upper index, fraction and in-range flag along one axis."""
    inside = (c >= 0) & (c <= n - 1)
    c = np.clip(c, 0, n - 1)
    if n == 1:
        i0 = np.zeros(c.shape, dtype=np.intp)
        return i0, i0, np.zeros_like(c), np.zeros_like(inside)
    i0 = np.minimum(np.floor(c).astype(np.intp), n - 2)
    return i0, i0 + 1, c - i0, inside


def trilinear(vol: np.ndarray, coords: np.ndarray, with_grad: bool = False):
    """Sample ``vol`` at continuous voxel coordinates with clamp-to-edge.

    ``vol`` has shape ``(nx, ny, nz)`` or ``(nx, ny, nz, C)``; ``coords`` has
    shape ``(..., 3)``. With ``with_grad`` the spatial derivative with respect
    to the sample coordinate is returned too, shape ``(..., 3)`` or
    ``(..., C, 3)``; it is zero along any axis whose coordinate was clamped.
    """
    vol = np.asarray(vol, dtype=np.float64)
    nx, ny, nz = vol.shape[:3]
    x0, x1, tx, okx = _axis_weights(coords[..., 0], nx)
    y0, y1, ty, oky = _axis_weights(coords[..., 1], ny)
    z0, z1, tz, okz = _axis_weights(coords[..., 2], nz)

    c000 = vol[x0, y0, z0]
    c100 = vol[x1, y0, z0]
    c010 = vol[x0, y1, z0]
    c110 = vol[x1, y1, z0]
    c001 = vol[x0, y0, z1]
    c101 = vol[x1, y0, z1]
    c011 = vol[x0, y1, z1]
    c111 = vol[x1, y1, z1]

    if vol.ndim == 4:
        tx, ty, tz = tx[..., None], ty[..., None], tz[..., None]
        okx, oky, okz = okx[..., None], oky[..., None], okz[..., None]

    # (1 - t) a + t b reproduces grid values exactly at t = 0 and t = 1
    sx, sy, sz = 1.0 - tx, 1.0 - ty, 1.0 - tz
    c00 = sx * c000 + tx * c100
    c10 = sx * c010 + tx * c110
    c01 = sx * c001 + tx * c101
    c11 = sx * c011 + tx * c111
    c0 = sy * c00 + ty * c10
    c1 = sy * c01 + ty * c11
    out = sz * c0 + tz * c1
    if not with_grad:
        return out

    dx0 = sy * (c100 - c000) + ty * (c110 - c010)
    dx1 = sy * (c101 - c001) + ty * (c111 - c011)
    gx = sz * dx0 + tz * dx1
    gy = sz * (c10 - c00) + tz * (c11 - c01)
    gz = c1 - c0
    grad = np.stack([gx * okx, gy * oky, gz * okz], axis=-1)
    return out, grad


def identity_grid(dims) -> np.ndarray:
    """Voxel-center coordinates of a grid, shape ``(nx, ny, nz, 3)``."""
    axes = [np.arange(n, dtype=np.float64) for n in dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)


def _field_array(u) -> np.ndarray:
    arr = as_array(u).astype(np.float64, copy=False)
    if arr.ndim != 4 or arr.shape[3] != 3:
        raise ValueError(f"field must have shape (nx, ny, nz, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("displacement field contains non-finite values")
    return arr


def pullback(p, u):
    """Resample ``p`` onto the atlas grid: ``warped(x) = p(x + u(x))``.

    Returns ``(warped, jac)`` where ``jac`` is the per-voxel spatial gradient
    of ``p`` at the sample point, shape ``(nx, ny, nz, 3)``. If ``p`` is a
    :class:`Volume3D` the warped image is returned as one, carrying the
    field's spacing when ``u`` is a field and ``p``'s otherwise.
    """
    field = _field_array(u)
    coords = identity_grid(field.shape[:3]) + field
    warped, jac = trilinear(as_array(p), coords, with_grad=True)
    if isinstance(p, Volume3D):
        spacing = u.spacing if isinstance(u, DisplacementField) else p.spacing
        warped = Volume3D(warped, spacing)
    return warped, jac


def pullback_grad(upstream, jac) -> np.ndarray:
    """Chain rule through :func:`pullback`: ``dL/du(x) = dL/dwarped(x) * jac(x)``."""
    upstream = as_array(upstream)
    jac = np.asarray(jac)
    if jac.shape != upstream.shape + (3,):
        raise ValueError(f"shape mismatch: upstream {upstream.shape}, jac {jac.shape}")
    return upstream[..., None] * jac


def pullback_mask(mask, u, threshold: float = 0.5) -> Mask3D:
    """Pull a binary mask back through ``u`` by trilinear sampling and thresholding."""
    warped, _ = pullback(as_array(mask).astype(np.float64), u)
    spacing = getattr(u, "spacing", getattr(mask, "spacing", (1.0, 1.0, 1.0)))
    return Mask3D(np.asarray(warped) >= threshold, spacing)


def warp_points(points: np.ndarray, u) -> np.ndarray:
    """Move points by the trilinearly sampled displacement, ``v + u(v)``."""
    field = _field_array(u)
    points = np.asarray(points, dtype=np.float64)
    return points + trilinear(field, points)


def warp_mesh(mesh: SurfaceMesh, u) -> SurfaceMesh:
    """Push the mesh forward into patient space; connectivity and order are kept."""
    if mesh.n_vertices == 0:
        raise ValueError("cannot warp an empty mesh")
    return SurfaceMesh(warp_points(mesh.vertices, u), mesh.triangles, "patient")


def splat_mask(beta, u, supersample: int = 3, patient_dims=None) -> Mask3D:
    """Render the atlas mask in patient space.

    Every foreground atlas voxel is split into ``supersample**3`` sub-points;
    each is mapped through ``x + u(x)`` and marks its nearest patient voxel.
    There is no hole filling.
    """
    supersample = int(supersample)
    if supersample < 1:
        raise ValueError(f"supersample must be >= 1, got {supersample}")
    field = _field_array(u)
    beta_arr = as_array(beta).astype(bool)
    if beta_arr.shape != field.shape[:3]:
        raise DimensionError(f"mask dims {beta_arr.shape} differ from field dims {field.shape[:3]}")
    dims = tuple(patient_dims) if patient_dims is not None else beta_arr.shape
    out = np.zeros(dims, dtype=bool)

    centers = np.argwhere(beta_arr).astype(np.float64)
    if len(centers):
        sub = (np.arange(supersample) + 0.5) / supersample - 0.5
        offsets = np.stack(np.meshgrid(sub, sub, sub, indexing="ij"), axis=-1).reshape(-1, 3)
        pts = (centers[:, None, :] + offsets[None, :, :]).reshape(-1, 3)
        moved = warp_points(pts, field)
        # round half up keeps the identity case exact for even supersample too
        idx = np.floor(moved + 0.5).astype(np.intp)
        ok = np.all((idx >= 0) & (idx < np.asarray(dims)), axis=1)
        idx = idx[ok]
        out[idx[:, 0], idx[:, 1], idx[:, 2]] = True
    spacing = getattr(beta, "spacing", (1.0, 1.0, 1.0))
    return Mask3D(out, spacing)
