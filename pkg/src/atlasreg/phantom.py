"""Seeded synthetic atlas and patient cases with exact ground truth.

The structure is a union of three ellipsoids that all contain a common
center point, so it is star-shaped about that point and its surface can be
reached by a radial map from the unit sphere. Patients are produced by a
smooth analytic warp ``W(x) = x + t + sum_k a_k exp(-|x - c_k|^2 / 2 s_k^2)``
whose inverse is computed by fixed-point iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volcore import (
    DisplacementField, Mask3D, SurfaceMesh, Volume3D, dilate_sphere, write_field, write_mask,
    write_mesh, write_volume,
)
from .xform import identity_grid, trilinear

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Ellipsoid:
    """Ellipsoid whose long axis points along ``direction``.

    The center sits ``offset`` long-semi-axes from the structure center along
    ``direction``; ``|offset| < 1`` keeps the structure center inside.
    """

    direction: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    offset: float = 0.0
    roll: float = 0.0


DEFAULT_PARTS = (
    Ellipsoid((1.0, 0.25, 0.1), (13.5, 9.0, 7.5), 0.0, 0.3),       # body
    Ellipsoid((0.2, 1.0, -0.3), (18.0, 4.8, 4.8), 0.55, 0.0),      # long process
    Ellipsoid((-0.5, -0.3, 1.0), (13.5, 6.75, 3.9), 0.5, 0.8),     # footplate
)


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 76, 44)
    spacing: tuple[float, float, float] = (0.2, 0.2, 0.2)
    parts: tuple[Ellipsoid, ...] = DEFAULT_PARTS
    center: tuple[float, float, float] | None = None
    background: float = 0.0
    bone: float = 1.0
    structure: float = 0.8
    smoothing: float = 0.7
    n_distractors: int = 3
    distractor_radius: tuple[float, float] = (3.0, 5.0)
    distractor_clearance: float = 3.0
    band_radius: float = 3.0
    noise_sigma: float = 0.02
    bias_amplitude: float = 0.03
    n_bumps: int = 3
    bump_amplitude: tuple[float, float] = (1.5, 3.0)
    bump_sigma: tuple[float, float] = (8.0, 14.0)
    bump_spread: float = 6.0
    translation: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translation_range: float = 0.0
    max_lipschitz: float = 0.8
    mesh_subdivisions: int = 3
    margin: int = 4
    seed: int = 0

    def __post_init__(self):
        if len(self.dims) != 3 or min(self.dims) <= 0:
            raise ValueError(f"dims must be positive, got {self.dims}")
        if min(self.spacing) <= 0:
            raise ValueError("spacing must be positive")
        if not self.parts:
            raise ValueError("structure needs at least one ellipsoid")
        for part in self.parts:
            if abs(part.offset) >= 1 or min(part.semi_axes) <= 0:
                raise ValueError(f"invalid ellipsoid {part}")
        lo, hi = self.bump_amplitude
        if lo < 0 or hi < lo:
            raise ValueError("bump_amplitude must be an increasing non-negative range")
        if min(self.bump_sigma) <= 0 or not 0 < self.max_lipschitz < 1:
            raise ValueError("bump sigmas must be positive and max_lipschitz in (0, 1)")

    @property
    def structure_center(self) -> np.ndarray:
        if self.center is not None:
            return np.asarray(self.center, dtype=float)
        return (np.asarray(self.dims, dtype=float) - 1) / 2

    def scaled(self, factor: float) -> "PhantomSpec":
        """Same anatomy sampled on a grid ``factor`` times as fine per axis."""
        dims = tuple(max(int(round(d * factor)), 1) for d in self.dims)
        parts = tuple(replace(p, semi_axes=tuple(a * factor for a in p.semi_axes))
                      for p in self.parts)
        center = None if self.center is None else tuple(c * factor for c in self.center)
        return replace(
            self, dims=dims, spacing=tuple(s / factor for s in self.spacing), parts=parts,
            center=center, distractor_radius=tuple(r * factor for r in self.distractor_radius),
            bump_amplitude=tuple(a * factor for a in self.bump_amplitude),
            bump_sigma=tuple(s * factor for s in self.bump_sigma),
            bump_spread=self.bump_spread * factor,
            translation=tuple(t * factor for t in self.translation),
            translation_range=self.translation_range * factor,
            margin=max(int(round(self.margin * factor)), 1),
        )


# ---------------------------------------------------------------------------
# geometry


def _frame(part: Ellipsoid) -> np.ndarray:
    """Rotation whose columns are the ellipsoid axes (long axis first)."""
    d = np.asarray(part.direction, dtype=float)
    d /= np.linalg.norm(d)
    helper = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e2 = np.cross(d, helper)
    e2 /= np.linalg.norm(e2)
    e3 = np.cross(d, e2)
    c, s = np.cos(part.roll), np.sin(part.roll)
    e2, e3 = c * e2 + s * e3, -s * e2 + c * e3
    return np.stack([d, e2, e3], axis=1)


class Structure:
    """Analytic union-of-ellipsoids shape in voxel coordinates."""

    def __init__(self, spec: PhantomSpec):
        self.center = spec.structure_center
        self.rot = []
        self.centers = []
        self.axes = []
        for part in spec.parts:
            R = _frame(part)
            a = np.asarray(part.semi_axes, dtype=float)
            self.rot.append(R)
            self.axes.append(a)
            self.centers.append(self.center + part.offset * a[0] * R[:, 0])

    def _local(self, k, x):
        return ((x - self.centers[k]) @ self.rot[k]) / self.axes[k]

    def level(self, x: np.ndarray) -> np.ndarray:
        """``min_k |local_k(x)|^2``: < 1 inside, 1 on the surface."""
        q = [np.sum(self._local(k, x) ** 2, axis=-1) for k in range(len(self.axes))]
        return np.min(q, axis=0)

    def inside(self, x: np.ndarray) -> np.ndarray:
        return self.level(x) <= 1.0

    def radius(self, directions: np.ndarray) -> np.ndarray:
        """Distance from the center to the surface along unit ``directions``."""
        best = np.zeros(len(directions))
        for k in range(len(self.axes)):
            y0 = self._local(k, self.center)
            yd = (directions @ self.rot[k]) / self.axes[k]
            a = np.sum(yd * yd, axis=-1)
            b = yd @ y0
            c = y0 @ y0 - 1.0
            t = (-b + np.sqrt(b * b - a * c)) / a
            best = np.maximum(best, t)
        return best


def icosphere(subdivisions: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit icosphere with a fixed vertex ordering."""
    g = (1 + 5 ** 0.5) / 2
    verts = [(-1, g, 0), (1, g, 0), (-1, -g, 0), (1, -g, 0), (0, -1, g), (0, 1, g),
             (0, -1, -g), (0, 1, -g), (g, 0, -1), (g, 0, 1), (-g, 0, -1), (-g, 0, 1)]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11), (1, 5, 9), (5, 11, 4),
             (11, 10, 2), (10, 7, 6), (7, 1, 8), (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8),
             (3, 8, 9), (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    verts = [np.asarray(v, float) / np.linalg.norm(v) for v in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(i, j):
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = verts[i] + verts[j]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new
    return np.asarray(verts), np.asarray(faces, dtype=np.int64)


# ---------------------------------------------------------------------------
# atlas


@dataclass(frozen=True, eq=False)
class Atlas:
    image: Volume3D
    mask: Mask3D
    mesh: SurfaceMesh
    spec: PhantomSpec = field(repr=False)

    def __iter__(self):
        return iter((self.image, self.mask, self.mesh))


def _place_distractors(spec: PhantomSpec, beta: np.ndarray, rng) -> list[tuple[np.ndarray, float]]:
    dist = ndimage.distance_transform_edt(~beta)
    grid = identity_grid(spec.dims)
    placed: list[tuple[np.ndarray, float]] = []
    for _ in range(spec.n_distractors):
        r = rng.uniform(*spec.distractor_radius)
        near = spec.band_radius + spec.distractor_clearance + r
        ok = (dist > near) & (dist < near + 2 * r + 4)
        for k in range(3):
            ok &= (grid[..., k] > r + 1) & (grid[..., k] < spec.dims[k] - 2 - r)
        for c, rc in placed:
            ok &= np.linalg.norm(grid - c, axis=-1) > r + rc + 1
        cand = np.argwhere(ok)
        if len(cand) == 0:
            logger.info("no room for distractor %d; skipping", len(placed))
            continue
        placed.append((cand[rng.integers(len(cand))].astype(float), r))
    return placed


def make_atlas(spec: PhantomSpec = PhantomSpec()) -> Atlas:
    """Atlas image, structure mask and homologous surface mesh for ``spec``."""
    shape = Structure(spec)
    grid = identity_grid(spec.dims)
    beta = shape.inside(grid)
    idx = np.argwhere(beta)
    if len(idx) == 0:
        raise ValueError("structure does not cover any voxel")
    if idx.min() < spec.margin or np.any(idx.max(axis=0) >= np.asarray(spec.dims) - spec.margin):
        raise ValueError(f"structure is closer than {spec.margin} voxels to the grid edge")

    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 0]))
    distractors = _place_distractors(spec, beta, rng)
    bone = np.zeros(spec.dims, dtype=bool)
    for c, r in distractors:
        bone |= np.linalg.norm(grid - c, axis=-1) <= r

    img = np.full(spec.dims, spec.background, dtype=float)
    img[bone] = spec.bone
    img[beta] = spec.structure
    if spec.smoothing > 0:
        img = ndimage.gaussian_filter(img, spec.smoothing, mode="nearest")

    dirs, tris = icosphere(spec.mesh_subdivisions)
    verts = shape.center + shape.radius(dirs)[:, None] * dirs
    mesh = SurfaceMesh(verts, tris, "atlas")
    return Atlas(Volume3D(img, spec.spacing), Mask3D(beta, spec.spacing), mesh, spec)


def band_mask(atlas: Atlas) -> Mask3D:
    return dilate_sphere(atlas.mask, atlas.spec.band_radius)


# ---------------------------------------------------------------------------
# warps and cases


@dataclass(frozen=True)
class GaussianWarp:
    """``W(x) = x + translation + sum_k amplitudes[k] * exp(-|x - centers[k]|^2 / (2 sigmas[k]^2))``."""

    translation: np.ndarray
    centers: np.ndarray
    amplitudes: np.ndarray
    sigmas: np.ndarray

    def displacement(self, x: np.ndarray) -> np.ndarray:
        out = np.broadcast_to(self.translation, x.shape).copy()
        for c, a, s in zip(self.centers, self.amplitudes, self.sigmas):
            g = np.exp(-np.sum((x - c) ** 2, axis=-1) / (2 * s * s))
            out += g[..., None] * a
        return out

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x + self.displacement(x)

    def lipschitz_bound(self) -> float:
        """Upper bound on the displacement's Lipschitz constant over all of space."""
        if len(self.sigmas) == 0:
            return 0.0
        norms = np.linalg.norm(self.amplitudes, axis=-1)
        return float(np.sum(norms / (self.sigmas * np.sqrt(np.e))))

    def inverse(self, y: np.ndarray, tol: float = 1e-9, max_iter: int = 1000) -> np.ndarray:
        """Solve ``W(x) = y`` by ``x <- y - d(x)``; contracts when the bound is < 1."""
        x = y - self.translation
        for _ in range(max_iter):
            x_new = y - self.displacement(x)
            step = np.max(np.abs(x_new - x)) if x.size else 0.0
            x = x_new
            if step < tol:
                break
        return x


def random_warp(spec: PhantomSpec, rng) -> GaussianWarp:
    center = spec.structure_center
    n = spec.n_bumps
    dirs = rng.standard_normal((n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    amps = dirs * rng.uniform(*spec.bump_amplitude, size=(n, 1))
    centers = center + rng.normal(0.0, spec.bump_spread, size=(n, 3))
    sigmas = rng.uniform(*spec.bump_sigma, size=n)
    shift = np.asarray(spec.translation, float)
    if spec.translation_range > 0:
        shift = shift + rng.uniform(-spec.translation_range, spec.translation_range, size=3)
    warp = GaussianWarp(shift, centers, amps, sigmas)
    bound = warp.lipschitz_bound()
    if bound >= spec.max_lipschitz:
        scale = spec.max_lipschitz / bound * 0.999
        logger.info("rescaling warp amplitudes by %.3f to keep the warp injective", scale)
        warp = GaussianWarp(warp.translation, centers, amps * scale, sigmas)
    return warp


@dataclass(frozen=True, eq=False)
class PhantomCase:
    image: Volume3D
    gt_mask: Mask3D
    gt_mesh: SurfaceMesh
    gt_field: DisplacementField
    warp: GaussianWarp = field(repr=False)

    def __iter__(self):
        return iter((self.image, self.gt_mask, self.gt_mesh, self.gt_field))


def _bias(spec: PhantomSpec, rng) -> np.ndarray:
    grid = identity_grid(spec.dims)
    t = 2 * grid / (np.asarray(spec.dims, float) - 1).clip(min=1) - 1
    terms = [t[..., 0], t[..., 1], t[..., 2], t[..., 0] * t[..., 1], t[..., 1] * t[..., 2],
             t[..., 0] * t[..., 2], t[..., 0] ** 2, t[..., 1] ** 2, t[..., 2] ** 2]
    coef = rng.uniform(-1, 1, size=len(terms))
    b = sum(c * term for c, term in zip(coef, terms))
    peak = np.max(np.abs(b))
    return b * (spec.bias_amplitude / peak) if peak > 0 else b


def make_case(atlas: Atlas, spec: PhantomSpec | None = None, case_seed: int = 0,
              warp: GaussianWarp | None = None) -> PhantomCase:
    """Deformed patient with ground-truth mask, mesh and field.

    ``p(y) = m(W^-1(y)) + noise + bias``; the mesh is ``W`` applied to the
    atlas vertices and the field is ``W(x) - x`` on the atlas grid.
    """
    spec = spec or atlas.spec
    rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, case_seed]))
    if warp is None:
        warp = random_warp(spec, rng)
    grid = identity_grid(spec.dims)
    pre = warp.inverse(grid)
    img = trilinear(atlas.image.data, pre)
    contrast = abs(spec.bone - spec.background)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma * contrast, size=spec.dims)
    if spec.bias_amplitude > 0:
        img = img + _bias(spec, rng)
    gt_mask = Structure(spec).inside(pre)
    gt_mesh = SurfaceMesh(warp(atlas.mesh.vertices), atlas.mesh.triangles, "patient")
    gt_field = warp.displacement(grid)
    return PhantomCase(Volume3D(img, spec.spacing), Mask3D(gt_mask, spec.spacing), gt_mesh,
                       DisplacementField(gt_field, spec.spacing), warp)


# ---------------------------------------------------------------------------
# datasets on disk


def write_dataset(out_dir, spec: PhantomSpec, n_cases: int, fractions=(0.7, 0.2, 0.1)) -> Path:
    """Write atlas, cases with ground truth and a manifest; returns the manifest path."""
    from .engine import DatasetManifest, CaseRecord

    out = Path(out_dir)
    (out / "cases").mkdir(parents=True, exist_ok=True)
    atlas = make_atlas(spec)
    write_volume(atlas.image, out / "atlas.mvol")
    write_mask(atlas.mask, out / "atlas_mask.mmsk")
    write_mesh(atlas.mesh, out / "atlas_mesh.obj")
    cases = []
    for i in range(n_cases):
        case = make_case(atlas, spec, case_seed=i)
        cid = f"case{i:03d}"
        stem = out / "cases" / cid
        write_volume(case.image, f"{stem}.mvol")
        write_mask(case.gt_mask, f"{stem}_gt_mask.mmsk")
        write_mesh(case.gt_mesh, f"{stem}_gt_mesh.obj")
        write_field(case.gt_field, f"{stem}_gt_field.mfld")
        cases.append(CaseRecord(cid, Path("cases") / f"{cid}.mvol",
                                Path("cases") / f"{cid}_gt_mask.mmsk",
                                Path("cases") / f"{cid}_gt_mesh.obj"))
    manifest = DatasetManifest(Path("atlas.mvol"), Path("atlas_mask.mmsk"),
                               Path("atlas_mesh.obj"), tuple(cases), seed=spec.seed,
                               fractions=tuple(fractions), root=out)
    path = out / "manifest.txt"
    manifest.save(path)
    return path


def make_dataset(spec: PhantomSpec, n_cases: int, fractions=(0.7, 0.2, 0.1)):
    """In-memory counterpart of :func:`write_dataset`; IDs match the on-disk names."""
    from .engine import CaseData, Dataset

    atlas = make_atlas(spec)
    cases = {}
    for i in range(n_cases):
        case = make_case(atlas, spec, case_seed=i)
        cid = f"case{i:03d}"
        cases[cid] = CaseData(cid, case.image, case.gt_mask, case.gt_mesh)
    return Dataset(atlas.image, atlas.mask, atlas.mesh, cases, spec.seed, tuple(fractions))
