"""Core value types, file formats and binary morphology.

Arrays are indexed ``[ix, iy, iz]``. On disk every payload is written with
x varying fastest, so ``data.ravel(order="F")`` is the file order for scalar
volumes.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Literal

import numpy as np
from scipy import ndimage

Frame = Literal["atlas", "patient"]


class FormatError(ValueError):
    """Malformed file header."""


class TruncationError(FormatError):
    """Payload size disagrees with the declared dims."""


class DataError(ValueError):
    """Non-finite or out-of-range payload values."""


class DimensionError(ValueError):
    """Grids that must match do not."""


def _as_dims(dims) -> tuple[int, int, int]:
    dims = tuple(int(d) for d in dims)
    if len(dims) != 3 or any(d <= 0 for d in dims):
        raise ValueError(f"dims must be three positive integers, got {dims}")
    return dims


def _as_spacing(spacing) -> tuple[float, float, float]:
    spacing = tuple(float(s) for s in spacing)
    if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
        raise ValueError(f"spacing must be three positive reals, got {spacing}")
    return spacing


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class Volume3D:
    """Scalar volume with voxel spacing in millimeters."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3-D, got shape {data.shape}")
        _as_dims(data.shape)
        if not np.all(np.isfinite(data)):
            raise DataError("volume data contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "Volume3D":
        return cls(np.zeros(_as_dims(dims)), spacing)


@dataclass(frozen=True, eq=False)
class Mask3D:
    """Binary mask; stored as a boolean array."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"mask data must be 3-D, got shape {data.shape}")
        _as_dims(data.shape)
        if data.dtype != bool:
            if not np.all((data == 0) | (data == 1)):
                raise DataError("mask values must be 0 or 1")
            data = data.astype(bool)
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def count(self) -> int:
        return int(self.data.sum())

    def __and__(self, other: "Mask3D") -> "Mask3D":
        return mask_and(self, other)

    def __or__(self, other: "Mask3D") -> "Mask3D":
        return mask_or(self, other)

    def __invert__(self) -> "Mask3D":
        return mask_not(self)

    def __sub__(self, other: "Mask3D") -> "Mask3D":
        return mask_sub(self, other)


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """Per-voxel displacement ``u`` in atlas voxel units, shape ``(nx, ny, nz, 3)``.

    The deformation is ``phi(x) = x + u(x)``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[3] != 3:
            raise ValueError(f"field data must have shape (nx, ny, nz, 3), got {data.shape}")
        _as_dims(data.shape[:3])
        if not np.all(np.isfinite(data)):
            raise DataError("field data contains non-finite values")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _as_spacing(self.spacing))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape[:3]

    @classmethod
    def zeros(cls, dims, spacing=(1.0, 1.0, 1.0)) -> "DisplacementField":
        return cls(np.zeros(_as_dims(dims) + (3,)), spacing)


@dataclass(frozen=True, eq=False)
class SurfaceMesh:
    """Triangle mesh with vertices in voxel coordinates of the grid named by ``frame``."""

    vertices: np.ndarray
    triangles: np.ndarray
    frame: Frame = "atlas"

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        t = np.asarray(self.triangles, dtype=np.int64)
        if v.ndim != 2 or v.shape[1] != 3:
            raise ValueError(f"vertices must have shape (n, 3), got {v.shape}")
        if t.size == 0:
            t = t.reshape(0, 3)
        if t.ndim != 2 or t.shape[1] != 3:
            raise ValueError(f"triangles must have shape (m, 3), got {t.shape}")
        if not np.all(np.isfinite(v)):
            raise DataError("mesh vertices contain non-finite values")
        if t.size and (t.min() < 0 or t.max() >= len(v)):
            raise ValueError("triangle index out of range")
        if t.size and np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise ValueError("degenerate triangle (repeated vertex index)")
        if self.frame not in ("atlas", "patient"):
            raise ValueError(f"frame must be 'atlas' or 'patient', got {self.frame!r}")
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "triangles", _frozen(t))

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def with_vertices(self, vertices: np.ndarray, frame: Frame | None = None) -> "SurfaceMesh":
        return SurfaceMesh(vertices, self.triangles, self.frame if frame is None else frame)


# ---------------------------------------------------------------------------
# File I/O

_SPECS = {
    "MVOL1": ("f32", 1),
    "MMSK1": ("u8", 1),
    "MFLD1": ("f32x3", 3),
}


def _header(magic: str, dims, spacing, dtype: str) -> bytes:
    lines = [
        magic,
        "dims {} {} {}".format(*dims),
        "spacing {} {} {}".format(*(repr(float(s)) for s in spacing)),
        f"dtype {dtype}",
        "",
        "",
    ]
    return "\n".join(lines).encode("ascii")


def _parse(path, magic: str):
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise FormatError(f"{path}: missing header terminator")
    try:
        lines = raw[:sep].decode("ascii").split("\n")
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: header is not ASCII") from exc
    payload = raw[sep + 2:]
    if len(lines) != 4 or lines[0] != magic:
        raise FormatError(f"{path}: expected {magic} header, got {lines[:1]}")
    fields = {}
    for line in lines[1:]:
        key, _, rest = line.partition(" ")
        fields[key] = rest.split()
    try:
        dims = _as_dims(int(d) for d in fields["dims"])
        spacing = _as_spacing(float(s) for s in fields["spacing"])
        dtype = fields["dtype"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad header field ({exc})") from exc
    expected_dtype, ncomp = _SPECS[magic]
    if dtype != [expected_dtype]:
        raise FormatError(f"{path}: dtype {dtype} does not match {magic}")
    itemsize = 1 if expected_dtype == "u8" else 4
    n = dims[0] * dims[1] * dims[2] * ncomp
    if len(payload) != n * itemsize:
        raise TruncationError(
            f"{path}: dims {dims} need {n * itemsize} payload bytes, found {len(payload)}"
        )
    return dims, spacing, payload


def _f32_payload(values: np.ndarray, path) -> bytes:
    with np.errstate(over="ignore"):
        out = values.astype("<f4")
    if not np.all(np.isfinite(out)):
        raise DataError(f"{path}: values are not representable as finite float32")
    return out.tobytes()


def write_volume(v: Volume3D, path) -> None:
    payload = _f32_payload(v.data.ravel(order="F"), path)
    Path(path).write_bytes(_header("MVOL1", v.dims, v.spacing, "f32") + payload)


def read_volume(path) -> Volume3D:
    dims, spacing, payload = _parse(path, "MVOL1")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: payload contains non-finite values")
    return Volume3D(data.reshape(dims, order="F"), spacing)


def write_mask(m: Mask3D, path) -> None:
    payload = m.data.ravel(order="F").astype(np.uint8).tobytes()
    Path(path).write_bytes(_header("MMSK1", m.dims, m.spacing, "u8") + payload)


def read_mask(path) -> Mask3D:
    dims, spacing, payload = _parse(path, "MMSK1")
    data = np.frombuffer(payload, dtype=np.uint8)
    if data.size and data.max() > 1:
        raise DataError(f"{path}: mask payload has values outside {{0, 1}}")
    return Mask3D(data.reshape(dims, order="F").astype(bool), spacing)


def write_field(u: DisplacementField, path) -> None:
    # voxel order x-fastest, components interleaved per voxel
    ordered = u.data.transpose(2, 1, 0, 3).reshape(-1)
    payload = _f32_payload(ordered, path)
    Path(path).write_bytes(_header("MFLD1", u.dims, u.spacing, "f32x3") + payload)


def read_field(path) -> DisplacementField:
    dims, spacing, payload = _parse(path, "MFLD1")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: payload contains non-finite values")
    nx, ny, nz = dims
    return DisplacementField(data.reshape(nz, ny, nx, 3).transpose(2, 1, 0, 3), spacing)


def _fmt(x: float) -> str:
    # + 0.0 folds negative zero so identical geometry gives identical bytes
    return repr(float(x) + 0.0)


def write_mesh(mesh: SurfaceMesh, path) -> None:
    lines = [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices]
    lines += [f"f {i + 1} {j + 1} {k + 1}" for i, j, k in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_mesh(path, frame: Frame = "atlas") -> SurfaceMesh:
    vertices, triangles = [], []
    for lineno, line in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "v" and len(parts) == 4:
                vertices.append([float(p) for p in parts[1:]])
            elif parts[0] == "f" and len(parts) == 4:
                # "f 1/1/1 ..." style references keep only the vertex index
                triangles.append([int(p.split("/")[0]) - 1 for p in parts[1:]])
            else:
                raise FormatError(f"{path}:{lineno}: unsupported OBJ line {line!r}")
        except ValueError as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"{path}:{lineno}: cannot parse {line!r}") from exc
    if not np.all(np.isfinite(np.asarray(vertices, dtype=float))):
        raise DataError(f"{path}: non-finite vertex coordinates")
    return SurfaceMesh(np.asarray(vertices, dtype=float).reshape(-1, 3),
                       np.asarray(triangles, dtype=np.int64).reshape(-1, 3), frame)


# ---------------------------------------------------------------------------
# Morphology and pointwise mask algebra


def ball_offsets(radius: float) -> np.ndarray:
    """Boolean structuring element of integer offsets with ``|d| <= radius``."""
    if not radius > 0:
        raise ValueError(f"radius must be positive, got {radius}")
    r = int(np.floor(radius))
    ax = np.arange(-r, r + 1)
    dx, dy, dz = np.meshgrid(ax, ax, ax, indexing="ij")
    return dx * dx + dy * dy + dz * dz <= radius * radius


def dilate_sphere(mask: Mask3D, radius_voxels: float = 3.0) -> Mask3D:
    """Dilate by a Euclidean ball measured in voxel units.

    Ties at exactly ``radius`` are included and the grid boundary clips the
    structuring element. Spacing is ignored.
    """
    selem = ball_offsets(radius_voxels)
    out = ndimage.binary_dilation(mask.data, structure=selem, border_value=0)
    return Mask3D(out, mask.spacing)


def _check_pair(a: Mask3D, b: Mask3D) -> None:
    if a.dims != b.dims:
        raise DimensionError(f"mask dims differ: {a.dims} vs {b.dims}")


def mask_and(a: Mask3D, b: Mask3D) -> Mask3D:
    _check_pair(a, b)
    return Mask3D(a.data & b.data, a.spacing)


def mask_or(a: Mask3D, b: Mask3D) -> Mask3D:
    _check_pair(a, b)
    return Mask3D(a.data | b.data, a.spacing)


def mask_not(a: Mask3D) -> Mask3D:
    return Mask3D(~a.data, a.spacing)


def mask_sub(a: Mask3D, b: Mask3D) -> Mask3D:
    """``a AND NOT b``."""
    _check_pair(a, b)
    return Mask3D(a.data & ~b.data, a.spacing)


def as_array(x) -> np.ndarray:
    """Underlying array of a value type, or ``x`` itself as an array."""
    return np.asarray(getattr(x, "data", x))


def grid_dims(x) -> tuple[int, ...]:
    return tuple(as_array(x).shape[:3])


def check_same_dims(*items) -> None:
    shapes = {grid_dims(it) for it in items}
    if len(shapes) > 1:
        raise DimensionError(f"grid dims differ: {sorted(shapes)}")
