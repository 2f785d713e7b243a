"""Volumetric data model: HU conversion, resampling, luminance mapping, NVOL files.

Internally a volume stores its scalar field as a C-order numpy array of shape
(nz, ny, nx), which makes the flat buffer x-fastest.  World coordinates are in
mm; ``origin_mm`` is the world position of the *center* of voxel (0, 0, 0) and
voxel (i, j, k) sits at ``origin + (i*sx, j*sy, k*sz)``.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidVolumeError

HU_CLIP_LO = -1200.0
HU_CLIP_HI = 600.0
LUMINANCE_WATER = 170.0  # value assigned outside the lung mask; equals the mapped HU of water
LUMINANCE_BONE_CUTOFF = 210.0


class Unit(enum.Enum):
    RAW = "raw"
    HOUNSFIELD = "hounsfield"
    LUMINANCE = "luminance"


@dataclass(frozen=True)
class WorldPoint:
    x_mm: float
    y_mm: float
    z_mm: float

    def __post_init__(self):
        if not all(np.isfinite(v) for v in (self.x_mm, self.y_mm, self.z_mm)):
            raise ValueError(f"world point must be finite, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x_mm, self.y_mm, self.z_mm], dtype=np.float64)


@dataclass(frozen=True)
class Volume:
    """Immutable 3D scalar grid with physical spacing.

    ``data`` has shape (nz, ny, nx); ``dims`` is reported as (nx, ny, nz) to
    match the on-disk convention.
    """

    data: np.ndarray
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    unit: Unit = Unit.HOUNSFIELD

    def __post_init__(self):
        if self.data.ndim != 3 or min(self.data.shape) < 1:
            raise InvalidVolumeError(f"volume needs 3 positive dims, got shape {self.data.shape}")
        if any(s <= 0 for s in self.spacing_mm):
            raise InvalidVolumeError(f"spacing must be strictly positive, got {self.spacing_mm}")
        if self.unit is Unit.LUMINANCE:
            lo, hi = float(self.data.min()), float(self.data.max())
            if lo < 0.0 or hi > 255.0:
                raise InvalidVolumeError(f"luminance values outside [0,255]: [{lo}, {hi}]")
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))
        self.data.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.data.shape
        return (nx, ny, nz)

    @property
    def extent_mm(self) -> tuple[float, float, float]:
        """Physical size (dims * spacing) per axis."""
        return tuple(d * s for d, s in zip(self.dims, self.spacing_mm))

    def voxel_at(self, point: WorldPoint) -> tuple[int, int, int]:
        """Nearest voxel index (ix, iy, iz) of a world point (may be out of bounds)."""
        rel = (point.as_array() - np.asarray(self.origin_mm)) / np.asarray(self.spacing_mm)
        ix, iy, iz = (int(np.floor(r + 0.5)) for r in rel)
        return ix, iy, iz

    def world_at(self, ix: int, iy: int, iz: int) -> WorldPoint:
        ox, oy, oz = self.origin_mm
        sx, sy, sz = self.spacing_mm
        return WorldPoint(ox + ix * sx, oy + iy * sy, oz + iz * sz)

    def in_bounds(self, ix: int, iy: int, iz: int) -> bool:
        nx, ny, nz = self.dims
        return 0 <= ix < nx and 0 <= iy < ny and 0 <= iz < nz

    def value_at(self, ix: int, iy: int, iz: int) -> float:
        return float(self.data[iz, iy, ix])

    def with_data(self, data: np.ndarray, unit: Unit | None = None) -> "Volume":
        return Volume(data, self.spacing_mm, self.origin_mm, unit or self.unit)


@dataclass(frozen=True)
class Mask:
    """Boolean grid sharing geometry with the volume it was derived from."""

    bits: np.ndarray
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.bits.dtype != np.bool_:
            object.__setattr__(self, "bits", self.bits.astype(bool))
        if self.bits.ndim != 3:
            raise InvalidVolumeError(f"mask needs 3 dims, got shape {self.bits.shape}")
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))
        self.bits.setflags(write=False)

    @property
    def dims(self) -> tuple[int, int, int]:
        nz, ny, nx = self.bits.shape
        return (nx, ny, nz)

    def count(self) -> int:
        return int(self.bits.sum())

    def with_bits(self, bits: np.ndarray) -> "Mask":
        return Mask(bits, self.spacing_mm, self.origin_mm)


def hu_from_raw(raw: Volume, slope: float, intercept: float) -> Volume:
    """Affine rescale of detector values into Hounsfield units (dtype preserved)."""
    if raw.unit is not Unit.RAW:
        raise InvalidVolumeError(f"expected raw detector volume, got unit {raw.unit}")
    return raw.with_data(slope * raw.data + intercept, Unit.HOUNSFIELD)


def clip_and_rescale(v: Volume) -> Volume:
    """Clamp HU to [-1200, 600] and map linearly onto [0, 255].

    Values stay floating point; 8-bit quantization only happens on export.
    """
    if v.unit is not Unit.HOUNSFIELD:
        raise InvalidVolumeError(f"expected Hounsfield volume, got unit {v.unit}")
    clipped = np.clip(v.data, HU_CLIP_LO, HU_CLIP_HI)
    lum = (clipped - HU_CLIP_LO) * (255.0 / (HU_CLIP_HI - HU_CLIP_LO))
    return v.with_data(lum.astype(np.float32), Unit.LUMINANCE)


def luminance_of_hu(hu: float) -> float:
    return (min(max(hu, HU_CLIP_LO), HU_CLIP_HI) - HU_CLIP_LO) * 255.0 / (HU_CLIP_HI - HU_CLIP_LO)


def resample(v: Volume, target_spacing_mm: tuple[float, float, float]) -> Volume:
    """Trilinear resampling onto a new grid with the given spacing.

    Output dims per axis are round(extent / target), at least 1.  Sample points
    outside the source grid clamp to the nearest voxel, so a constant volume
    stays constant and resampling at the current spacing is the identity.
    """
    if any(s <= 0 for s in target_spacing_mm):
        raise InvalidVolumeError(f"target spacing must be positive, got {target_spacing_mm}")
    if v.data.size == 0:
        raise InvalidVolumeError("cannot resample an empty volume")
    nx, ny, nz = v.dims
    new_dims = tuple(
        max(1, int(np.floor(e / t + 0.5))) for e, t in zip(v.extent_mm, target_spacing_mm)
    )
    # fractional source indices of the new sample points, per axis
    axes_idx = [
        np.arange(nd, dtype=np.float64) * t / s
        for nd, t, s in zip(new_dims, target_spacing_mm, v.spacing_mm)
    ]
    out = _trilinear_sample_grid(v.data, axes_idx[0], axes_idx[1], axes_idx[2])
    return Volume(out.astype(v.data.dtype), tuple(target_spacing_mm), v.origin_mm, v.unit)


def _trilinear_sample_grid(data: np.ndarray, fx: np.ndarray, fy: np.ndarray, fz: np.ndarray) -> np.ndarray:
    """Sample data (z,y,x layout) on the separable grid fz × fy × fx of fractional indices."""
    nz, ny, nx = data.shape

    def split(f, n):
        f = np.clip(f, 0.0, n - 1.0)
        lo = np.floor(f).astype(np.intp)
        lo = np.minimum(lo, n - 2) if n > 1 else np.zeros_like(lo)
        return lo, (f - lo)

    x0, wx = split(fx, nx)
    y0, wy = split(fy, ny)
    z0, wz = split(fz, nz)
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)

    wz_ = wz[:, None, None]
    wy_ = wy[None, :, None]
    wx_ = wx[None, None, :]
    acc = np.zeros((len(fz), len(fy), len(fx)), dtype=np.float64)
    for zi, wz_term in ((z0, 1.0 - wz_), (z1, wz_)):
        plane_sel = data[zi]  # (nzo, ny, nx)
        for yi, wy_term in ((y0, 1.0 - wy_), (y1, wy_)):
            row_sel = plane_sel[:, yi]  # (nzo, nyo, nx)
            for xi, wx_term in ((x0, 1.0 - wx_), (x1, wx_)):
                acc += wz_term * wy_term * wx_term * row_sel[:, :, xi]
    return acc


def trilinear_at_points(data: np.ndarray, fx: np.ndarray, fy: np.ndarray, fz: np.ndarray,
                        fill: float) -> np.ndarray:
    """Trilinear samples at scattered fractional indices; outside the grid -> fill.

    A tiny tolerance keeps samples that land epsilon outside the grid (e.g.
    after a 360-degree rotation) from collapsing to the fill value.
    """
    eps = 1e-6
    nz, ny, nx = data.shape
    inside = ((fx >= -eps) & (fx <= nx - 1 + eps) & (fy >= -eps) & (fy <= ny - 1 + eps)
              & (fz >= -eps) & (fz <= nz - 1 + eps))
    fxc = np.clip(fx, 0, nx - 1)
    fyc = np.clip(fy, 0, ny - 1)
    fzc = np.clip(fz, 0, nz - 1)
    x0 = np.minimum(np.floor(fxc).astype(np.intp), max(nx - 2, 0))
    y0 = np.minimum(np.floor(fyc).astype(np.intp), max(ny - 2, 0))
    z0 = np.minimum(np.floor(fzc).astype(np.intp), max(nz - 2, 0))
    wx, wy, wz = fxc - x0, fyc - y0, fzc - z0
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    out = np.zeros(fx.shape, dtype=np.float64)
    for zi, wzt in ((z0, 1 - wz), (z1, wz)):
        for yi, wyt in ((y0, 1 - wy), (y1, wy)):
            for xi, wxt in ((x0, 1 - wx), (x1, wx)):
                out += wzt * wyt * wxt * data[zi, yi, xi]
    return np.where(inside, out, fill)


# --- NVOL file format -------------------------------------------------------
#
# <path>       raw little-endian float32 payload, x-fastest
# <path>.json  sidecar with dims/spacing/origin/unit/dtype

_UNIT_TO_STR = {Unit.RAW: "raw", Unit.HOUNSFIELD: "hounsfield", Unit.LUMINANCE: "luminance"}
_STR_TO_UNIT = {v: k for k, v in _UNIT_TO_STR.items()}


def save_nvol(v: Volume, path: str | Path, extra: dict | None = None) -> None:
    path = Path(path)
    header = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing_mm),
        "origin_mm": list(v.origin_mm),
        "unit": _UNIT_TO_STR[v.unit],
        "dtype": "f32le",
    }
    if extra:
        header.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = np.ascontiguousarray(v.data, dtype="<f4")
    if v.unit is Unit.LUMINANCE:
        # honor the 8-bit export convention: round to nearest on disk
        data = np.rint(data).astype("<f4")
    path.write_bytes(data.tobytes())
    Path(str(path) + ".json").write_text(json.dumps(header, sort_keys=True) + "\n")


def load_nvol(path: str | Path) -> tuple[Volume, dict]:
    path = Path(path)
    header = json.loads(Path(str(path) + ".json").read_text())
    nx, ny, nz = header["dims"]
    if header.get("dtype", "f32le") != "f32le":
        raise InvalidVolumeError(f"unsupported dtype {header['dtype']} in {path}")
    buf = np.frombuffer(path.read_bytes(), dtype="<f4")
    if buf.size != nx * ny * nz:
        raise InvalidVolumeError(f"payload size {buf.size} != dims product {nx*ny*nz} in {path}")
    data = buf.reshape(nz, ny, nx).copy()
    vol = Volume(data, tuple(header["spacing_mm"]), tuple(header["origin_mm"]),
                 _STR_TO_UNIT[header["unit"]])
    return vol, header


def save_mask_nvol(m: Mask, path: str | Path) -> None:
    save_nvol(Volume(m.bits.astype(np.float32), m.spacing_mm, m.origin_mm, Unit.RAW), path)


def load_mask_nvol(path: str | Path) -> Mask:
    vol, _ = load_nvol(path)
    return Mask(vol.data > 0.5, vol.spacing_mm, vol.origin_mm)
