"""Binary 3D morphology, connected components, and lung mask extraction.

Structuring elements are digital ellipsoids: a physical radius is converted to
per-axis voxel radii (round-half-up against the voxel spacing), and an offset
(dx, dy, dz) belongs to the element iff (dx/rx)^2 + (dy/ry)^2 + (dz/rz)^2 <= 1.
Membership is decided in exact integer arithmetic so results are reproducible
against a brute-force definition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import SegmentationFailure
from .volume import LUMINANCE_BONE_CUTOFF, LUMINANCE_WATER, Mask, Unit, Volume

LUNG_THRESHOLD_HU = -320.0
CLOSE_RADIUS_MM = 3.0
DILATE_RADIUS_MM = 10.0


@dataclass(frozen=True)
class LabeledComponents:
    """Connected component labeling result; label 0 is background."""

    labels: np.ndarray  # int32, shape (nz, ny, nx)
    count: int
    sizes: np.ndarray  # voxel count of label l at sizes[l - 1]
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float]


def binarize(v: Volume, threshold_hu: float = LUNG_THRESHOLD_HU) -> Mask:
    """True where HU exceeds the threshold (body/tissue); lung air stays false."""
    if v.unit is not Unit.HOUNSFIELD:
        raise ValueError(f"binarize expects a Hounsfield volume, got {v.unit}")
    return Mask(v.data > threshold_hu, v.spacing_mm, v.origin_mm)


def voxel_radii(radius_mm: float, spacing_mm: tuple[float, float, float]) -> tuple[int, int, int]:
    """Per-axis voxel radii, round-half-up."""
    if radius_mm < 0:
        raise ValueError(f"radius must be >= 0, got {radius_mm}")
    return tuple(int(math.floor(radius_mm / s + 0.5)) for s in spacing_mm)


def _run_halfwidth(rx: int, ry: int, rz: int, dy: int, dz: int) -> int | None:
    """Max |dx| inside the ellipsoid at offsets (dy, dz), or None if empty there."""
    if (ry == 0 and dy != 0) or (rz == 0 and dz != 0):
        return None
    ry_, rz_ = max(ry, 1), max(rz, 1)
    rem = ry_ * ry_ * rz_ * rz_ - dy * dy * rz_ * rz_ - dz * dz * ry_ * ry_
    if rem < 0:
        return None
    if rx == 0:
        return 0
    return math.isqrt(rx * rx * rem // (ry_ * ry_ * rz_ * rz_))


def ellipsoid_offsets(rx: int, ry: int, rz: int) -> list[tuple[int, int, int]]:
    """All (dx, dy, dz) offsets of the digital ellipsoid (used by tests/oracles)."""
    out = []
    for dz in range(-rz, rz + 1):
        for dy in range(-ry, ry + 1):
            w = _run_halfwidth(rx, ry, rz, dy, dz)
            if w is None:
                continue
            out.extend((dx, dy, dz) for dx in range(-w, w + 1))
    return out


def _dilate_bits(bits: np.ndarray, rx: int, ry: int, rz: int) -> np.ndarray:
    """Binary dilation by the digital ellipsoid, decomposed into x-runs.

    For each (dy, dz) plane offset the element contributes a contiguous run of
    x offsets, so the per-row OR reduces to a prefix-sum window test.
    """
    nz, ny, nx = bits.shape
    csum = np.zeros((nz, ny, nx + 1), dtype=np.int32)
    np.cumsum(bits, axis=2, out=csum[:, :, 1:])
    xs = np.arange(nx)
    out = np.zeros_like(bits)
    for dz in range(-rz, rz + 1):
        zd = slice(max(0, dz), nz + min(0, dz))
        zs = slice(max(0, -dz), nz + min(0, -dz))
        if zd.start >= nz + min(0, dz):
            continue
        for dy in range(-ry, ry + 1):
            w = _run_halfwidth(rx, ry, rz, dy, dz)
            if w is None:
                continue
            yd = slice(max(0, dy), ny + min(0, dy))
            ys = slice(max(0, -dy), ny + min(0, -dy))
            lo = np.clip(xs - w, 0, nx)
            hi = np.clip(xs + w + 1, 0, nx)
            sub = csum[zs, ys]
            out[zd, yd] |= sub[:, :, hi] > sub[:, :, lo]
    return out


def morphological_dilate(m: Mask, radius_mm: float) -> Mask:
    rx, ry, rz = voxel_radii(radius_mm, m.spacing_mm)
    return m.with_bits(_dilate_bits(m.bits, rx, ry, rz))


def morphological_close(m: Mask, radius_mm: float) -> Mask:
    """Dilation followed by erosion; erosion runs as dilation of the complement."""
    rx, ry, rz = voxel_radii(radius_mm, m.spacing_mm)
    dilated = _dilate_bits(m.bits, rx, ry, rz)
    return m.with_bits(~_dilate_bits(~dilated, rx, ry, rz))


_NEIGHBOR_PLANES_6 = [(0, 1), (1, 0)]
_NEIGHBOR_PLANES_26 = [(0, 1), (1, -1), (1, 0), (1, 1)]


def connected_components(m: Mask, connectivity: int = 26) -> LabeledComponents:
    """Label connected foreground regions (6 or 26 adjacency).

    Run-based two-pass labeling: maximal x-runs get provisional ids, runs in
    adjacent rows are merged with union-find, and final labels are renumbered
    by first-encountered voxel in x-fastest scan order.
    """
    if connectivity not in (6, 26):
        raise ValueError(f"connectivity must be 6 or 26, got {connectivity}")
    bits = m.bits
    nz, ny, nx = bits.shape
    starts = bits.copy()
    starts[:, :, 1:] &= ~bits[:, :, :-1]
    run_id = np.cumsum(starts.reshape(-1), dtype=np.int64).reshape(bits.shape)
    run_id[~bits] = 0
    n_runs = int(starts.sum())
    if n_runs == 0:
        return LabeledComponents(np.zeros(bits.shape, np.int32), 0,
                                 np.zeros(0, np.int64), m.spacing_mm, m.origin_mm)

    planes = _NEIGHBOR_PLANES_6 if connectivity == 6 else _NEIGHBOR_PLANES_26
    dxs = (0,) if connectivity == 6 else (-1, 0, 1)
    pairs = []
    for dz, dy in planes:
        zd = slice(dz, nz) if dz else slice(None)
        zs = slice(0, nz - dz) if dz else slice(None)
        if dy >= 0:
            yd, ys = slice(dy, ny), slice(0, ny - dy)
        else:
            yd, ys = slice(0, ny + dy), slice(-dy, ny)
        for dx in dxs:
            if dx >= 0:
                xd, xs = slice(dx, nx), slice(0, nx - dx)
            else:
                xd, xs = slice(0, nx + dx), slice(-dx, nx)
            a = run_id[zd, yd, xd]
            b = run_id[zs, ys, xs]
            both = (a > 0) & (b > 0)
            if both.any():
                pairs.append(np.stack([a[both], b[both]], axis=1))
    parent = np.arange(n_runs + 1, dtype=np.int64)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    if pairs:
        edges = np.concatenate(pairs, axis=0)
        edges = np.unique(edges[:, 0] * (n_runs + 1) + edges[:, 1])
        for code in edges:
            ra, rb = find(int(code) // (n_runs + 1)), find(int(code) % (n_runs + 1))
            if ra != rb:
                if ra < rb:
                    parent[rb] = ra
                else:
                    parent[ra] = rb

    # runs were numbered in scan order, so assigning labels by ascending run id
    # of each root's first member matches first-encountered voxel order
    label_of_run = np.zeros(n_runs + 1, dtype=np.int32)
    next_label = 0
    root_label: dict[int, int] = {}
    for r in range(1, n_runs + 1):
        root = find(r)
        lab = root_label.get(root)
        if lab is None:
            next_label += 1
            lab = root_label[root] = next_label
        label_of_run[r] = lab
    labels = label_of_run[run_id]
    sizes = np.bincount(labels.ravel(), minlength=next_label + 1)[1:].astype(np.int64)
    return LabeledComponents(labels, next_label, sizes, m.spacing_mm, m.origin_mm)


def largest_component(lc: LabeledComponents) -> Mask:
    """Mask of the biggest component; ties go to the smallest label."""
    if lc.count == 0:
        raise ValueError("no components to select from")
    label = int(np.argmax(lc.sizes)) + 1
    return Mask(lc.labels == label, lc.spacing_mm, lc.origin_mm)


def extract_lung_mask(
    v: Volume,
    close_radius_mm: float = CLOSE_RADIUS_MM,
    threshold_hu: float = LUNG_THRESHOLD_HU,
    dilate_radius_mm: float = DILATE_RADIUS_MM,
) -> tuple[Mask, Mask]:
    """Threshold-based lung segmentation.

    Steps: binarize at the lung/tissue threshold and close narrow gaps; keep
    the largest above-threshold component as the body; mark air connected to
    the volume corners as background; take the largest remaining air component
    enclosed by the body as the lungs; dilate to catch the lung wall.

    Returns (dilated lung mask, ring), where ring is the shell added by the
    dilation.  Raises SegmentationFailure when no enclosed air region exists,
    in which case callers may skip masking for that scan.
    """
    if v.unit is not Unit.HOUNSFIELD:
        raise ValueError(f"segmentation expects a Hounsfield volume, got {v.unit}")
    solid = binarize(v, threshold_hu)
    closed = morphological_close(solid, close_radius_mm)
    solid_cc = connected_components(closed, connectivity=6)
    if solid_cc.count == 0:
        raise SegmentationFailure("no above-threshold region (empty body)")
    body = largest_component(solid_cc)

    air = body.with_bits(~body.bits)
    air_cc = connected_components(air, connectivity=6)
    nz, ny, nx = air.bits.shape
    corner_labels = set(
        int(air_cc.labels[z, y, x])
        for z in (0, nz - 1) for y in (0, ny - 1) for x in (0, nx - 1)
    ) - {0}
    candidate_sizes = air_cc.sizes.copy()
    for lab in corner_labels:
        candidate_sizes[lab - 1] = 0
    if candidate_sizes.max(initial=0) == 0:
        raise SegmentationFailure("no enclosed below-threshold region (no lungs found)")
    lung_label = int(np.argmax(candidate_sizes)) + 1
    lungs = Mask(air_cc.labels == lung_label, v.spacing_mm, v.origin_mm)

    dilated = morphological_dilate(lungs, dilate_radius_mm)
    ring = dilated.with_bits(dilated.bits & ~lungs.bits)
    return dilated, ring


def apply_mask_normalize(v: Volume, lung: Mask, ring: Mask) -> Volume:
    """Set everything outside the lung mask to the water value and suppress
    bone-bright voxels inside the dilation ring."""
    if v.unit is not Unit.LUMINANCE:
        raise ValueError(f"normalization expects a luminance volume, got {v.unit}")
    if lung.bits.shape != v.data.shape or ring.bits.shape != v.data.shape:
        raise ValueError("mask dimensions do not match the volume")
    out = np.where(lung.bits, v.data, np.float32(LUMINANCE_WATER))
    out = np.where(ring.bits & (out > LUMINANCE_BONE_CUTOFF), np.float32(LUMINANCE_WATER), out)
    return v.with_data(out.astype(np.float32), Unit.LUMINANCE)
