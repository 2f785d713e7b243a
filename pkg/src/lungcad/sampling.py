"""Patch cropping, augmentation, and training sample selection.

Patches are numpy arrays of shape (nx, ny, nz) holding luminance values in
[0, 255]; regions outside the source volume are filled with the water value
170 so border patches look like masked background.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .annotations import RELEVANT, NoduleAnnotation
from .volume import LUMINANCE_WATER, Mask, Volume, WorldPoint, trilinear_at_points

log = logging.getLogger(__name__)

POSITIVE = "positive"
RANDOM_NEGATIVE = "random_negative"
CANDIDATE_NEGATIVE = "candidate_negative"
HARD_NEGATIVE = "hard_negative"

SHIFT_LIMIT_MM = 4.0  # training shift bound, half the prediction cell size
PATCH_SIZE_SMALL_MM = (32.0, 32.0, 32.0)
PATCH_SIZE_LARGE_MM = (64.0, 64.0, 64.0)


@dataclass(frozen=True)
class PatchSample:
    patch: np.ndarray
    label: float
    provenance: str
    scan_id: str = ""
    center: WorldPoint | None = None


def patch_dims(v: Volume, size_mm: tuple[float, float, float]) -> tuple[int, int, int]:
    return tuple(max(1, int(math.floor(s / sp + 0.5)))
                 for s, sp in zip(size_mm, v.spacing_mm))


def crop_patch(v: Volume, center: WorldPoint, size_mm: tuple[float, float, float],
               fill: float = LUMINANCE_WATER) -> np.ndarray:
    """Nearest-voxel crop centered on a world point, padded with `fill`."""
    if any(s <= 0 for s in size_mm):
        raise ValueError(f"patch size must be positive, got {size_mm}")
    dims = patch_dims(v, size_mm)
    cx, cy, cz = v.voxel_at(center)
    start = (cx - dims[0] // 2, cy - dims[1] // 2, cz - dims[2] // 2)
    return crop_at_voxel(v, start, dims, fill)


def crop_at_voxel(v: Volume, start: tuple[int, int, int], dims: tuple[int, int, int],
                  fill: float = LUMINANCE_WATER) -> np.ndarray:
    """Crop dims voxels beginning at `start` (may exceed bounds on any side)."""
    nx, ny, nz = v.dims
    lo = [max(0, s) for s in start]
    hi = [min(n, s + d) for s, d, n in zip(start, dims, (nx, ny, nz))]
    if any(l >= h for l, h in zip(lo, hi)):
        raise ValueError(f"crop at {start} size {dims} lies outside the volume")
    out = np.full(dims, np.float32(fill), dtype=np.float32)
    block = v.data[lo[2]:hi[2], lo[1]:hi[1], lo[0]:hi[0]]  # (z, y, x)
    out[lo[0] - start[0]:hi[0] - start[0],
        lo[1] - start[1]:hi[1] - start[1],
        lo[2] - start[2]:hi[2] - start[2]] = block.transpose(2, 1, 0)
    return out


def patch_box_mm(v: Volume, center: WorldPoint,
                 size_mm: tuple[float, float, float]) -> tuple[np.ndarray, np.ndarray]:
    """World-space axis-aligned box that crop_patch would cover (voxel-snapped)."""
    dims = patch_dims(v, size_mm)
    cvox = v.voxel_at(center)
    start = np.array([c - d // 2 for c, d in zip(cvox, dims)], dtype=np.float64)
    origin = np.asarray(v.origin_mm)
    spacing = np.asarray(v.spacing_mm)
    lo = origin + (start - 0.5) * spacing
    hi = origin + (start + np.asarray(dims) - 0.5) * spacing
    return lo, hi


def sphere_box_overlap(center_mm: np.ndarray, radius_mm: float,
                       box_lo: np.ndarray, box_hi: np.ndarray) -> bool:
    """Closed-set intersection test between a sphere and an axis-aligned box."""
    nearest = np.clip(center_mm, box_lo, box_hi)
    return float(np.sum((nearest - center_mm) ** 2)) <= radius_mm * radius_mm


def sphere_in_box(center_mm: np.ndarray, radius_mm: float,
                  box_lo: np.ndarray, box_hi: np.ndarray) -> bool:
    return bool(np.all(center_mm - radius_mm >= box_lo) and
                np.all(center_mm + radius_mm <= box_hi))


def augment_flip(patch: np.ndarray, code: int) -> np.ndarray:
    """Reverse axes by bitmask: bit 0 flips x, bit 1 flips y, bit 2 flips z."""
    if not 0 <= code < 8:
        raise ValueError(f"flip code must be in 0..7, got {code}")
    axes = [a for a in range(3) if code >> a & 1]
    return np.ascontiguousarray(np.flip(patch, axes)) if axes else patch


def augment_affine(patch: np.ndarray, rotation_deg: float, scale: float,
                   fill: float = LUMINANCE_WATER) -> np.ndarray:
    """Rotate about the z axis and scale isotropically, both about the patch center.

    The output grid samples the input at center + scale * R(angle) * offset, so
    scale < 1 magnifies content (a ball of radius r becomes radius r / scale).
    """
    if not 0.5 <= scale <= 1.5:
        raise ValueError(f"scale must be within [0.5, 1.5], got {scale}")
    nx, ny, nz = patch.shape
    cx, cy, cz = (nx - 1) / 2.0, (ny - 1) / 2.0, (nz - 1) / 2.0
    theta = math.radians(rotation_deg)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    px = np.arange(nx)[:, None, None] - cx
    py = np.arange(ny)[None, :, None] - cy
    pz = np.arange(nz)[None, None, :] - cz
    fx = cx + scale * (cos_t * px - sin_t * py)
    fy = cy + scale * (sin_t * px + cos_t * py)
    fz = cz + scale * pz
    fx, fy, fz = np.broadcast_arrays(fx, fy, fz)
    out = trilinear_at_points(patch.transpose(2, 1, 0), fx, fy, fz, fill)
    return out.astype(patch.dtype)


def sample_positives(
    v: Volume,
    annotations: list[NoduleAnnotation],
    rng: np.random.Generator,
    size_mm: tuple[float, float, float] = PATCH_SIZE_SMALL_MM,
    per_nodule: int = 1,
    regression: bool = False,
    shift_mm: float = SHIFT_LIMIT_MM,
    max_attempts: int = 100,
) -> list[PatchSample]:
    """Crops around each relevant nodule; the nodule sphere always fits inside.

    Detection draws a uniform shift up to ``shift_mm`` per axis and re-draws
    until the sphere is contained; regression crops are centered and labeled
    with the nodule's malignancy.
    """
    out = []
    for a in annotations:
        if a.relevance != RELEVANT:
            continue
        if regression and a.malignancy is None:
            log.warning("skipping %s nodule without malignancy score", a.scan_id)
            continue
        c = a.center.as_array()
        for _ in range(per_nodule):
            placed = False
            for _ in range(max_attempts):
                if regression or shift_mm <= 0:
                    shift = np.zeros(3)
                else:
                    shift = rng.uniform(-shift_mm, shift_mm, size=3)
                crop_center = WorldPoint(*(c + shift))
                lo, hi = patch_box_mm(v, crop_center, size_mm)
                if sphere_in_box(c, a.radius_mm, lo, hi):
                    patch = crop_patch(v, crop_center, size_mm)
                    label = float(a.malignancy) if regression else 1.0
                    out.append(PatchSample(patch, label, POSITIVE, a.scan_id, crop_center))
                    placed = True
                    break
            if not placed:
                log.warning("nodule at %s (d=%.1f mm) does not fit a %s mm patch; skipped",
                            a.center, a.diameter_mm, size_mm)
                break
    return out


def _patch_overlaps_any(v: Volume, center: WorldPoint, size_mm,
                        annotations: list[NoduleAnnotation]) -> bool:
    lo, hi = patch_box_mm(v, center, size_mm)
    return any(sphere_box_overlap(a.center.as_array(), a.radius_mm, lo, hi)
               for a in annotations)


def sample_negative_centers(
    v: Volume,
    lung: Mask,
    candidates: list[WorldPoint],
    annotations: list[NoduleAnnotation],
    rng: np.random.Generator,
    n_random: int = 20,
    n_candidate: int = 40,
    size_mm: tuple[float, float, float] = PATCH_SIZE_SMALL_MM,
) -> list[tuple[WorldPoint, str]]:
    """Accepted negative crop centers with their provenance, patches not yet cut."""
    out: list[tuple[WorldPoint, str]] = []
    in_lung = np.flatnonzero(lung.bits.reshape(-1))
    nz, ny, nx = lung.bits.shape
    if in_lung.size and n_random > 0:
        found = 0
        for _ in range(50 * n_random):
            flat = int(in_lung[rng.integers(in_lung.size)])
            iz, rem = divmod(flat, ny * nx)
            iy, ix = divmod(rem, nx)
            center = v.world_at(ix, iy, iz)
            if _patch_overlaps_any(v, center, size_mm, annotations):
                continue
            out.append((center, RANDOM_NEGATIVE))
            found += 1
            if found >= n_random:
                break
        if found < n_random:
            log.warning("only %d/%d random negatives found", found, n_random)
    order = rng.permutation(len(candidates))
    taken = 0
    for i in order:
        if taken >= n_candidate:
            break
        center = candidates[int(i)]
        lo = [int(c) for c in v.voxel_at(center)]
        if not v.in_bounds(*lo):
            continue
        if _patch_overlaps_any(v, center, size_mm, annotations):
            continue
        out.append((center, CANDIDATE_NEGATIVE))
        taken += 1
    if taken < n_candidate and candidates:
        log.warning("only %d/%d candidate negatives available", taken, n_candidate)
    return out


def sample_negatives(
    v: Volume,
    lung: Mask,
    candidates: list[WorldPoint],
    annotations: list[NoduleAnnotation],
    rng: np.random.Generator,
    n_random: int = 20,
    n_candidate: int = 40,
    size_mm: tuple[float, float, float] = PATCH_SIZE_SMALL_MM,
) -> list[PatchSample]:
    """Negatives from random in-lung locations and from the candidate list.

    Every accepted patch box has no overlap with any annotation sphere; when
    the candidate list cannot supply enough clean samples the shortfall is
    logged and whatever exists is returned.
    """
    centers = sample_negative_centers(v, lung, candidates, annotations, rng,
                                      n_random, n_candidate, size_mm)
    return [PatchSample(crop_patch(v, c, size_mm), 0.0, prov, "", c)
            for c, prov in centers]


def mine_hard_negatives(
    model,
    v: Volume,
    lung: Mask,
    annotations: list[NoduleAnnotation],
    threshold: float = 0.5,
    max_per_scan: int = 10,
    cell_mm: float = 8.0,
    size_mm: tuple[float, float, float] = PATCH_SIZE_SMALL_MM,
    batch: int = 32,
) -> list[PatchSample]:
    """False-positive locations of the current detector, ranked by peak probability.

    Runs sliding-window prediction, clusters cells above the threshold, drops
    clusters overlapping any given annotation, and emits patches at the
    centroids of the strongest remaining clusters.
    """
    from .detection import sliding_window_predict
    from .froc import cluster_predictions

    pm = sliding_window_predict(model, v, lung, cell_mm=cell_mm, batch=batch)
    clusters = cluster_predictions(pm, threshold)
    fp = []
    for cl in clusters:
        boxes = pm.cell_boxes(cl.cells)
        hit = any(
            any(sphere_box_overlap(a.center.as_array(), a.radius_mm, lo, hi)
                for lo, hi in boxes)
            for a in annotations
        )
        if not hit:
            fp.append(cl)
    fp.sort(key=lambda cl: (-cl.peak, cl.cells[0]))
    out = []
    for cl in fp[:max_per_scan]:
        center = WorldPoint(*pm.cluster_centroid_mm(cl.cells))
        try:
            patch = crop_patch(v, center, size_mm)
        except ValueError:
            continue
        out.append(PatchSample(patch, 0.0, HARD_NEGATIVE, "", center))
    return out


def make_balanced_batches(pos: list[PatchSample], neg: list[PatchSample],
                          batch_size: int, rng: np.random.Generator):
    """Endless iterator of half-positive/half-negative batches.

    Each pool is consumed in reshuffled passes; the smaller pool simply cycles
    more often, so scarce positives repeat within an epoch of negatives.
    """
    if batch_size % 2:
        raise ValueError(f"batch size must be even, got {batch_size}")
    if not pos or not neg:
        raise ValueError("both sample pools must be non-empty")

    def cycler(pool):
        while True:
            for i in rng.permutation(len(pool)):
                yield pool[int(i)]

    pos_iter, neg_iter = cycler(pos), cycler(neg)
    half = batch_size // 2

    def generator():
        while True:
            batch = [next(pos_iter) for _ in range(half)]
            batch += [next(neg_iter) for _ in range(half)]
            order = rng.permutation(batch_size)
            yield [batch[int(i)] for i in order]

    return generator()


def batch_to_network_input(patches: list[np.ndarray], dtype=np.float32) -> np.ndarray:
    """Stack patches into (B, X, Y, Z, 1) and map [0, 255] onto [0, 1]."""
    arr = np.stack(patches).astype(dtype)
    return arr[..., None] / dtype(255.0)
