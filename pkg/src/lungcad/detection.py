"""Whole-volume sliding-window prediction on an 8 mm cell grid, plus scale fusion.

Each grid cell whose center lies inside the (dilated) lung mask receives the
detector probability of the patch centered on it; all other cells stay 0.
Patches are run through the network in fixed-size zero-padded micro-batches so
the result is bit-identical no matter how cells are grouped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ModeMismatchError
from .nn import DETECTOR, ModelParams
from .sampling import batch_to_network_input, crop_at_voxel
from .volume import Mask, Unit, Volume, load_nvol, save_nvol

CELL_MM = 8.0

SCALE_SMALL = "small32"
SCALE_LARGE = "large64"
SCALE_FUSED = "fused"

_SCALE_BY_INPUT = {(32, 32, 16): SCALE_SMALL, (64, 64, 32): SCALE_LARGE}


@dataclass(frozen=True)
class ProbabilityMap:
    """Coarse per-cell nodule probabilities; cell (0,0,0) is centered at origin_mm."""

    prob: np.ndarray  # (gz, gy, gx), float32 in [0, 1]
    cell_mm: float
    origin_mm: tuple[float, float, float]
    scale_tag: str

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        gz, gy, gx = self.prob.shape
        return (gx, gy, gz)

    def cell_centers_mm(self, cells: np.ndarray) -> np.ndarray:
        """World centers of cells given as an (n, 3) array of (ix, iy, iz)."""
        return np.asarray(self.origin_mm) + np.asarray(cells, dtype=np.float64) * self.cell_mm

    def cell_boxes(self, cells: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        centers = self.cell_centers_mm(cells)
        half = self.cell_mm / 2.0
        return [(c - half, c + half) for c in centers]

    def cluster_centroid_mm(self, cells: np.ndarray) -> np.ndarray:
        return self.cell_centers_mm(cells).mean(axis=0)

    def same_geometry(self, other: "ProbabilityMap") -> bool:
        return (self.prob.shape == other.prob.shape
                and self.cell_mm == other.cell_mm
                and self.origin_mm == other.origin_mm)


def probability_grid_geometry(v: Volume, cell_mm: float):
    """Grid dims and origin (center of first cell) covering the volume extent."""
    box_lo = np.asarray(v.origin_mm) - np.asarray(v.spacing_mm) / 2.0
    gdims = tuple(max(1, int(math.ceil(e / cell_mm - 1e-9))) for e in v.extent_mm)
    origin = tuple(box_lo + cell_mm / 2.0)
    return gdims, origin


def scale_tag_for(model: ModelParams) -> str:
    return _SCALE_BY_INPUT.get(tuple(model.spec.input_dims),
                               "custom" + "x".join(map(str, model.spec.input_dims)))


def canonical_batch(model: ModelParams) -> int:
    """Fixed micro-batch per input size; GEMM shapes never depend on cell grouping."""
    voxels = int(np.prod(model.spec.input_dims))
    return 16 if voxels <= 32 * 32 * 16 else 4


def sliding_window_predict(
    model: ModelParams,
    v: Volume,
    lung: Mask,
    cell_mm: float = CELL_MM,
) -> ProbabilityMap:
    """Detector probabilities for every lung-masked cell of the volume.

    Cells are evaluated in fixed-size zero-padded micro-batches, so the map is
    bit-identical no matter how calls are scheduled; evaluating one cell at a
    time reproduces it exactly.
    """
    if model.mode != DETECTOR:
        raise ModeMismatchError(f"sliding window needs a detector model, got {model.mode}")
    if v.unit is not Unit.LUMINANCE:
        raise ValueError(f"prediction expects a luminance volume, got {v.unit}")
    if lung.bits.shape != v.data.shape:
        raise ValueError("lung mask does not match volume dimensions")
    (gx, gy, gz), origin = probability_grid_geometry(v, cell_mm)
    prob = np.zeros((gz, gy, gx), dtype=np.float32)

    ix, iy, iz = np.meshgrid(np.arange(gx), np.arange(gy), np.arange(gz), indexing="ij")
    centers = np.stack([ix, iy, iz], axis=-1).reshape(-1, 3).astype(np.float64)
    centers_mm = np.asarray(origin) + centers * cell_mm
    vox = np.floor((centers_mm - np.asarray(v.origin_mm)) / np.asarray(v.spacing_mm) + 0.5)
    nx, ny, nz = v.dims
    inb = ((vox >= 0).all(axis=1) & (vox[:, 0] < nx) & (vox[:, 1] < ny) & (vox[:, 2] < nz))
    vox = vox.astype(np.intp)
    in_mask = np.zeros(len(vox), dtype=bool)
    in_mask[inb] = lung.bits[vox[inb, 2], vox[inb, 1], vox[inb, 0]]
    sel = np.flatnonzero(in_mask)

    pdims = tuple(model.spec.input_dims)
    half = tuple(d // 2 for d in pdims)
    net = model.network()
    flat_prob = prob.reshape(-1)
    for lo in range(0, len(sel), batch):
        chunk = sel[lo:lo + batch]
        patches = [
            crop_at_voxel(v, tuple(int(vox[i, a]) - half[a] for a in range(3)), pdims)
            for i in chunk
        ]
        x = batch_to_network_input(patches)
        if x.shape[0] < batch:
            # zero-pad to the canonical batch shape so results do not depend
            # on how cells were grouped (GEMM output varies with batch width)
            pad = np.zeros((batch - x.shape[0], *x.shape[1:]), x.dtype)
            x = np.concatenate([x, pad], axis=0)
        out, _ = net.forward(model.tensors, x, "infer")
        # grid index order is (ix, iy, iz) flattened x-major; map back to (z,y,x) flat
        for j, i in enumerate(chunk):
            gxi, gyi, gzi = centers[i].astype(int)
            flat_prob[(gzi * gy + gyi) * gx + gxi] = out[j, 0]
    return ProbabilityMap(prob, float(cell_mm), tuple(origin), scale_tag_for(model))


def fuse_scales(maps: list[ProbabilityMap]) -> ProbabilityMap:
    """Element-wise average of per-scale posterior probabilities."""
    if not maps:
        raise ValueError("need at least one probability map to fuse")
    first = maps[0]
    for m in maps[1:]:
        if not first.same_geometry(m):
            raise ValueError("probability maps have mismatched grid geometry")
    if len(maps) == 1:
        return ProbabilityMap(first.prob.copy(), first.cell_mm, first.origin_mm, SCALE_FUSED)
    acc = np.mean(np.stack([m.prob for m in maps]), axis=0, dtype=np.float64)
    return ProbabilityMap(acc.astype(np.float32), first.cell_mm, first.origin_mm, SCALE_FUSED)


def save_probability_map(pm: ProbabilityMap, path: str | Path) -> None:
    vol = Volume(pm.prob, (pm.cell_mm,) * 3, pm.origin_mm, Unit.RAW)
    save_nvol(vol, path, extra={"scale_tag": pm.scale_tag})


def load_probability_map(path: str | Path) -> ProbabilityMap:
    vol, header = load_nvol(path)
    return ProbabilityMap(vol.data, vol.spacing_mm[0], vol.origin_mm,
                          header.get("scale_tag", "unknown"))
