"""Off-the-shelf CNN features, spectral concatenation, and bag aggregation.

The regression network's convolutional trunk embeds each nodule patch; per-view
vectors are concatenated in a fixed view order, bags of per-nodule vectors are
reduced to scan-level vectors either element-wise or through bag distances, and
everything is unit-normalized before the SVM.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import CorruptModelError, ModeMismatchError
from .nn import REGRESSOR, ModelParams
from .sampling import batch_to_network_input

VIEW_CONVENTIONAL = "conventional"
VIEW_LOW = "low_kev"
VIEW_HIGH = "high_kev"
VIEW_ORDER = (VIEW_CONVENTIONAL, VIEW_LOW, VIEW_HIGH)

ELEMENTWISE_FUNCS = ("max", "min", "mean")
DISTANCE_FUNCS = ("maxmin", "minmin", "meanmin")

_FEATURE_BATCH = 16  # canonical micro-batch; keeps features independent of grouping


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    view_tags: tuple[str, ...] = (VIEW_CONVENTIONAL,)
    degenerate: bool = False

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 1 or not np.isfinite(v).all():
            raise ValueError("feature vector must be 1-D and finite")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "view_tags", tuple(self.view_tags))

    def __len__(self) -> int:
        return len(self.values)


@dataclass
class FeatureBag:
    """All per-nodule feature vectors of one scan, plus the scan's diagnosis."""

    scan_id: str
    vectors: list[FeatureVector]
    scan_label: str = ""

    def __post_init__(self):
        if not self.vectors:
            raise ValueError(f"bag for scan {self.scan_id!r} is empty")
        lengths = {len(v) for v in self.vectors}
        if len(lengths) != 1:
            raise ValueError(f"bag for scan {self.scan_id!r} mixes vector lengths {lengths}")

    @property
    def matrix(self) -> np.ndarray:
        return np.stack([v.values for v in self.vectors])


def extract_features(model: ModelParams, patch: np.ndarray,
                     view: str = VIEW_CONVENTIONAL) -> FeatureVector:
    """Convolutional-trunk embedding of one luminance patch (dense layers excluded)."""
    return extract_features_batch(model, [patch], view)[0]


def extract_features_batch(model: ModelParams, patches: list[np.ndarray],
                           view: str = VIEW_CONVENTIONAL) -> list[FeatureVector]:
    if model.mode != REGRESSOR:
        raise ModeMismatchError(f"feature extraction needs a regressor model, got {model.mode}")
    net = model.network()
    out: list[FeatureVector] = []
    for lo in range(0, len(patches), _FEATURE_BATCH):
        chunk = patches[lo:lo + _FEATURE_BATCH]
        x = batch_to_network_input(chunk)
        if x.shape[0] < _FEATURE_BATCH:
            x = np.concatenate(
                [x, np.zeros((_FEATURE_BATCH - x.shape[0], *x.shape[1:]), x.dtype)], axis=0)
        feats = net.forward_features(model.tensors, x)
        out.extend(FeatureVector(feats[i], (view,)) for i in range(len(chunk)))
    return out


def concat_spectral(per_view: list[FeatureVector],
                    expected_order: tuple[str, ...] = VIEW_ORDER) -> FeatureVector:
    """Concatenate per-view vectors; the view order is a fixed contract."""
    if not per_view:
        raise ValueError("nothing to concatenate")
    tags = tuple(tag for fv in per_view for tag in fv.view_tags)
    if tags != tuple(expected_order[:len(tags)]):
        raise ValueError(f"views arrived as {tags}, expected prefix of {expected_order}")
    lengths = {len(fv) for fv in per_view}
    if len(lengths) != 1:
        raise ValueError(f"per-view lengths differ: {lengths}")
    if len(per_view) == 1:
        return per_view[0]
    return FeatureVector(np.concatenate([fv.values for fv in per_view]), tags)


def aggregate_elementwise(bag: FeatureBag, func: str = "max") -> FeatureVector:
    """Per-dimension reduction of a bag into one scan-level vector."""
    if func not in ELEMENTWISE_FUNCS:
        raise ValueError(f"func must be one of {ELEMENTWISE_FUNCS}, got {func!r}")
    m = bag.matrix
    reduced = {"max": m.max, "min": m.min, "mean": m.mean}[func](axis=0)
    return FeatureVector(reduced, bag.vectors[0].view_tags)


def bag_distance(bag_i: FeatureBag, bag_j: FeatureBag, func: str = "max") -> float:
    """min-distance from each member of bag_i into bag_j, reduced by func.

    Asymmetric in general; the self-distance under min (and mean) is 0.
    """
    if func not in ELEMENTWISE_FUNCS:
        raise ValueError(f"func must be one of {ELEMENTWISE_FUNCS}, got {func!r}")
    a, b = bag_i.matrix, bag_j.matrix
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"vector lengths differ: {a.shape[1]} vs {b.shape[1]}")
    d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
    mins = np.sqrt(np.maximum(d2, 0.0)).min(axis=1)
    return float({"max": np.max, "min": np.min, "mean": np.mean}[func](mins))


def dissimilarity_matrix(bags: list[FeatureBag], prototypes: list[FeatureBag],
                         func: str = "max") -> np.ndarray:
    """Row per bag, column per prototype bag, entry = bag_distance."""
    if not prototypes:
        raise ValueError("prototype list is empty")
    out = np.zeros((len(bags), len(prototypes)))
    for i, b in enumerate(bags):
        for j, p in enumerate(prototypes):
            out[i, j] = bag_distance(b, p, func)
    return out


def normalize_unit(fv: FeatureVector) -> FeatureVector:
    """Scale to unit Euclidean length; the zero vector passes through flagged."""
    norm = float(np.linalg.norm(fv.values))
    if norm == 0.0:
        return FeatureVector(fv.values, fv.view_tags, degenerate=True)
    return FeatureVector(fv.values / norm, fv.view_tags)


# --- feature store ----------------------------------------------------------

_STORE_MAGIC = b"NFEA1\x00"


def save_feature_store(path: str | Path, view: str, rows: list[tuple[str, int]],
                       matrix: np.ndarray) -> None:
    """Binary feature table: magic, JSON header, f32le rows."""
    if matrix.ndim != 2 or matrix.shape[0] != len(rows):
        raise ValueError("matrix must be (n_rows, dim) aligned with row metadata")
    header = json.dumps({
        "view": view,
        "dim": matrix.shape[1],
        "rows": [{"scan_id": sid, "nodule_idx": idx} for sid, idx in rows],
    }, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(_STORE_MAGIC)
        f.write(np.array(len(header), dtype="<u4").tobytes())
        f.write(header)
        f.write(np.ascontiguousarray(matrix, dtype="<f4").tobytes())


def load_feature_store(path: str | Path) -> tuple[str, list[tuple[str, int]], np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:len(_STORE_MAGIC)] != _STORE_MAGIC:
        raise CorruptModelError(f"{path}: bad feature store magic")
    hlen = int(np.frombuffer(blob, dtype="<u4", count=1, offset=len(_STORE_MAGIC))[0])
    start = len(_STORE_MAGIC) + 4
    header = json.loads(blob[start:start + hlen].decode())
    rows = [(r["scan_id"], r["nodule_idx"]) for r in header["rows"]]
    n, dim = len(rows), header["dim"]
    data = np.frombuffer(blob, dtype="<f4", count=n * dim, offset=start + hlen)
    if data.size != n * dim:
        raise CorruptModelError(f"{path}: truncated feature payload")
    return header["view"], rows, data.reshape(n, dim).astype(np.float64)
