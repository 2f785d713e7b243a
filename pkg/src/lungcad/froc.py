"""FROC evaluation: threshold sweep, cluster/annotation matching, sensitivity curve.

A predicted cluster counts a nodule as detected when any of its cell boxes
intersects the annotation sphere.  Clusters touching only irrelevant findings
are ignored: they are neither detections nor false positives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .annotations import IRRELEVANT, NoduleAnnotation, eligible_for_detection
from .detection import ProbabilityMap
from .sampling import sphere_box_overlap
from .segmentation import Mask, connected_components

FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
MAX_SWEEP_THRESHOLDS = 512


@dataclass(frozen=True)
class Cluster:
    cells: np.ndarray  # (n, 3) grid indices (ix, iy, iz), scan order
    peak: float


@dataclass(frozen=True)
class MatchResult:
    detected_ids: frozenset[int]  # indices into the relevant annotations of the scan
    fp_clusters: int
    ignored_clusters: int


@dataclass(frozen=True)
class FrocCurve:
    points: list[tuple[float, float, float]]  # (threshold, fp_per_scan, sensitivity)
    n_scans: int
    n_nodules: int


def cluster_predictions(pm: ProbabilityMap, threshold: float) -> list[Cluster]:
    """Cells with probability >= threshold, grouped by 26-connectivity."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must be in [0, 1], got {threshold}")
    bits = pm.prob >= threshold
    lc = connected_components(Mask(bits, (pm.cell_mm,) * 3, pm.origin_mm), connectivity=26)
    clusters = []
    for label in range(1, lc.count + 1):
        zz, yy, xx = np.nonzero(lc.labels == label)
        cells = np.stack([xx, yy, zz], axis=1)
        clusters.append(Cluster(cells, float(pm.prob[zz, yy, xx].max())))
    return clusters


def match_clusters(clusters: list[Cluster], annotations: list[NoduleAnnotation],
                   pm: ProbabilityMap) -> MatchResult:
    """Apply the detection/false-positive/ignored rules for one scan."""
    relevant = [a for a in annotations if eligible_for_detection(a)]
    irrelevant = [a for a in annotations if a.relevance == IRRELEVANT]
    detected: set[int] = set()
    fp = 0
    ignored = 0
    for cl in clusters:
        boxes = pm.cell_boxes(cl.cells)

        def hits(ann) -> bool:
            c, r = ann.center.as_array(), ann.radius_mm
            return any(sphere_box_overlap(c, r, lo, hi) for lo, hi in boxes)

        hit_ids = [i for i, a in enumerate(relevant) if hits(a)]
        if hit_ids:
            detected.update(hit_ids)
        elif any(hits(a) for a in irrelevant):
            ignored += 1
        else:
            fp += 1
    return MatchResult(frozenset(detected), fp, ignored)


def sweep_thresholds(maps: list[ProbabilityMap]) -> list[float]:
    """Unique cell probabilities (quantile-capped) plus {0, 1}, descending."""
    values = np.unique(np.concatenate([m.prob.reshape(-1) for m in maps]))
    if len(values) > MAX_SWEEP_THRESHOLDS:
        idx = np.round(np.linspace(0, len(values) - 1, MAX_SWEEP_THRESHOLDS)).astype(int)
        values = values[idx]
    values = np.union1d(values, [0.0, 1.0])
    values = np.clip(values, 0.0, 1.0)
    return sorted(set(float(t) for t in values), reverse=True)


def froc_curve(maps: list[ProbabilityMap], annotations_per_scan: list[list[NoduleAnnotation]],
               thresholds: list[float]) -> FrocCurve:
    """Pooled sensitivity and mean FP count per scan across a threshold sweep."""
    if not maps or len(maps) != len(annotations_per_scan):
        raise ValueError("need one annotation list per probability map")
    n_scans = len(maps)
    n_nodules = sum(
        sum(1 for a in anns if eligible_for_detection(a)) for anns in annotations_per_scan)
    if n_nodules == 0:
        raise ValueError("no relevant nodules anywhere; sensitivity is undefined")
    points = []
    for t in sorted(set(thresholds), reverse=True):
        total_detected = 0
        total_fp = 0
        for pm, anns in zip(maps, annotations_per_scan):
            res = match_clusters(cluster_predictions(pm, t), anns, pm)
            total_detected += len(res.detected_ids)
            total_fp += res.fp_clusters
        points.append((float(t), total_fp / n_scans, total_detected / n_nodules))
    return FrocCurve(points, n_scans, n_nodules)


def _fp_sens_envelope(curve: FrocCurve) -> tuple[np.ndarray, np.ndarray]:
    if not curve.points:
        raise ValueError("empty FROC curve")
    fps = np.array([p[1] for p in curve.points])
    sens = np.array([p[2] for p in curve.points])
    order = np.argsort(fps, kind="stable")
    fps, sens = fps[order], sens[order]
    # collapse duplicate fp rates to their best sensitivity
    uniq, inverse = np.unique(fps, return_inverse=True)
    best = np.zeros(len(uniq))
    np.maximum.at(best, inverse, sens)
    if uniq[0] > 0.0:
        uniq = np.concatenate([[0.0], uniq])
        best = np.concatenate([[0.0], best])
    return uniq, best


def sensitivity_at(curve: FrocCurve, fp_rate: float) -> float:
    """Sensitivity at an FP/scan operating point, linearly interpolated.

    Queries beyond the measured range clamp to the last sensitivity; queries
    below the smallest measured rate interpolate down to (0, 0).
    """
    if fp_rate < 0:
        raise ValueError(f"fp rate must be >= 0, got {fp_rate}")
    fps, sens = _fp_sens_envelope(curve)
    return float(np.interp(fp_rate, fps, sens))


def average_sensitivity(curve: FrocCurve, rates: tuple[float, ...] = FP_RATES) -> float:
    """Mean sensitivity over the standard FP/scan operating points."""
    return float(np.mean([sensitivity_at(curve, r) for r in rates]))


def save_froc_csv(curve: FrocCurve, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["threshold,fp_per_scan,sensitivity"]
    lines += [f"{t!r},{fp!r},{s!r}" for t, fp, s in curve.points]
    path.write_text("\n".join(lines) + "\n")


def save_froc_summary(curve: FrocCurve, path: str | Path,
                      rates: tuple[float, ...] = FP_RATES) -> dict:
    summary = {
        "n_scans": curve.n_scans,
        "n_nodules": curve.n_nodules,
        "fp_rates": list(rates),
        "sensitivities": [sensitivity_at(curve, r) for r in rates],
        "average_sensitivity": average_sensitivity(curve, rates),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, sort_keys=True, indent=2) + "\n")
    return summary
