"""Nodule annotations, diagnosis label folding, and the CSV interchange formats."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .volume import WorldPoint

BENIGN = "benign"
BENIGN_MULTI = "benign_multinodular"
PRIMARY_LUNG = "primary_lung"
MELANOMA = "melanoma"
COLORECTAL = "colorectal"
UNLABELED = "unlabeled"
METASTASES = "metastases"
MALIGNANT = "malignant"

NODULE_CLASSES = (BENIGN, BENIGN_MULTI, PRIMARY_LUNG, MELANOMA, COLORECTAL, UNLABELED)

RELEVANT = "relevant"
IRRELEVANT = "irrelevant"

# detection protocol bounds: smaller findings are irrelevant, larger are masses
MIN_RELEVANT_DIAMETER_MM = 3.0
MAX_RELEVANT_DIAMETER_MM = 30.0


@dataclass(frozen=True)
class NoduleAnnotation:
    scan_id: str
    center: WorldPoint
    diameter_mm: float
    label: str = UNLABELED
    malignancy: float | None = None
    relevance: str = RELEVANT

    def __post_init__(self):
        if self.diameter_mm <= 0:
            raise ValueError(f"diameter must be positive, got {self.diameter_mm}")
        if self.label not in NODULE_CLASSES:
            raise ValueError(f"unknown label {self.label!r}")
        if self.relevance not in (RELEVANT, IRRELEVANT):
            raise ValueError(f"unknown relevance {self.relevance!r}")
        if self.malignancy is not None and not (1.0 <= self.malignancy <= 5.0):
            raise ValueError(f"malignancy must be in [1, 5], got {self.malignancy}")

    @property
    def radius_mm(self) -> float:
        return self.diameter_mm / 2.0


def fold_three(label: str) -> str:
    """Five generator classes -> benign / primary_lung / metastases."""
    if label in (BENIGN, BENIGN_MULTI):
        return BENIGN
    if label == PRIMARY_LUNG:
        return PRIMARY_LUNG
    if label in (MELANOMA, COLORECTAL):
        return METASTASES
    raise ValueError(f"cannot fold label {label!r}")


def fold_two(label: str) -> str:
    """Five generator classes -> benign / malignant."""
    return BENIGN if fold_three(label) == BENIGN else MALIGNANT


def eligible_for_detection(a: NoduleAnnotation) -> bool:
    """Relevant and inside the 3 mm..3 cm band used for detection scoring."""
    return (a.relevance == RELEVANT
            and MIN_RELEVANT_DIAMETER_MM <= a.diameter_mm < MAX_RELEVANT_DIAMETER_MM)


ANNOTATION_FIELDS = ["scan_id", "x_mm", "y_mm", "z_mm", "diameter_mm",
                     "label", "malignancy", "relevance"]
CANDIDATE_FIELDS = ["scan_id", "x_mm", "y_mm", "z_mm"]


def save_annotations(annotations: list[NoduleAnnotation], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(ANNOTATION_FIELDS)
        for a in annotations:
            writer.writerow([
                a.scan_id,
                repr(a.center.x_mm), repr(a.center.y_mm), repr(a.center.z_mm),
                repr(a.diameter_mm), a.label,
                "" if a.malignancy is None else repr(a.malignancy),
                a.relevance,
            ])


def load_annotations(path: str | Path) -> list[NoduleAnnotation]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(NoduleAnnotation(
                scan_id=row["scan_id"],
                center=WorldPoint(float(row["x_mm"]), float(row["y_mm"]), float(row["z_mm"])),
                diameter_mm=float(row["diameter_mm"]),
                label=row["label"],
                malignancy=float(row["malignancy"]) if row["malignancy"] else None,
                relevance=row["relevance"],
            ))
    return out


def save_candidates(candidates: list[tuple[str, WorldPoint]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(CANDIDATE_FIELDS)
        for scan_id, p in candidates:
            writer.writerow([scan_id, repr(p.x_mm), repr(p.y_mm), repr(p.z_mm)])


def load_candidates(path: str | Path) -> dict[str, list[WorldPoint]]:
    out: dict[str, list[WorldPoint]] = {}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.setdefault(row["scan_id"], []).append(
                WorldPoint(float(row["x_mm"]), float(row["y_mm"]), float(row["z_mm"])))
    return out


def by_scan(annotations: list[NoduleAnnotation]) -> dict[str, list[NoduleAnnotation]]:
    out: dict[str, list[NoduleAnnotation]] = {}
    for a in annotations:
        out.setdefault(a.scan_id, []).append(a)
    return out
