"""Pipeline configuration: one JSON-serializable object with paper defaults.

A bare config mirrors the protocol constants: -320 HU lung threshold, 3/10 mm
morphology kernels, [-1200, 600] HU clipping, 8 mm prediction cells, 4 mm
training shift, 20 random + 40 candidate negatives per scan, at most 10 hard
negatives per scan, batch sizes 40/10 for the two scales, Adam at 1e-4, the
11-value C grid, and 10-fold cross-validation.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .svm import DEFAULT_C_GRID

SCALE_INPUT_DIMS = {"small32": (32, 32, 16), "large64": (64, 64, 32)}
SCALE_PATCH_MM = {"small32": (32.0, 32.0, 32.0), "large64": (64.0, 64.0, 64.0)}


def default_class_mix() -> dict[str, int]:
    return {
        "benign": 25,
        "benign_multinodular": 25,
        "primary_lung": 25,
        "melanoma": 12,
        "colorectal": 13,
    }


@dataclass
class PipelineConfig:
    # paths and global knobs
    out_dir: str = "run"
    corpus_dir: str = ""  # defaults to <out_dir>/corpus
    seed: int = 1234
    threads: int = 0  # 0 = leave BLAS threading alone

    # phantom corpus
    n_scans: int = 100
    class_mix: dict[str, int] = field(default_factory=default_class_mix)
    phantom_noise_sigma_hu: float = 12.0

    # preprocessing
    target_spacing_mm: tuple[float, float, float] = (1.0, 1.0, 2.0)
    lung_threshold_hu: float = -320.0
    close_radius_mm: float = 3.0
    dilate_radius_mm: float = 10.0

    # detector training
    n_train_scans: int = 80
    scales: tuple[str, ...] = ("small32", "large64")
    width_divisor: int = 8
    detector_steps: dict[str, int] = field(
        default_factory=lambda: {"small32": 350, "large64": 220})
    detector_hnm_steps: dict[str, int] = field(
        default_factory=lambda: {"small32": 150, "large64": 100})
    batch_size: dict[str, int] = field(default_factory=lambda: {"small32": 40, "large64": 10})
    learning_rate: float = 1e-4
    shift_limit_mm: float = 4.0
    n_random_negatives: int = 20
    n_candidate_negatives: int = 40
    hnm_enabled: bool = True
    hnm_threshold: float = 0.5
    hnm_max_per_scan: int = 10
    hnm_scale: str = "small32"
    infer_batch: dict[str, int] = field(default_factory=lambda: {"small32": 32, "large64": 8})
    cell_mm: float = 8.0
    detect_scans: str = "eval"  # eval | train | all

    # malignancy regression
    regressor_steps: int = 220
    regressor_batch: int = 40
    k_folds: int = 10
    regressor_scale: str = "small32"
    scale_range: tuple[float, float] = (0.8, 1.2)

    # classification
    views: tuple[str, ...] = ("conventional", "low_kev", "high_kev")
    aggregation: str = "max"  # max|min|mean|maxmin|minmin|meanmin
    c_grid: tuple[float, ...] = DEFAULT_C_GRID
    class_mode: str = "three"  # two | three
    classify_levels: tuple[str, ...] = ("nodule", "scan")
    inner_folds: int = 10
    svm_max_iter: int = 100_000

    # statistics
    n_perm: int = 199

    def __post_init__(self):
        if not self.corpus_dir:
            self.corpus_dir = str(Path(self.out_dir) / "corpus")

    def to_json(self) -> dict:
        d = dataclasses.asdict(self)
        for key, value in d.items():
            if isinstance(value, tuple):
                d[key] = list(value)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "PipelineConfig":
        kwargs = {}
        for f in dataclasses.fields(cls):
            if f.name not in d:
                continue
            value = d[f.name]
            if isinstance(value, list):
                value = tuple(value)
            kwargs[f.name] = value
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        return cls.from_json(json.loads(Path(path).read_text()))

    def save(self, path: str | Path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=2) + "\n")

    def config_hash(self) -> str:
        canon = json.dumps(self.to_json(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()
