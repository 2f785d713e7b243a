"""Command-line entry points for the pipeline stages.

Subcommands run one stage each and are composable: each stage reads only files
written by earlier stages.  `--threads` must take effect before numpy loads
its BLAS, so heavy imports happen lazily inside main().
"""

from __future__ import annotations

import argparse
import os
import sys

STAGES = [
    ("phantom", "generate the synthetic corpus"),
    ("preprocess", "resample, normalize intensities, extract lung masks"),
    ("train-detector", "train the detection network(s), with hard negative mining"),
    ("detect", "sliding-window probability maps per scale plus fusion"),
    ("froc", "FROC curves and operating-point summaries"),
    ("train-regressor", "malignancy regression with grouped cross-validation"),
    ("extract-features", "per-view feature stores from the regressor trunk"),
    ("classify", "nodule- and scan-level SVM classification"),
    ("stats", "permutation tests and the paired t-test across folds"),
    ("run-all", "run every stage in order"),
]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lungcad",
        description="Lung nodule detection and tumor-origin classification on CT phantoms.")
    parser.add_argument("--config", help="JSON config file (defaults are used otherwise)")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out-dir", help="override the output directory")
    parser.add_argument("--threads", type=int,
                        help="BLAS/OpenMP thread count (0 leaves the default)")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in STAGES:
        sub.add_parser(name, help=help_text)
    return parser


def _apply_thread_env(threads: int | None) -> None:
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(threads)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _apply_thread_env(args.threads)

    from .config import PipelineConfig
    from . import pipeline

    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    if args.out_dir is not None:
        from pathlib import Path
        old_out = cfg.out_dir
        cfg.out_dir = args.out_dir
        if cfg.corpus_dir == str(Path(old_out) / "corpus"):
            cfg.corpus_dir = str(Path(args.out_dir) / "corpus")
    if args.threads is not None:
        cfg.threads = args.threads

    stages = {
        "phantom": pipeline.stage_phantom,
        "preprocess": pipeline.stage_preprocess,
        "train-detector": pipeline.stage_train_detector,
        "detect": pipeline.stage_detect,
        "froc": pipeline.stage_froc,
        "train-regressor": pipeline.stage_train_regressor,
        "extract-features": pipeline.stage_extract_features,
        "classify": pipeline.stage_classify,
        "stats": pipeline.stage_stats,
    }
    try:
        if args.command == "run-all":
            for name, _ in STAGES[:-1]:
                print(f"[lungcad] stage {name}", flush=True)
                stages[name](cfg)
        else:
            stages[args.command](cfg)
    except FileNotFoundError as e:
        print(f"error: missing input: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # surfaced with a clean exit code for scripting
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
