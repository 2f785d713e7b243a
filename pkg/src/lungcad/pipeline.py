"""Stage implementations wiring the full pipeline.

Stages communicate only through files under the configured output directory:

    corpus/      phantom volumes, lung truth, annotation/candidate CSVs, manifest
    processed/   luminance volumes (masked + normalized) and dilated lung masks
    models/      detector per scale, malignancy regressor (NCAD1 containers)
    maps/        probability maps per scan per scale plus the fused map
    froc/        FROC curve CSVs and operating-point summaries
    features/    one feature store per view
    reports/     regression/classification/stats reports and prediction CSVs
    provenance/  per-stage config hash + seed records

Every stage derives its RNG streams from (config.seed, stage tag), so any stage
can be rerun in isolation and reproduces its outputs byte for byte.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .annotations import (
    NoduleAnnotation, RELEVANT, by_scan, fold_three, fold_two, load_annotations,
    load_candidates,
)
from .config import SCALE_INPUT_DIMS, SCALE_PATCH_MM, PipelineConfig
from .detection import (
    SCALE_FUSED, fuse_scales, load_probability_map, save_probability_map,
    sliding_window_predict,
)
from .errors import SegmentationFailure
from .features import (
    FeatureBag, FeatureVector, aggregate_elementwise, concat_spectral,
    dissimilarity_matrix, extract_features_batch, load_feature_store,
    normalize_unit, save_feature_store,
)
from .froc import froc_curve, save_froc_csv, save_froc_summary, sweep_thresholds
from .metrics import (
    confusion_matrix, accuracy, f1_macro, kfold_splits, mae, one_off_accuracy,
    paired_t_test, permutation_test,
)
from .nn import (
    BCE, DETECTOR, REGRESSOR, SQUARED_ERROR, AdamState, ModelParams, NetworkSpec,
    adam_step, load_model, loss_and_gradients, save_model,
)
from .phantom import PhantomSpec, generate_corpus, load_manifest
from .sampling import (
    augment_affine, augment_flip, batch_to_network_input, crop_patch,
    mine_hard_negatives, sample_negative_centers, sample_positives,
)
from .segmentation import apply_mask_normalize, extract_lung_mask
from .svm import select_C, svm_train_ovr
from .volume import Mask, Volume, WorldPoint, clip_and_rescale, load_mask_nvol, \
    load_nvol, resample, save_mask_nvol, save_nvol

log = logging.getLogger(__name__)

VIEWS_ALL = ("conventional", "low_kev", "high_kev")
EXPERIMENTS = ("conventional", "conv_spectral")

# stage tags for seed derivation
_SEED_SAMPLING = 11
_SEED_TRAIN = 12
_SEED_REGRESSOR = 13
_SEED_FOLDS = 14
_SEED_CLASSIFY = 15
_SEED_STATS = 16


# --- shared helpers ---------------------------------------------------------

def _out(cfg: PipelineConfig, *parts: str) -> Path:
    p = Path(cfg.out_dir).joinpath(*parts)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def write_provenance(cfg: PipelineConfig, stage: str) -> None:
    record = {
        "stage": stage,
        "config_sha256": cfg.config_hash(),
        "seed": cfg.seed,
        "lungcad_version": __version__,
        "numpy_version": np.__version__,
    }
    _out(cfg, "provenance", f"{stage}.json").write_text(
        json.dumps(record, sort_keys=True, indent=2) + "\n")


def corpus_scan_ids(cfg: PipelineConfig) -> list[str]:
    manifest = load_manifest(cfg.corpus_dir)
    return [s["scan_id"] for s in manifest["scans"]]


def train_eval_split(cfg: PipelineConfig) -> tuple[list[str], list[str]]:
    ids = corpus_scan_ids(cfg)
    return ids[:cfg.n_train_scans], ids[cfg.n_train_scans:]


def scans_for_detection(cfg: PipelineConfig) -> list[str]:
    train, eval_ = train_eval_split(cfg)
    return {"eval": eval_, "train": train, "all": train + eval_}[cfg.detect_scans]


def scan_diagnoses(cfg: PipelineConfig) -> dict[str, str]:
    manifest = load_manifest(cfg.corpus_dir)
    return {s["scan_id"]: s["diagnosis"] for s in manifest["scans"]}


def processed_volume_path(cfg: PipelineConfig, scan_id: str, view: str) -> Path:
    return _out(cfg, "processed", f"{scan_id}_{view}.nvol")


def lung_mask_path(cfg: PipelineConfig, scan_id: str) -> Path:
    return _out(cfg, "processed", f"{scan_id}_lung.nvol")


def load_processed(cfg: PipelineConfig, scan_id: str, view: str = "conventional"):
    vol, _ = load_nvol(processed_volume_path(cfg, scan_id, view))
    return vol


def _corpus_annotations(cfg: PipelineConfig) -> dict[str, list[NoduleAnnotation]]:
    return by_scan(load_annotations(Path(cfg.corpus_dir) / "annotations.csv"))


def _relevant(anns: list[NoduleAnnotation]) -> list[NoduleAnnotation]:
    return [a for a in anns if a.relevance == RELEVANT]


# --- stage: phantom ---------------------------------------------------------

def stage_phantom(cfg: PipelineConfig) -> dict:
    spec = PhantomSpec(seed=cfg.seed, noise_sigma_hu=cfg.phantom_noise_sigma_hu)
    manifest = generate_corpus(spec, cfg.n_scans, dict(cfg.class_mix), cfg.corpus_dir)
    write_provenance(cfg, "phantom")
    return manifest


# --- stage: preprocess ------------------------------------------------------

def stage_preprocess(cfg: PipelineConfig) -> None:
    manifest = load_manifest(cfg.corpus_dir)
    corpus = Path(cfg.corpus_dir)
    for entry in manifest["scans"]:
        scan_id = entry["scan_id"]
        resampled: dict[str, Volume] = {}
        for view, rel in sorted(entry["views"].items()):
            vol, _ = load_nvol(corpus / rel)
            resampled[view] = resample(vol, cfg.target_spacing_mm)
        conventional = resampled["conventional"]
        try:
            lung, ring = extract_lung_mask(
                conventional, cfg.close_radius_mm, cfg.lung_threshold_hu, cfg.dilate_radius_mm)
        except SegmentationFailure as e:
            # mirror the source protocol: keep the scan, skip masking
            log.warning("segmentation failed for %s (%s); skipping mask", scan_id, e)
            full = np.ones(conventional.data.shape, dtype=bool)
            lung = Mask(full, conventional.spacing_mm, conventional.origin_mm)
            ring = Mask(np.zeros_like(full), conventional.spacing_mm, conventional.origin_mm)
        for view, vol in resampled.items():
            lum = apply_mask_normalize(clip_and_rescale(vol), lung, ring)
            save_nvol(lum, processed_volume_path(cfg, scan_id, view))
        save_mask_nvol(lung, lung_mask_path(cfg, scan_id))
    write_provenance(cfg, "preprocess")


# --- stage: train detector --------------------------------------------------

@dataclass
class _ScanData:
    volume: Volume  # conventional luminance
    lung: Mask
    all_annotations: list[NoduleAnnotation]
    relevant: list[NoduleAnnotation]
    candidates: list[WorldPoint]


def _load_scan_data(cfg: PipelineConfig, scan_ids: list[str]) -> dict[str, _ScanData]:
    anns = _corpus_annotations(cfg)
    cands = load_candidates(Path(cfg.corpus_dir) / "candidates.csv")
    out = {}
    for sid in scan_ids:
        vol = load_processed(cfg, sid)
        lung = load_mask_nvol(lung_mask_path(cfg, sid))
        scan_anns = anns.get(sid, [])
        out[sid] = _ScanData(vol, lung, scan_anns, _relevant(scan_anns),
                             cands.get(sid, []))
    return out


def detector_model_path(cfg: PipelineConfig, scale: str) -> Path:
    return _out(cfg, "models", f"detector_{scale}.ncad")


def regressor_model_path(cfg: PipelineConfig) -> Path:
    return _out(cfg, "models", f"regressor_{cfg.regressor_scale}.ncad")


def _detector_pools(cfg: PipelineConfig, scans: dict[str, _ScanData], scale: str):
    """Positive nodule references and negative crop centers for one scale."""
    size_mm = SCALE_PATCH_MM[scale]
    rng = np.random.default_rng([cfg.seed, _SEED_SAMPLING, list(cfg.scales).index(scale)])
    pos: list[tuple[str, NoduleAnnotation]] = []
    neg: list[tuple[str, WorldPoint]] = []
    for sid in sorted(scans):
        data = scans[sid]
        pos.extend((sid, a) for a in data.relevant)
        centers = sample_negative_centers(
            data.volume, data.lung, data.candidates, data.all_annotations, rng,
            n_random=cfg.n_random_negatives, n_candidate=cfg.n_candidate_negatives,
            size_mm=size_mm)
        neg.extend((sid, c) for c, _prov in centers)
    return pos, neg


def _train_detector_steps(cfg, model, scans, pos, neg, scale, steps, state, rng):
    """Run `steps` balanced batches with on-the-fly crops and flip augmentation."""
    size_mm = SCALE_PATCH_MM[scale]
    half = cfg.batch_size[scale] // 2
    losses = []
    for _ in range(steps):
        patches, targets = [], []
        pos_idx = rng.integers(len(pos), size=half)
        neg_idx = rng.integers(len(neg), size=half)
        for i in pos_idx:
            sid, ann = pos[int(i)]
            samples = sample_positives(
                scans[sid].volume, [ann], rng, size_mm=size_mm,
                shift_mm=cfg.shift_limit_mm)
            if not samples:  # cannot fit (mass); fall back to a centered crop
                patch = crop_patch(scans[sid].volume, ann.center, size_mm)
            else:
                patch = samples[0].patch
            patches.append(augment_flip(patch, int(rng.integers(8))))
            targets.append(1.0)
        for i in neg_idx:
            sid, center = neg[int(i)]
            patch = crop_patch(scans[sid].volume, center, size_mm)
            patches.append(augment_flip(patch, int(rng.integers(8))))
            targets.append(0.0)
        x = batch_to_network_input(patches)
        value, grads = loss_and_gradients(model, x, np.array(targets, np.float32), BCE, rng)
        adam_step(model.tensors, grads, state)
        losses.append(value)
    return losses


def stage_train_detector(cfg: PipelineConfig) -> dict:
    train_ids, _ = train_eval_split(cfg)
    scans = _load_scan_data(cfg, train_ids)
    log_record: dict = {"scales": {}}
    mined_centers: list[tuple[str, WorldPoint]] = []
    models: dict[str, ModelParams] = {}

    for scale_idx, scale in enumerate(cfg.scales):
        spec = NetworkSpec(mode=DETECTOR, input_dims=SCALE_INPUT_DIMS[scale],
                           width_divisor=cfg.width_divisor)
        model = ModelParams.create(spec, seed=int(np.random.default_rng(
            [cfg.seed, _SEED_TRAIN, scale_idx]).integers(2 ** 31)))
        state = AdamState(lr=cfg.learning_rate)
        rng = np.random.default_rng([cfg.seed, _SEED_TRAIN, scale_idx, 1])
        pos, neg = _detector_pools(cfg, scans, scale)
        losses = _train_detector_steps(cfg, model, scans, pos, neg, scale,
                                       cfg.detector_steps[scale], state, rng)

        if cfg.hnm_enabled and scale == cfg.hnm_scale:
            for sid in sorted(scans):
                data = scans[sid]
                hard = mine_hard_negatives(
                    model, data.volume, data.lung, data.relevant,
                    threshold=cfg.hnm_threshold, max_per_scan=cfg.hnm_max_per_scan,
                    cell_mm=cfg.cell_mm, size_mm=SCALE_PATCH_MM[scale],
                    batch=cfg.infer_batch[scale])
                mined_centers.extend((sid, s.center) for s in hard)
            log_record["hard_negatives"] = len(mined_centers)

        hnm_losses = []
        if cfg.hnm_enabled and mined_centers:
            neg = neg + mined_centers
            hnm_losses = _train_detector_steps(cfg, model, scans, pos, neg, scale,
                                               cfg.detector_hnm_steps[scale], state, rng)
        save_model(model, detector_model_path(cfg, scale))
        models[scale] = model
        log_record["scales"][scale] = {
            "steps": len(losses) + len(hnm_losses),
            "loss_first": losses[0] if losses else None,
            "loss_last": (hnm_losses or losses)[-1] if (losses or hnm_losses) else None,
            "n_positives": len(pos),
            "n_negatives": len(neg),
        }
    _out(cfg, "models", "training_log.json").write_text(
        json.dumps(log_record, sort_keys=True, indent=2) + "\n")
    write_provenance(cfg, "train-detector")
    return log_record


# --- stage: detect ----------------------------------------------------------

def map_path(cfg: PipelineConfig, scan_id: str, tag: str) -> Path:
    return _out(cfg, "maps", f"{scan_id}_{tag}.nvol")


def stage_detect(cfg: PipelineConfig) -> None:
    scan_ids = scans_for_detection(cfg)
    models = {scale: load_model(detector_model_path(cfg, scale), expect_mode=DETECTOR)
              for scale in cfg.scales}
    for sid in scan_ids:
        vol = load_processed(cfg, sid)
        lung = load_mask_nvol(lung_mask_path(cfg, sid))
        per_scale = []
        for scale in cfg.scales:
            pm = sliding_window_predict(models[scale], vol, lung, cell_mm=cfg.cell_mm,
                                        batch=cfg.infer_batch[scale])
            save_probability_map(pm, map_path(cfg, sid, pm.scale_tag))
            per_scale.append(pm)
        fused = fuse_scales(per_scale)
        save_probability_map(fused, map_path(cfg, sid, SCALE_FUSED))
    write_provenance(cfg, "detect")


# --- stage: froc ------------------------------------------------------------

def stage_froc(cfg: PipelineConfig) -> dict:
    scan_ids = scans_for_detection(cfg)
    anns = _corpus_annotations(cfg)
    tags = list(cfg.scales) + [SCALE_FUSED]
    summaries = {}
    for tag in tags:
        maps = [load_probability_map(map_path(cfg, sid, tag)) for sid in scan_ids]
        ann_lists = [anns.get(sid, []) for sid in scan_ids]
        thresholds = sweep_thresholds(maps)
        curve = froc_curve(maps, ann_lists, thresholds)
        save_froc_csv(curve, _out(cfg, "froc", f"froc_{tag}.csv"))
        summaries[tag] = save_froc_summary(curve, _out(cfg, "froc", f"froc_{tag}_summary.json"))
    write_provenance(cfg, "froc")
    return summaries


# --- stage: train regressor -------------------------------------------------

def _regression_patches(cfg: PipelineConfig, scan_ids: list[str]):
    """Centered nodule crops with malignancy targets, cached per scan."""
    anns = _corpus_annotations(cfg)
    size_mm = SCALE_PATCH_MM[cfg.regressor_scale]
    cache: dict[str, list[tuple[int, np.ndarray, float]]] = {}
    rng = np.random.default_rng(0)  # unused: regression crops are centered
    for sid in scan_ids:
        vol = load_processed(cfg, sid)
        entries = []
        relevant = _relevant(anns.get(sid, []))
        samples = sample_positives(vol, relevant, rng, size_mm=size_mm, regression=True)
        for idx, s in enumerate(samples):
            entries.append((idx, s.patch, s.label))
        cache[sid] = entries
    return cache


def _predict_scalar_batch(model: ModelParams, patches: list[np.ndarray],
                          batch: int = 16) -> np.ndarray:
    """Infer-mode forward with canonical zero-padded batches."""
    net = model.network()
    out = np.zeros(len(patches), dtype=np.float32)
    for lo in range(0, len(patches), batch):
        chunk = patches[lo:lo + batch]
        x = batch_to_network_input(chunk)
        if x.shape[0] < batch:
            x = np.concatenate([x, np.zeros((batch - x.shape[0], *x.shape[1:]), x.dtype)])
        y, _ = net.forward(model.tensors, x, "infer")
        out[lo:lo + len(chunk)] = y[:len(chunk), 0]
    return out


def _train_regressor(cfg: PipelineConfig, cache, train_scan_ids, seed_tail) -> ModelParams:
    spec = NetworkSpec(mode=REGRESSOR, input_dims=SCALE_INPUT_DIMS[cfg.regressor_scale],
                       width_divisor=cfg.width_divisor)
    init_seed = int(np.random.default_rng(
        [cfg.seed, _SEED_REGRESSOR, *seed_tail]).integers(2 ** 31))
    model = ModelParams.create(spec, seed=init_seed)
    state = AdamState(lr=cfg.learning_rate)
    rng = np.random.default_rng([cfg.seed, _SEED_REGRESSOR, *seed_tail, 1])
    pool = [(sid, patch, target) for sid in train_scan_ids
            for (_idx, patch, target) in cache[sid]]
    if not pool:
        raise ValueError("no regression training samples")
    lo_s, hi_s = cfg.scale_range
    for _ in range(cfg.regressor_steps):
        idx = rng.integers(len(pool), size=cfg.regressor_batch)
        patches, targets = [], []
        for i in idx:
            _sid, patch, target = pool[int(i)]
            aug = augment_affine(patch, rotation_deg=float(rng.uniform(0, 360)),
                                 scale=float(rng.uniform(lo_s, hi_s)))
            aug = augment_flip(aug, int(rng.integers(8)))
            patches.append(aug)
            targets.append(target)
        x = batch_to_network_input(patches)
        _, grads = loss_and_gradients(model, x, np.array(targets, np.float32),
                                      SQUARED_ERROR, rng)
        adam_step(model.tensors, grads, state)
    return model


def stage_train_regressor(cfg: PipelineConfig) -> dict:
    diagnoses = scan_diagnoses(cfg)
    scan_ids = corpus_scan_ids(cfg)
    cache = _regression_patches(cfg, scan_ids)
    usable = [sid for sid in scan_ids if cache[sid]]
    plan = kfold_splits(usable, [diagnoses[s] for s in usable], k=cfg.k_folds,
                        seed=int(np.random.default_rng(
                            [cfg.seed, _SEED_FOLDS]).integers(2 ** 31)))
    rows = []
    fold_scores = []
    for f in range(cfg.k_folds):
        test_ids = [s for s in usable if plan.fold_of[s] == f]
        train_ids = [s for s in usable if plan.fold_of[s] != f]
        model = _train_regressor(cfg, cache, train_ids, seed_tail=(f,))
        fold_preds, fold_targets = [], []
        for sid in test_ids:
            entries = cache[sid]
            preds = _predict_scalar_batch(model, [p for (_i, p, _t) in entries])
            for (idx, _p, target), pred in zip(entries, preds):
                rows.append((sid, idx, float(target), float(pred), f))
                fold_preds.append(float(pred))
                fold_targets.append(float(target))
        if fold_preds:
            fold_scores.append({
                "fold": f,
                "mae": mae(fold_preds, fold_targets),
                "one_off": one_off_accuracy(fold_preds, fold_targets),
                "n": len(fold_preds),
            })
    all_preds = [r[3] for r in rows]
    all_targets = [r[2] for r in rows]
    report = {
        "k_folds": cfg.k_folds,
        "mae": mae(all_preds, all_targets),
        "one_off_accuracy": one_off_accuracy(all_preds, all_targets),
        "per_fold": fold_scores,
        "mae_fold_mean": float(np.mean([s["mae"] for s in fold_scores])),
        "mae_fold_std": float(np.std([s["mae"] for s in fold_scores])),
        "one_off_fold_mean": float(np.mean([s["one_off"] for s in fold_scores])),
        "one_off_fold_std": float(np.std([s["one_off"] for s in fold_scores])),
        "n_nodules": len(rows),
    }
    lines = ["scan_id,nodule_idx,target,prediction,fold"]
    lines += [f"{sid},{idx},{t!r},{p!r},{f}" for sid, idx, t, p, f in rows]
    _out(cfg, "reports", "regression_predictions.csv").write_text("\n".join(lines) + "\n")
    _out(cfg, "reports", "regression_report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n")

    final = _train_regressor(cfg, cache, usable, seed_tail=(9999,))
    save_model(final, regressor_model_path(cfg))
    write_provenance(cfg, "train-regressor")
    return report


# --- stage: extract features ------------------------------------------------

def feature_store_path(cfg: PipelineConfig, view: str) -> Path:
    return _out(cfg, "features", f"features_{view}.bin")


def stage_extract_features(cfg: PipelineConfig) -> None:
    model = load_model(regressor_model_path(cfg), expect_mode=REGRESSOR)
    anns = _corpus_annotations(cfg)
    scan_ids = corpus_scan_ids(cfg)
    size_mm = SCALE_PATCH_MM[cfg.regressor_scale]
    for view in cfg.views:
        rows: list[tuple[str, int]] = []
        mats: list[np.ndarray] = []
        for sid in scan_ids:
            relevant = _relevant(anns.get(sid, []))
            if not relevant:
                continue
            vol = load_processed(cfg, sid, view)
            patches = [crop_patch(vol, a.center, size_mm) for a in relevant]
            feats = extract_features_batch(model, patches, view)
            for idx, fv in enumerate(feats):
                rows.append((sid, idx))
                mats.append(fv.values)
        save_feature_store(feature_store_path(cfg, view), view, rows,
                           np.stack(mats).astype(np.float32))
    write_provenance(cfg, "extract-features")


# --- stage: classify --------------------------------------------------------

def _fold_label(cfg: PipelineConfig, diagnosis: str) -> str:
    return fold_three(diagnosis) if cfg.class_mode == "three" else fold_two(diagnosis)


def _load_view_features(cfg: PipelineConfig, views: tuple[str, ...]):
    """Aligned per-view matrices plus per-row (scan_id, nodule_idx)."""
    rows_ref = None
    mats = []
    for view in views:
        stored_view, rows, mat = load_feature_store(feature_store_path(cfg, view))
        if stored_view != view:
            raise ValueError(f"feature store {view} holds view {stored_view!r}")
        if rows_ref is None:
            rows_ref = rows
        elif rows != rows_ref:
            raise ValueError("feature stores disagree on row order")
        mats.append(mat)
    return rows_ref, mats


def _nodule_matrix(rows, mats, views) -> np.ndarray:
    """Concatenate views per nodule and unit-normalize each row."""
    out = []
    for i in range(len(rows)):
        fv = concat_spectral([FeatureVector(m[i], (v,)) for m, v in zip(mats, views)],
                             expected_order=views)
        out.append(normalize_unit(fv).values)
    return np.stack(out)


def _scan_bags(rows, mats, views, labels_by_scan) -> list[FeatureBag]:
    per_scan: dict[str, list[FeatureVector]] = {}
    order: list[str] = []
    for i, (sid, _idx) in enumerate(rows):
        fv = concat_spectral([FeatureVector(m[i], (v,)) for m, v in zip(mats, views)],
                             expected_order=views)
        if sid not in per_scan:
            per_scan[sid] = []
            order.append(sid)
        per_scan[sid].append(fv)
    return [FeatureBag(sid, per_scan[sid], labels_by_scan[sid]) for sid in order]


def _normalize_rows(X: np.ndarray) -> np.ndarray:
    return np.stack([normalize_unit(FeatureVector(row)).values for row in X])


def _classify_cv(cfg: PipelineConfig, level: str, bags: list[FeatureBag],
                 X_static: np.ndarray | None, y: np.ndarray, groups: np.ndarray,
                 seed: int):
    """Grouped CV with inner C selection; returns per-fold scores and predictions."""
    scan_ids = [b.scan_id for b in bags]
    scan_labels = [b.scan_label for b in bags]
    plan = kfold_splits(scan_ids, scan_labels, k=cfg.k_folds, seed=seed)
    folds = np.array([plan.fold_of[g] for g in groups])
    classes = tuple(sorted(set(y.tolist())))
    distance_mode = cfg.aggregation in ("maxmin", "minmin", "meanmin")
    func = cfg.aggregation[:-3] if distance_mode else cfg.aggregation

    y_true_all, y_pred_all, rows_out = [], [], []
    fold_stats = []
    for f in range(cfg.k_folds):
        train, test = folds != f, folds == f
        if not test.any():
            continue
        if level == "scan" and distance_mode:
            train_bags = [b for b, m in zip(bags, train) if m]
            Xtr = _normalize_rows(dissimilarity_matrix(train_bags, train_bags, func))
            Xte = _normalize_rows(dissimilarity_matrix(
                [b for b, m in zip(bags, test) if m], train_bags, func))
        else:
            Xtr, Xte = X_static[train], X_static[test]
        model, best_c, _ = select_C(
            Xtr, y[train], groups[train], grid=cfg.c_grid, k=cfg.inner_folds,
            seed=seed + 1 + f, max_iter=cfg.svm_max_iter)
        preds = model.predict(Xte)
        decisions = model.decision_values(Xte)
        cm = confusion_matrix(y[test].tolist(), preds, classes)
        fold_stats.append({"fold": f, "accuracy": accuracy(cm), "f1_macro": f1_macro(cm),
                           "best_c": best_c, "n": int(test.sum())})
        idx_test = np.flatnonzero(test)
        for j, gi in enumerate(idx_test):
            rows_out.append((groups[gi], gi, y[gi], preds[j], decisions[j]))
        y_true_all.extend(y[test].tolist())
        y_pred_all.extend(preds)
    cm_all = confusion_matrix(y_true_all, y_pred_all, classes)
    return fold_stats, cm_all, rows_out, classes


def stage_classify(cfg: PipelineConfig) -> dict:
    diagnoses = scan_diagnoses(cfg)
    labels_by_scan = {sid: _fold_label(cfg, d) for sid, d in diagnoses.items()}
    seed = int(np.random.default_rng([cfg.seed, _SEED_CLASSIFY]).integers(2 ** 31))
    report: dict = {"class_mode": cfg.class_mode, "aggregation": cfg.aggregation,
                    "experiments": {}}
    for experiment in EXPERIMENTS:
        views = cfg.views[:1] if experiment == "conventional" else cfg.views
        rows, mats = _load_view_features(cfg, views)
        bags = _scan_bags(rows, mats, views, labels_by_scan)
        exp_report = {}
        for level in cfg.classify_levels:
            if level == "nodule":
                X = _nodule_matrix(rows, mats, views)
                y = np.array([labels_by_scan[sid] for sid, _ in rows])
                groups = np.array([sid for sid, _ in rows])
                nodule_idx = [idx for _, idx in rows]
            else:
                distance_mode = cfg.aggregation in ("maxmin", "minmin", "meanmin")
                if distance_mode:
                    X = None
                else:
                    X = _normalize_rows(np.stack(
                        [aggregate_elementwise(b, cfg.aggregation).values for b in bags]))
                y = np.array([b.scan_label for b in bags])
                groups = np.array([b.scan_id for b in bags])
                nodule_idx = [-1] * len(bags)
            fold_stats, cm_all, rows_out, classes = _classify_cv(
                cfg, level, bags, X, y, groups, seed)
            lines = ["scan_id,nodule_idx," + "true_label,pred_label,"
                     + ",".join(f"decision_{c}" for c in classes)]
            for (sid, gi, t, p, dec) in rows_out:
                dec_s = ",".join(repr(float(v)) for v in dec)
                lines.append(f"{sid},{nodule_idx[gi]},{t},{p},{dec_s}")
            _out(cfg, "reports", f"predictions_{experiment}_{level}.csv").write_text(
                "\n".join(lines) + "\n")
            exp_report[level] = {
                "classes": list(classes),
                "confusion": cm_all.counts.tolist(),
                "pooled_accuracy": accuracy(cm_all),
                "pooled_f1_macro": f1_macro(cm_all),
                "accuracy_mean": float(np.mean([s["accuracy"] for s in fold_stats])),
                "accuracy_std": float(np.std([s["accuracy"] for s in fold_stats])),
                "f1_mean": float(np.mean([s["f1_macro"] for s in fold_stats])),
                "f1_std": float(np.std([s["f1_macro"] for s in fold_stats])),
                "per_fold": fold_stats,
            }
        report["experiments"][experiment] = exp_report
    _out(cfg, "reports", "classification_report.json").write_text(
        json.dumps(report, sort_keys=True, indent=2) + "\n")
    write_provenance(cfg, "classify")
    return report


# --- stage: stats -----------------------------------------------------------

def _cv_accuracy_score_fn(cfg: PipelineConfig, groups: np.ndarray, fixed_c: float,
                          seed: int):
    """Grouped CV accuracy at a fixed C; used as the permutation test statistic."""

    def score(X: np.ndarray, y: np.ndarray) -> float:
        scan_label: dict[str, str] = {}
        for g, lab in zip(groups, y):
            scan_label.setdefault(g, lab)
        plan = kfold_splits(list(scan_label), list(scan_label.values()),
                            k=cfg.k_folds, seed=seed)
        folds = np.array([plan.fold_of[g] for g in groups])
        classes = tuple(sorted(set(y.tolist())))
        correct = 0
        for f in range(cfg.k_folds):
            train, test = folds != f, folds == f
            if not test.any() or len(set(y[train].tolist())) < 2:
                continue
            model = svm_train_ovr(X[train], y[train], fixed_c, classes=classes,
                                  max_iter=cfg.svm_max_iter)
            correct += sum(p == t for p, t in zip(model.predict(X[test]), y[test]))
        return correct / len(y)

    return score


def stage_stats(cfg: PipelineConfig) -> dict:
    report = json.loads(_out(cfg, "reports", "classification_report.json").read_text())
    diagnoses = scan_diagnoses(cfg)
    labels_by_scan = {sid: _fold_label(cfg, d) for sid, d in diagnoses.items()}
    seed = int(np.random.default_rng([cfg.seed, _SEED_STATS]).integers(2 ** 31))
    stats: dict = {"paired_t": {}, "permutation": {}}

    for level in cfg.classify_levels:
        both = [report["experiments"][e][level]["per_fold"] for e in EXPERIMENTS
                if level in report["experiments"].get(e, {})]
        if len(both) == 2 and len(both[0]) == len(both[1]) >= 2:
            for metric in ("accuracy", "f1_macro"):
                a = [s[metric] for s in both[0]]
                b = [s[metric] for s in both[1]]
                t, p = paired_t_test(a, b)
                stats["paired_t"][f"{level}_{metric}"] = {"t": t, "p": p}

    if cfg.aggregation in ("max", "min", "mean"):
        for experiment in EXPERIMENTS:
            views = cfg.views[:1] if experiment == "conventional" else cfg.views
            rows, mats = _load_view_features(cfg, views)
            bags = _scan_bags(rows, mats, views, labels_by_scan)
            X = _normalize_rows(np.stack(
                [aggregate_elementwise(b, cfg.aggregation).values for b in bags]))
            y = np.array([b.scan_label for b in bags])
            groups = np.array([b.scan_id for b in bags])
            _model, best_c, _scores = select_C(X, y, groups, grid=cfg.c_grid,
                                               k=cfg.k_folds, seed=seed,
                                               max_iter=cfg.svm_max_iter)
            score_fn = _cv_accuracy_score_fn(cfg, groups, best_c, seed + 1)
            p = permutation_test(score_fn, X, y, n_perm=cfg.n_perm, seed=seed + 2)
            stats["permutation"][f"scan_{experiment}"] = {
                "p": p, "fixed_c": best_c, "n_perm": cfg.n_perm,
                "observed_accuracy": score_fn(X, y),
            }
    _out(cfg, "reports", "stats.json").write_text(
        json.dumps(stats, sort_keys=True, indent=2) + "\n")
    write_provenance(cfg, "stats")
    return stats
