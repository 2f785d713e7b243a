"""Deterministic synthetic CT corpus with ground truth.

Each scan is a geometric chest phantom: an ellipsoidal body (~40 HU) in air,
two ellipsoidal lungs (~-850 HU) joined by an air bridge so threshold
segmentation sees one lung region, cylindrical vessels inside the lungs, and
spherical nodules whose intensity profile, shape modifier, and spectral
behavior depend on the diagnosis class.  Mono-energetic views share the
conventional image voxel-for-voxel except inside material-tagged regions,
where a per-material HU offset models the energy dependence (iodine-like
material brightens strongly at 60 keV and barely at 190 keV).

Everything is reproducible from (spec.seed, scan_seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .annotations import (
    BENIGN, BENIGN_MULTI, COLORECTAL, IRRELEVANT, MELANOMA, PRIMARY_LUNG, RELEVANT,
    NoduleAnnotation, save_annotations, save_candidates,
)
from .errors import GenerationError
from .volume import Mask, Unit, Volume, WorldPoint, save_mask_nvol, save_nvol

GENERATOR_VERSION = "1.0"

SMOOTH = "smooth"
CALCIFIED_CORE = "calcified_core"
SPICULATED = "spiculated"

AIR_HU = -1000.0
BODY_HU = 40.0
LUNG_HU = -850.0
BRIDGE_HU = -900.0
VESSEL_HU = 30.0
CALCIFIED_CORE_HU = 280.0  # bright but still below the bone-suppression cutoff

# malignancy truth: shape base + size slope, clamped to the 1..5 scale
_MALIGNANCY_BASE = {SMOOTH: 1.7, CALCIFIED_CORE: 2.6, SPICULATED: 3.8}
_MALIGNANCY_SLOPE_PER_MM = 0.06
MALIGNANCY_JITTER = 0.3


@dataclass(frozen=True)
class NoduleProfile:
    count_range: tuple[int, int]
    diameter_range_mm: tuple[float, float]
    mean_hu: float
    texture_hu: float
    shape: str
    low_kev_delta_hu: float
    high_kev_delta_hu: float


DEFAULT_PROFILES: dict[str, NoduleProfile] = {
    # counts per scan roughly follow the clinical ratios: multinodular ~11,
    # solitary benign ~2, primary ~8, metastases ~17
    BENIGN: NoduleProfile((1, 3), (4.0, 10.0), 70.0, 10.0, CALCIFIED_CORE, 110.0, -25.0),
    BENIGN_MULTI: NoduleProfile((8, 13), (4.0, 9.0), 55.0, 10.0, SMOOTH, 90.0, -20.0),
    PRIMARY_LUNG: NoduleProfile((5, 9), (8.0, 22.0), 40.0, 18.0, SPICULATED, 60.0, -12.0),
    MELANOMA: NoduleProfile((11, 17), (5.0, 12.0), 10.0, 12.0, SMOOTH, 30.0, -6.0),
    COLORECTAL: NoduleProfile((13, 19), (6.0, 14.0), 25.0, 12.0, SMOOTH, 45.0, -9.0),
}

VESSEL_LOW_DELTA = 55.0
VESSEL_HIGH_DELTA = -12.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (128, 128, 64)  # (nx, ny, nz)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 2.0)
    body_semiaxes_mm: tuple[float, float, float] = (58.0, 50.0, 100.0)
    lung_semiaxes_mm: tuple[float, float, float] = (21.0, 28.0, 44.0)
    lung_offset_x_mm: float = 27.0
    bridge_radius_mm: float = 6.0
    bridge_z_mm: float = 12.0
    vessels_per_lung: int = 12
    vessel_radius_range_mm: tuple[float, float] = (1.0, 2.5)
    noise_sigma_hu: float = 12.0
    candidates_per_scan: int = 60
    irrelevant_count_range: tuple[int, int] = (0, 2)
    irrelevant_diameter_range_mm: tuple[float, float] = (1.5, 2.5)
    profiles: dict[str, NoduleProfile] = field(default_factory=lambda: dict(DEFAULT_PROFILES))
    seed: int = 0

    @property
    def origin_mm(self) -> tuple[float, float, float]:
        # volume centered on the world origin
        return tuple(-(d - 1) / 2.0 * s for d, s in zip(self.dims, self.spacing_mm))


@dataclass
class PhantomScan:
    scan_id: str
    diagnosis: str
    conventional: Volume
    low_kev: Volume
    high_kev: Volume
    lung_truth: Mask
    annotations: list[NoduleAnnotation]
    irrelevant: list[NoduleAnnotation]
    candidates: list[WorldPoint]


def malignancy_score(shape: str, diameter_mm: float, jitter: float = 0.0) -> float:
    """Deterministic malignancy truth: shape base plus size, clamped to [1, 5]."""
    base = _MALIGNANCY_BASE[shape]
    raw = base + _MALIGNANCY_SLOPE_PER_MM * (diameter_mm - 4.0) + jitter
    return float(min(5.0, max(1.0, raw)))


def _world_axes(spec: PhantomSpec):
    ox, oy, oz = spec.origin_mm
    sx, sy, sz = spec.spacing_mm
    nx, ny, nz = spec.dims
    xs = ox + sx * np.arange(nx)
    ys = oy + sy * np.arange(ny)
    zs = oz + sz * np.arange(nz)
    return xs, ys, zs


def _ellipsoid_mask(xs, ys, zs, center, semi) -> np.ndarray:
    """Boolean (nz, ny, nx) grid of the ellipsoid interior."""
    ux = ((xs - center[0]) / semi[0]) ** 2
    uy = ((ys - center[1]) / semi[1]) ** 2
    uz = ((zs - center[2]) / semi[2]) ** 2
    return (uz[:, None, None] + uy[None, :, None] + ux[None, None, :]) <= 1.0


def _bbox_slices(spec: PhantomSpec, center, radius_mm):
    """Volume slices (z, y, x) covering a sphere of radius_mm around center."""
    lo_idx, hi_idx = [], []
    for axis in range(3):
        o = spec.origin_mm[axis]
        s = spec.spacing_mm[axis]
        n = spec.dims[axis]
        lo = max(0, int(np.floor((center[axis] - radius_mm - o) / s)))
        hi = min(n, int(np.ceil((center[axis] + radius_mm - o) / s)) + 1)
        lo_idx.append(lo)
        hi_idx.append(hi)
    return (slice(lo_idx[2], hi_idx[2]), slice(lo_idx[1], hi_idx[1]), slice(lo_idx[0], hi_idx[0]))


def _local_coords(spec: PhantomSpec, sl):
    xs, ys, zs = _world_axes(spec)
    return (xs[sl[2]][None, None, :], ys[sl[1]][None, :, None], zs[sl[0]][:, None, None])


def _paint_cylinder(spec, hu, tags, p0, p1, radius, value, tag):
    p0, p1 = np.asarray(p0, float), np.asarray(p1, float)
    axis = p1 - p0
    length2 = float(axis @ axis)
    pad = radius + max(spec.spacing_mm)
    lo = np.minimum(p0, p1) - pad
    hi = np.maximum(p0, p1) + pad
    center = (lo + hi) / 2
    sl = _bbox_slices(spec, center, float(np.max(hi - lo)) / 2)
    lx, ly, lz = _local_coords(spec, sl)
    dx, dy, dz = lx - p0[0], ly - p0[1], lz - p0[2]
    if length2 == 0:
        d2 = dx * dx + dy * dy + dz * dz
    else:
        t = np.clip((dx * axis[0] + dy * axis[1] + dz * axis[2]) / length2, 0.0, 1.0)
        d2 = ((dx - t * axis[0]) ** 2 + (dy - t * axis[1]) ** 2 + (dz - t * axis[2]) ** 2)
    inside = d2 <= radius * radius
    hu[sl][inside] = value
    if tag:
        tags[sl][inside] = tag


def _paint_nodule(spec, hu, tags, rng, center, diameter, profile: NoduleProfile, tag: int):
    r = diameter / 2.0
    reach = 1.6 * r if profile.shape == SPICULATED else r
    sl = _bbox_slices(spec, center, reach + max(spec.spacing_mm))
    lx, ly, lz = _local_coords(spec, sl)
    dx, dy, dz = lx - center[0], ly - center[1], lz - center[2]
    d2 = dx * dx + dy * dy + dz * dz
    inside = d2 <= r * r

    freq = rng.uniform(0.5, 1.2, size=3)
    phase = rng.uniform(0.0, 2 * np.pi, size=3)
    texture = profile.texture_hu * (
        np.sin(freq[0] * (lx - center[0]) + phase[0])
        * np.sin(freq[1] * (ly - center[1]) + phase[1])
        * np.sin(freq[2] * (lz - center[2]) + phase[2]))
    body = np.broadcast_to(profile.mean_hu + texture, d2.shape)

    region = inside.copy()
    if profile.shape == SPICULATED:
        dist = np.sqrt(d2)
        n_spikes = int(rng.integers(4, 9))
        for _ in range(n_spikes):
            v = rng.standard_normal(3)
            v /= np.linalg.norm(v)
            proj = dx * v[0] + dy * v[1] + dz * v[2]
            with np.errstate(invalid="ignore", divide="ignore"):
                cosang = np.where(dist > 0, proj / dist, 0.0)
            region |= (cosang >= 0.965) & (dist <= 1.55 * r)
    sub_hu = hu[sl]
    sub_hu[region] = body[region]
    if profile.shape == CALCIFIED_CORE:
        core = d2 <= (r / 3.0) ** 2
        sub_hu[core] = CALCIFIED_CORE_HU
    hu[sl] = sub_hu
    if tag:
        sub_tag = tags[sl]
        sub_tag[region] = tag
        tags[sl] = sub_tag


_MATERIAL_TAGS = {  # 0 = untagged background
    "vessel": 1, BENIGN: 2, BENIGN_MULTI: 3, PRIMARY_LUNG: 4, MELANOMA: 5, COLORECTAL: 6,
}


def generate_scan(spec: PhantomSpec, scan_seed: int, diagnosis: str,
                  scan_id: str = "") -> PhantomScan:
    """One deterministic phantom scan of the given diagnosis class."""
    if diagnosis not in spec.profiles:
        raise GenerationError(f"no nodule profile for diagnosis {diagnosis!r}")
    rng = np.random.default_rng([spec.seed, scan_seed])
    nx, ny, nz = spec.dims
    xs, ys, zs = _world_axes(spec)

    hu = np.full((nz, ny, nx), np.float32(AIR_HU), dtype=np.float32)
    tags = np.zeros((nz, ny, nx), dtype=np.uint8)
    body = _ellipsoid_mask(xs, ys, zs, (0.0, 0.0, 0.0), spec.body_semiaxes_mm)
    hu[body] = BODY_HU

    _paint_cylinder(spec, hu, tags,
                    (-spec.lung_offset_x_mm, 0.0, spec.bridge_z_mm),
                    (spec.lung_offset_x_mm, 0.0, spec.bridge_z_mm),
                    spec.bridge_radius_mm, BRIDGE_HU, tag=0)

    lung_centers = [(-spec.lung_offset_x_mm, 0.0, 0.0), (spec.lung_offset_x_mm, 0.0, 0.0)]
    lung_truth = np.zeros((nz, ny, nx), dtype=bool)
    for c in lung_centers:
        m = _ellipsoid_mask(xs, ys, zs, c, spec.lung_semiaxes_mm)
        lung_truth |= m
        hu[m] = LUNG_HU

    # vessels: short random segments radiating from each hilum
    semi = np.asarray(spec.lung_semiaxes_mm)
    candidates_pool: list[np.ndarray] = []
    for c in lung_centers:
        c = np.asarray(c, float)
        for _ in range(spec.vessels_per_lung):
            u0 = rng.uniform(-0.25, 0.25, size=3)
            u1 = rng.uniform(-0.8, 0.8, size=3)
            while float(np.sum(u1 * u1)) > 0.81:
                u1 = rng.uniform(-0.8, 0.8, size=3)
            p0 = c + u0 * semi
            p1 = c + u1 * semi
            radius = float(rng.uniform(*spec.vessel_radius_range_mm))
            _paint_cylinder(spec, hu, tags, p0, p1, radius, VESSEL_HU, _MATERIAL_TAGS["vessel"])
            candidates_pool.extend([p0, (p0 + p1) / 2, p1])

    profile = spec.profiles[diagnosis]
    n_nodules = int(rng.integers(profile.count_range[0], profile.count_range[1] + 1))
    annotations: list[NoduleAnnotation] = []
    placed: list[tuple[np.ndarray, float]] = []
    a_min = float(np.min(semi))

    def place_sphere(radius_mm: float, clearance_mm: float = 2.0) -> np.ndarray | None:
        shrunk = semi - radius_mm - clearance_mm
        if np.any(shrunk <= 0):
            raise GenerationError(
                f"nodule radius {radius_mm} mm cannot fit lungs with semi-axes {tuple(semi)}")
        for _ in range(200):
            lung_c = np.asarray(lung_centers[int(rng.integers(2))], float)
            u = rng.uniform(-1.0, 1.0, size=3)
            if float(np.sum(u * u)) > 1.0:
                continue
            center = lung_c + u * shrunk
            if any(float(np.linalg.norm(center - pc)) < radius_mm + pr + 3.0
                   for pc, pr in placed):
                continue
            return center
        return None

    for i in range(n_nodules):
        diameter = float(rng.uniform(*profile.diameter_range_mm))
        center = place_sphere(diameter / 2.0)
        if center is None:
            raise GenerationError(
                f"could not place nodule {i + 1}/{n_nodules} (d={diameter:.1f} mm) in {scan_id!r}")
        placed.append((center, diameter / 2.0))
        _paint_nodule(spec, hu, tags, rng, center, diameter, profile,
                      _MATERIAL_TAGS.get(diagnosis, 0))
        jitter = float(rng.uniform(-MALIGNANCY_JITTER, MALIGNANCY_JITTER))
        annotations.append(NoduleAnnotation(
            scan_id=scan_id,
            center=WorldPoint(*center),
            diameter_mm=diameter,
            label=diagnosis,
            malignancy=malignancy_score(profile.shape, diameter, jitter),
            relevance=RELEVANT,
        ))

    irrelevant: list[NoduleAnnotation] = []
    n_irr = int(rng.integers(spec.irrelevant_count_range[0], spec.irrelevant_count_range[1] + 1))
    for _ in range(n_irr):
        diameter = float(rng.uniform(*spec.irrelevant_diameter_range_mm))
        center = place_sphere(diameter / 2.0)
        if center is None:
            continue
        placed.append((center, diameter / 2.0))
        sl = _bbox_slices(spec, center, diameter / 2.0 + max(spec.spacing_mm))
        lx, ly, lz = _local_coords(spec, sl)
        d2 = (lx - center[0]) ** 2 + (ly - center[1]) ** 2 + (lz - center[2]) ** 2
        sub = hu[sl]
        sub[d2 <= (diameter / 2.0) ** 2] = VESSEL_HU
        hu[sl] = sub
        irrelevant.append(NoduleAnnotation(
            scan_id=scan_id, center=WorldPoint(*center), diameter_mm=diameter,
            label=diagnosis, malignancy=None, relevance=IRRELEVANT))

    # spectral views: per-material offsets, then one shared noise realization
    low_lut = np.zeros(7, dtype=np.float32)
    high_lut = np.zeros(7, dtype=np.float32)
    low_lut[_MATERIAL_TAGS["vessel"]] = VESSEL_LOW_DELTA
    high_lut[_MATERIAL_TAGS["vessel"]] = VESSEL_HIGH_DELTA
    for label, prof in spec.profiles.items():
        tag = _MATERIAL_TAGS.get(label)
        if tag is not None:
            low_lut[tag] = prof.low_kev_delta_hu
            high_lut[tag] = prof.high_kev_delta_hu
    low = hu + low_lut[tags]
    high = hu + high_lut[tags]
    noise = rng.normal(0.0, spec.noise_sigma_hu, size=hu.shape).astype(np.float32)
    conventional = hu + noise

    n_cand = min(spec.candidates_per_scan, len(candidates_pool))
    order = rng.permutation(len(candidates_pool))[:n_cand]
    candidates = [WorldPoint(*candidates_pool[int(i)]) for i in order]

    make_vol = lambda a: Volume(a.astype(np.float32), spec.spacing_mm, spec.origin_mm,
                                Unit.HOUNSFIELD)
    return PhantomScan(
        scan_id=scan_id,
        diagnosis=diagnosis,
        conventional=make_vol(conventional),
        low_kev=make_vol(low + noise),
        high_kev=make_vol(high + noise),
        lung_truth=Mask(lung_truth, spec.spacing_mm, spec.origin_mm),
        annotations=annotations,
        irrelevant=irrelevant,
        candidates=candidates,
    )


def generate_corpus(spec: PhantomSpec, n_scans: int, class_mix: dict[str, int],
                    out_dir: str | Path) -> dict:
    """Write a corpus (volumes, masks, CSVs, manifest) and return the manifest."""
    if sum(class_mix.values()) != n_scans:
        raise ValueError(f"class mix {class_mix} does not sum to n_scans={n_scans}")
    labels = [lab for lab in sorted(class_mix) for _ in range(class_mix[lab])]
    rng = np.random.default_rng([spec.seed, 0xC0])
    labels = [labels[int(i)] for i in rng.permutation(len(labels))]

    out_dir = Path(out_dir)
    (out_dir / "volumes").mkdir(parents=True, exist_ok=True)
    (out_dir / "lung_truth").mkdir(parents=True, exist_ok=True)
    manifest = {
        "generator_version": GENERATOR_VERSION,
        "seed": spec.seed,
        "dims": list(spec.dims),
        "spacing_mm": list(spec.spacing_mm),
        "scans": [],
    }
    all_annotations: list[NoduleAnnotation] = []
    all_candidates: list[tuple[str, WorldPoint]] = []
    for i, diagnosis in enumerate(labels):
        scan_id = f"scan{i:04d}"
        scan = generate_scan(spec, scan_seed=i, diagnosis=diagnosis, scan_id=scan_id)
        views = {}
        for view, vol in (("conventional", scan.conventional),
                          ("low_kev", scan.low_kev),
                          ("high_kev", scan.high_kev)):
            rel = f"volumes/{scan_id}_{view}.nvol"
            save_nvol(vol, out_dir / rel)
            views[view] = rel
        truth_rel = f"lung_truth/{scan_id}_lung.nvol"
        save_mask_nvol(scan.lung_truth, out_dir / truth_rel)
        manifest["scans"].append({
            "scan_id": scan_id,
            "diagnosis": diagnosis,
            "scan_seed": i,
            "views": views,
            "lung_truth": truth_rel,
        })
        all_annotations.extend(scan.annotations + scan.irrelevant)
        all_candidates.extend((scan_id, c) for c in scan.candidates)
    save_annotations(all_annotations, out_dir / "annotations.csv")
    save_candidates(all_candidates, out_dir / "candidates.csv")
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return manifest


def load_manifest(corpus_dir: str | Path) -> dict:
    return json.loads((Path(corpus_dir) / "manifest.json").read_text())
