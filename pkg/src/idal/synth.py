"""Seeded synthetic multi-modal brain phantoms with lesion-appearance clusters.

Each phantom is an ellipsoidal brain with a CSF rim, two ventricles, grey and
white matter, spherical lesions and lesion-like "mimic" blobs that are not
part of the ground truth. Cluster ``c`` draws its lesions with contrast
signature ``c`` and its mimics with signature ``c + 1``, so the same
appearance is lesion in one cluster and benign in the next.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._rng import derive_seed
from .dalsa import derive_surs
from .volume_io import (
    MODALITIES,
    BrainMask,
    DatasetManifest,
    ManifestEntry,
    MultiModalCase,
    Volume,
    write_manifest,
    write_volume,
)

# raw tissue intensities per modality (t1, t2, dwi, flair)
TISSUE = {
    "csf": (300.0, 1500.0, 200.0, 150.0),
    "gm": (600.0, 800.0, 500.0, 700.0),
    "wm": (800.0, 600.0, 450.0, 550.0),
}

# multiplicative grey-matter contrast per modality and cluster (acquisition /
# disease-stage appearance shared by the whole brain)
DEFAULT_TISSUE_SIGNATURES = (
    (1.10, 1.00, 0.95, 1.00),
    (0.95, 1.08, 1.00, 0.95),
    (1.00, 0.95, 1.10, 1.08),
)

# multiplicative lesion contrast per modality
DEFAULT_SIGNATURES = (
    (1.0, 1.6, 1.0, 1.7),  # FLAIR/T2 bright
    (1.0, 1.0, 2.0, 1.0),  # DWI bright only
    (0.7, 1.6, 0.5, 1.0),  # T2 bright, DWI dark
)


class SynthError(ValueError):
    pass


@dataclass(frozen=True)
class SynthConfig:
    n_cases: int = 18
    n_clusters: int = 3
    dims: tuple[int, int, int] = (48, 48, 48)
    spacing: float = 1.0
    lesion_count_range: tuple[int, int] = (1, 3)
    lesion_radius_range: tuple[float, float] = (2.5, 4.5)
    mimic_count_range: tuple[int, int] = (1, 3)
    signatures: tuple[tuple[float, ...], ...] = DEFAULT_SIGNATURES
    tissue_signatures: tuple[tuple[float, ...], ...] = DEFAULT_TISSUE_SIGNATURES
    strength_range: tuple[float, float] = (0.75, 1.25)
    gain_range: tuple[float, float] = (0.85, 1.15)
    noise_sigma: float = 0.05
    brain_jitter: float = 0.02
    gm_threshold: float = 0.80
    bias_amplitude: float = 0.02
    ventricle_jitter: float = 0.15
    sur_lesion_blobs: int = 3
    sur_background_blobs: int = 10
    sur_radius: int = 2
    seed: int = 0
    ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        if self.n_clusters < 1 or self.n_cases < self.n_clusters:
            raise SynthError("need n_cases >= n_clusters >= 1")
        if len(self.signatures) < min(self.n_clusters + 1, 2):
            raise SynthError("need a signature per cluster plus one for mimics")
        if min(self.dims) < 16:
            raise SynthError("dims below 16 voxels cannot hold a brain")
        if self.lesion_radius_range[1] / self.spacing >= 0.5 * 0.36 * min(self.dims):
            raise SynthError("lesion radius does not fit inside the brain ellipsoid")

    def case_ids(self) -> list[str]:
        return list(self.ids) if self.ids else [f"case_{i:03d}" for i in range(self.n_cases)]

    def cluster_of(self, index: int) -> int:
        return index % self.n_clusters

    def mimic_signature(self, cluster: int) -> int:
        return (cluster + 1) % len(self.signatures) if self.n_clusters > 1 else 1


@dataclass
class SynthCase:
    case: MultiModalCase
    cluster: int
    lesions: list[dict]
    mimics: list[dict]
    csf_truth: np.ndarray


def _smooth_noise(rng, shape, scale: int = 6) -> np.ndarray:
    coarse = rng.standard_normal(tuple(max(2, s // scale) for s in shape))
    # trilinear upsampling by separable interpolation
    out = coarse
    for ax, n in enumerate(shape):
        src = np.linspace(0, out.shape[ax] - 1, n)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, out.shape[ax] - 1)
        t = (src - lo).reshape([-1 if a == ax else 1 for a in range(3)])
        out = np.take(out, lo, axis=ax) * (1 - t) + np.take(out, hi, axis=ax) * t
    return out / (out.std() + 1e-12)


def _place_blobs(rng, n, rad_range, rho_ok, radii_axes, taken, max_tries=500):
    blobs = []
    shape = rho_ok.shape
    for _ in range(n):
        for _ in range(max_tries):
            r = float(rng.uniform(*rad_range))
            c = np.array([rng.uniform(r + 1, s - r - 2) for s in shape])
            ci = tuple(np.round(c).astype(int))
            if not rho_ok[ci]:
                continue
            # the whole ball must stay inside tissue
            rho_c = np.sqrt(np.sum(((c - np.array(shape) / 2) / radii_axes) ** 2))
            if rho_c + r / radii_axes.min() > 0.86:
                continue
            if any(np.linalg.norm(c - b["center"]) < r + b["radius"] + 2 for b in taken):
                continue
            b = {"center": c, "radius": r}
            blobs.append(b)
            taken.append(b)
            break
        else:
            raise SynthError("could not place a non-overlapping blob; reduce counts or radii")
    return blobs


def generate_case(cfg: SynthConfig, index: int) -> SynthCase:
    case_id = cfg.case_ids()[index]
    rng = np.random.default_rng(derive_seed(cfg.seed, "synth", case_id))
    shape = tuple(cfg.dims)
    grid = np.stack(np.meshgrid(*[np.arange(s, dtype=np.float64) for s in shape], indexing="ij"))
    center = np.array(shape, dtype=np.float64).reshape(3, 1, 1, 1) / 2
    radii = np.array([0.42, 0.38, 0.36]) * np.array(shape) * rng.uniform(1 - cfg.brain_jitter, 1 + cfg.brain_jitter, 3)
    rel = (grid - center) / radii.reshape(3, 1, 1, 1)
    rho = np.sqrt((rel**2).sum(axis=0))
    brain = rho <= 1.0

    rho_t = rho + 0.04 * _smooth_noise(rng, shape)
    csf = brain & (rho > 0.94)
    vent = np.zeros(shape, dtype=bool)
    for sx in (-1, 1):
        vc = np.array([0.18 * sx, 0.0, 0.05])
        vr = np.array([0.10, 0.28, 0.14]) * rng.uniform(1 - cfg.ventricle_jitter, 1 + cfg.ventricle_jitter, 3)
        vent |= (((rel - vc.reshape(3, 1, 1, 1)) / vr.reshape(3, 1, 1, 1)) ** 2).sum(axis=0) <= 1.0
    csf |= vent & brain
    gm = brain & ~csf & (rho_t > cfg.gm_threshold)
    wm = brain & ~csf & ~gm

    cluster = cfg.cluster_of(index)
    lesion_sig = np.asarray(cfg.signatures[cluster % len(cfg.signatures)])
    mimic_sig = np.asarray(cfg.signatures[cfg.mimic_signature(cluster)])
    tissue_sig = np.asarray(cfg.tissue_signatures[cluster % len(cfg.tissue_signatures)])
    tissue_ok = brain & ~vent & (rho < 0.8)
    taken: list[dict] = []
    rad_vox = tuple(r / cfg.spacing for r in cfg.lesion_radius_range)
    lesions = _place_blobs(rng, int(rng.integers(cfg.lesion_count_range[0], cfg.lesion_count_range[1] + 1)),
                           rad_vox, tissue_ok, radii, taken)
    mimics = _place_blobs(rng, int(rng.integers(cfg.mimic_count_range[0], cfg.mimic_count_range[1] + 1)),
                          rad_vox, tissue_ok, radii, taken)

    def profile(b):
        d = np.sqrt(((grid - b["center"].reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
        return 1.0 / (1.0 + np.exp((d - b["radius"]) / 0.5)), d <= b["radius"]

    gt = np.zeros(shape, dtype=bool)
    lesion_field = np.zeros(shape)
    mimic_field = np.zeros(shape)
    for b in lesions:
        p, inside = profile(b)
        lesion_field = np.maximum(lesion_field, p)
        gt |= inside
    for b in mimics:
        mimic_field = np.maximum(mimic_field, profile(b)[0])
    gt &= brain

    strength = rng.uniform(*cfg.strength_range)
    vols = {}
    for mi, m in enumerate(MODALITIES):
        base = np.zeros(shape)
        for name, mask in (("csf", csf), ("gm", gm), ("wm", wm)):
            base[mask] = TISSUE[name][mi]
        base[gm] *= tissue_sig[mi]
        base *= 1.0 + cfg.bias_amplitude * _smooth_noise(rng, shape, scale=12)  # smooth bias
        base *= 1.0 + strength * (lesion_sig[mi] - 1.0) * lesion_field
        base *= 1.0 + strength * (mimic_sig[mi] - 1.0) * mimic_field
        base += rng.standard_normal(shape) * cfg.noise_sigma * TISSUE["wm"][mi]
        base *= rng.uniform(*cfg.gain_range)
        base = np.where(brain, np.maximum(base, 1.0), 0.0)
        vols[m] = Volume(base.astype(np.float32).astype(np.float64), (cfg.spacing,) * 3)

    ref = vols["t1"]
    bm = BrainMask(brain, ref.spacing)
    gt_vol = Volume(gt.astype(np.uint8), ref.spacing)
    sur = derive_surs(gt_vol, bm, cfg.sur_lesion_blobs, cfg.sur_background_blobs, cfg.sur_radius,
                      seed=derive_seed(cfg.seed, "sur", case_id))
    csf_scr = derive_surs(Volume(csf.astype(np.uint8), ref.spacing), bm, 6, 6, 1,
                          seed=derive_seed(cfg.seed, "csf", case_id))
    case = MultiModalCase(case_id, brain_mask=bm, gt_mask=gt_vol, sur_mask=sur, csf_scribbles=csf_scr, **vols)
    case.validate()
    as_list = lambda bs: [{"center": [float(v) for v in b["center"]], "radius_vox": b["radius"]} for b in bs]
    return SynthCase(case, cluster, as_list(lesions), as_list(mimics), csf)


def generate_cases(cfg: SynthConfig) -> list[SynthCase]:
    return [generate_case(cfg, i) for i in range(cfg.n_cases)]


def generate_dataset(cfg: SynthConfig, out_dir: str | Path) -> Path:
    """Write the phantom tree and return the manifest path.

    Layout: ``case_<id>/{t1,t2,dwi,flair,gt,sur,csf}.nii.gz``,
    ``manifest.json`` and ``clusters_sidecar.json`` (cluster labels and blob
    geometry; never read by training code).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries, sidecar = [], {}
    for i in range(cfg.n_cases):
        sc = generate_case(cfg, i)
        c = sc.case
        d = out / c.case_id
        paths = {}
        for m in MODALITIES:
            paths[m] = d / f"{m}.nii.gz"
            write_volume(c.modality(m), paths[m])
        for key, v in (("gt", c.gt_mask), ("sur", c.sur_mask), ("csf", c.csf_scribbles)):
            paths[key] = d / f"{key}.nii.gz"
            write_volume(v, paths[key], np.uint8)
        entries.append(ManifestEntry(c.case_id, paths))
        sidecar[c.case_id] = {"cluster": sc.cluster, "lesions": sc.lesions, "mimics": sc.mimics}
    manifest = out / "manifest.json"
    write_manifest(DatasetManifest(entries), manifest)
    (out / "clusters_sidecar.json").write_text(json.dumps(
        {"n_clusters": cfg.n_clusters, "seed": cfg.seed, "cases": sidecar}, indent=1))
    return manifest
