"""Offline similarity learning and online, input-specific voxel classifiers.

Offline: every training case gets its own voxel classifier, which is scored
(Dice) on every other case; the resulting asymmetric similarity matrix and
per-case statistics train a neighbourhood approximating forest.

Online: a new case is normalized, its statistics are matched against the
forest, and a fresh voxel classifier is trained on the scribbles of the
top-k retrieved cases only.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from ._rng import derive_seed
from .dalsa import compute_weights, fit_selection_model, raw_weights, weight_summary
from .features import case_statistics, voxel_features
from .forest import ForestConfig, ForestError, cv_select_hparams, fit_extratrees, load_forest, predict_proba, save_forest
from .naf import NafConfig, NafModel, fit_naf, retrieve_neighbors, to_distance
from .preprocess import CsfModel, NormalizationParams, csf_model_for, normalize_case
from .volume_io import BrainMask, MultiModalCase, Volume, write_mask, write_volume

log = logging.getLogger(__name__)

MODEL_FORMAT = 1


class PipelineError(RuntimeError):
    pass


class TrainingError(PipelineError):
    def __init__(self, case_id, msg):
        self.case_id = case_id
        super().__init__(f"{case_id}: {msg}")


@dataclass(frozen=True)
class IdalConfig:
    seed: int = 0
    k: int = 3
    n_trees: int = 50
    k_features: int | None = None
    default_min_leaf: int = 5
    cw_grid: tuple[float, ...] = (1.0, 2.0, 5.0, 10.0, 20.0)
    leaf_grid: tuple[int, ...] = (1, 5, 10, 25, 50)
    cv_folds: int = 3
    max_samples_per_case: int = 200_000
    dalsa: bool = True
    dalsa_brain_cap: int = 100_000
    naf: NafConfig = NafConfig()
    threads: int = 1

    def forest_config(self, seed: int) -> ForestConfig:
        return ForestConfig(
            n_trees=self.n_trees,
            k_features=self.k_features,
            min_samples_leaf=self.default_min_leaf,
            seed=seed,
            n_threads=self.threads,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "IdalConfig":
        d = dict(d)
        if "naf" in d and isinstance(d["naf"], Mapping):
            d["naf"] = NafConfig(**d["naf"])
        for key in ("cw_grid", "leaf_grid"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainingBundle:
    """Scribbled voxels of one case with labels, weights and CV fold ids."""

    case_id: str
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    fold: np.ndarray
    weight_summary: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)


@dataclass
class PreparedCase:
    case: MultiModalCase  # normalized
    params: NormalizationParams
    features: np.ndarray  # (n_brain, 82) float32
    voxel_index: np.ndarray
    stats: np.ndarray  # (64,)
    bundle: TrainingBundle | None = None

    @property
    def case_id(self) -> str:
        return self.case.case_id

    @property
    def gt(self) -> np.ndarray | None:
        return None if self.case.gt_mask is None else self.case.gt_mask.data.astype(bool)


@dataclass(frozen=True)
class SimilarityMatrix:
    """Entry (i, j): Dice on case j of a classifier trained on case i alone."""

    case_ids: tuple[str, ...]
    values: np.ndarray

    def __post_init__(self):
        m = len(self.case_ids)
        if self.values.shape != (m, m):
            raise PipelineError(f"similarity matrix shape {self.values.shape} != ({m}, {m})")
        if (self.values < 0).any() or (self.values > 1).any():
            raise PipelineError("similarity values must lie in [0, 1]")

    def index(self, case_id: str) -> int:
        try:
            return self.case_ids.index(case_id)
        except ValueError:
            raise KeyError(f"unknown case id {case_id}") from None

    def submatrix(self, ids: Sequence[str]) -> "SimilarityMatrix":
        idx = [self.index(i) for i in ids]
        return SimilarityMatrix(tuple(ids), self.values[np.ix_(idx, idx)])

    def distances(self) -> np.ndarray:
        return np.vectorize(to_distance)(self.values)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            fh.write("row_id,col_id,similarity\n")
            for i, a in enumerate(self.case_ids):
                for j, b in enumerate(self.case_ids):
                    fh.write(f"{a},{b},{self.values[i, j]:.17g}\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "SimilarityMatrix":
        rows = []
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            ri, ci, si = header.index("row_id"), header.index("col_id"), header.index("similarity")
            for line in fh:
                parts = line.strip().split(",")
                if len(parts) > 1:
                    rows.append((parts[ri], parts[ci], float(parts[si])))
        ids = list(dict.fromkeys(r for r, _, _ in rows))
        pos = {c: i for i, c in enumerate(ids)}
        values = np.full((len(ids), len(ids)), np.nan)
        for r, c, s in rows:
            values[pos[r], pos[c]] = s
        if np.isnan(values).any():
            raise PipelineError(f"{path}: incomplete similarity matrix")
        return cls(tuple(ids), values)


@dataclass
class SegmentationResult:
    mask: Volume
    probability: Volume
    selected_case_ids: list[str]
    provenance: dict

    def save(self, out_dir: str | Path, reference: Volume) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_mask(self.mask, out / "mask.nii.gz", reference)
        write_volume(self.probability, out / "probability.nii.gz")
        (out / "provenance.json").write_text(json.dumps(self.provenance, indent=2, default=_json_default))


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# --------------------------------------------------------------------------
# case preparation


def fold_ids(coords: np.ndarray, y: np.ndarray, folds: int) -> np.ndarray:
    """Contiguous slabs along the first axis, cut separately per class.

    Each class is split into ``folds`` equally populated slabs, so every fold
    holds both classes even when all lesion scribbles sit in one region.
    """
    out = np.empty(len(coords), dtype=np.int64)
    for label in np.unique(y):
        rows = np.flatnonzero(y == label)
        order = rows[np.argsort(coords[rows, 0], kind="stable")]
        out[order] = np.arange(len(rows)) * folds // len(rows)
    return out


def make_bundle(pc: PreparedCase, cfg: IdalConfig) -> TrainingBundle:
    case = pc.case
    if case.sur_mask is None:
        raise TrainingError(pc.case_id, "no SUR mask")
    sur_flat = case.sur_mask.data.ravel()[pc.voxel_index]
    rows = np.flatnonzero(sur_flat > 0)
    rng = np.random.default_rng(derive_seed(cfg.seed, "subsample", pc.case_id))
    if len(rows) > cfg.max_samples_per_case:
        rows = np.sort(rng.choice(rows, cfg.max_samples_per_case, replace=False))
    y = (sur_flat[rows] == 2).astype(np.int64)
    if len(np.unique(y)) < 2:
        raise TrainingError(pc.case_id, "SUR mask does not contain both classes")
    X = pc.features[rows]
    summary = {}
    if cfg.dalsa:
        n_brain = len(pc.features)
        brain_rows = np.arange(n_brain)
        if n_brain > cfg.dalsa_brain_cap:
            brain_rows = np.sort(rng.choice(n_brain, cfg.dalsa_brain_cap, replace=False))
        model = fit_selection_model(X, pc.features[brain_rows], on_separation="clip")
        w = compute_weights(model, X)
        summary = weight_summary(w, raw_weights(model, X))
        summary["converged"] = model.converged
    else:
        w = np.ones(len(y))
    coords = np.stack(np.unravel_index(pc.voxel_index[rows], case.t1.dims), axis=1)
    return TrainingBundle(pc.case_id, X, y, w, fold_ids(coords, y, cfg.cv_folds), summary)


def prepare_case(case: MultiModalCase, csf_model: CsfModel, cfg: IdalConfig, with_bundle: bool = True) -> PreparedCase:
    norm, params = normalize_case(case, csf_model)
    fm = voxel_features(norm)
    pc = PreparedCase(norm, params, fm.values, fm.voxel_index, case_statistics(norm))
    if with_bundle and case.sur_mask is not None:
        pc.bundle = make_bundle(pc, cfg)
    return pc


def prepare_dataset(cases: Sequence[MultiModalCase], cfg: IdalConfig, csf_model: CsfModel | None = None):
    """Normalize and featurize every case; returns (prepared list, csf model)."""
    csf_model = csf_model or csf_model_for(cases, seed=derive_seed(cfg.seed, "csf"))
    prepared = []
    for case in cases:
        t0 = time.perf_counter()
        prepared.append(prepare_case(case, csf_model, cfg))
        log.debug("prepared %s in %.1fs", case.case_id, time.perf_counter() - t0)
    return prepared, csf_model


def prepare_query(case: MultiModalCase, csf_model: CsfModel, cfg: IdalConfig) -> PreparedCase:
    # the query's labels are never looked at
    blind = replace(case, gt_mask=None, sur_mask=None, csf_scribbles=None)
    return prepare_case(blind, csf_model, cfg, with_bundle=False)


# --------------------------------------------------------------------------
# voxel classifier


@dataclass
class VoxelClassifier:
    forest: object
    class_weight: float
    min_samples_leaf: int
    training_ids: list[str]
    seed: int


def train_vc(bundles: Sequence[TrainingBundle], cfg: IdalConfig, seed: int) -> VoxelClassifier:
    """Cross-validate class weight and leaf size, then fit the final forest."""
    if not bundles:
        raise PipelineError("no training cases")
    X = np.concatenate([b.X for b in bundles])
    y = np.concatenate([b.y for b in bundles])
    w = np.concatenate([b.w for b in bundles])
    folds = np.concatenate([b.fold for b in bundles])
    base = cfg.forest_config(derive_seed(seed, "cv"))
    try:
        cw, leaf = cv_select_hparams(X, y, w, cfg.cw_grid, cfg.leaf_grid, cfg.cv_folds, groups=folds, cfg=base)
    except ForestError as exc:
        log.warning("CV failed for %s (%s); using defaults", [b.case_id for b in bundles], exc)
        cw, leaf = 1.0, cfg.default_min_leaf
    final = replace(cfg.forest_config(derive_seed(seed, "final")), class_weights=(1.0, cw), min_samples_leaf=leaf)
    forest = fit_extratrees(X, y, w, final, n_classes=2)
    return VoxelClassifier(forest, cw, leaf, [b.case_id for b in bundles], seed)


def predict_case(vc: VoxelClassifier, pc: PreparedCase) -> tuple[np.ndarray, np.ndarray]:
    """(probability volume, binary mask volume) as arrays in the case grid."""
    p = predict_proba(vc.forest, pc.features)[:, 1]
    prob = np.zeros(pc.case.t1.dims)
    prob.ravel()[pc.voxel_index] = p
    return prob, prob >= 0.5


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise PipelineError(f"mask shapes differ: {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


# --------------------------------------------------------------------------
# offline stage


def build_similarity_matrix(prepared: Sequence[PreparedCase], cfg: IdalConfig) -> SimilarityMatrix:
    for pc in prepared:
        if pc.bundle is None or pc.gt is None:
            raise TrainingError(pc.case_id, "similarity needs both gt and SUR masks")
    ids = tuple(pc.case_id for pc in prepared)
    values = np.zeros((len(ids), len(ids)))
    for i, src in enumerate(prepared):
        t0 = time.perf_counter()
        try:
            vc = train_vc([src.bundle], cfg, derive_seed(cfg.seed, "sim", src.case_id))
        except (ForestError, PipelineError) as exc:
            raise TrainingError(src.case_id, f"voxel classifier training failed: {exc}") from exc
        for j, dst in enumerate(prepared):
            values[i, j] = dice(predict_case(vc, dst)[1], dst.gt)
        log.info("similarity row %s done in %.1fs", src.case_id, time.perf_counter() - t0)
    return SimilarityMatrix(ids, values)


def similarity_to_target(prepared: Sequence[PreparedCase], query: PreparedCase, gt: np.ndarray,
                         cfg: IdalConfig) -> SimilarityMatrix:
    """Matrix over ``prepared + [query]`` whose query column is filled.

    Column entries are the Dice each single-case classifier reaches on the
    query's ``gt``; the classifiers match those of
    :func:`build_similarity_matrix`. Other entries are left at 0.
    """
    ids = tuple(pc.case_id for pc in prepared) + (query.case_id,)
    values = np.zeros((len(ids), len(ids)))
    for i, src in enumerate(prepared):
        if src.bundle is None:
            raise TrainingError(src.case_id, "no SUR mask")
        vc = train_vc([src.bundle], cfg, derive_seed(cfg.seed, "sim", src.case_id))
        values[i, -1] = dice(predict_case(vc, query)[1], gt)
    return SimilarityMatrix(ids, values)


@dataclass
class IdalModel:
    naf: NafModel
    sim: SimilarityMatrix
    case_features: np.ndarray  # (M, 64), rows in sim.case_ids order
    bundles: dict[str, TrainingBundle]
    csf_model: CsfModel
    config: IdalConfig
    manifest: str | None = None

    @property
    def training_ids(self) -> list[str]:
        return list(self.sim.case_ids)

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.naf.save(out / "naf.json")
        self.sim.to_csv(out / "sim_matrix.csv")
        np.save(out / "case_features.npy", self.case_features)
        arrays = {}
        for cid, b in self.bundles.items():
            for name in ("X", "y", "w", "fold"):
                arrays[f"{cid}::{name}"] = getattr(b, name)
        np.savez_compressed(out / "bundles.npz", **arrays)
        csf = {"heuristic": self.csf_model.heuristic, "t2_percentile": self.csf_model.t2_percentile,
               "training_accuracy": self.csf_model.training_accuracy}
        if self.csf_model.forest is not None:
            save_forest(self.csf_model.forest, out / "csf_forest.npz", feature_layout="raw-intensity-4")
        hashes = {p.name: hashlib.sha256(p.read_bytes()).hexdigest()
                  for p in sorted(out.iterdir()) if p.name != "idal.json"}
        doc = {
            "format_version": MODEL_FORMAT,
            "training_ids": self.training_ids,
            "config": self.config.to_dict(),
            "csf": csf,
            "manifest": self.manifest,
            "weight_summaries": {cid: b.weight_summary for cid, b in self.bundles.items()},
            "hashes": hashes,
        }
        (out / "idal.json").write_text(json.dumps(doc, indent=2, default=_json_default))

    @classmethod
    def load(cls, model_dir: str | Path) -> "IdalModel":
        d = Path(model_dir)
        doc = json.loads((d / "idal.json").read_text())
        if doc.get("format_version") != MODEL_FORMAT:
            raise PipelineError(f"{d}: unsupported model format")
        for name, digest in doc["hashes"].items():
            if hashlib.sha256((d / name).read_bytes()).hexdigest() != digest:
                raise PipelineError(f"{d / name}: hash mismatch")
        cfg = IdalConfig.from_dict(doc["config"])
        bundles = {}
        with np.load(d / "bundles.npz") as z:
            for cid in doc["training_ids"]:
                bundles[cid] = TrainingBundle(cid, *(z[f"{cid}::{n}"] for n in ("X", "y", "w", "fold")),
                                              doc["weight_summaries"].get(cid, {}))
        csf = doc["csf"]
        forest = load_forest(d / "csf_forest.npz") if (d / "csf_forest.npz").exists() else None
        csf_model = CsfModel(forest, training_accuracy=csf["training_accuracy"], heuristic=csf["heuristic"],
                             t2_percentile=csf["t2_percentile"])
        return cls(NafModel.load(d / "naf.json"), SimilarityMatrix.from_csv(d / "sim_matrix.csv"),
                   np.load(d / "case_features.npy"), bundles, csf_model, cfg, doc.get("manifest"))


def fit_sc(prepared_by_id: Mapping[str, PreparedCase], sim: SimilarityMatrix, cfg: IdalConfig) -> NafModel:
    ids = list(sim.case_ids)
    feats = np.stack([prepared_by_id[i].stats for i in ids])
    return fit_naf(feats, sim.distances(), replace(cfg.naf, seed=derive_seed(cfg.seed, "naf", *ids) >> 1), ids=ids)


def train_offline_prepared(prepared: Sequence[PreparedCase], csf_model: CsfModel, cfg: IdalConfig,
                           sim: SimilarityMatrix | None = None) -> IdalModel:
    ids = [pc.case_id for pc in prepared]
    for pc in prepared:
        if pc.gt is None:
            raise TrainingError(pc.case_id, "no ground truth")
        if pc.bundle is None:
            raise TrainingError(pc.case_id, "no SUR mask")
    if sim is None:
        sim = build_similarity_matrix(prepared, cfg)
    elif list(sim.case_ids) != ids:
        sim = sim.submatrix(ids)
    by_id = {pc.case_id: pc for pc in prepared}
    naf = fit_sc(by_id, sim, cfg)
    feats = np.stack([by_id[i].stats for i in sim.case_ids])
    return IdalModel(naf, sim, feats, {pc.case_id: pc.bundle for pc in prepared}, csf_model, cfg)


def train_offline(dataset: Sequence[MultiModalCase], cfg: IdalConfig = IdalConfig(),
                  sim: SimilarityMatrix | None = None) -> IdalModel:
    for case in dataset:
        if case.gt_mask is None:
            raise TrainingError(case.case_id, "no ground truth")
        if case.sur_mask is None:
            raise TrainingError(case.case_id, "no SUR mask")
    prepared, csf_model = prepare_dataset(dataset, cfg)
    return train_offline_prepared(prepared, csf_model, cfg, sim)


# --------------------------------------------------------------------------
# online stage


def vc_seed(master: int, query_id: str, training_ids: Iterable[str]) -> int:
    # keyed by the training set, not the selector: equal selections give equal classifiers
    return derive_seed(master, "vc", query_id, *sorted(training_ids))


def _segment_with(bundles: Sequence[TrainingBundle], query: PreparedCase, cfg: IdalConfig,
                  method: str, extra: dict | None = None) -> SegmentationResult:
    t0 = time.perf_counter()
    seed = vc_seed(cfg.seed, query.case_id, [b.case_id for b in bundles])
    vc = train_vc(bundles, cfg, seed)
    prob, mask = predict_case(vc, query)
    mask &= query.case.brain_mask.data
    ref = query.case.t1
    provenance = {
        "method": method,
        "case_id": query.case_id,
        "selected_ids": vc.training_ids,
        "training_ids": vc.training_ids,
        "class_weight": vc.class_weight,
        "min_samples_leaf": vc.min_samples_leaf,
        "seed": seed,
        "config_hash": cfg.digest(),
        "normalization": query.params.to_dict(),
        "seconds": time.perf_counter() - t0,
        **(extra or {}),
    }
    return SegmentationResult(ref.with_data(mask.astype(np.uint8)), ref.with_data(prob), list(vc.training_ids), provenance)


def select_neighbors(naf: NafModel, stats: np.ndarray, k: int) -> list[tuple[str, int]]:
    return retrieve_neighbors(naf, stats, k)


def segment_prepared(model: IdalModel, query: PreparedCase, k: int | None = None) -> SegmentationResult:
    k = model.config.k if k is None else k
    if k < 1 or k > len(model.training_ids):
        raise PipelineError(f"k={k} outside [1, {len(model.training_ids)}]")
    ranked = select_neighbors(model.naf, query.stats, k)
    chosen = [cid for cid, _ in ranked]
    return _segment_with([model.bundles[c] for c in chosen], query, model.config, "idal",
                         {"votes": dict(ranked), "sc_training_ids": list(model.naf.training_ids)})


def segment(model: IdalModel, case: MultiModalCase, k: int | None = None) -> SegmentationResult:
    """Segment an unseen case with a classifier trained on its k nearest cases."""
    return segment_prepared(model, prepare_query(case, model.csf_model, model.config), k)


def segment_pooled_prepared(bundles: Sequence[TrainingBundle], query: PreparedCase, cfg: IdalConfig) -> SegmentationResult:
    return _segment_with(list(bundles), query, cfg, "pooled")


def segment_pooled(training: IdalModel | Sequence[PreparedCase], case: MultiModalCase,
                   cfg: IdalConfig | None = None, csf_model: CsfModel | None = None) -> SegmentationResult:
    """Baseline: one classifier trained on every training case's scribbles."""
    if isinstance(training, IdalModel):
        bundles = [training.bundles[i] for i in training.training_ids]
        cfg, csf_model = cfg or training.config, csf_model or training.csf_model
    else:
        bundles = [pc.bundle for pc in training]
        if cfg is None or csf_model is None:
            raise PipelineError("cfg and csf_model are required with prepared cases")
    return segment_pooled_prepared(bundles, prepare_query(case, csf_model, cfg), cfg)


def oracle_selection(sim: SimilarityMatrix, target_id: str, k: int, candidates: Iterable[str] | None = None) -> list[str]:
    """The k cases whose single-case classifiers score best on the target."""
    j = sim.index(target_id)
    pool = [c for c in (candidates if candidates is not None else sim.case_ids) if c != target_id]
    if k < 1 or k > len(pool):
        raise PipelineError(f"k={k} outside [1, {len(pool)}]")
    scored = sorted(pool, key=lambda c: (-sim.values[sim.index(c), j], c))
    return scored[:k]


def segment_oracle_prepared(bundles: Mapping[str, TrainingBundle], sim: SimilarityMatrix, query: PreparedCase,
                            cfg: IdalConfig, k: int | None = None) -> SegmentationResult:
    k = cfg.k if k is None else k
    chosen = oracle_selection(sim, query.case_id, k, candidates=list(bundles))
    return _segment_with([bundles[c] for c in chosen], query, cfg, "oracle")


def segment_oracle(dataset: Sequence[PreparedCase], sim: SimilarityMatrix, target_id: str, cfg: IdalConfig,
                   k: int | None = None) -> SegmentationResult:
    """Upper bound: neighbors read off the true similarity column of the target."""
    by_id = {pc.case_id: pc for pc in dataset}
    if target_id not in by_id:
        raise KeyError(f"unknown case id {target_id}")
    sim.index(target_id)
    bundles = {cid: pc.bundle for cid, pc in by_id.items() if cid != target_id}
    query = by_id[target_id]
    return segment_oracle_prepared(bundles, sim, query, cfg, k)


def mask_within_brain(result: SegmentationResult, brain: BrainMask) -> bool:
    return not bool((result.mask.data.astype(bool) & ~brain.data).any())
