"""Mode-based intensity normalization.

Per case and modality, intensities are mapped linearly so that the CSF mode
lands on 0 and the whole-brain mode on 1. CSF voxels come from a small
intensity-only classifier trained on CSF scribbles.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .forest import ForestConfig, ForestModel, fit_extratrees, predict_proba
from .volume_io import MODALITIES, MultiModalCase

log = logging.getLogger(__name__)

MODE_BINS = 256


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True)
class ModalityParams:
    csf_mode: float
    brain_mode: float


@dataclass(frozen=True)
class NormalizationParams:
    modalities: dict[str, ModalityParams]
    heuristic_csf: bool = False

    def to_dict(self) -> dict:
        return {
            "heuristic_csf": self.heuristic_csf,
            **{m: {"csf_mode": p.csf_mode, "brain_mode": p.brain_mode} for m, p in self.modalities.items()},
        }


@dataclass
class CsfModel:
    forest: ForestModel | None
    feature_order: tuple[str, ...] = MODALITIES
    training_accuracy: float | None = None
    heuristic: bool = False
    t2_percentile: float = 90.0

    def predict(self, case: MultiModalCase) -> np.ndarray:
        """Boolean CSF map restricted to the brain mask."""
        brain = case.brain_mask.data
        out = np.zeros(brain.shape, dtype=bool)
        if self.heuristic:
            t2 = case.t2.data[brain]
            out[brain] = t2 > np.percentile(t2, self.t2_percentile)
            return out
        X = np.stack([case.modality(m).data[brain] for m in self.feature_order], axis=1)
        out[brain] = predict_proba(self.forest, X)[:, 1] >= 0.5
        return out


def estimate_mode(samples, bins: int = MODE_BINS) -> float:
    """Center of the fullest histogram bin over the 1st-99th percentile range."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise NormalizationError("cannot estimate the mode of an empty sample")
    if bins < 2:
        raise NormalizationError("bins must be >= 2")
    lo, hi = np.percentile(x, [1.0, 99.0])
    if not hi > lo:
        return float(lo)
    counts, edges = np.histogram(x, bins=bins, range=(lo, hi))
    centers = 0.5 * (edges[:-1] + edges[1:])
    tied = np.flatnonzero(counts == counts.max())
    # equal counts go to the bin nearest the median, a rule that survives
    # negative-slope maps (first-index argmax does not)
    i = tied[np.argmin(np.abs(centers[tied] - np.median(x)))]
    return float(centers[i])


def mode_bin_width(samples, bins: int = MODE_BINS) -> float:
    lo, hi = np.percentile(np.asarray(samples, dtype=np.float64).ravel(), [1.0, 99.0])
    return float(hi - lo) / bins


def fit_csf_model(cases, n_trees: int = 10, seed: int = 0) -> CsfModel:
    """Train the CSF-vs-rest classifier on raw intensities of scribbled voxels.

    Scribble labels: 2 = CSF, 1 = not CSF, 0 = unlabeled.
    """
    X, y = [], []
    for case in cases:
        if case.csf_scribbles is None:
            continue
        lab = case.csf_scribbles.data
        sel = lab > 0
        if not sel.any():
            continue
        X.append(np.stack([case.modality(m).data[sel] for m in MODALITIES], axis=1))
        y.append((lab[sel] == 2).astype(np.int64))
    if not X:
        raise NormalizationError("no CSF scribbles in any case")
    X = np.concatenate(X)
    y = np.concatenate(y)
    if len(np.unique(y)) < 2:
        raise NormalizationError("CSF scribbles cover only one class")
    forest = fit_extratrees(X, y, None, ForestConfig(n_trees=n_trees, min_samples_leaf=1, seed=seed))
    acc = float(np.mean((predict_proba(forest, X)[:, 1] >= 0.5) == y))
    log.info("CSF classifier: %d scribbled voxels, training accuracy %.4f", len(y), acc)
    return CsfModel(forest, MODALITIES, acc)


def heuristic_csf_model(t2_percentile: float = 90.0) -> CsfModel:
    """Fallback when a dataset has no CSF scribbles: the brightest T2 decile."""
    return CsfModel(None, heuristic=True, t2_percentile=t2_percentile)


def csf_model_for(cases, seed: int = 0) -> CsfModel:
    try:
        return fit_csf_model(cases, seed=seed)
    except NormalizationError as exc:
        log.warning("%s; falling back to heuristic CSF", exc)
        return heuristic_csf_model()


def normalize_case(case: MultiModalCase, csf_model: CsfModel) -> tuple[MultiModalCase, NormalizationParams]:
    brain = case.brain_mask.data
    if not brain.any():
        raise NormalizationError(f"{case.case_id}: empty brain mask")
    csf = csf_model.predict(case)
    if not csf.any():
        raise NormalizationError(f"{case.case_id}: no voxels classified as CSF")
    params = {}
    new = {}
    for m in MODALITIES:
        data = case.modality(m).data
        csf_mode = estimate_mode(data[csf])
        brain_mode = estimate_mode(data[brain])
        if csf_mode == brain_mode:
            raise NormalizationError(f"{case.case_id}: {m} CSF and brain modes coincide ({csf_mode})")
        out = np.zeros_like(data, dtype=np.float64)
        out[brain] = (data[brain] - csf_mode) / (brain_mode - csf_mode)
        new[m] = case.modality(m).with_data(out)
        params[m] = ModalityParams(csf_mode, brain_mode)
    np_ = NormalizationParams(params, csf_model.heuristic)
    return replace(case, normalization=np_, **new), np_
