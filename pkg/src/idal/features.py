"""Per-voxel feature matrices and per-case first-order statistics.

Voxel feature layout (``FEATURE_LAYOUT = "v1"``, 82 columns):

* 4 normalized intensities: t1, t2, dwi, flair
* 6 pairwise differences, later minus earlier modality
  (t2-t1, dwi-t1, flair-t1, dwi-t2, flair-t2, flair-dwi)
* for each modality, for sigma in 1, 3, 5 mm, 6 columns:
  Gaussian, DoG (G_sigma - G_2sigma), d2/dx2, d2/dy2, d2/dz2 of the smoothed
  image, and the Hessian eigenvalue of largest magnitude (sign kept)

Case statistics: 16 values per modality over brain voxels, 64 in total, in
``STAT_NAMES`` order.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .volume_io import MODALITIES, MultiModalCase, Volume

SIGMAS_MM = (1.0, 3.0, 5.0)
TRUNCATE = 4.0
FEATURE_LAYOUT = "v1"
PER_SCALE = ("gauss", "dog", "dxx", "dyy", "dzz", "hess_max")
PAIRS = tuple(combinations(range(len(MODALITIES)), 2))

FEATURE_NAMES: tuple[str, ...] = (
    tuple(MODALITIES)
    + tuple(f"{MODALITIES[j]}-{MODALITIES[i]}" for i, j in PAIRS)
    + tuple(f"{m}_{kind}_s{s:g}" for m in MODALITIES for s in SIGMAS_MM for kind in PER_SCALE)
)
N_FEATURES = len(FEATURE_NAMES)

STAT_NAMES = (
    "min", "max", "range", "mean", "variance", "sum", "median", "std",
    "mean_abs_dev", "rms", "uniformity", "entropy", "energy", "kurtosis",
    "skewness", "count",
)
STAT_BINS = 64
N_STATS = len(STAT_NAMES) * len(MODALITIES)


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelFeatureMatrix:
    values: np.ndarray  # (n_voxels, 82) float32
    voxel_index: np.ndarray  # C-order linear indices of brain voxels
    dims: tuple[int, int, int]
    case_id: str = ""

    @property
    def n_voxels(self) -> int:
        return self.values.shape[0]

    @property
    def n_features(self) -> int:
        return self.values.shape[1]

    def coords(self) -> np.ndarray:
        return np.stack(np.unravel_index(self.voxel_index, self.dims), axis=1)

    def content_hash(self) -> str:
        h = hashlib.sha256(np.ascontiguousarray(self.values, dtype="<f4").tobytes())
        h.update(np.ascontiguousarray(self.voxel_index, dtype="<i8").tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# filtering


def gaussian_kernel(sigma_vox: float, truncate: float = TRUNCATE) -> np.ndarray:
    radius = max(1, int(math.ceil(truncate * sigma_vox)))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def _convolve_axis(a: np.ndarray, kernel: np.ndarray, axis: int) -> np.ndarray:
    r = len(kernel) // 2
    pad = [(0, 0)] * a.ndim
    pad[axis] = (r, r)
    padded = np.pad(a, pad, mode="edge")
    n = a.shape[axis]
    out = np.zeros_like(a, dtype=np.float64)
    for i, kv in enumerate(kernel):
        out += kv * np.take(padded, np.arange(i, i + n), axis=axis)
    return out


def smooth_array(a: np.ndarray, sigma_mm: float, spacing) -> np.ndarray:
    if not sigma_mm > 0:
        raise FeatureError(f"sigma must be positive, got {sigma_mm}")
    out = np.asarray(a, dtype=np.float64)
    for axis, h in enumerate(spacing):
        out = _convolve_axis(out, gaussian_kernel(sigma_mm / h), axis)
    return out


def gaussian_smooth(v: Volume, sigma_mm: float) -> Volume:
    """Separable Gaussian blur; sigma given in mm, converted per axis.

    The kernel is cut at 4 sigma and renormalized to sum 1; borders replicate
    the edge voxel.
    """
    return v.with_data(smooth_array(v.data, sigma_mm, v.spacing))


def _shift(a: np.ndarray, axis: int, step: int) -> np.ndarray:
    """a[i + step] along axis with edge replication."""
    pad = [(0, 0)] * a.ndim
    pad[axis] = (1, 1)
    p = np.pad(a, pad, mode="edge")
    n = a.shape[axis]
    return np.take(p, np.arange(1 + step, 1 + step + n), axis=axis)


def first_derivative(a: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (_shift(a, axis, 1) - _shift(a, axis, -1)) / (2.0 * h)


def second_derivative(a: np.ndarray, axis: int, h: float) -> np.ndarray:
    return (_shift(a, axis, 1) - 2.0 * a + _shift(a, axis, -1)) / (h * h)


def hessian_max_eigenvalue(a: np.ndarray, spacing, where: np.ndarray | None = None) -> np.ndarray:
    """Signed Hessian eigenvalue with the largest magnitude at each voxel.

    Returns values for the voxels selected by ``where`` (flat boolean mask) or
    for every voxel.
    """
    H = np.empty(a.shape + (3, 3))
    d1 = [first_derivative(a, ax, spacing[ax]) for ax in range(3)]
    for i in range(3):
        H[..., i, i] = second_derivative(a, i, spacing[i])
        for j in range(i + 1, 3):
            H[..., i, j] = H[..., j, i] = first_derivative(d1[i], j, spacing[j])
    H = H.reshape(-1, 3, 3)
    if where is not None:
        H = H[where]
    ev = np.linalg.eigvalsh(H)
    pick = np.argmax(np.abs(ev), axis=1)
    return ev[np.arange(len(ev)), pick]


# --------------------------------------------------------------------------
# voxel features


def feature_stack(case: MultiModalCase, sigmas=SIGMAS_MM) -> tuple[np.ndarray, np.ndarray]:
    if case.normalization is None:
        raise FeatureError(f"{case.case_id}: case is not normalized")
    brain = case.brain_mask.data.ravel()
    if not brain.any():
        raise FeatureError(f"{case.case_id}: empty brain mask")
    spacing = case.t1.spacing
    idx = np.flatnonzero(brain)
    cols: list[np.ndarray] = []
    raw = [case.modality(m).data.astype(np.float64) for m in MODALITIES]
    for a in raw:
        cols.append(a.ravel()[idx])
    for i, j in PAIRS:
        cols.append(cols[j] - cols[i])
    for a in raw:
        cache: dict[float, np.ndarray] = {}

        def g(s):
            if s not in cache:
                cache[s] = smooth_array(a, s, spacing)
            return cache[s]

        for s in sigmas:
            gs = g(s)
            cols.append(gs.ravel()[idx])
            cols.append((gs - g(2 * s)).ravel()[idx])
            for ax in range(3):
                cols.append(second_derivative(gs, ax, spacing[ax]).ravel()[idx])
            cols.append(hessian_max_eigenvalue(gs, spacing, brain))
    return np.stack(cols, axis=1).astype(np.float32), idx


def voxel_features(case: MultiModalCase) -> VoxelFeatureMatrix:
    values, idx = feature_stack(case)
    if values.shape[1] != N_FEATURES:
        raise FeatureError(f"layout produced {values.shape[1]} columns, expected {N_FEATURES}")
    if not np.isfinite(values).all():
        raise FeatureError(f"{case.case_id}: non-finite voxel features")
    return VoxelFeatureMatrix(values, idx, case.t1.dims, case.case_id)


def save_feature_cache(fm: VoxelFeatureMatrix, path: str | Path) -> None:
    """Flat little-endian float32 values plus a JSON sidecar (``<path>.json``)."""
    path = Path(path)
    np.ascontiguousarray(fm.values, dtype="<f4").tofile(path)
    np.ascontiguousarray(fm.voxel_index, dtype="<i8").tofile(path.with_suffix(path.suffix + ".idx"))
    meta = {
        "case_id": fm.case_id,
        "dims": list(fm.dims),
        "n_voxels": fm.n_voxels,
        "feature_layout": FEATURE_LAYOUT,
        "feature_order": list(FEATURE_NAMES),
        "content_hash": fm.content_hash(),
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(meta, indent=1))


def load_feature_cache(path: str | Path) -> VoxelFeatureMatrix:
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    if meta["feature_layout"] != FEATURE_LAYOUT:
        raise FeatureError(f"{path}: feature layout {meta['feature_layout']} != {FEATURE_LAYOUT}")
    values = np.fromfile(path, dtype="<f4").reshape(meta["n_voxels"], len(meta["feature_order"]))
    idx = np.fromfile(path.with_suffix(path.suffix + ".idx"), dtype="<i8")
    fm = VoxelFeatureMatrix(values, idx, tuple(meta["dims"]), meta["case_id"])
    if fm.content_hash() != meta["content_hash"]:
        raise FeatureError(f"{path}: content hash mismatch")
    return fm


# --------------------------------------------------------------------------
# case statistics


def first_order_statistics(x: np.ndarray, bins: int = STAT_BINS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    n = x.size
    if n == 0:
        raise FeatureError("no voxels")
    lo, hi = x.min(), x.max()
    mean = x.mean()
    dev = x - mean
    var = np.mean(dev**2)
    std = math.sqrt(var)
    if hi > lo:
        counts, _ = np.histogram(x, bins=bins, range=(lo, hi))
    else:
        counts = np.array([n])
    p = counts[counts > 0] / n
    uniformity = float(np.sum(p**2))
    entropy = float(-np.sum(p * np.log2(p)))
    if var > 0:
        skew = np.mean(dev**3) / var**1.5
        kurt = np.mean(dev**4) / var**2 - 3.0
    else:
        skew = kurt = 0.0
    return np.array([
        lo, hi, hi - lo, mean, var, x.sum(), np.median(x), std,
        np.mean(np.abs(dev)), math.sqrt(np.mean(x**2)), uniformity, entropy,
        np.sum(x**2), kurt, skew, float(n),
    ])


def case_statistics(case: MultiModalCase) -> np.ndarray:
    """64-vector: ``STAT_NAMES`` over brain voxels for t1, t2, dwi, flair."""
    brain = case.brain_mask.data
    if not brain.any():
        raise FeatureError(f"{case.case_id}: empty brain mask")
    return np.concatenate([first_order_statistics(case.modality(m).data[brain]) for m in MODALITIES])
