"""Sample correction weights for sparse (scribble) annotations.

Scribbled voxels are a biased sample of the brain. Each scribbled voxel x gets
the weight ``P_brain(x) / P_scribble(x)``. The ratio comes from a logistic
model that separates scribbled voxels (class S) from a uniform brain sample
(class B): if ``f`` is its log-odds for S, then
``P_B(x)/P_S(x) = exp(-f(x)) * n_S / n_B``, evaluated as a single exponential.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume_io import BrainMask, Volume

CLIP_LOW = 1e-3
CLIP_HIGH = 1e3


class DalsaError(ValueError):
    pass


class SeparationError(DalsaError):
    """The logistic fit diverged because S and B are (quasi-)separable."""


@dataclass(frozen=True)
class SelectionModel:
    coefficients: np.ndarray  # [bias, w_1..w_D] on the standardized scale
    mean: np.ndarray
    scale: np.ndarray
    prior_ratio: float  # n_B / n_S
    n_iter: int
    converged: bool

    def decision_function(self, X) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean) / self.scale
        return self.coefficients[0] + Z @ self.coefficients[1:]

    @property
    def raw_coefficients(self) -> np.ndarray:
        """Bias and slopes on the original feature scale."""
        slopes = self.coefficients[1:] / self.scale
        bias = self.coefficients[0] - np.sum(slopes * self.mean)
        return np.concatenate([[bias], slopes])


def fit_selection_model(
    X_sur,
    X_brain,
    max_iter: int = 100,
    tol: float = 1e-8,
    on_separation: str = "raise",
    divergence_bound: float = 1e3,
) -> SelectionModel:
    """Unregularized logistic regression (IRLS) of scribbled vs brain voxels.

    Features are standardized on the pooled sample; constant columns get unit
    scale and end up with a zero coefficient. Newton steps use a least-squares
    solve so collinear features (e.g. modality differences) are handled.

    If the coefficients blow past ``divergence_bound`` the classes are treated
    as separable: ``on_separation="raise"`` raises :class:`SeparationError`,
    ``"clip"`` stops and returns the current iterate, whose weights are then
    bounded by the clipping in :func:`compute_weights`.
    """
    X_sur = np.atleast_2d(np.asarray(X_sur, dtype=np.float64))
    X_brain = np.atleast_2d(np.asarray(X_brain, dtype=np.float64))
    if X_sur.shape[0] < 10 or X_brain.shape[0] < 10:
        raise DalsaError(f"need >= 10 samples per class, got {X_sur.shape[0]} and {X_brain.shape[0]}")
    if X_sur.shape[1] != X_brain.shape[1]:
        raise DalsaError("feature dimension mismatch")
    if on_separation not in ("raise", "clip"):
        raise ValueError(on_separation)

    X = np.vstack([X_sur, X_brain])
    t = np.concatenate([np.ones(len(X_sur)), np.zeros(len(X_brain))])
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale[~(scale > 0)] = 1.0
    Z = np.hstack([np.ones((len(X), 1)), (X - mean) / scale])

    beta = np.zeros(Z.shape[1])
    # start at the class-prior log-odds
    beta[0] = np.log(len(X_sur) / len(X_brain))
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        eta = Z @ beta
        p = 0.5 * (1.0 + np.tanh(0.5 * eta))
        W = p * (1.0 - p)
        H = Z.T @ (Z * W[:, None])
        g = Z.T @ (t - p)
        step = np.linalg.lstsq(H, g, rcond=1e-10)[0]
        beta = beta + step
        if np.abs(beta).max() > divergence_bound:
            break
        if np.abs(step).max() < tol:
            converged = True
            break
    # once probabilities saturate the Newton steps vanish, so a separable
    # sample can look converged; no finite maximum exists in that case
    f = Z @ beta
    separated = np.abs(beta).max() > divergence_bound or f[: len(X_sur)].min() > f[len(X_sur) :].max()
    if separated:
        if on_separation == "raise":
            raise SeparationError(
                "logistic fit diverged (classes separable); retry with on_separation='clip' "
                "to fall back to clipped weights"
            )
        converged = False
    return SelectionModel(beta, mean, scale, len(X_brain) / len(X_sur), it, converged)


def raw_weights(m: SelectionModel, X_sur) -> np.ndarray:
    f = m.decision_function(X_sur)
    return np.exp(np.clip(-f - np.log(m.prior_ratio), -700.0, 700.0))


def compute_weights(m: SelectionModel, X_sur) -> np.ndarray:
    """Density-ratio weights, clipped to [1e-3, 1e3] then scaled to mean 1."""
    w = np.clip(raw_weights(m, X_sur), CLIP_LOW, CLIP_HIGH)
    return w / w.mean()


def weight_summary(w: np.ndarray, raw: np.ndarray | None = None) -> dict:
    q = np.quantile(w, [0.0, 0.25, 0.5, 0.75, 1.0])
    out = {"n": int(len(w)), "min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4]}
    if raw is not None:
        out["clipped_low"] = int((raw < CLIP_LOW).sum())
        out["clipped_high"] = int((raw > CLIP_HIGH).sum())
    return {k: (float(v) if isinstance(v, np.floating) else v) for k, v in out.items()}


# --------------------------------------------------------------------------
# scribble generation


def ball_offsets(radius: int) -> np.ndarray:
    r = int(radius)
    g = np.mgrid[-r : r + 1, -r : r + 1, -r : r + 1].reshape(3, -1).T
    return g[(g**2).sum(axis=1) <= radius**2]


def erode_ball(mask: np.ndarray, radius: int) -> np.ndarray:
    """Voxels whose whole ball of ``radius`` lies inside ``mask``."""
    mask = np.asarray(mask, dtype=bool)
    if radius <= 0:
        return mask.copy()
    r = int(radius)
    padded = np.pad(mask, r, constant_values=False)
    out = np.ones_like(mask)
    nx, ny, nz = mask.shape
    for dx, dy, dz in ball_offsets(radius):
        out &= padded[r + dx : r + dx + nx, r + dy : r + dy + ny, r + dz : r + dz + nz]
    return out


def _stamp(out: np.ndarray, allowed: np.ndarray, center, offsets, label: int) -> None:
    pts = offsets + np.asarray(center)
    ok = np.all((pts >= 0) & (pts < np.array(out.shape)), axis=1)
    pts = pts[ok]
    sel = allowed[pts[:, 0], pts[:, 1], pts[:, 2]]
    pts = pts[sel]
    out[pts[:, 0], pts[:, 1], pts[:, 2]] = label


def _pick_centers(region: np.ndarray, n: int, rng) -> np.ndarray:
    coords = np.argwhere(region)
    if len(coords) == 0 or n <= 0:
        return np.empty((0, 3), dtype=int)
    return coords[rng.choice(len(coords), size=min(n, len(coords)), replace=False)]


def _nearest_to_centroid(region: np.ndarray) -> np.ndarray:
    coords = np.argwhere(region)
    c = coords.mean(axis=0)
    return coords[np.argmin(((coords - c) ** 2).sum(axis=1))]


def derive_surs(
    gt: Volume,
    brain: BrainMask,
    lesion_blobs: int = 3,
    background_blobs: int = 10,
    radius: int = 2,
    seed: int = 0,
) -> Volume:
    """Seeded spherical scribbles consistent with ``gt``.

    Returns a 0/1/2 volume (unlabeled / background / lesion). Scribble centers
    sit in the ``radius``-eroded lesion or eroded non-lesion brain; a lesion
    too thin to erode gets one scribble at its voxel nearest the centroid.
    """
    if gt.dims != brain.dims:
        raise DalsaError("gt and brain mask geometry differ")
    lesion = (gt.data > 0) & brain.data
    if ((gt.data > 0) & ~brain.data).any():
        raise DalsaError("gt extends outside the brain mask")
    background = brain.data & ~lesion
    rng = np.random.default_rng(seed)
    offsets = ball_offsets(radius)
    out = np.zeros(gt.dims, dtype=np.uint8)

    if lesion.any():
        core = erode_ball(lesion, radius)
        centers = _pick_centers(core, lesion_blobs, rng) if core.any() else _nearest_to_centroid(lesion)[None]
        for c in centers:
            _stamp(out, lesion, c, offsets, 2)
    core_bg = erode_ball(background, radius)
    region = core_bg if core_bg.any() else background
    for c in _pick_centers(region, background_blobs, rng):
        _stamp(out, background, c, offsets, 1)
    return Volume(out, gt.spacing, gt.affine)
