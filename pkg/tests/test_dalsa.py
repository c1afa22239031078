import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.stats import norm, rankdata, spearmanr

from idal.dalsa import (
    DalsaError,
    SelectionModel,
    SeparationError,
    compute_weights,
    derive_surs,
    erode_ball,
    fit_selection_model,
    raw_weights,
    weight_summary,
)
from idal.volume_io import BrainMask, Volume


def auc(pos, neg):
    """Mann-Whitney AUC from pooled ranks."""
    r = rankdata(np.concatenate([pos, neg]))
    n1, n0 = len(pos), len(neg)
    return (r[:n1].sum() - n1 * (n1 + 1) / 2) / (n1 * n0)


@pytest.fixture(scope="module")
def gaussian_fixture():
    rng = np.random.default_rng(0)
    xs = rng.normal(1.0, 1.0, size=(4000, 1))
    xb = rng.normal(0.0, 1.0, size=(40000, 1))
    return xs, xb, fit_selection_model(xs, xb)


def test_same_distribution_auc_half():
    rng = np.random.default_rng(1)
    xs = rng.normal(size=(2000, 4))
    xb = rng.normal(size=(20000, 4))
    m = fit_selection_model(xs, xb)
    assert abs(auc(m.decision_function(xs), m.decision_function(xb)) - 0.5) <= 0.05


def test_slope_recovers_log_ratio(gaussian_fixture):
    _, _, m = gaussian_fixture
    assert m.converged
    # log N(x;1,1) - log N(x;0,1) = x - 1/2
    assert m.raw_coefficients[1] == pytest.approx(1.0, abs=0.1)


def test_weights_track_density_ratio(gaussian_fixture):
    xs, xb, m = gaussian_fixture
    lo, hi = norm.ppf([0.025, 0.975], loc=1.0)
    x = xs[(xs[:, 0] > lo) & (xs[:, 0] < hi)]
    analytic = norm.pdf(x[:, 0], 0, 1) / norm.pdf(x[:, 0], 1, 1)
    rho = spearmanr(compute_weights(m, x), analytic).statistic
    assert rho >= 0.95
    # beyond rank agreement the unnormalized weights match the ratio itself
    np.testing.assert_allclose(raw_weights(m, x), analytic, rtol=0.3)


def test_weighted_mean_matches_brain(gaussian_fixture):
    xs, xb, m = gaussian_fixture
    w = compute_weights(m, xs)
    assert abs(np.sum(w * xs[:, 0]) / w.sum() - xb[:, 0].mean()) <= 0.1


def test_uniform_scribbles_give_flat_weights():
    rng = np.random.default_rng(2)
    brain = rng.normal(size=(30000, 5)) * [1, 2, 3, 1, 0.5]
    sur = brain[rng.choice(len(brain), 1000, replace=False)]
    w = compute_weights(fit_selection_model(sur, brain), sur)
    assert w.min() >= 0.8 and w.max() <= 1.25


def test_identity_case_all_ones():
    m = SelectionModel(np.zeros(3), np.zeros(2), np.ones(2), 1.0, 1, True)
    X = np.random.default_rng(0).normal(size=(50, 2))
    np.testing.assert_array_equal(compute_weights(m, X), np.ones(50))


def test_lower_clip():
    m = SelectionModel(np.array([0.0, 1e6]), np.zeros(1), np.ones(1), 1.0, 1, True)
    w = compute_weights(m, np.array([[1.0], [0.0]]))
    assert w[0] / w[1] == pytest.approx(1e-3)
    assert w.mean() == pytest.approx(1.0)


@settings(max_examples=30, deadline=None)
@given(
    coef=st.lists(st.floats(-50, 50), min_size=3, max_size=3),
    prior=st.floats(0.01, 100),
    seed=st.integers(0, 2**32 - 1),
)
def test_weights_positive_finite_mean_one(coef, prior, seed):
    m = SelectionModel(np.array(coef), np.zeros(2), np.ones(2), prior, 1, True)
    X = np.random.default_rng(seed).normal(0, 10, size=(40, 2))
    w = compute_weights(m, X)
    assert np.all(np.isfinite(w)) and np.all(w > 0)
    assert w.mean() == pytest.approx(1.0, rel=1e-12)
    assert w.max() / w.min() <= 1e6 * (1 + 1e-9)


def test_constant_extra_feature_does_not_change_weights(gaussian_fixture):
    xs, xb, m = gaussian_fixture
    pad = lambda a: np.hstack([a, np.full((len(a), 1), 3.0)])
    m2 = fit_selection_model(pad(xs), pad(xb))
    np.testing.assert_allclose(compute_weights(m2, pad(xs)), compute_weights(m, xs), rtol=1e-8)


def test_separation_raises_or_clips():
    rng = np.random.default_rng(3)
    xs = rng.uniform(1, 2, size=(50, 1))
    xb = rng.uniform(-2, -1, size=(500, 1))
    with pytest.raises(SeparationError):
        fit_selection_model(xs, xb)
    m = fit_selection_model(xs, xb, on_separation="clip")
    w = compute_weights(m, xs)
    assert np.all(np.isfinite(w)) and np.all(w > 0)


def test_too_few_samples():
    with pytest.raises(DalsaError):
        fit_selection_model(np.zeros((0, 2)), np.zeros((50, 2)))
    with pytest.raises(DalsaError):
        fit_selection_model(np.zeros((20, 2)), np.zeros((20, 3)))


def test_weight_summary_counts_clips():
    s = weight_summary(np.array([1.0, 2.0, 3.0]), raw=np.array([1e-5, 1.0, 1e5]))
    assert (s["clipped_low"], s["clipped_high"], s["median"]) == (1, 1, 2.0)


# --------------------------------------------------------------------------
# scribbles


def ball_phantom(radius=5.0, shape=(32, 32, 32)):
    g = np.indices(shape) - np.array(shape).reshape(3, 1, 1, 1) / 2
    r = np.sqrt((g**2).sum(axis=0))
    brain = BrainMask(r < 14, (1.0, 1.0, 1.0))
    gt = Volume((r < radius).astype(np.uint8), (1.0, 1.0, 1.0))
    return gt, brain


def test_erode_ball_matches_brute_force():
    rng = np.random.default_rng(0)
    mask = rng.random((9, 9, 9)) < 0.8
    got = erode_ball(mask, 1)
    padded = np.pad(mask, 1)
    want = np.zeros_like(mask)
    for idx in np.ndindex(mask.shape):
        x, y, z = np.array(idx) + 1
        want[idx] = padded[x, y, z] and padded[x - 1, y, z] and padded[x + 1, y, z] \
            and padded[x, y - 1, z] and padded[x, y + 1, z] and padded[x, y, z - 1] and padded[x, y, z + 1]
    np.testing.assert_array_equal(got, want)


@pytest.mark.parametrize("seed", range(5))
def test_scribbles_agree_with_gt(seed):
    gt, brain = ball_phantom()
    sur = derive_surs(gt, brain, seed=seed).data
    assert set(np.unique(sur)) == {0, 1, 2}
    assert not np.any((sur == 2) & (gt.data == 0))
    assert not np.any((sur == 1) & (gt.data == 1))
    assert not np.any((sur > 0) & ~brain.data)


def test_scribbles_deterministic():
    gt, brain = ball_phantom()
    a = derive_surs(gt, brain, seed=9).data
    b = derive_surs(gt, brain, seed=9).data
    c = derive_surs(gt, brain, seed=10).data
    assert np.array_equal(a, b) and not np.array_equal(a, c)


def test_empty_gt_background_only():
    gt, brain = ball_phantom(radius=0)
    sur = derive_surs(gt, brain).data
    assert set(np.unique(sur)) == {0, 1}


def test_thin_lesion_gets_centroid_scribble():
    gt, brain = ball_phantom(radius=1.01)  # 7 voxels, nothing survives radius-2 erosion
    sur = derive_surs(gt, brain, radius=2).data
    assert np.argwhere(sur == 2).tolist() == [[16, 16, 16]] or (sur == 2).sum() == (gt.data == 1).sum()
    assert not np.any((sur == 2) & (gt.data == 0))


def test_gt_outside_brain_rejected():
    gt, brain = ball_phantom()
    bad = gt.with_data(np.ones(gt.dims, dtype=np.uint8))
    with pytest.raises(DalsaError):
        derive_surs(bad, brain)
