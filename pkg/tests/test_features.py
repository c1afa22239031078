import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.ndimage import gaussian_filter

from idal.features import (
    FEATURE_NAMES,
    N_STATS,
    STAT_NAMES,
    FeatureError,
    case_statistics,
    first_order_statistics,
    gaussian_smooth,
    hessian_max_eigenvalue,
    load_feature_cache,
    save_feature_cache,
    smooth_array,
    voxel_features,
)
from idal.preprocess import ModalityParams, NormalizationParams
from idal.volume_io import MODALITIES, BrainMask, MultiModalCase, Volume

ONE = (1.0, 1.0, 1.0)
FAKE_NORM = NormalizationParams({m: ModalityParams(0.0, 1.0) for m in MODALITIES})


def make_case(arrays_by_modality, spacing=ONE, brain=None):
    shape = next(iter(arrays_by_modality.values())).shape
    brain = np.ones(shape, bool) if brain is None else brain
    vols = {m: Volume(np.asarray(a, dtype=np.float64), spacing) for m, a in arrays_by_modality.items()}
    return MultiModalCase("f", brain_mask=BrainMask(brain, spacing), normalization=FAKE_NORM, **vols)


def col(name):
    return FEATURE_NAMES.index(name)


def test_layout_counts():
    assert len(FEATURE_NAMES) == 82 and len(set(FEATURE_NAMES)) == 82
    assert N_STATS == 64 and len(STAT_NAMES) == 16


def test_constant_volume_stays_constant():
    v = Volume(np.full((9, 10, 11), 3.25), ONE)
    np.testing.assert_allclose(gaussian_smooth(v, 3.0).data, 3.25, rtol=1e-14)


def test_impulse_matches_analytic_gaussian():
    n, s = 41, 2.0
    a = np.zeros((n, n, n))
    c = n // 2
    a[c, c, c] = 1.0
    out = gaussian_smooth(Volume(a, ONE), s).data
    x = np.arange(-3 * int(s), 3 * int(s) + 1)
    analytic = (2 * np.pi * s**2) ** -1.5 * np.exp(-(x**2) / (2 * s**2))
    for axis in range(3):
        idx = [c, c, c]
        idx[axis] = slice(c + x[0], c + x[-1] + 1)
        np.testing.assert_allclose(out[tuple(idx)], analytic, rtol=1e-3)


@pytest.mark.parametrize("sigma,spacing", [(1.0, ONE), (3.0, ONE), (5.0, ONE), (1.0, (2.0, 2.0, 2.0)),
                                           (2.0, (1.0, 2.0, 0.5))])
def test_matches_scipy_reference(sigma, spacing):
    a = np.random.default_rng(0).normal(size=(23, 19, 17))
    ours = smooth_array(a, sigma, spacing)
    ref = gaussian_filter(a, [sigma / h for h in spacing], mode="nearest", truncate=4.0)
    np.testing.assert_allclose(ours, ref, atol=1e-12)


def test_bad_sigma():
    with pytest.raises(FeatureError):
        gaussian_smooth(Volume(np.zeros((3, 3, 3)), ONE), 0.0)


def test_constant_case_columns():
    case = make_case({m: np.full((12, 12, 12), 0.7) for m in MODALITIES})
    fm = voxel_features(case)
    assert fm.values.shape == (12**3, 82)
    for i, name in enumerate(FEATURE_NAMES):
        v = fm.values[:, i]
        if name in MODALITIES or "_gauss_" in name:
            np.testing.assert_allclose(v, 0.7, rtol=1e-6)
        else:
            np.testing.assert_allclose(v, 0.0, atol=1e-6)


def test_difference_column():
    rng = np.random.default_rng(1)
    t2 = rng.uniform(0, 2, (8, 8, 8))
    case = make_case({"t1": rng.uniform(0, 2, t2.shape), "t2": t2, "dwi": t2, "flair": t2 + 1.0})
    fm = voxel_features(case)
    np.testing.assert_allclose(fm.values[:, col("flair-t2")], 1.0, atol=1e-6)
    np.testing.assert_allclose(fm.values[:, col("flair-dwi")], 1.0, atol=1e-6)
    np.testing.assert_allclose(fm.values[:, col("dwi-t2")], 0.0, atol=1e-6)


def test_quadratic_second_derivative():
    a = 0.01
    x = np.arange(64, dtype=np.float64)[:, None, None]
    img = np.broadcast_to(a * (x - 32) ** 2, (64, 6, 6)).copy()
    fm = voxel_features(make_case({m: img for m in MODALITIES}))
    rows = fm.coords()[:, 0]
    inner = (rows >= 22) & (rows <= 41)  # beyond the 5 mm kernel radius plus the stencil
    for s in (1, 3, 5):
        dxx = fm.values[inner, col(f"flair_dxx_s{s}")]
        np.testing.assert_allclose(dxx, 2 * a, rtol=0.05)
        np.testing.assert_allclose(fm.values[inner, col(f"flair_dyy_s{s}")], 0.0, atol=1e-6)
        np.testing.assert_allclose(fm.values[inner, col(f"flair_hess_max_s{s}")], 2 * a, rtol=0.05)


def test_hessian_axis_permutation():
    a = smooth_array(np.random.default_rng(2).normal(size=(10, 10, 10)), 1.5, ONE)
    base = hessian_max_eigenvalue(a, ONE).reshape(a.shape)
    for perm in [(1, 0, 2), (2, 1, 0), (1, 2, 0)]:
        moved = hessian_max_eigenvalue(np.transpose(a, perm), ONE).reshape(np.transpose(a, perm).shape)
        np.testing.assert_allclose(moved, np.transpose(base, perm), atol=1e-12)


def test_hessian_known_form():
    # f = x^2 - 3 y^2 has Hessian diag(2, -6, 0): largest magnitude is -6
    g = np.indices((9, 9, 9)).astype(float) - 4
    f = g[0] ** 2 - 3 * g[1] ** 2
    ev = hessian_max_eigenvalue(f, ONE).reshape(f.shape)
    np.testing.assert_allclose(ev[2:7, 2:7, 2:7], -6.0, atol=1e-10)


def test_rows_follow_brain_mask(synth_small, prepared_small):
    prepared, _ = prepared_small
    for pc in prepared:
        brain = pc.case.brain_mask.data
        assert pc.features.shape == (int(brain.sum()), 82)
        assert np.array_equal(pc.voxel_index, np.flatnonzero(brain.ravel()))
        assert np.isfinite(pc.features).all()


def test_unnormalized_rejected(synth_small):
    with pytest.raises(FeatureError):
        voxel_features(synth_small[0].case)


def test_feature_cache_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    brain = rng.random((7, 7, 7)) < 0.6
    fm = voxel_features(make_case({m: rng.normal(size=(7, 7, 7)) for m in MODALITIES}, brain=brain))
    save_feature_cache(fm, tmp_path / "f.bin")
    back = load_feature_cache(tmp_path / "f.bin")
    assert np.array_equal(back.values, fm.values) and np.array_equal(back.voxel_index, fm.voxel_index)
    assert back.dims == fm.dims and (tmp_path / "f.bin").stat().st_size == fm.n_voxels * 82 * 4
    raw = np.fromfile(tmp_path / "f.bin", dtype="<f4")
    raw[0] += 1
    raw.tofile(tmp_path / "f.bin")
    with pytest.raises(FeatureError):
        load_feature_cache(tmp_path / "f.bin")


# --------------------------------------------------------------------------
# case statistics


def stat(name, values):
    return values[STAT_NAMES.index(name)]


def brute_moments(xs):
    n = len(xs)
    total = 0.0
    for v in xs:
        total += v
    mean = total / n
    m2 = m3 = m4 = 0.0
    for v in xs:
        d = v - mean
        m2 += d * d
        m3 += d * d * d
        m4 += d * d * d * d
    m2, m3, m4 = m2 / n, m3 / n, m4 / n
    return mean, m2, m3 / m2**1.5, m4 / m2**2 - 3.0


def test_statistics_match_direct_summation():
    x = np.random.default_rng(0).normal(size=10_000)
    s = first_order_statistics(x)
    mean, var, skew, kurt = brute_moments(x.tolist())
    assert abs(stat("mean", s) - mean) <= 1e-10
    assert abs(stat("variance", s) - var) <= 1e-10
    assert abs(stat("skewness", s) - skew) <= 1e-10
    assert abs(stat("kurtosis", s) - kurt) <= 1e-10
    assert stat("std", s) == pytest.approx(math.sqrt(var), abs=1e-10)
    assert stat("energy", s) == pytest.approx(sum(v * v for v in x.tolist()), rel=1e-12)


def test_constant_brain_statistics():
    s = first_order_statistics(np.ones(50))
    expect = dict(min=1, max=1, median=1, mean=1, rms=1, range=0, variance=0, sum=50,
                  entropy=0, uniformity=1, energy=50, count=50)
    for k, v in expect.items():
        assert stat(k, s) == v, k


def test_symmetric_two_point_skewness():
    assert stat("skewness", first_order_statistics([-2.0, 2.0] * 10)) == 0.0


def test_entropy_of_uniform_histogram():
    # one value per bin: p_i = 1/64
    x = (np.arange(64) + 0.5) / 64
    s = first_order_statistics(x)
    assert stat("entropy", s) == pytest.approx(6.0, abs=1e-12)
    assert stat("uniformity", s) == pytest.approx(1 / 64, abs=1e-15)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 300), elements=st.floats(-1e4, 1e4)), st.randoms())
def test_statistics_invariants(x, rnd):
    s = first_order_statistics(x)
    perm = np.array(x)
    rnd.shuffle(perm)
    np.testing.assert_allclose(first_order_statistics(perm), s, rtol=1e-9, atol=1e-6)
    assert stat("range", s) == stat("max", s) - stat("min", s)
    assert 0 < stat("uniformity", s) <= 1
    assert 0 <= stat("entropy", s) <= 6 + 1e-12


def test_case_statistics_layout(prepared_small):
    prepared, _ = prepared_small
    for pc in prepared:
        v = case_statistics(pc.case)
        assert v.shape == (64,) and np.isfinite(v).all()
        blocks = v.reshape(4, 16)
        assert len(set(blocks[:, STAT_NAMES.index("count")])) == 1
        np.testing.assert_array_equal(pc.stats, v)


def test_empty_statistics():
    with pytest.raises(FeatureError):
        first_order_statistics([])
