import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from argsdiff import tensor as tn
from argsdiff.degradation import (
    DegradationError,
    DegradationModel,
    add_noise_snr,
    bicubic_downsample,
    bicubic_upsample,
    cubic_kernel,
    make_partition_srf,
    mode3_multiply,
    simulate_pair,
)
from gradcheck import max_gradcheck_error


def loop_mode3(cube, m):
    H, W, p = cube.shape
    q = m.shape[0]
    out = np.zeros((H, W, q))
    for i in range(H):
        for j in range(W):
            for k in range(q):
                acc = 0.0
                for l in range(p):
                    acc += m[k, l] * cube[i, j, l]
                out[i, j, k] = acc
    return out


def keys(x):
    x = abs(x)
    if x <= 1:
        return 1.5 * x**3 - 2.5 * x**2 + 1
    if x < 2:
        return -0.5 * x**3 + 2.5 * x**2 - 4 * x + 2
    return 0.0


def loop_shrink_1d(v, s):
    """Scalar-loop antialiased bicubic shrink of a 1-D signal with clamped edges."""
    n = len(v)
    out = []
    for j in range(n // s):
        center = (j + 0.5) * s - 0.5
        num = den = 0.0
        for tap in range(int(math.floor(center - 2 * s)), int(math.ceil(center + 2 * s)) + 1):
            w = keys((center - tap) / s)
            num += w * v[min(max(tap, 0), n - 1)]
            den += w
        out.append(num / den)
    return np.array(out)


def loop_bicubic_band(band, s):
    rows = np.array([loop_shrink_1d(band[:, j], s) for j in range(band.shape[1])]).T
    return np.array([loop_shrink_1d(rows[i], s) for i in range(rows.shape[0])])


# ---------------------------------------------------------------- mode-3


def test_mode3_identity(rng):
    z = rng.standard_normal((4, 5, 6))
    np.testing.assert_array_equal(mode3_multiply(z, np.eye(6)), z)


def test_mode3_hand_sum():
    out = mode3_multiply(np.array([[[3.0, 4.0]]]), np.array([[1.0, 1.0]]))
    assert out.tolist() == [[[7.0]]]


def test_mode3_matches_triple_loop(rng):
    z = rng.standard_normal((5, 5, 7))
    m = rng.standard_normal((3, 7))
    assert np.max(np.abs(mode3_multiply(z, m) - loop_mode3(z, m))) < 1e-12


def test_mode3_dimension_mismatch(rng):
    with pytest.raises(DegradationError):
        mode3_multiply(rng.standard_normal((2, 2, 3)), np.ones((2, 4)))


def test_mode3_tensor_path_matches_and_differentiates(rng):
    z = rng.standard_normal((3, 4, 5))
    m = rng.standard_normal((2, 5))
    np.testing.assert_allclose(mode3_multiply(tn.Tensor(z), tn.Tensor(m)).data, z @ m.T, atol=1e-14)
    probe = tn.Tensor(rng.standard_normal((3, 4, 2)))
    assert max_gradcheck_error(lambda x: tn.sum(mode3_multiply(x, tn.Tensor(m)) * probe), z) < 1e-4


@settings(max_examples=50, deadline=None)
@given(alpha=st.floats(-5, 5), seed=st.integers(0, 2**32 - 1))
def test_mode3_linear(alpha, seed):
    r = np.random.default_rng(seed)
    z1, z2 = r.standard_normal((3, 4, 6)), r.standard_normal((3, 4, 6))
    m = r.standard_normal((2, 6))
    lhs = mode3_multiply(alpha * z1 + z2, m)
    rhs = alpha * mode3_multiply(z1, m) + mode3_multiply(z2, m)
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


# ---------------------------------------------------------------- bicubic


def test_cubic_kernel_interpolates_at_integers():
    np.testing.assert_allclose(cubic_kernel(np.array([0.0, 1.0, 2.0, 3.0])), [1.0, 0.0, 0.0, 0.0], atol=1e-15)


def test_cubic_kernel_partition_of_unity():
    for frac in np.linspace(0, 1, 11):
        assert cubic_kernel(frac + np.arange(-2, 2)).sum() == pytest.approx(1.0, abs=1e-14)


@pytest.mark.parametrize("s", [2, 4])
def test_bicubic_preserves_constants(s):
    cube = np.full((16, 12, 3), 0.37)
    out = bicubic_downsample(cube, s)
    assert out.shape == (16 // s, 12 // s, 3)
    np.testing.assert_allclose(out, 0.37, atol=1e-9)
    np.testing.assert_allclose(bicubic_upsample(cube, s), 0.37, atol=1e-9)


def test_bicubic_scale_one_is_identity(rng):
    z = rng.standard_normal((5, 7, 2))
    np.testing.assert_array_equal(bicubic_downsample(z, 1), z)


def test_bicubic_rejects_non_divisible(rng):
    with pytest.raises(DegradationError):
        bicubic_downsample(rng.standard_normal((10, 12, 2)), 4)


def test_bicubic_linear_ramp_interior():
    W = 64
    x = np.arange(W) / (W - 1)
    cube = np.broadcast_to(x[None, :, None], (W, W, 1)).copy()
    out = bicubic_downsample(cube, 4)[:, :, 0]
    centers = ((np.arange(16) + 0.5) * 4 - 0.5) / (W - 1)
    # taps reach 2 * 4 pixels from the center, so skip the two outermost samples
    interior = slice(2, 14)
    np.testing.assert_allclose(out[:, interior], np.broadcast_to(centers[interior], (16, 12)), atol=1e-6)


def test_bicubic_matches_scalar_loop_oracle(rng):
    z = rng.random((16, 12, 2))
    out = bicubic_downsample(z, 4)
    for b in range(2):
        assert np.max(np.abs(out[:, :, b] - loop_bicubic_band(z[:, :, b], 4))) < 1e-12


def test_bicubic_commutes_with_srf(rng):
    z = rng.random((16, 16, 8))
    r = make_partition_srf(8, 3)
    lhs = bicubic_downsample(mode3_multiply(z, r), 4)
    rhs = mode3_multiply(bicubic_downsample(z, 4), r)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_bicubic_tensor_path_matches(rng):
    z = rng.random((8, 8, 3))
    np.testing.assert_allclose(bicubic_downsample(tn.Tensor(z), 4).data, bicubic_downsample(z, 4), atol=1e-14)


def test_bicubic_upsample_reproduces_interior_ramp():
    x = np.arange(16, dtype=float)
    cube = np.broadcast_to(x[None, :, None], (16, 16, 1)).copy()
    up = bicubic_upsample(cube, 4)[0, :, 0]
    pos = (np.arange(64) + 0.5) / 4 - 0.5
    np.testing.assert_allclose(up[8:56], pos[8:56], atol=1e-12)


# ---------------------------------------------------------------- SRF


def test_srf_example():
    np.testing.assert_array_equal(make_partition_srf(4, 2), [[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]])


def test_srf_identity():
    np.testing.assert_array_equal(make_partition_srf(5, 5), np.eye(5))


@settings(max_examples=100, deadline=None)
@given(C=st.integers(1, 120), data=st.data())
def test_srf_rows_sum_to_one_and_partition(C, data):
    c = data.draw(st.integers(1, C))
    r = make_partition_srf(C, c)
    np.testing.assert_allclose(r.sum(axis=1), 1.0, rtol=0, atol=1e-15)
    assert np.all((r > 0).sum(axis=0) == 1)
    np.testing.assert_allclose(mode3_multiply(np.full((2, 2, C), 0.3), r), 0.3, atol=1e-15)


def test_srf_rejects_c_above_C():
    with pytest.raises(DegradationError):
        make_partition_srf(3, 4)


# ---------------------------------------------------------------- noise


def test_noise_infinite_snr_is_noiseless(rng):
    z = rng.random((4, 4, 3))
    np.testing.assert_array_equal(add_noise_snr(z, math.inf, rng), z)


def test_noise_empirical_snr_within_half_db():
    z = np.random.default_rng(5).random((64, 64, 31))
    noisy = add_noise_snr(z, 35.0, np.random.default_rng(6))
    snr = 10 * math.log10(np.mean(z**2) / np.mean((noisy - z) ** 2))
    assert abs(snr - 35.0) <= 0.5


def test_noise_same_seed_identical():
    z = np.random.default_rng(5).random((8, 8, 3))
    a = add_noise_snr(z, 30.0, np.random.default_rng(9))
    b = add_noise_snr(z, 30.0, np.random.default_rng(9))
    assert a.tobytes() == b.tobytes()


def test_noise_rejects_zero_cube(rng):
    with pytest.raises(DegradationError):
        add_noise_snr(np.zeros((2, 2, 2)), 35.0, rng)


# ---------------------------------------------------------------- simulation


def test_simulate_pair_shapes():
    ref = np.random.default_rng(0).random((256, 256, 103))
    lr, msi = simulate_pair(ref, DegradationModel(make_partition_srf(103, 4), scale=4), np.random.default_rng(1))
    assert lr.shape == (64, 64, 103)
    assert msi.shape == (256, 256, 4)


def test_simulate_pair_noiseless_identity(rng):
    ref = rng.random((8, 8, 5))
    lr, msi = simulate_pair(ref, DegradationModel(np.eye(5), scale=1, snr_db=math.inf), rng)
    np.testing.assert_array_equal(lr, ref)
    np.testing.assert_array_equal(msi, ref)


def test_simulate_pair_noiseless_lr_matches_oracle(rng):
    ref = rng.random((16, 16, 3))
    lr, _ = simulate_pair(ref, DegradationModel(make_partition_srf(3, 2), snr_db=math.inf), rng)
    for b in range(3):
        assert np.max(np.abs(lr[:, :, b] - loop_bicubic_band(ref[:, :, b], 4))) < 1e-12


def test_model_validation():
    with pytest.raises(DegradationError):
        DegradationModel(np.eye(2), scale=0)
    with pytest.raises(DegradationError):
        DegradationModel(-np.eye(2))
    assert DegradationModel(make_partition_srf(31, 4)).bands == (31, 4)
