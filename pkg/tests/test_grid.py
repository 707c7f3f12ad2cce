import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from opbridge.grid import (
    Field,
    Spectrum,
    SpatialGrid,
    dft_forward,
    dft_inverse,
    irfft_grid,
    irfft_grid_adjoint,
    read_field,
    resample_axis,
    resample_axis_adjoint,
    rfft_grid,
    rfft_grid_adjoint,
    spectral_resample,
    write_field,
)


def naive_dft(x, axis):
    m = x.shape[axis]
    k = np.arange(m)
    mat = np.exp(-2j * np.pi * np.outer(k, k) / m)
    return np.moveaxis(np.tensordot(mat, x, axes=([1], [axis])), 0, axis)


@pytest.mark.parametrize("m", [8, 16, 32])
def test_forward_matches_naive_1d(m):
    rng = np.random.default_rng(m)
    f = Field(SpatialGrid((m,)), rng.standard_normal((m, 2)))
    np.testing.assert_allclose(dft_forward(f).coeffs, naive_dft(f.values, 0), atol=1e-10)


def test_forward_matches_naive_2d():
    rng = np.random.default_rng(1)
    f = Field(SpatialGrid((8, 16)), rng.standard_normal((8, 16, 3)))
    ref = naive_dft(naive_dft(f.values, 0), 1)
    np.testing.assert_allclose(dft_forward(f).coeffs, ref, atol=1e-10)


def test_constant_field_has_only_dc():
    f = Field(SpatialGrid((16,)), np.full(16, 2.5))
    c = dft_forward(f).coeffs[:, 0]
    assert c[0] == pytest.approx(40.0)
    assert np.max(np.abs(c[1:])) < 1e-12


def test_forward_rejects_nonfinite():
    vals = np.zeros(8)
    vals[3] = np.nan
    with pytest.raises(ValueError):
        dft_forward(Field(SpatialGrid((8,)), vals))


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([2, 3, 8, 12, 16]), st.sampled_from([1, 2]), st.integers(0, 2**31 - 1))
def test_inverse_roundtrip(m, nd, seed):
    rng = np.random.default_rng(seed)
    dims = (m,) * nd
    f = Field(SpatialGrid(dims), rng.standard_normal(dims + (2,)))
    back = dft_inverse(dft_forward(f))
    np.testing.assert_allclose(back.values, f.values, atol=1e-12)


def test_inverse_rejects_non_hermitian():
    c = np.zeros((8, 1), dtype=complex)
    c[1] = 1.0
    with pytest.raises(ValueError, match="imaginary"):
        dft_inverse(Spectrum(SpatialGrid((8,)), c))


def test_inverse_rejects_mode_mismatch():
    f = Field(SpatialGrid((8,)), np.ones(8))
    with pytest.raises(ValueError, match="spectral_resample"):
        dft_inverse(dft_forward(f), SpatialGrid((16,)))


def test_grid_validation():
    with pytest.raises(ValueError):
        SpatialGrid((1,))
    with pytest.raises(ValueError):
        SpatialGrid((4, 4, 4))
    with pytest.raises(ValueError):
        SpatialGrid((4,), ((1.0, 0.0),))
    g = SpatialGrid((4,), ((-1.0, 1.0),))
    np.testing.assert_allclose(g.axis_points(0), [-1.0, -0.5, 0.0, 0.5])


@pytest.mark.parametrize("m_new", [16, 32, 64])
def test_resample_keeps_harmonic(m_new):
    m = 16
    x = np.arange(m) / m
    f = Field(SpatialGrid((m,)), np.cos(2 * np.pi * 3 * x) + 0.5 * np.sin(2 * np.pi * 5 * x))
    g = spectral_resample(f, (m_new,))
    xn = np.arange(m_new) / m_new
    np.testing.assert_allclose(g.values[:, 0], np.cos(2 * np.pi * 3 * xn) + 0.5 * np.sin(2 * np.pi * 5 * xn),
                               atol=1e-12)


def test_resample_truncation_drops_high_mode():
    m = 32
    x = np.arange(m) / m
    f = Field(SpatialGrid((m,)), np.cos(2 * np.pi * x) + np.cos(2 * np.pi * 10 * x))
    g = spectral_resample(f, (8,))
    np.testing.assert_allclose(g.values[:, 0], np.cos(2 * np.pi * np.arange(8) / 8), atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.sampled_from([4, 6, 8, 16]), st.sampled_from([2, 3, 4]), st.integers(0, 2**31 - 1))
def test_upsample_then_downsample_is_identity(m, factor, seed):
    rng = np.random.default_rng(seed)
    f = Field(SpatialGrid((m, m)), rng.standard_normal((m, m, 1)))
    up = spectral_resample(f, (m * factor, m * factor))
    down = spectral_resample(up, (m, m))
    np.testing.assert_allclose(down.values, f.values, atol=1e-12)


@pytest.mark.parametrize("n_old,n_new", [(8, 16), (16, 8), (8, 12), (12, 8), (7, 16)])
def test_resample_adjoint(n_old, n_new):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, n_old, 2))
    y = rng.standard_normal((3, n_new, 2))
    lhs = np.sum(resample_axis(x, 1, n_new) * y)
    rhs = np.sum(x * resample_axis_adjoint(y, 1, n_old))
    assert abs(lhs - rhs) < 1e-12 * max(1.0, abs(lhs))


@pytest.mark.parametrize("dims", [(8,), (9,), (8, 6), (6, 7)])
def test_half_spectrum_adjoints(dims):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2,) + dims + (3,))
    X = rfft_grid(x, len(dims))
    Z = rng.standard_normal(X.shape) + 1j * rng.standard_normal(X.shape)
    # irfft ignores the imaginary part of bins that must be real; make Z consistent
    Z = rfft_grid(irfft_grid(Z, dims), len(dims))
    lhs = np.sum(X.real * Z.real + X.imag * Z.imag)
    rhs = np.sum(x * rfft_grid_adjoint(Z, dims))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))
    y = rng.standard_normal(x.shape)
    lhs2 = np.sum(irfft_grid(Z, dims) * y)
    G = irfft_grid_adjoint(y, dims)
    rhs2 = np.sum(Z.real * G.real + Z.imag * G.imag)
    assert abs(lhs2 - rhs2) < 1e-10 * max(1.0, abs(lhs2))


def test_field_file_roundtrip(tmp_path):
    rng = np.random.default_rng(5)
    f = Field(SpatialGrid((4, 6), ((0, 1), (-2, 2))), rng.standard_normal((4, 6, 3)))
    write_field(tmp_path / "a.brgf", f)
    g = read_field(tmp_path / "a.brgf", f.grid.extents)
    assert g.grid == f.grid
    assert np.array_equal(g.values, f.values)
    raw = (tmp_path / "a.brgf").read_bytes()
    assert raw[:4] == b"BRGF" and len(raw) == 4 + 2 + 1 + 8 + 4 + 8 * 72


def test_field_file_rejects_garbage(tmp_path):
    (tmp_path / "x.brgf").write_bytes(b"NOPE" + b"\0" * 20)
    with pytest.raises(ValueError, match="BRGF"):
        read_field(tmp_path / "x.brgf")
    f = Field(SpatialGrid((4,)), np.arange(4.0))
    write_field(tmp_path / "t.brgf", f)
    (tmp_path / "t.brgf").write_bytes((tmp_path / "t.brgf").read_bytes()[:-8])
    with pytest.raises(ValueError, match="payload"):
        read_field(tmp_path / "t.brgf")
