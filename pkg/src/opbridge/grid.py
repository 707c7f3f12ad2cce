"""Grid representation of function-valued states and the spectral tools around it.

Conventions: the forward transform is unnormalized,
``X_k = sum_j x_j exp(-2 pi i j k / m)``, and the inverse carries the ``1/m``
factor on every axis. Grids are periodic: the point at ``hi`` is not stored.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "SpatialGrid",
    "Field",
    "Spectrum",
    "dft_forward",
    "dft_inverse",
    "spectral_resample",
    "resample_matrix",
    "resample_axis",
    "resample_axis_adjoint",
    "rfft_grid",
    "irfft_grid",
    "rfft_grid_adjoint",
    "irfft_grid_adjoint",
    "half_spectrum_weights",
    "write_field",
    "read_field",
]

FIELD_MAGIC = b"BRGF"
FIELD_VERSION = 1

IMAG_DISCARD_TOL = 1e-10
IMAG_ERROR_TOL = 1e-8


@dataclass(frozen=True)
class SpatialGrid:
    dims: tuple[int, ...]
    extents: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if not 1 <= len(dims) <= 2:
            raise ValueError(f"grids have 1 or 2 axes, got {len(dims)}")
        if any(d < 2 for d in dims):
            raise ValueError(f"every axis needs at least 2 points, got {dims}")
        extents = self.extents or tuple((0.0, 1.0) for _ in dims)
        extents = tuple((float(lo), float(hi)) for lo, hi in extents)
        if len(extents) != len(dims):
            raise ValueError("one extent per axis is required")
        if any(hi <= lo for lo, hi in extents):
            raise ValueError(f"degenerate extent in {extents}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "extents", extents)

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def spacing(self) -> tuple[float, ...]:
        return tuple((hi - lo) / n for (lo, hi), n in zip(self.extents, self.dims))

    def axis_points(self, axis: int) -> np.ndarray:
        lo, _ = self.extents[axis]
        return lo + self.spacing[axis] * np.arange(self.dims[axis])

    def points(self) -> np.ndarray:
        """Coordinates of every grid node, shape ``dims + (ndim,)``."""
        axes = [self.axis_points(a) for a in range(self.ndim)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def with_dims(self, dims: Sequence[int]) -> "SpatialGrid":
        return SpatialGrid(tuple(dims), self.extents)


@dataclass(frozen=True)
class Field:
    """A function evaluated on a grid, ``values.shape == grid.dims + (channels,)``."""

    grid: SpatialGrid
    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == self.grid.ndim:
            values = values[..., None]
        if values.shape[:-1] != self.grid.dims:
            raise ValueError(f"values shape {values.shape} does not match grid {self.grid.dims}")
        object.__setattr__(self, "values", values)

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def check_finite(self) -> "Field":
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")
        return self


@dataclass(frozen=True)
class Spectrum:
    """Full complex spectrum of a field; spatial axes first, channels last."""

    grid: SpatialGrid
    coeffs: np.ndarray = field(repr=False)


def _spatial_axes(ndim: int, offset: int = 0) -> tuple[int, ...]:
    return tuple(range(offset, offset + ndim))


def dft_forward(f: Field) -> Spectrum:
    f.check_finite()
    coeffs = np.fft.fftn(f.values, axes=_spatial_axes(f.grid.ndim))
    return Spectrum(f.grid, coeffs)


def dft_inverse(spec: Spectrum, target_grid: SpatialGrid | None = None) -> Field:
    grid = spec.grid if target_grid is None else target_grid
    if spec.coeffs.shape[: grid.ndim] != grid.dims:
        raise ValueError(
            f"spectrum modes {spec.coeffs.shape[:grid.ndim]} do not fit grid {grid.dims}; "
            "use spectral_resample to change resolution"
        )
    values = np.fft.ifftn(spec.coeffs, axes=_spatial_axes(grid.ndim))
    scale = max(1.0, float(np.max(np.abs(values.real), initial=0.0)))
    residue = float(np.max(np.abs(values.imag), initial=0.0))
    if residue > IMAG_ERROR_TOL * scale:
        raise ValueError(f"inverse transform has imaginary residue {residue:.3e}; spectrum is not Hermitian")
    return Field(grid, values.real.copy())


def _resample_spectrum_1d(X: np.ndarray, n_new: int) -> np.ndarray:
    """Pad or truncate a full spectrum along axis 0, splitting/folding the Nyquist bin."""
    n_old = X.shape[0]
    Y = np.zeros((n_new,) + X.shape[1:], dtype=complex)
    n = min(n_old, n_new)
    pos = n // 2 + 1 if n % 2 else n // 2
    Y[:pos] = X[:pos]
    neg = (n - 1) // 2
    if neg:
        Y[n_new - neg :] = X[n_old - neg :]
    if n % 2 == 0:
        if n_new < n_old:
            Y[n // 2] = X[n // 2] + X[n_old - n // 2]
        elif n_new > n_old:
            Y[n // 2] = 0.5 * X[n // 2]
            Y[n_new - n // 2] = 0.5 * X[n // 2]
        else:
            Y[n // 2] = X[n // 2]
    return Y * (n_new / n_old)


@lru_cache(maxsize=256)
def _resample_matrix_cached(n_old: int, n_new: int) -> np.ndarray:
    eye = np.eye(n_old)
    spec = np.fft.fft(eye, axis=0)
    mat = np.fft.ifft(_resample_spectrum_1d(spec, n_new), axis=0).real
    mat.setflags(write=False)
    return mat


def resample_matrix(n_old: int, n_new: int) -> np.ndarray:
    """Real ``(n_new, n_old)`` matrix of 1-D band-limited resampling."""
    if n_old < 2 or n_new < 2:
        raise ValueError("resampling needs at least 2 points per axis")
    return _resample_matrix_cached(int(n_old), int(n_new))


def resample_axis(x: np.ndarray, axis: int, n_new: int) -> np.ndarray:
    n_old = x.shape[axis]
    if n_old == n_new:
        return x
    mat = resample_matrix(n_old, n_new)
    out = np.tensordot(mat, x, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def resample_axis_adjoint(g: np.ndarray, axis: int, n_old: int) -> np.ndarray:
    n_new = g.shape[axis]
    if n_old == n_new:
        return g
    mat = resample_matrix(n_old, n_new)
    out = np.tensordot(mat.T, g, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def spectral_resample(f: Field, new_dims: Sequence[int]) -> Field:
    """Band-limited interpolation (or truncation) of a field onto a new grid.

    Pure harmonics that survive keep their pointwise amplitude.
    """
    new_dims = tuple(int(d) for d in new_dims)
    if len(new_dims) != f.grid.ndim:
        raise ValueError("new_dims must have one entry per axis")
    if any(d < 2 for d in new_dims):
        raise ValueError("new_dims must be >= 2 per axis")
    f.check_finite()
    values = f.values
    for axis, n_new in enumerate(new_dims):
        values = resample_axis(values, axis, n_new)
    return Field(f.grid.with_dims(new_dims), values)


# -- half-spectrum transforms used inside the operator -------------------------
#
# These act on batched arrays shaped (batch, *spatial, channels). The
# half-spectrum keeps nonnegative frequencies along the last spatial axis.


def half_spectrum_weights(m_last: int) -> np.ndarray:
    """Multiplicity of each stored bin of a length-``m_last`` real transform."""
    c = np.full(m_last // 2 + 1, 2.0)
    c[0] = 1.0
    if m_last % 2 == 0:
        c[-1] = 1.0
    return c


def rfft_grid(x: np.ndarray, ndim: int) -> np.ndarray:
    return np.fft.rfftn(x, axes=_spatial_axes(ndim, 1))


def irfft_grid(Z: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    return np.fft.irfftn(Z, s=tuple(dims), axes=_spatial_axes(len(dims), 1))


def _broadcast_last_axis(c: np.ndarray, ndim: int) -> np.ndarray:
    # weights live on the last spatial axis, which is followed by the channel axis
    return c.reshape((1,) * ndim + (-1, 1))


def irfft_grid_adjoint(g: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Adjoint of :func:`irfft_grid` under the real inner product ``Re <a, b>``."""
    ndim = len(dims)
    c = half_spectrum_weights(dims[-1])
    return rfft_grid(g, ndim) * (_broadcast_last_axis(c, ndim) / float(np.prod(dims)))


def rfft_grid_adjoint(gX: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Adjoint of :func:`rfft_grid` under the real inner product ``Re <a, b>``."""
    ndim = len(dims)
    c = half_spectrum_weights(dims[-1])
    return irfft_grid(gX / _broadcast_last_axis(c, ndim), dims) * float(np.prod(dims))


# -- BRGF persistence ----------------------------------------------------------


def write_field(path: str | Path, f: Field) -> None:
    f.check_finite()
    header = FIELD_MAGIC + struct.pack("<HB", FIELD_VERSION, f.grid.ndim)
    header += struct.pack(f"<{f.grid.ndim}I", *f.grid.dims)
    header += struct.pack("<I", f.channels)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(f.values, dtype="<f8").tobytes())


def read_field(path: str | Path, extents: Sequence[tuple[float, float]] | None = None) -> Field:
    """Load a BRGF file. The format does not carry extents; pass them if known."""
    data = Path(path).read_bytes()
    if data[:4] != FIELD_MAGIC:
        raise ValueError(f"{path}: not a BRGF field file")
    version, naxes = struct.unpack_from("<HB", data, 4)
    if version != FIELD_VERSION:
        raise ValueError(f"{path}: unsupported BRGF version {version}")
    offset = 7
    dims = struct.unpack_from(f"<{naxes}I", data, offset)
    offset += 4 * naxes
    (channels,) = struct.unpack_from("<I", data, offset)
    offset += 4
    count = int(np.prod(dims)) * channels
    if offset + 8 * count != len(data):
        raise ValueError(f"{path}: payload size does not match header")
    values = np.frombuffer(data, dtype="<f8", count=count, offset=offset)
    grid = SpatialGrid(tuple(dims), tuple(extents) if extents else ())
    return Field(grid, values.reshape(tuple(dims) + (channels,)).astype(np.float64))
