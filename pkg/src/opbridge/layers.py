"""Differentiable building blocks of the time-modulated Fourier operator.

Every forward returns ``(output, cache)``; the matching backward takes the
cache and the upstream gradient and returns ``(param_grads, input_grad)``.
Activations are batched arrays ``(B, *spatial, channels)``. Complex weights
are stored as real arrays with a trailing axis of size 2, and complex
gradients follow the convention ``dL/dRe + i dL/dIm``.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .grid import irfft_grid, irfft_grid_adjoint, rfft_grid, rfft_grid_adjoint

__all__ = [
    "gelu",
    "gelu_grad",
    "time_embed",
    "dense_forward",
    "dense_backward",
    "head_forward",
    "head_backward",
    "retained_mode_index",
    "spectral_forward",
    "spectral_backward",
    "fourier_layer_forward",
    "fourier_layer_backward",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    # exact erf form; keeps finite-difference checks clean
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT2PI * np.exp(-0.5 * x * x)


def time_embed(t, dim: int, max_freq: float = 1e4) -> np.ndarray:
    """Sinusoidal embedding, interleaved ``[sin(w0 t), cos(w0 t), sin(w1 t), ...]``.

    Frequencies are geometric from 1 to ``max_freq``. Returns ``(len(t), dim)``.
    """
    if dim < 2 or dim % 2:
        raise ValueError("embedding dimension must be even and >= 2")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = max_freq ** (np.arange(half) / max(half - 1, 1))
    ang = t[:, None] * freqs
    emb = np.empty((t.shape[0], dim))
    emb[:, 0::2] = np.sin(ang)
    emb[:, 1::2] = np.cos(ang)
    return emb


# -- pointwise affine ----------------------------------------------------------


def dense_forward(W, b, x):
    y = x @ W
    if b is not None:
        y = y + b
    return y, x


def dense_backward(W, x, gy, with_bias=True):
    cin, cout = W.shape
    x2 = x.reshape(-1, cin)
    g2 = gy.reshape(-1, cout)
    grads = {"W": x2.T @ g2}
    if with_bias:
        grads["b"] = g2.sum(axis=0)
    return grads, gy @ W.T


# -- time modulation head: emb -> gelu(emb W1 + b1) W2 + b2 --------------------


def head_forward(p, emb):
    a1 = emb @ p["W1"] + p["b1"]
    h1 = gelu(a1)
    return h1 @ p["W2"] + p["b2"], (emb, a1, h1)


def head_backward(p, cache, go):
    emb, a1, h1 = cache
    grads = {"W2": h1.T @ go, "b2": go.sum(axis=0)}
    ga1 = (go @ p["W2"].T) * gelu_grad(a1)
    grads["W1"] = emb.T @ ga1
    grads["b1"] = ga1.sum(axis=0)
    return grads


# -- spectral convolution ------------------------------------------------------


def retained_mode_index(dims, modes):
    """Index tuple selecting retained bins of the half spectrum.

    1-D keeps ``k = 0..K-1``. 2-D keeps ``|k1| < K1`` (ordered 0..K1-1 then
    -(K1-1)..-1) times ``k2 = 0..K2-1``. The ordering does not depend on the
    grid size, so the same weights act at every resolution.
    """
    if len(dims) != len(modes):
        raise ValueError("one mode count per spatial axis is required")
    for m, k in zip(dims, modes):
        if k < 1 or 2 * k > m:
            raise ValueError(f"{k} retained modes do not fit a grid of {m} points (need modes <= grid/2)")
    if len(dims) == 1:
        return (np.arange(modes[0]),)
    (m1, _), (k1, k2) = dims, modes
    rows = np.concatenate([np.arange(k1), np.arange(m1 - k1 + 1, m1)])
    cols = np.arange(k2)
    return (np.repeat(rows, k2), np.tile(cols, rows.size))


def n_retained(modes) -> int:
    if len(modes) == 1:
        return int(modes[0])
    return int((2 * modes[0] - 1) * modes[1])


def _gather(Xh, index):
    return Xh[(slice(None),) + index]  # (B, nm, c)


def _scatter(values, index, half_shape):
    out = np.zeros((values.shape[0],) + tuple(half_shape) + (values.shape[-1],), dtype=complex)
    out[(slice(None),) + index] = values
    return out


def spectral_forward(Rpair, phi, x, modes):
    """``irfft(phi * (R . rfft(x)))`` restricted to the retained modes.

    ``Rpair``: (nm, cin, cout, 2); ``phi``: complex (B, nm); ``x``: (B, *dims, cin).
    """
    dims = x.shape[1:-1]
    index = retained_mode_index(dims, modes)
    R = Rpair[..., 0] + 1j * Rpair[..., 1]
    Xr = _gather(rfft_grid(x, len(dims)), index)                 # (B, nm, cin)
    P = np.matmul(Xr.transpose(1, 0, 2), R).transpose(1, 0, 2)  # (B, nm, cout)
    Zr = phi[:, :, None] * P
    half = dims[:-1] + (dims[-1] // 2 + 1,)
    y = irfft_grid(_scatter(Zr, index, half), dims)
    return y, (dims, index, R, Xr, P, phi)


def spectral_backward(cache, gy):
    """Returns ``(gR as (nm, cin, cout, 2), gphi complex (B, nm), gx)``."""
    dims, index, R, Xr, P, phi = cache
    gZr = _gather(irfft_grid_adjoint(gy, dims), index)           # (B, nm, cout)
    gphi = np.sum(gZr * np.conj(P), axis=-1)
    gP = gZr * np.conj(phi)[:, :, None]
    gPk = gP.transpose(1, 0, 2)                                   # (nm, B, cout)
    gR = np.matmul(np.conj(Xr).transpose(1, 2, 0), gPk)           # (nm, cin, cout)
    gXr = np.matmul(gPk, np.conj(R).transpose(0, 2, 1)).transpose(1, 0, 2)
    half = dims[:-1] + (dims[-1] // 2 + 1,)
    gx = rfft_grid_adjoint(_scatter(gXr, index, half), dims)
    return np.stack([gR.real, gR.imag], axis=-1), gphi, gx


# -- the time-modulated Fourier layer -----------------------------------------


def _bcast_channels(v, ndim):
    # (B, c) -> (B, 1, ..., 1, c) against (B, *spatial, c)
    return v.reshape((v.shape[0],) + (1,) * ndim + (v.shape[1],))


def fourier_layer_forward(p, x, emb, modes, activate=True):
    """``gelu(W (psi(t) * x) + b + irfft(phi(t) * R . rfft(x)))``.

    ``p`` holds ``W``, ``b``, ``R`` and the two heads ``psi`` and ``phi`` (each a
    dict ``W1, b1, W2, b2``). ``psi = 1 + head`` is a per-channel scale;
    ``phi = 1 + head`` is one complex scale per retained mode.
    """
    ndim = x.ndim - 2
    psi_out, psi_cache = head_forward(p["psi"], emb)
    psi = 1.0 + psi_out                                          # (B, cin)
    phi_out, phi_cache = head_forward(p["phi"], emb)
    nm = phi_out.shape[1] // 2
    phi = (1.0 + phi_out[:, :nm]) + 1j * phi_out[:, nm:]
    u = x * _bcast_channels(psi, ndim)
    lin, _ = dense_forward(p["W"], p["b"], u)
    spec, spec_cache = spectral_forward(p["R"], phi, x, modes)
    pre = lin + spec
    out = gelu(pre) if activate else pre
    return out, (x, psi, u, pre, psi_cache, phi_cache, spec_cache, activate)


def fourier_layer_backward(p, cache, gy):
    x, psi, u, pre, psi_cache, phi_cache, spec_cache, activate = cache
    ndim = x.ndim - 2
    gpre = gy * gelu_grad(pre) if activate else gy
    dgrads, gu = dense_backward(p["W"], u, gpre)
    gx = gu * _bcast_channels(psi, ndim)
    gpsi = np.sum(gu * x, axis=tuple(range(1, ndim + 1)))
    gR, gphi, gx_spec = spectral_backward(spec_cache, gpre)
    gx = gx + gx_spec
    grads = {
        "W": dgrads["W"],
        "b": dgrads["b"],
        "R": gR,
        "psi": head_backward(p["psi"], psi_cache, gpsi),
        "phi": head_backward(p["phi"], phi_cache, np.concatenate([gphi.real, gphi.imag], axis=1)),
    }
    return grads, gx
