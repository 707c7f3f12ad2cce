"""Closed-form Brownian bridges, used as ground truth.

Time convention for the reversed bridge: reversed time ``s`` runs from 0 at
the conditioning target ``v`` to ``T`` at the start ``x0``, so the drift
singularity sits at ``s = T``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Field
from .sde import BatchPaths, NumericalBlowup, brownian_increments, time_grid

__all__ = [
    "BridgeEndpoints",
    "reversed_bm_bridge_drift",
    "forward_bm_bridge_drift",
    "simulate_true_reversed_bridge",
    "simulate_forward_bridge",
    "OracleDrift",
]

T_CLAMP_FRACTION = 1e-4


def _values(x):
    return x.values if isinstance(x, Field) else np.asarray(x, dtype=np.float64)


@dataclass(frozen=True)
class BridgeEndpoints:
    x0: Field
    v: Field
    T: float = 1.0

    def __post_init__(self):
        if self.x0.grid.dims != self.v.grid.dims or self.x0.channels != self.v.channels:
            raise ValueError("bridge endpoints must share grid and channels")


def _remaining(t, T):
    # clamp the time-to-go away from the singularity
    return np.maximum(T - np.asarray(t, dtype=np.float64), T_CLAMP_FRACTION * T)


def reversed_bm_bridge_drift(x0, y, t, T: float = 1.0) -> np.ndarray:
    """Drift ``(x0 - y) / (T - t)`` of the reversed bridge at reversed time ``t``.

    ``t`` may be a scalar or one time per leading batch entry.
    """
    x0, y = _values(x0), _values(y)
    rem = _remaining(t, T)
    rem = rem.reshape(rem.shape + (1,) * (y.ndim - rem.ndim)) if rem.ndim else rem
    return (x0 - y) / rem


def forward_bm_bridge_drift(v, x, t, T: float = 1.0) -> np.ndarray:
    """Doob drift ``(v - x) / (T - t)`` of the Brownian bridge conditioned on ``X_T = v``."""
    return reversed_bm_bridge_drift(v, x, t, T)


class OracleDrift:
    """The analytic reverse-bridge score term, usable wherever a learned model is.

    Called as ``model(tau, y)`` with forward time ``tau = T - s``; returns
    ``(x0 - y) / tau`` with the same clamp as the oracle bridges.
    """

    checkpoint_id = "oracle"

    def __init__(self, x0, T: float = 1.0):
        self.x0 = _values(x0)
        self.T = float(T)

    def __call__(self, tau, y):
        return reversed_bm_bridge_drift(self.x0, y, self.T - np.asarray(tau, dtype=np.float64), self.T)


def _integrate(drift_fn, start, sigma, N, T, noises):
    dt = T / N
    times = time_grid(T, N)
    B = noises.shape[0]
    y = np.broadcast_to(start, (B,) + start.shape).copy()
    states = np.empty((B, N + 1) + start.shape)
    states[:, 0] = y
    for n in range(N):
        y = y + drift_fn(times[n], y) * dt + sigma * noises[:, n]
        if not np.all(np.isfinite(y)):
            raise NumericalBlowup("non-finite bridge state", n + 1)
        states[:, n + 1] = y
    return times, states


def simulate_true_reversed_bridge(endpoints: BridgeEndpoints, sigma: float, N: int = 100, seed: int = 0,
                                  B: int = 1, noises: np.ndarray | None = None,
                                  key: tuple[int, ...] = ()) -> BatchPaths:
    """EM samples of the reversed Brownian bridge, from ``v`` at s=0 toward ``x0`` at s=T.

    The noise streams are the ones :func:`opbridge.sampler.sample_bridge` uses for
    the same ``seed``, so learned and true bridges can be compared pathwise.
    States are stored in reversed time; ``states[:, ::-1]`` runs from x0 to v.
    """
    T = endpoints.T
    x0, v = endpoints.x0.values, endpoints.v.values
    if noises is None:
        noises = brownian_increments(seed, B, N, v.shape, T / N, key)
    times, states = _integrate(lambda s, y: reversed_bm_bridge_drift(x0, y, s, T), v, sigma, N, T, noises)
    desc = {"kind": "brownian", "sigma": float(sigma), "bridge": "reversed-oracle"}
    return BatchPaths(times, states, noises, seed, endpoints.v.grid, desc)


def simulate_forward_bridge(endpoints: BridgeEndpoints, sigma: float, N: int = 100, seed: int = 0,
                            B: int = 1, noises: np.ndarray | None = None,
                            key: tuple[int, ...] = ()) -> BatchPaths:
    """EM samples of the forward Doob bridge from ``x0`` conditioned to hit ``v`` at T."""
    T = endpoints.T
    x0, v = endpoints.x0.values, endpoints.v.values
    if noises is None:
        noises = brownian_increments(seed, B, N, x0.shape, T / N, key)
    times, states = _integrate(lambda t, x: forward_bm_bridge_drift(v, x, t, T), x0, sigma, N, T, noises)
    desc = {"kind": "brownian", "sigma": float(sigma), "bridge": "forward-oracle"}
    return BatchPaths(times, states, noises, seed, endpoints.x0.grid, desc)
