"""Bridge sampling by integrating the learned time-reversed SDE.

Reversed time ``s`` starts at the conditioning target ``v`` (s = 0) and runs
to ``T``; the model is queried at forward time ``tau = T - s``. A model is any
callable ``model(tau, y)`` on batched states, such as
:class:`opbridge.ctuno.OperatorModel` or :class:`opbridge.oracle.OracleDrift`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ctuno import CtUnoParams, OperatorModel
from .grid import Field, SpatialGrid, resample_axis
from .sde import BatchPaths, ProcessSpec, _check_state, brownian_increments, save_paths, time_grid

__all__ = [
    "BridgeSample",
    "reverse_step",
    "sample_bridge",
    "samples_to_paths",
    "save_samples",
    "matched_noise",
]


@dataclass
class BridgeSample:
    """Forward-time bridge path: ``states[0]`` is the learned end near ``x0``, ``states[-1] == v``."""

    times: np.ndarray
    states: np.ndarray
    seed: int
    checkpoint_id: str
    divergence_max: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("bridge times must increase")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("bridge states must be finite")

    @property
    def start(self) -> np.ndarray:
        return self.states[0]


def _as_model(model):
    return OperatorModel(model) if isinstance(model, CtUnoParams) else model


def reverse_step(model, spec: ProcessSpec, s: float, y: np.ndarray, dW: np.ndarray, dt: float,
                 T: float = 1.0, printed_sign: bool = False, return_divergence: bool = False):
    """``y + (-f + G + div a)(T - s, y) dt + g(T - s, y) dW`` on a batch of states.

    ``printed_sign=True`` adds ``+f`` instead of ``-f``. For state-independent
    diffusion the divergence is not evaluated and contributes an exact zero.
    """
    model = _as_model(model)
    y = np.asarray(y, dtype=np.float64)
    tau = float(T) - float(s)
    taus = np.full(y.shape[0], tau)
    f = spec.drift(tau, y)
    drift = (f if printed_sign else -f) + model(taus, y)
    div = spec.diffusion_divergence(tau, y) if spec.state_dependent else np.zeros_like(y)
    out = y + (drift + div) * dt + spec.apply_diffusion(tau, y, dW)
    out = _check_state(out, None)
    return (out, div) if return_divergence else out


def sample_bridge(model, spec: ProcessSpec, v: Field, T: float = 1.0, N: int = 100, seed: int = 0,
                  B: int = 1, noises: np.ndarray | None = None, key: tuple[int, ...] = (),
                  printed_sign: bool = False) -> list[BridgeSample]:
    """Sample ``B`` bridges ending at ``v``; see :class:`BridgeSample` for orientation.

    Trajectory ``b`` draws noise from the stream ``(seed, *key, b)``, the same
    streams :func:`opbridge.oracle.simulate_true_reversed_bridge` uses.
    """
    model = _as_model(model)
    values = v.values if isinstance(v, Field) else np.asarray(v, dtype=np.float64)
    dt = float(T) / N
    if noises is None:
        noises = brownian_increments(seed, B, N, spec.noise_shape(values.shape), dt, key)
    B = noises.shape[0]
    s_grid = time_grid(T, N)
    y = np.broadcast_to(values, (B,) + values.shape).copy()
    rev = np.empty((B, N + 1) + values.shape)
    rev[:, 0] = y
    div_max = np.zeros((B, N))
    axes = tuple(range(1, y.ndim))
    for n in range(N):
        y, div = reverse_step(model, spec, s_grid[n], y, noises[:, n], dt, T, printed_sign, return_divergence=True)
        div_max[:, n] = np.max(np.abs(div), axis=axes)
        rev[:, n + 1] = y
    cid = getattr(model, "checkpoint_id", type(model).__name__)
    # X*_{t_n} = Y*_{t_{N-n}}
    return [BridgeSample(s_grid.copy(), rev[b, ::-1].copy(), seed, cid, div_max[b]) for b in range(B)]


def samples_to_paths(samples: list[BridgeSample], grid: SpatialGrid | None = None) -> BatchPaths:
    states = np.stack([s.states for s in samples])
    noises = np.zeros((len(samples), states.shape[1] - 1, 0))
    return BatchPaths(samples[0].times, states, noises, samples[0].seed, grid, {"bridge": "learned-reversed"})


def save_samples(path: str | Path, samples: list[BridgeSample], target: Field, extra: dict | None = None) -> None:
    """BatchPaths directory (forward-time states) plus ``bridge.json``."""
    root = Path(path)
    save_paths(root, samples_to_paths(samples, target.grid), extra)
    record = {
        "checkpoint_id": samples[0].checkpoint_id,
        "seed": samples[0].seed,
        "n_samples": len(samples),
        "conditioning_target": target.values.tolist(),
        "max_divergence": float(max(np.max(s.divergence_max, initial=0.0) for s in samples)),
    }
    (root / "bridge.json").write_text(json.dumps(record, indent=2, sort_keys=True))


def matched_noise(coarse: np.ndarray, n_fine: int, mode: str = "interp",
                  rng: np.random.Generator | None = None, axis: int = 2, dt: float | None = None) -> np.ndarray:
    """Fine-grid noise sharing the low modes of ``coarse`` along ``axis``.

    ``interp``: the band-limited interpolant of the coarse increments, so a
    discretization-consistent model produces pathwise-comparable bridges.
    ``white``: the coarse modes ``|k| < m/2`` rescaled by ``sqrt(m/m')`` plus
    independent white noise of variance ``dt`` on the remaining modes from
    ``rng``; the result has exactly the per-point covariance of fresh
    fine-grid increments. ``axis`` 2 is the first spatial axis of a
    ``(B, N, m, C)`` noise array.
    """
    m = coarse.shape[axis]
    if n_fine < m:
        raise ValueError("the fine grid must not be coarser")
    if mode == "interp":
        return resample_axis(coarse, axis, n_fine)
    if mode != "white":
        raise ValueError(f"unknown mode {mode!r}")
    if rng is None or dt is None:
        raise ValueError("white mode needs an rng and dt for the unmatched modes")
    C = np.fft.fft(coarse, axis=axis)
    k_c = np.fft.fftfreq(m, 1.0 / m)
    keep = (np.abs(k_c) < m / 2).reshape([-1 if a == axis else 1 for a in range(coarse.ndim)])
    low = np.fft.ifft(np.where(keep, C, 0.0), axis=axis).real
    low = resample_axis(low, axis, n_fine) * np.sqrt(m / n_fine)
    shape = list(coarse.shape)
    shape[axis] = n_fine
    Z = rng.standard_normal(shape) * np.sqrt(dt)
    k_f = np.fft.fftfreq(n_fine, 1.0 / n_fine)
    high = (np.abs(k_f) >= m / 2).reshape([-1 if a == axis else 1 for a in range(coarse.ndim)])
    high_part = np.fft.ifft(np.where(high, np.fft.fft(Z, axis=axis), 0.0), axis=axis).real
    return low + high_part
