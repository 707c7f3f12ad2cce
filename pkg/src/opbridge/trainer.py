"""Score regression on forward trajectories, with Adam and a cosine schedule.

For every step ``n = 1..N`` of a simulated trajectory the operator sees the
state ``X_{t_n}`` and is regressed onto ``-(g dW_n) / dt``, weighted by the
diagonal of ``g g^T`` at that state. The population minimizer is the
diffusion-scaled transition score ``a grad log p(t, x | x0)``.
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .ctuno import ArchConfig, ConfigError, CtUnoParams, ctuno_backward, ctuno_forward, init_params, save_checkpoint
from .sde import BatchPaths, DiffusionOp, NumericalBlowup, ProcessSpec, simulate_forward, trajectory_rng

__all__ = [
    "TrainConfig",
    "AdamState",
    "TrainResult",
    "regression_target",
    "batch_loss_and_grads",
    "adam_step",
    "cosine_lr",
    "train",
]

# stream tags for trajectory_rng(seed, tag, iteration[, b])
_START_STREAM = 0
_NOISE_STREAM = 1


@dataclass(frozen=True)
class TrainConfig:
    batch: int = 16
    N: int = 100
    T: float = 1.0
    iterations: int = 2000
    lr0: float = 1e-3
    lr_final: float = 1e-5
    decay_fraction: float = 0.8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    init_seed: int | None = None
    checkpoint_every: int = 0
    chunk: int = 800

    def __post_init__(self):
        if self.batch < 1 or self.N < 1 or self.T <= 0 or self.iterations < 0 or self.chunk < 1:
            raise ConfigError("batch, N, T and chunk must be positive and iterations nonnegative")
        if not 0 < self.lr_final <= self.lr0:
            raise ConfigError("need 0 < lr_final <= lr0")
        if not 0 < self.decay_fraction <= 1:
            raise ConfigError("decay_fraction must lie in (0, 1]")


def regression_target(g, dW, dt: float) -> np.ndarray:
    """``-(g dW) / dt``: the value the operator must cancel at one step.

    ``g`` is a :class:`DiffusionOp`, a dense matrix, or a callable ``dW -> g dW``.
    The result has the shape of ``g dW``; a flat product is reshaped to ``dW``'s
    shape when the diffusion is square.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    dW = np.asarray(dW, dtype=np.float64)
    if callable(g) and not isinstance(g, (DiffusionOp, np.ndarray)):
        gdw = np.asarray(g(dW), dtype=np.float64)
    else:
        mat = g.matrix if isinstance(g, DiffusionOp) else np.asarray(g, dtype=np.float64)
        gdw = mat @ dW.ravel()
        if gdw.size == dW.size:
            gdw = gdw.reshape(dW.shape)
    return -gdw / dt


def batch_loss_and_grads(params: CtUnoParams, paths: BatchPaths, spec: ProcessSpec,
                         chunk: int = 800, with_grad: bool = True):
    """Empirical loss and its flat parameter gradient.

    ``L = 1/(2B) sum_n sum_b sum_i lam_i (G(t_n, X_n) + (g(X_{n-1}) dW_n)_i / dt)^2 dt``
    with ``lam = diag(g g^T)`` at ``X_n``. Samples ``(b, n)`` are processed in
    chunks of ``chunk`` in a fixed order.
    """
    B, N, dt = paths.B, paths.N, paths.dt
    shape = paths.states.shape[2:]
    if paths.noises.shape[:2] != (B, N):
        raise ValueError("noise array does not match the trajectories")
    x_now = paths.states[:, 1:].reshape((B * N,) + shape)
    x_prev = paths.states[:, :-1].reshape((B * N,) + shape)
    dW = paths.noises.reshape((B * N,) + paths.noises.shape[2:])
    t_now = np.tile(paths.times[1:], B)
    t_prev = np.tile(paths.times[:-1], B)
    loss = 0.0
    grad = np.zeros(params.count) if with_grad else None
    for lo in range(0, B * N, chunk):
        sl = slice(lo, lo + chunk)
        xn = x_now[sl]
        gdw = spec.apply_diffusion(t_prev[sl], x_prev[sl], dW[sl])
        lam = spec.diffusion_diag(t_now[sl], xn)
        G, tape = ctuno_forward(params, xn, t_now[sl])
        resid = G + gdw / dt
        loss += 0.5 * float(np.sum(lam * resid * resid)) * dt / B
        if with_grad:
            g, _ = ctuno_backward(tape, lam * resid * (dt / B))
            grad += g
    return loss, grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int, beta1=0.9, beta2=0.999, eps=1e-8) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0, beta1, beta2, eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray, lr: float) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``state`` and returns new parameters."""
    if not np.all(np.isfinite(grads)):
        raise NumericalBlowup("non-finite gradient", state.step)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    state.m = b1 * state.m + (1 - b1) * grads
    state.v = b2 * state.v + (1 - b2) * grads * grads
    mhat = state.m / (1 - b1 ** state.step)
    vhat = state.v / (1 - b2 ** state.step)
    return params - lr * mhat / (np.sqrt(vhat) + state.eps)


def cosine_lr(it: int, total: int, lr0: float, lr_final: float, decay_fraction: float = 0.8) -> float:
    """Cosine from ``lr0`` at iteration 0 to ``lr_final`` at ``decay_fraction * total``, flat after."""
    end = decay_fraction * total
    if total <= 0 or it >= end:
        return float(lr_final) if total > 0 else float(lr0)
    return float(lr_final + (lr0 - lr_final) * 0.5 * (1.0 + math.cos(math.pi * it / end)))


@dataclass
class TrainResult:
    params: CtUnoParams
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    manifest: dict = field(default_factory=dict)


def _write_curve(path: Path, losses, lrs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "lr"])
        for i, (l, r) in enumerate(zip(losses, lrs)):
            w.writerow([i, repr(l), repr(r)])


def iteration_paths(spec: ProcessSpec, x0_sampler: Callable, cfg: TrainConfig, it: int) -> BatchPaths:
    """The fresh trajectories of iteration ``it``; a pure function of ``cfg.seed`` and ``it``."""
    starts = np.stack([np.asarray(x0_sampler(trajectory_rng(cfg.seed, _START_STREAM, it, b)), dtype=np.float64)
                       for b in range(cfg.batch)])
    return simulate_forward(spec, starts, cfg.T, cfg.N, cfg.batch, seed=cfg.seed,
                            key=(_NOISE_STREAM, it), batched=True)


def train(spec: ProcessSpec, x0_sampler: Callable[[np.random.Generator], np.ndarray], cfg: TrainConfig,
          arch: ArchConfig, out_dir: str | Path | None = None, params: CtUnoParams | None = None,
          log_every: int = 0, log: Callable[[str], None] = print) -> TrainResult:
    """Adam on fresh forward trajectories every iteration.

    ``x0_sampler(rng)`` returns one start state (array shaped ``(*dims, channels)``).
    With ``out_dir`` the run writes ``loss.csv``, ``checkpoint.brgp`` (plus
    ``checkpoint_<it>.brgp`` at the configured cadence), ``train_manifest.json``
    and ``timing.json``.
    A non-finite loss aborts with :class:`NumericalBlowup`; the last good
    checkpoint is written first.
    """
    if params is None:
        params = init_params(arch, cfg.seed if cfg.init_seed is None else cfg.init_seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    state = AdamState.zeros(params.count, cfg.beta1, cfg.beta2, cfg.eps)
    theta = params.flat()
    losses: list[float] = []
    lrs: list[float] = []
    start = time.perf_counter()
    meta = {"train_config": asdict(cfg), "spec": dict(spec.descriptor)}

    def checkpoint(name, vec, extra=None):
        if out is not None:
            save_checkpoint(out / name, CtUnoParams.from_flat(arch, vec),
                            {**meta, "iterations_done": len(losses), **(extra or {})})

    for it in range(cfg.iterations):
        paths = iteration_paths(spec, x0_sampler, cfg, it)
        current = CtUnoParams.from_flat(arch, theta)
        loss, grad = batch_loss_and_grads(current, paths, spec, cfg.chunk)
        if not (math.isfinite(loss) and np.all(np.isfinite(grad))):
            checkpoint("checkpoint.brgp", theta, {"aborted_at": it})
            raise NumericalBlowup(f"non-finite loss at iteration {it}", it)
        lr = cosine_lr(it, cfg.iterations, cfg.lr0, cfg.lr_final, cfg.decay_fraction)
        theta = adam_step(state, theta, grad, lr)
        losses.append(loss)
        lrs.append(lr)
        if log_every and (it % log_every == 0 or it == cfg.iterations - 1):
            log(f"iter {it:6d}  loss {loss:.6e}  lr {lr:.3e}")
        if cfg.checkpoint_every and (it + 1) % cfg.checkpoint_every == 0:
            checkpoint(f"checkpoint_{it + 1:06d}.brgp", theta)
    wall = time.perf_counter() - start
    final = CtUnoParams.from_flat(arch, theta)
    manifest = {**meta, "arch": arch.to_dict(), "param_count": final.count, "seed": cfg.seed,
                "final_loss": losses[-1] if losses else None}
    if out is not None:
        checkpoint("checkpoint.brgp", theta)
        _write_curve(out / "loss.csv", losses, lrs)
        (out / "train_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
        # kept apart so the manifest itself is reproducible bitwise
        (out / "timing.json").write_text(json.dumps({"wall_time_s": wall}))
    return TrainResult(final, losses, lrs, wall, manifest)
