"""Shape generators, evaluation metrics and the desk-scale experiment presets."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np

from .ctuno import ARCH_PRESETS, ArchConfig, ConfigError, CtUnoParams, OperatorModel
from .grid import Field, SpatialGrid, spectral_resample
from .oracle import BridgeEndpoints, simulate_true_reversed_bridge
from .sampler import BridgeSample
from .sde import BatchPaths, ProcessSpec, make_brownian_spec, make_kunita_spec
from .trainer import TrainConfig

__all__ = [
    "gen_quadratic",
    "gen_ellipse",
    "gen_sphere",
    "load_landmarks",
    "fixture_path",
    "ShapeDataset",
    "drift_rmse",
    "end_shape_rmse",
    "resolution_sweep",
    "MetricsReport",
    "ExperimentPreset",
    "PRESETS",
    "get_preset",
]


# -- generators ----------------------------------------------------------------


def quadratic_grid(m: int) -> SpatialGrid:
    return SpatialGrid((m,), ((-1.0, 1.0),))


def gen_quadratic(a: float = 1.0, eps_std: float = 1e-2, m: int = 8,
                  rng: np.random.Generator | None = None) -> Field:
    """``a x^2 + eps`` on ``m`` periodic points of [-1, 1), eps i.i.d. N(0, eps_std^2)."""
    grid = quadratic_grid(m)
    x = grid.axis_points(0)
    vals = a * x * x
    if eps_std > 0:
        if rng is None:
            raise ValueError("a noisy quadratic needs an rng")
        vals = vals + eps_std * rng.standard_normal(m)
    return Field(grid, vals)


def gen_ellipse(a: float, b: float, n: int) -> Field:
    """Closed curve ``(a cos 2 pi s, b sin 2 pi s)`` at ``s = j / n``."""
    grid = SpatialGrid((n,), ((0.0, 1.0),))
    s = grid.axis_points(0)
    return Field(grid, np.stack([a * np.cos(2 * np.pi * s), b * np.sin(2 * np.pi * s)], axis=-1))


def gen_sphere(radius: float, m: int) -> Field:
    """Sphere of ``radius`` on an ``m x m`` grid of (polar, azimuth) angles.

    Both angles run over the periodic interval [0, 2 pi): the polar angle
    covers the sphere twice, which keeps every coordinate a trigonometric
    polynomial so spectral resampling stays exact.
    """
    grid = SpatialGrid((m, m), ((0.0, 2 * np.pi), (0.0, 2 * np.pi)))
    pts = grid.points()
    th, ph = pts[..., 0], pts[..., 1]
    vals = radius * np.stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)], axis=-1)
    return Field(grid, vals)


def fixture_path(name: str) -> Path:
    """Path of a shipped landmark CSV (``butterfly_a`` or ``butterfly_b``)."""
    return Path(str(resources.files("opbridge") / "data" / f"{name}.csv"))


def load_landmarks(path: str | Path, n: int | None = None, tol: float = 1e-6) -> Field:
    """Read a closed outline from CSV ``s,x,y`` and optionally resample it to ``n`` points.

    ``s`` must be strictly increasing, evenly spaced on [0, 1), and the last
    row must not repeat the first point (the closure is implicit).
    """
    text = Path(path).read_text()
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or [f.strip() for f in reader.fieldnames] != ["s", "x", "y"]:
        raise ValueError(f"{path}: header must be 's,x,y'")
    rows = np.array([[float(r["s"]), float(r["x"]), float(r["y"])] for r in reader])
    if rows.shape[0] < 3:
        raise ValueError(f"{path}: need at least 3 landmarks")
    s, xy = rows[:, 0], rows[:, 1:]
    if np.any(np.diff(s) == 0):
        raise ValueError(f"{path}: duplicate arclength parameter")
    if np.any(np.diff(s) < 0):
        raise ValueError(f"{path}: rows are not sorted by s")
    if s[0] < 0 or s[-1] >= 1:
        raise ValueError(f"{path}: s must lie in [0, 1)")
    m = s.size
    if np.max(np.abs(s - (s[0] + np.arange(m) / m))) > tol:
        raise ValueError(f"{path}: landmarks must be evenly spaced in s")
    scale = max(1.0, float(np.max(np.abs(xy))))
    if np.linalg.norm(xy[0] - xy[-1]) < tol * scale:
        raise ValueError(f"{path}: last landmark repeats the first; the outline must not be explicitly closed")
    f = Field(SpatialGrid((m,), ((0.0, 1.0),)), xy)
    return spectral_resample(f, (n,)) if n is not None and n != m else f


@dataclass(frozen=True)
class ShapeDataset:
    name: str
    start: Field
    target: Field
    generator: str

    def __post_init__(self):
        if self.start.grid.dims != self.target.grid.dims or self.start.channels != self.target.channels:
            raise ValueError("start and target must share grid and channels")

    @property
    def resolution(self) -> tuple[int, ...]:
        return self.start.grid.dims


# -- metrics -------------------------------------------------------------------


def _model_on(model, tau, y, chunk=1024):
    if isinstance(model, CtUnoParams):
        model = OperatorModel(model)
    out = [model(tau[i:i + chunk], y[i:i + chunk]) for i in range(0, y.shape[0], chunk)]
    return np.concatenate(out, axis=0)


def drift_rmse(model, x0: Field | np.ndarray, paths: BatchPaths) -> tuple[np.ndarray, float]:
    """Learned vs analytic reversed-bridge drift along stored reversed-bridge paths.

    At every step ``n = 0..N-1`` the model is evaluated at ``(T - s_n, y_n)`` and
    compared with ``(x0 - y_n) / (T - s_n)``. Returns the per-step RMSE (over
    samples, points and channels) and the aggregate RMSE over everything.
    """
    x0 = x0.values if isinstance(x0, Field) else np.asarray(x0)
    B, N, T = paths.B, paths.N, paths.T
    s = paths.times[:-1]
    Y = paths.states[:, :-1]
    shape = Y.shape[2:]
    flat = np.ascontiguousarray(Y.transpose((1, 0) + tuple(range(2, Y.ndim)))).reshape((N * B,) + shape)
    tau = np.repeat(T - s, B)
    G = _model_on(model, tau, flat)
    true = (x0 - flat) / tau.reshape((-1,) + (1,) * len(shape))
    sq = ((G - true) ** 2).reshape((N, -1))
    return np.sqrt(sq.mean(axis=1)), float(np.sqrt(sq.mean()))


def end_shape_rmse(samples: list[BridgeSample] | np.ndarray, x0: Field | np.ndarray) -> float:
    """RMSE between bridge ends at forward time 0 and ``x0`` over all samples."""
    x0 = x0.values if isinstance(x0, Field) else np.asarray(x0)
    ends = np.stack([s.start for s in samples]) if isinstance(samples, list) else np.asarray(samples)
    return float(np.sqrt(np.mean((ends - x0) ** 2)))


@dataclass
class MetricsReport:
    per_step_drift_rmse: list[float] = field(default_factory=list)
    drift_rmse: float | None = None
    end_shape_rmse: float | None = None
    oracle_end_shape_rmse: float | None = None
    sweep: list[dict] = field(default_factory=list)
    rel_spread: float | None = None
    n_samples: int = 0
    runtime_s: float | None = None

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def rel_spread(values) -> float:
    """``(max - min) / mean`` of a list of positive values."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0 or v.max() == v.min():
        return 0.0
    return float((v.max() - v.min()) / v.mean())


def resolution_sweep(model, endpoints_at: Callable[[int], BridgeEndpoints], sigma: float,
                     eval_sizes, N: int = 100, B: int = 64, seed: int = 0) -> MetricsReport:
    """Drift RMSE at each evaluation size on oracle bridges with a shared seed."""
    rows = []
    for m in eval_sizes:
        ep = endpoints_at(int(m))
        paths = simulate_true_reversed_bridge(ep, sigma, N, seed=seed, B=B)
        _, agg = drift_rmse(model, ep.x0, paths)
        rows.append({"eval_size": int(m), "drift_rmse": agg})
    rep = MetricsReport(sweep=rows, n_samples=B)
    rep.rel_spread = rel_spread([r["drift_rmse"] for r in rows])
    for r in rows:
        r["rel_spread"] = rep.rel_spread
    return rep


# -- presets -------------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentPreset:
    """Everything one desk-scale experiment needs.

    ``start_at(m, rng)`` draws a training start, ``endpoints_at(m, rng)`` gives the
    evaluation bridge (x0 = start shape, v = target shape) at ``m`` points.
    """

    name: str
    kind: str
    arch: Callable[[], ArchConfig]
    train: TrainConfig
    train_size: int
    eval_size: int
    eval_sizes: tuple[int, ...]
    sigma: float
    start_at: Callable[[int, np.random.Generator], Field]
    target_at: Callable[[int, np.random.Generator], Field]
    full_iterations: int
    process: str = "brownian"

    def spec(self) -> ProcessSpec:
        return make_kunita_spec() if self.process == "kunita" else make_brownian_spec(self.sigma)

    def endpoints_at(self, m: int, rng: np.random.Generator | None = None) -> BridgeEndpoints:
        rng = rng if rng is not None else np.random.default_rng(0)
        return BridgeEndpoints(self.start_at(m, rng), self.target_at(m, rng), self.train.T)

    def sampler(self) -> Callable[[np.random.Generator], np.ndarray]:
        m = self.train_size
        return lambda rng: self.start_at(m, rng).values

    def with_full_budget(self) -> "ExperimentPreset":
        return replace(self, train=replace(self.train, iterations=self.full_iterations))


def _landmarks(name, n):
    return load_landmarks(fixture_path(name), n)


PRESETS: dict[str, ExperimentPreset] = {
    "quadratic": ExperimentPreset(
        "quadratic", "quadratic", ARCH_PRESETS["quadratic"],
        TrainConfig(batch=16, N=100, iterations=2000, lr0=1e-3, lr_final=1e-5),
        train_size=8, eval_size=128, eval_sizes=(32, 64, 128, 256), sigma=0.1,
        start_at=lambda m, rng: gen_quadratic(1.0, 1e-2, m, rng),
        target_at=lambda m, rng: gen_quadratic(-1.0, 1e-2, m, rng),
        full_iterations=10000),
    "ellipse": ExperimentPreset(
        "ellipse", "ellipse", ARCH_PRESETS["ellipse"],
        TrainConfig(batch=16, N=100, iterations=1500, lr0=5e-4, lr_final=5e-6),
        train_size=16, eval_size=64, eval_sizes=(16, 32, 64, 128), sigma=0.1,
        start_at=lambda m, rng: gen_ellipse(1.25, 0.85, m),
        target_at=lambda m, rng: gen_ellipse(1.5, 0.5, m),
        full_iterations=10000),
    "sphere": ExperimentPreset(
        "sphere", "sphere", ARCH_PRESETS["sphere"],
        TrainConfig(batch=16, N=100, iterations=300, lr0=1e-3, lr_final=1e-5, chunk=200),
        train_size=16, eval_size=64, eval_sizes=(16, 32, 64), sigma=0.1,
        start_at=lambda m, rng: gen_sphere(1.0, m),
        target_at=lambda m, rng: gen_sphere(1.5, m),
        full_iterations=10000),
    "kunita-ellipse": ExperimentPreset(
        "kunita-ellipse", "landmarks", ARCH_PRESETS["butterfly"],
        TrainConfig(batch=16, N=100, iterations=300, lr0=1e-3, lr_final=1e-5, chunk=200),
        train_size=32, eval_size=64, eval_sizes=(32, 64), sigma=0.0,
        start_at=lambda m, rng: Field(gen_ellipse(0.35, 0.25, m).grid, gen_ellipse(0.35, 0.25, m).values + 0.5),
        target_at=lambda m, rng: Field(gen_ellipse(0.4, 0.2, m).grid, gen_ellipse(0.4, 0.2, m).values + 0.5),
        full_iterations=20000, process="kunita"),
    "butterfly": ExperimentPreset(
        "butterfly", "landmarks", ARCH_PRESETS["butterfly"],
        TrainConfig(batch=16, N=100, iterations=300, lr0=1e-3, lr_final=1e-5, chunk=200),
        train_size=32, eval_size=128, eval_sizes=(32, 64, 128), sigma=0.0,
        start_at=lambda m, rng: _landmarks("butterfly_a", m),
        target_at=lambda m, rng: _landmarks("butterfly_b", m),
        full_iterations=20000, process="kunita"),
}
PRESETS["quadratic-desk"] = PRESETS["quadratic"]


def get_preset(name: str) -> ExperimentPreset:
    try:
        return PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
