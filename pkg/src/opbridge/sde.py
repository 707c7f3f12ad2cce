"""Forward SDEs over grid fields and their Euler-Maruyama simulation.

All process callables work on batched states shaped ``(B, *state_shape)``.
Noise increments carry their own shape per process (``noise_shape``): the
Brownian process is driven by one noise value per state component, the
Kunita landmark flow by two noise fields on a fixed planar grid.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .grid import Field, SpatialGrid, read_field, write_field

__all__ = [
    "NumericalBlowup",
    "DiffusionOp",
    "ProcessSpec",
    "BatchPaths",
    "diffusion_outer",
    "make_brownian_spec",
    "make_kunita_spec",
    "kunita_kernel",
    "em_step",
    "simulate_forward",
    "trajectory_rng",
    "brownian_increments",
    "save_paths",
    "load_paths",
]

BLOWUP_LIMIT = 1e6


class NumericalBlowup(FloatingPointError):
    """A trajectory left the finite (or bounded) range."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


@dataclass(frozen=True)
class DiffusionOp:
    """Dense diffusion matrix ``g`` of shape (state dim M, noise dim M')."""

    matrix: np.ndarray

    def outer(self) -> tuple[np.ndarray, np.ndarray]:
        return diffusion_outer(self)


def diffusion_outer(g: DiffusionOp | np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Return ``a = g g^T`` and its diagonal ``lambda``."""
    mat = g.matrix if isinstance(g, DiffusionOp) else np.asarray(g, dtype=np.float64)
    a = mat @ mat.T
    return a, np.diag(a).copy()


Array = np.ndarray
StateFn = Callable[[float, Array], Array]


@dataclass(frozen=True)
class ProcessSpec:
    """A forward SDE ``dX = f(t, X) dt + g(t, X) dW`` over batched states.

    ``apply_diffusion(t, x, dW)`` computes ``g(t, x) dW``, ``diffusion_diag``
    the diagonal of ``g g^T`` shaped like the state, ``diffusion_divergence``
    the vector ``sum_j d/dx_j a_ij``. ``diffusion_matrix`` builds the dense
    operator for a single unbatched state.
    """

    name: str
    drift: StateFn
    apply_diffusion: Callable[[float, Array, Array], Array]
    diffusion_diag: StateFn
    diffusion_divergence: StateFn
    diffusion_matrix: Callable[[float, Array], DiffusionOp]
    noise_shape: Callable[[tuple[int, ...]], tuple[int, ...]]
    state_dependent: bool
    descriptor: dict = field(default_factory=dict)


def make_brownian_spec(sigma: float, grid: SpatialGrid | None = None, channels: int | None = None) -> ProcessSpec:
    """Cylindrical Brownian motion ``dX = sigma dW`` on grid evaluations.

    ``grid`` and ``channels`` are recorded in the descriptor only; the process
    itself works at any resolution.
    """
    sigma = float(sigma)
    if sigma < 0:
        raise ValueError("sigma must be nonnegative")

    def drift(t, x):
        return np.zeros_like(x)

    def apply_diffusion(t, x, dW):
        return sigma * dW

    def diag(t, x):
        return np.full_like(x, sigma * sigma)

    def divergence(t, x):
        return np.zeros_like(x)

    def matrix(t, x):
        return DiffusionOp(sigma * np.eye(np.asarray(x).size))

    desc: dict[str, Any] = {"kind": "brownian", "sigma": sigma}
    if grid is not None:
        desc["dims"] = list(grid.dims)
    if channels is not None:
        desc["channels"] = int(channels)
    return ProcessSpec("brownian", drift, apply_diffusion, diag, divergence, matrix,
                       lambda shape: tuple(shape), False, desc)


def kunita_kernel(x: Array, nodes: Array, sigma_k: float, kappa: float) -> Array:
    """Scalar Gaussian kernel ``sigma_k * exp(-|x - z|^2 / kappa)`` for all pairs.

    ``x``: (..., n, 2) landmark positions, ``nodes``: (J, 2). Returns (..., n, J).
    """
    diff = x[..., :, None, :] - nodes
    return sigma_k * np.exp(-np.sum(diff * diff, axis=-1) / kappa)


def make_kunita_spec(
    sigma_k: float = 0.04,
    kappa: float = 0.02,
    noise_grid: SpatialGrid | None = None,
    noise_scaling: str = "cylindrical",
) -> ProcessSpec:
    """Stochastic flow of planar landmarks driven by a Gaussian-kernel noise field.

    States are ``(n, 2)`` landmark positions. Each coordinate is driven by its
    own noise field on the nodes of ``noise_grid`` (default: 50x50 over
    [-0.5, 1.5]^2). The diffusion entry for landmark ``i`` and node ``j`` is
    ``k(x_i, z_j) * w`` with ``w = sqrt(cell area)`` ("cylindrical", the
    discretization of a cylindrical Wiener process), ``w = cell area``
    ("quadrature") or ``w = 1`` ("sum").
    """
    if noise_grid is None:
        noise_grid = SpatialGrid((50, 50), ((-0.5, 1.5), (-0.5, 1.5)))
    if noise_grid.ndim != 2:
        raise ValueError("the Kunita noise grid must be planar")
    area = float(np.prod(noise_grid.spacing))
    weights = {"cylindrical": np.sqrt(area), "quadrature": area, "sum": 1.0}
    if noise_scaling not in weights:
        raise ValueError(f"unknown noise_scaling {noise_scaling!r}")
    w = float(weights[noise_scaling])
    # midpoint rule: nodes sit at cell centres
    nodes = noise_grid.points().reshape(-1, 2) + 0.5 * np.asarray(noise_grid.spacing)
    n_nodes = nodes.shape[0]
    (lo0, hi0), (lo1, hi1) = noise_grid.extents
    margin0, margin1 = hi0 - lo0, hi1 - lo1
    box = ((lo0 - margin0 / 2, hi0 + margin0 / 2), (lo1 - margin1 / 2, hi1 + margin1 / 2))

    def check_support(x):
        outside = ((x[..., 0] < box[0][0]) | (x[..., 0] > box[0][1])
                   | (x[..., 1] < box[1][0]) | (x[..., 1] > box[1][1]))
        if np.any(outside):
            warnings.warn("landmark outside the noise support box; the kernel nearly vanishes there",
                          RuntimeWarning, stacklevel=3)

    def weighted_kernel(x):
        return kunita_kernel(x, nodes, sigma_k, kappa) * w

    def drift(t, x):
        return np.zeros_like(x)

    def apply_diffusion(t, x, dW):
        check_support(x)
        K = weighted_kernel(x)  # (B, n, J)
        return K @ dW            # dW: (B, J, 2)

    def diag(t, x):
        K = weighted_kernel(x)
        lam = np.sum(K * K, axis=-1)
        return np.repeat(lam[..., None], 2, axis=-1)

    def divergence(t, x):
        # d/dx_c K(x, z) = -2 (x_c - z_c) / kappa * K(x, z)
        K = weighted_kernel(x)                                # (B, n, J)
        diff = x[..., :, None, :] - nodes                      # (B, n, J, 2)
        dK = (-2.0 / kappa) * diff * K[..., None]              # (B, n, J, 2)
        total = np.sum(dK, axis=-3)                            # (B, J, 2): sum over landmarks l
        return np.einsum("...nj,...jc->...nc", K, total) + np.einsum("...nj,...njc->...nc", K, dK)

    def matrix(t, x):
        x = np.asarray(x, dtype=np.float64)
        K = weighted_kernel(x)                                 # (n, J)
        return DiffusionOp(np.kron(K, np.eye(2)))

    desc = {
        "kind": "kunita",
        "sigma_k": float(sigma_k),
        "kappa": float(kappa),
        "noise_dims": list(noise_grid.dims),
        "noise_extents": [list(e) for e in noise_grid.extents],
        "noise_scaling": noise_scaling,
    }
    return ProcessSpec("kunita", drift, apply_diffusion, diag, divergence, matrix,
                       lambda shape: (n_nodes, 2), True, desc)


def spec_from_descriptor(desc: dict) -> ProcessSpec:
    kind = desc.get("kind")
    if kind == "brownian":
        return make_brownian_spec(desc["sigma"])
    if kind == "kunita":
        grid = SpatialGrid(tuple(desc["noise_dims"]), tuple(tuple(e) for e in desc["noise_extents"]))
        return make_kunita_spec(desc["sigma_k"], desc["kappa"], grid, desc.get("noise_scaling", "cylindrical"))
    raise ValueError(f"unknown process kind {kind!r}")


def _check_state(x: Array, step: int | None) -> Array:
    if not np.all(np.isfinite(x)):
        raise NumericalBlowup("non-finite state", step)
    if np.max(np.abs(x), initial=0.0) > BLOWUP_LIMIT:
        raise NumericalBlowup(f"state magnitude exceeded {BLOWUP_LIMIT:g}", step)
    return x


def em_step(spec: ProcessSpec, t: float, x: Array, dW: Array, dt: float, step: int | None = None) -> Array:
    """One Euler-Maruyama step on a batch of states."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    out = x + spec.drift(t, x) * dt + spec.apply_diffusion(t, x, dW)
    return _check_state(out, step)


def trajectory_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent stream for one trajectory, keyed by ``(seed, *key)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key)))


def brownian_increments(seed: int, B: int, N: int, noise_shape: tuple[int, ...], dt: float,
                        key: tuple[int, ...] = ()) -> Array:
    """Noise increments ``(B, N, *noise_shape)`` with variance ``dt``; trajectory b uses stream (seed, *key, b)."""
    sq = np.sqrt(dt)
    out = np.empty((B, N) + tuple(noise_shape))
    for b in range(B):
        out[b] = trajectory_rng(seed, *key, b).standard_normal((N,) + tuple(noise_shape)) * sq
    return out


@dataclass
class BatchPaths:
    """Simulated trajectories with the noise that produced them.

    ``states``: (B, N+1, *state_shape); ``noises``: (B, N, *noise_shape).
    """

    times: Array
    states: Array
    noises: Array
    seed: int | None = None
    grid: SpatialGrid | None = None
    descriptor: dict = field(default_factory=dict)

    @property
    def B(self) -> int:
        return self.states.shape[0]

    @property
    def N(self) -> int:
        return self.states.shape[1] - 1

    @property
    def T(self) -> float:
        return float(self.times[-1])

    @property
    def dt(self) -> float:
        return float(self.times[1] - self.times[0])

    def field(self, b: int, n: int) -> Field:
        grid = self.grid or SpatialGrid(self.states.shape[2:-1])
        return Field(grid, self.states[b, n])


def time_grid(T: float, N: int) -> Array:
    return np.linspace(0.0, T, N + 1)


def simulate_forward(spec: ProcessSpec, x0: Field | Array, T: float = 1.0, N: int = 100, B: int = 1,
                     seed: int = 0, key: tuple[int, ...] = (), noises: Array | None = None,
                     batched: bool = False) -> BatchPaths:
    """Euler-Maruyama trajectories from ``x0``.

    ``x0`` is one state shared by all trajectories, or with ``batched=True`` one
    state per trajectory (leading axis ``B``). Trajectory ``b`` draws its noise
    from the stream ``(seed, *key, b)`` unless ``noises`` is supplied.
    """
    if N < 1 or B < 1:
        raise ValueError("N and B must be >= 1")
    grid = x0.grid if isinstance(x0, Field) else None
    x0 = np.asarray(x0.values if isinstance(x0, Field) else x0, dtype=np.float64)
    if batched:
        if x0.shape[0] != B:
            raise ValueError(f"batched start has {x0.shape[0]} states, expected {B}")
        x = x0.copy()
    else:
        x = np.broadcast_to(x0, (B,) + x0.shape).copy()
    times = time_grid(T, N)
    dt = float(T) / N
    if noises is None:
        noises = brownian_increments(seed, B, N, spec.noise_shape(x.shape[1:]), dt, key)
    states = np.empty((B, N + 1) + x.shape[1:])
    states[:, 0] = x
    for n in range(N):
        x = em_step(spec, times[n], x, noises[:, n], dt, step=n + 1)
        states[:, n + 1] = x
    return BatchPaths(times, states, noises, seed, grid, dict(spec.descriptor))


# -- persistence ---------------------------------------------------------------


def save_paths(path: str | Path, paths: BatchPaths, extra: dict | None = None) -> None:
    """Directory layout: manifest.json, states/b####_n####.brgf, noises.f64."""
    root = Path(path)
    (root / "states").mkdir(parents=True, exist_ok=True)
    grid = paths.grid or SpatialGrid(paths.states.shape[2:-1])
    for b in range(paths.B):
        for n in range(paths.N + 1):
            write_field(root / "states" / f"b{b:04d}_n{n:04d}.brgf", Field(grid, paths.states[b, n]))
    np.ascontiguousarray(paths.noises, dtype="<f8").tofile(root / "noises.f64")
    manifest = {
        "seed": paths.seed,
        "T": paths.T,
        "N": paths.N,
        "B": paths.B,
        "spec": paths.descriptor,
        "state_shape": list(paths.states.shape[2:]),
        "noise_shape": list(paths.noises.shape[2:]),
        "extents": [list(e) for e in grid.extents],
    }
    if extra:
        manifest.update(extra)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_paths(path: str | Path) -> BatchPaths:
    root = Path(path)
    manifest = json.loads((root / "manifest.json").read_text())
    B, N = manifest["B"], manifest["N"]
    extents = [tuple(e) for e in manifest["extents"]]
    states = np.empty((B, N + 1) + tuple(manifest["state_shape"]))
    grid = None
    for b in range(B):
        for n in range(N + 1):
            f = read_field(root / "states" / f"b{b:04d}_n{n:04d}.brgf", extents)
            states[b, n] = f.values
            grid = f.grid
    noises = np.fromfile(root / "noises.f64", dtype="<f8").reshape((B, N) + tuple(manifest["noise_shape"]))
    return BatchPaths(time_grid(manifest["T"], N), states, noises, manifest["seed"], grid, manifest["spec"])
