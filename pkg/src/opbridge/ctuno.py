"""Continuous-time U-shaped Fourier neural operator with a hand-written backward pass.

Layout for ``S`` down stages at grid factors ``f_0 .. f_{S-1}`` (relative to
the input grid) and ``S`` mirrored up stages::

    lift -> [resample to grid of D_j, keep as skip_j, fourier layer D_j]_j
         -> [resample to grid of U_s, concat skip_{S-1-s}, channel mix, fourier layer U_s]_s
         -> project

Every resample is spectral, so the same parameters act on any grid that is
divisible by the stage factors and large enough for the retained modes.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import layers as L
from .grid import Field, resample_axis, resample_axis_adjoint

__all__ = [
    "ConfigError",
    "StageConfig",
    "ArchConfig",
    "CtUnoParams",
    "ForwardTape",
    "param_shapes",
    "init_params",
    "ctuno_forward",
    "ctuno_backward",
    "apply_operator",
    "OperatorModel",
    "save_checkpoint",
    "load_checkpoint",
    "ARCH_PRESETS",
    "tiny_arch",
]

CKPT_MAGIC = b"BRGP"
CKPT_VERSION = 1


class ConfigError(ValueError):
    """Inconsistent architecture or run configuration."""


@dataclass(frozen=True)
class StageConfig:
    width: int
    modes: tuple[int, ...]
    factor: int = 1
    in_width: int | None = None  # up stages: width after the skip channel mix

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(int(k) for k in self.modes))


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int
    out_channels: int
    lift_width: int
    down: tuple[StageConfig, ...]
    up: tuple[StageConfig, ...]
    time_dim: int = 32
    head_hidden: int = 32
    coord_features: bool = True
    name: str = ""

    def __post_init__(self):
        down = tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.down)
        up = tuple(s if isinstance(s, StageConfig) else StageConfig(**s) for s in self.up)
        object.__setattr__(self, "down", down)
        object.__setattr__(self, "up", up)
        self.validate()

    @property
    def ndim(self) -> int:
        return len(self.down[0].modes)

    @property
    def input_width(self) -> int:
        return self.in_channels + (2 * self.ndim if self.coord_features else 0)

    def validate(self):
        if not self.down or len(self.up) != len(self.down):
            raise ConfigError("need at least one down stage and as many up stages")
        if self.time_dim < 2 or self.time_dim % 2:
            raise ConfigError("time_dim must be even")
        nd = len(self.down[0].modes)
        if nd not in (1, 2):
            raise ConfigError("operators act on 1-D or 2-D grids")
        S = len(self.down)
        for s, st in enumerate(self.down + self.up):
            if len(st.modes) != nd or min(st.modes) < 1 or st.width < 1 or st.factor < 1:
                raise ConfigError(f"bad stage {s}: {st}")
        for s, st in enumerate(self.up):
            if st.factor != self.down[S - 1 - s].factor:
                raise ConfigError(f"up stage {s} must run at the grid of down stage {S - 1 - s}")
            if st.in_width is None:
                raise ConfigError(f"up stage {s} needs in_width")
        if self.down[0].factor != 1:
            raise ConfigError("the first down stage must run at the input grid")

    def stage_dims(self, dims: Sequence[int], factor: int) -> tuple[int, ...]:
        return tuple(int(d) // factor for d in dims)

    def check_grid(self, dims: Sequence[int]) -> None:
        """Raise :class:`ConfigError` unless every stage fits on ``dims``."""
        dims = tuple(int(d) for d in dims)
        if len(dims) != self.ndim:
            raise ConfigError(f"grid {dims} has {len(dims)} axes, operator expects {self.ndim}")
        for st in self.down + self.up:
            if any(d % st.factor for d in dims):
                raise ConfigError(f"grid {dims} is not divisible by stage factor {st.factor}")
            sd = self.stage_dims(dims, st.factor)
            if any(2 * k > m for k, m in zip(st.modes, sd)):
                raise ConfigError(f"{st.modes} modes exceed half of stage grid {sd} (grid {dims} too small)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["down"] = [asdict(s) for s in self.down]
        d["up"] = [asdict(s) for s in self.up]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["down"] = tuple(StageConfig(**s) for s in d["down"])
        d["up"] = tuple(StageConfig(**s) for s in d["up"])
        return cls(**d)


def _clamp_modes(modes, grid):
    return tuple(min(int(k), int(m) // 2) for k, m in zip(modes, grid))


def _unet(name, cin, cout, lift, down, up, train_grid, **kw):
    """Build a config from table-style rows ``(width, modes, factor[, in_width])``.

    Mode counts larger than half the stage grid at ``train_grid`` are clamped.
    """
    def stage(row):
        width, modes, factor = row[:3]
        sd = tuple(g // factor for g in train_grid)
        return StageConfig(width, _clamp_modes(modes, sd), factor, row[3] if len(row) > 3 else None)

    return ArchConfig(cin, cout, lift, tuple(stage(r) for r in down), tuple(stage(r) for r in up), name=name, **kw)


ARCH_PRESETS = {
    "quadratic": lambda: _unet(
        "quadratic", 1, 1, 16,
        [(16, (6,), 1), (32, (4,), 2), (64, (2,), 4)],
        [(32, (2,), 4, 64), (16, (4,), 2, 32), (16, (6,), 1, 16)],
        (8,)),
    "ellipse": lambda: _unet(
        "ellipse", 2, 2, 16,
        [(16, (8,), 1), (32, (6,), 2), (64, (4,), 4)],
        [(32, (4,), 4, 64), (16, (6,), 2, 32), (16, (8,), 1, 16)],
        (16,)),
    "sphere": lambda: _unet(
        "sphere", 3, 3, 32,
        [(32, (12, 12), 1), (64, (8, 8), 1), (128, (4, 4), 2)],
        [(64, (4, 4), 2, 128), (32, (8, 8), 1, 64), (32, (12, 12), 1, 64)],
        (16, 16)),
    "butterfly": lambda: _unet(
        "butterfly", 2, 2, 16,
        [(16, (16,), 1), (32, (8,), 2), (64, (6,), 4), (64, (6,), 4)],
        [(64, (6,), 4, 64), (32, (6,), 4, 64), (16, (8,), 2, 32), (16, (16,), 1, 16)],
        (32,)),
}


def tiny_arch(coord_features: bool = True) -> ArchConfig:
    """Two-stage model on an 8-point grid with widths <= 4, for gradient checks."""
    return ArchConfig(
        1, 1, 3,
        (StageConfig(4, (2,), 1), StageConfig(4, (1,), 2)),
        (StageConfig(3, (1,), 2, 4), StageConfig(2, (2,), 1, 3)),
        time_dim=4, head_hidden=3, coord_features=coord_features, name="tiny",
    )


# -- parameters ----------------------------------------------------------------


def _fourier_shapes(prefix, cin, cout, modes, cfg):
    nm = L.n_retained(modes)
    E, H = cfg.time_dim, cfg.head_hidden
    return [
        (f"{prefix}.W", (cin, cout)),
        (f"{prefix}.b", (cout,)),
        (f"{prefix}.R", (nm, cin, cout, 2)),
        (f"{prefix}.psi.W1", (E, H)),
        (f"{prefix}.psi.b1", (H,)),
        (f"{prefix}.psi.W2", (H, cin)),
        (f"{prefix}.psi.b2", (cin,)),
        (f"{prefix}.phi.W1", (E, H)),
        (f"{prefix}.phi.b1", (H,)),
        (f"{prefix}.phi.W2", (H, 2 * nm)),
        (f"{prefix}.phi.b2", (2 * nm,)),
    ]


def param_shapes(cfg: ArchConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Deterministic name -> shape table; its order defines the flat vector."""
    shapes = [("lift.W", (cfg.input_width, cfg.lift_width)), ("lift.b", (cfg.lift_width,))]
    S = len(cfg.down)
    widths = []
    prev = cfg.lift_width
    for j, st in enumerate(cfg.down):
        widths.append(prev)  # skip_j width = input width of D_j
        shapes += _fourier_shapes(f"down{j}", prev, st.width, st.modes, cfg)
        prev = st.width
    for s, st in enumerate(cfg.up):
        cat = prev + widths[S - 1 - s]
        shapes += [(f"up{s}.mix.W", (cat, st.in_width)), (f"up{s}.mix.b", (st.in_width,))]
        shapes += _fourier_shapes(f"up{s}", st.in_width, st.width, st.modes, cfg)
        prev = st.width
    shapes += [("proj.W", (prev, cfg.out_channels)), ("proj.b", (cfg.out_channels,))]
    return OrderedDict(shapes)


@dataclass
class CtUnoParams:
    cfg: ArchConfig
    tensors: "OrderedDict[str, np.ndarray]" = field(repr=False)

    def __post_init__(self):
        shapes = param_shapes(self.cfg)
        if list(shapes) != list(self.tensors):
            raise ConfigError("parameter names do not match the architecture")
        for k, shp in shapes.items():
            if self.tensors[k].shape != shp:
                raise ConfigError(f"{k}: shape {self.tensors[k].shape}, expected {shp}")

    @property
    def count(self) -> int:
        return int(sum(a.size for a in self.tensors.values()))

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.tensors.values()])

    @classmethod
    def from_flat(cls, cfg: ArchConfig, vec: np.ndarray) -> "CtUnoParams":
        vec = np.asarray(vec, dtype=np.float64)
        shapes = param_shapes(cfg)
        need = sum(int(np.prod(s)) for s in shapes.values())
        if need != vec.size:
            raise ConfigError(f"flat vector has {vec.size} entries, architecture needs {need}")
        out = OrderedDict()
        pos = 0
        for k, shp in shapes.items():
            n = int(np.prod(shp))
            out[k] = vec[pos:pos + n].reshape(shp).copy()
            pos += n
        return cls(cfg, out)

    def layer(self, prefix: str) -> dict:
        """Nested dict view ``{W, b, R, psi: {...}, phi: {...}}`` of one Fourier layer."""
        t = self.tensors
        head = lambda h: {k: t[f"{prefix}.{h}.{k}"] for k in ("W1", "b1", "W2", "b2")}  # noqa: E731
        return {"W": t[f"{prefix}.W"], "b": t[f"{prefix}.b"], "R": t[f"{prefix}.R"],
                "psi": head("psi"), "phi": head("phi")}


def _glorot(rng, cin, cout, scale=1.0):
    lim = np.sqrt(6.0 / (cin + cout))
    return scale * rng.uniform(-lim, lim, size=(cin, cout))


HEAD_OUT_SCALE = 0.01


def init_params(cfg: ArchConfig, rng: np.random.Generator | int = 0) -> CtUnoParams:
    """Glorot-uniform pointwise maps, Gaussian spectral weights, near-identity time heads."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    out = OrderedDict()
    for name, shp in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf.startswith("b"):
            out[name] = np.zeros(shp)
        elif leaf == "R":
            nm, cin, _, _ = shp
            out[name] = rng.standard_normal(shp) * (1.0 / (cin * nm)) / np.sqrt(2.0)
        elif ".psi." in name or ".phi." in name:
            scale = HEAD_OUT_SCALE if leaf == "W2" else 1.0
            out[name] = _glorot(rng, shp[0], shp[1], scale)
        else:
            out[name] = _glorot(rng, shp[0], shp[1])
    return CtUnoParams(cfg, out)


# -- forward / backward --------------------------------------------------------


def coord_features(dims: Sequence[int]) -> np.ndarray:
    """Periodic position channels ``cos, sin(2 pi j / m)`` per axis, shape ``(*dims, 2 ndim)``."""
    grids = np.meshgrid(*[np.arange(m) / m for m in dims], indexing="ij")
    feats = []
    for g in grids:
        feats += [np.cos(2 * np.pi * g), np.sin(2 * np.pi * g)]
    return np.stack(feats, axis=-1)


def _resample(x, dims):
    for a, m in enumerate(dims):
        x = resample_axis(x, 1 + a, m)
    return x


def _resample_adjoint(g, dims_in):
    for a, m in enumerate(dims_in):
        g = resample_axis_adjoint(g, 1 + a, m)
    return g


@dataclass
class ForwardTape:
    params: CtUnoParams
    dims: tuple[int, ...]
    batch: int
    steps: list = field(default_factory=list)


def _as_batch(x, cfg):
    x = np.asarray(x.values if isinstance(x, Field) else x, dtype=np.float64)
    if x.ndim == cfg.ndim + 1:
        return x[None], True
    return x, False


def ctuno_forward(params: CtUnoParams, x, t):
    """Evaluate the operator on ``x`` of shape ``(B, *dims, in_channels)`` (or one Field).

    ``t`` is a scalar or one time per batch entry. Returns ``(y, tape)`` with
    ``y`` shaped like ``x`` except for the channel count.
    """
    cfg = params.cfg
    xb, single = _as_batch(x, cfg)
    if xb.shape[-1] != cfg.in_channels:
        raise ConfigError(f"input has {xb.shape[-1]} channels, operator expects {cfg.in_channels}")
    B, dims = xb.shape[0], tuple(xb.shape[1:-1])
    cfg.check_grid(dims)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (B,))
    emb = L.time_embed(t, cfg.time_dim)
    T = params.tensors
    tape = ForwardTape(params, dims, B)
    if cfg.coord_features:
        xb = np.concatenate([xb, np.broadcast_to(coord_features(dims), (B,) + dims + (2 * cfg.ndim,))], axis=-1)
    h, c = L.dense_forward(T["lift.W"], T["lift.b"], xb)
    tape.steps.append(("dense", "lift", c))
    skips = []
    for j, st in enumerate(cfg.down):
        sd = cfg.stage_dims(dims, st.factor)
        tape.steps.append(("resample", h.shape[1:-1]))
        h = _resample(h, sd)
        skips.append(h)
        h, c = L.fourier_layer_forward(params.layer(f"down{j}"), h, emb, st.modes)
        tape.steps.append(("fourier", f"down{j}", c))
    S = len(cfg.down)
    for s, st in enumerate(cfg.up):
        sd = cfg.stage_dims(dims, st.factor)
        tape.steps.append(("resample", h.shape[1:-1]))
        h = _resample(h, sd)
        tape.steps.append(("concat", S - 1 - s, h.shape[-1]))
        h = np.concatenate([h, skips[S - 1 - s]], axis=-1)
        h, c = L.dense_forward(T[f"up{s}.mix.W"], T[f"up{s}.mix.b"], h)
        tape.steps.append(("dense", f"up{s}.mix", c))
        h, c = L.fourier_layer_forward(params.layer(f"up{s}"), h, emb, st.modes)
        tape.steps.append(("fourier", f"up{s}", c))
    tape.steps.append(("resample", h.shape[1:-1]))
    h = _resample(h, dims)
    y, c = L.dense_forward(T["proj.W"], T["proj.b"], h)
    tape.steps.append(("dense", "proj", c))
    return (y[0] if single else y), tape


def _flatten_layer_grads(prefix, g, out):
    for k in ("W", "b", "R"):
        out[f"{prefix}.{k}"] = g[k]
    for h in ("psi", "phi"):
        for k, v in g[h].items():
            out[f"{prefix}.{h}.{k}"] = v


def ctuno_backward(tape: ForwardTape, grad_out, params: CtUnoParams | None = None):
    """Reverse pass. Returns ``(flat parameter gradient, gradient w.r.t. the input)``."""
    if params is not None and params is not tape.params:
        raise ConfigError("tape was recorded with different parameters")
    params = tape.params
    cfg = params.cfg
    g = np.asarray(grad_out.values if isinstance(grad_out, Field) else grad_out, dtype=np.float64)
    single = g.ndim == cfg.ndim + 1
    if single:
        g = g[None]
    expected = (tape.batch,) + tape.dims + (cfg.out_channels,)
    if g.shape != expected:
        raise ConfigError(f"gradient shape {g.shape} does not match the tape's output {expected}")
    T = params.tensors
    grads: dict[str, np.ndarray] = {}
    skip_grads: dict[int, np.ndarray] = {}

    def add_skip(j, v):
        skip_grads[j] = skip_grads[j] + v if j in skip_grads else v

    down_marks = []  # positions of the resample preceding each down layer
    for i, step in enumerate(tape.steps):
        if step[0] == "fourier" and step[1].startswith("down"):
            down_marks.append(i - 1)
    for i in range(len(tape.steps) - 1, -1, -1):
        step = tape.steps[i]
        kind = step[0]
        if kind == "dense":
            name, xin = step[1], step[2]
            dg, g = L.dense_backward(T[f"{name}.W"], xin, g)
            grads[f"{name}.W"], grads[f"{name}.b"] = dg["W"], dg["b"]
        elif kind == "fourier":
            lg, g = L.fourier_layer_backward(params.layer(step[1]), step[2], g)
            _flatten_layer_grads(step[1], lg, grads)
        elif kind == "concat":
            j, w = step[1], step[2]
            add_skip(j, g[..., w:])
            g = g[..., :w]
        elif kind == "resample":
            if i in down_marks:
                # the resampled features were also stored as a skip
                j = down_marks.index(i)
                if j in skip_grads:
                    g = g + skip_grads.pop(j)
            g = _resample_adjoint(g, step[1])
    flat = np.concatenate([grads[k].ravel() for k in param_shapes(cfg)])
    if cfg.coord_features:
        g = g[..., :cfg.in_channels]
    return flat, (g[0] if single else g)


def apply_operator(params: CtUnoParams, t, x, chunk: int = 512) -> np.ndarray:
    """Forward pass only, in batch chunks to bound memory."""
    xb = np.asarray(x, dtype=np.float64)
    t = np.broadcast_to(np.asarray(t, dtype=np.float64), (xb.shape[0],))
    out = [ctuno_forward(params, xb[i:i + chunk], t[i:i + chunk])[0] for i in range(0, xb.shape[0], chunk)]
    return np.concatenate(out, axis=0)


class OperatorModel:
    """Callable ``model(tau, y)`` wrapping trained parameters for the samplers."""

    def __init__(self, params: CtUnoParams, checkpoint_id: str = ""):
        self.params = params
        self.checkpoint_id = checkpoint_id or f"ctuno-{params.cfg.name or 'custom'}"

    def __call__(self, tau, y):
        return apply_operator(self.params, tau, y)


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path: str | Path, params: CtUnoParams, metadata: dict | None = None) -> None:
    """``BRGP`` + u16 version + u32 header length + JSON header + u64 count + f64 LE vector."""
    header = {"arch": params.cfg.to_dict(), "param_count": params.count, "metadata": metadata or {}}
    hbytes = json.dumps(header, sort_keys=True).encode()
    vec = np.ascontiguousarray(params.flat(), dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        fh.write(struct.pack("<Q", vec.size))
        fh.write(vec.tobytes())


def load_checkpoint(path: str | Path) -> tuple[CtUnoParams, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a BRGP checkpoint")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    header = json.loads(data[off:off + hlen].decode())
    off += hlen
    (n,) = struct.unpack_from("<Q", data, off)
    off += 8
    if off + 8 * n != len(data):
        raise ValueError(f"{path}: truncated parameter vector")
    vec = np.frombuffer(data, dtype="<f8", count=n, offset=off)
    cfg = ArchConfig.from_dict(header["arch"])
    return CtUnoParams.from_flat(cfg, vec), header
