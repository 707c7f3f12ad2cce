"""Command-line entry point: ``opbridge <command> [--config FILE] [flags]``.

Every command writes its outputs plus ``manifest.json`` into ``--out``. The
manifest records the fully resolved configuration, so
``opbridge <command> --config OUT/manifest.json --out OTHER`` reruns it.
Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .ctuno import ConfigError, OperatorModel, load_checkpoint
from .experiments import drift_rmse, end_shape_rmse, get_preset, rel_spread
from .grid import write_field
from .oracle import OracleDrift, simulate_true_reversed_bridge
from .sampler import sample_bridge, save_samples
from .sde import NumericalBlowup, save_paths, simulate_forward, trajectory_rng
from .trainer import TrainConfig, train

COMMANDS = ("generate", "train", "sample", "evaluate", "benchmark", "oracle")

# flag name -> (type, default); shared by every command that uses it
OPTIONS = {
    "preset": (str, "quadratic"),
    "seed": (int, 0),
    "size": (int, None),
    "n_samples": (int, 64),
    "N": (int, 100),
    "T": (float, 1.0),
    "checkpoint": (str, "oracle"),
    "iterations": (int, None),
    "batch": (int, None),
    "lr0": (float, None),
    "lr_final": (float, None),
    "sizes": (str, None),
    "full": (bool, False),
    "log_every": (int, 0),
}

USES = {
    "generate": ("preset", "seed", "size"),
    "train": ("preset", "seed", "N", "T", "iterations", "batch", "lr0", "lr_final", "full", "log_every"),
    "sample": ("preset", "seed", "size", "n_samples", "N", "checkpoint"),
    "evaluate": ("preset", "seed", "size", "n_samples", "N", "checkpoint"),
    "benchmark": ("preset", "seed", "n_samples", "N", "checkpoint", "sizes"),
    "oracle": ("preset", "seed", "size", "n_samples", "N"),
}

ENDPOINT_STREAM = 99


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="opbridge", description="Neural-operator diffusion bridges between shapes.")
    sub = p.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", help="JSON config file or a previous run's manifest.json")
        sp.add_argument("--out", required=True, help="output directory")
        for name in USES[cmd]:
            typ, _ = OPTIONS[name]
            flag = "--" + name.replace("_", "-")
            if typ is bool:
                sp.add_argument(flag, action="store_true", default=None)
            else:
                sp.add_argument(flag, type=typ, default=None)
    return p


def resolve_config(cmd: str, args: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    cfg = {name: OPTIONS[name][1] for name in USES[cmd]}
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {args.config}: {e}") from None
        if "config" in data and "command" in data:
            if data["command"] != cmd:
                raise ConfigError(f"manifest is for command {data['command']!r}, not {cmd!r}")
            data = data["config"]
        unknown = set(data) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown config keys for {cmd}: {sorted(unknown)}")
        cfg.update(data)
    for name in USES[cmd]:
        val = getattr(args, name)
        if val is not None:
            cfg[name] = val
    return cfg


def _versions() -> dict:
    return {"opbridge": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def _write_manifest(out: Path, cmd: str, cfg: dict, outputs: list[str]) -> None:
    manifest = {"command": cmd, "config": cfg, "seed": cfg.get("seed"), "versions": _versions(),
                "outputs": sorted(outputs)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _endpoints(preset, cfg, m):
    return preset.endpoints_at(m, trajectory_rng(cfg["seed"], ENDPOINT_STREAM))


def _model(preset, cfg, x0):
    ck = cfg["checkpoint"]
    if ck == "oracle":
        if preset.process != "brownian":
            raise ConfigError("the analytic oracle model exists only for Brownian presets")
        return OracleDrift(x0, cfg.get("T", 1.0))
    path = Path(ck)
    if not path.exists():
        raise ConfigError(f"checkpoint {ck} not found")
    params, _ = load_checkpoint(path)
    digest = hashlib.sha256(path.read_bytes()).hexdigest()[:12]
    return OperatorModel(params, f"{path.name}:{digest}")


def _size(preset, cfg):
    return int(cfg["size"]) if cfg.get("size") else preset.eval_size


def cmd_generate(cfg, out):
    preset = get_preset(cfg["preset"])
    m = int(cfg["size"]) if cfg.get("size") else preset.train_size
    ep = _endpoints(preset, cfg, m)
    write_field(out / "start.brgf", ep.x0)
    write_field(out / "target.brgf", ep.v)
    return ["start.brgf", "target.brgf"]


def cmd_train(cfg, out):
    preset = get_preset(cfg["preset"])
    if cfg.get("full"):
        preset = preset.with_full_budget()
    overrides = {k: cfg[k] for k in ("iterations", "batch", "lr0", "lr_final") if cfg.get(k) is not None}
    base = preset.train.__dict__ | {"N": cfg["N"], "T": cfg["T"], "seed": cfg["seed"]} | overrides
    tcfg = TrainConfig(**base)
    log = (lambda msg: print(msg, file=sys.stderr)) if cfg.get("log_every") else print
    result = train(preset.spec(), preset.sampler(), tcfg, preset.arch(), out_dir=out,
                   log_every=cfg.get("log_every") or 0, log=log)
    print(f"trained {len(result.losses)} iterations, {result.params.count} parameters", file=sys.stderr)
    return ["checkpoint.brgp", "loss.csv", "train_manifest.json"]


def cmd_sample(cfg, out):
    preset = get_preset(cfg["preset"])
    ep = _endpoints(preset, cfg, _size(preset, cfg))
    model = _model(preset, cfg, ep.x0)
    samples = sample_bridge(model, preset.spec(), ep.v, ep.T, cfg["N"], seed=cfg["seed"], B=cfg["n_samples"])
    save_samples(out / "bridges", samples, ep.v, {"x0": ep.x0.values.tolist()})
    return ["bridges"]


def cmd_evaluate(cfg, out):
    preset = get_preset(cfg["preset"])
    ep = _endpoints(preset, cfg, _size(preset, cfg))
    model = _model(preset, cfg, ep.x0)
    B, N, seed = cfg["n_samples"], cfg["N"], cfg["seed"]
    spec = preset.spec()
    report: dict = {"n_samples": B, "eval_size": _size(preset, cfg), "checkpoint_id": model.checkpoint_id}
    samples = sample_bridge(model, spec, ep.v, ep.T, N, seed=seed, B=B)
    ends = np.stack([s.start for s in samples])
    report["end_shape_rmse"] = end_shape_rmse(ends, ep.x0)
    if preset.process == "brownian":
        paths = simulate_true_reversed_bridge(ep, preset.sigma, N, seed=seed, B=B)
        per_step, agg = drift_rmse(model, ep.x0, paths)
        report["drift_rmse"] = agg
        report["oracle_end_shape_rmse"] = end_shape_rmse(paths.states[:, -1], ep.x0)
        learned = np.stack([s.states[::-1] for s in samples])
        report["pathwise_sup_gap"] = float(np.mean(np.max(np.abs(learned - paths.states),
                                                          axis=tuple(range(1, learned.ndim)))))
        with open(out / "drift_per_step.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "reversed_time", "drift_rmse"])
            for n, r in enumerate(per_step):
                w.writerow([n, repr(float(paths.times[n])), repr(float(r))])
    (out / "metrics.json").write_text(json.dumps(report, indent=2, sort_keys=True))
    return ["metrics.json"] + (["drift_per_step.csv"] if preset.process == "brownian" else [])


def cmd_benchmark(cfg, out):
    preset = get_preset(cfg["preset"])
    if preset.process != "brownian":
        raise ConfigError("the resolution benchmark needs an analytic drift (Brownian presets)")
    sizes = [int(s) for s in cfg["sizes"].split(",")] if cfg.get("sizes") else list(preset.eval_sizes)
    rows = []
    for m in sizes:
        ep = _endpoints(preset, cfg, m)
        paths = simulate_true_reversed_bridge(ep, preset.sigma, cfg["N"], seed=cfg["seed"], B=cfg["n_samples"])
        # the oracle model is tied to its grid, so models are built per size
        _, agg = drift_rmse(_model(preset, cfg, ep.x0), ep.x0, paths)
        rows.append((m, agg))
    vals = [r for _, r in rows]
    spread = rel_spread(vals) if max(vals) > 0 else 0.0
    with open(out / "benchmark.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eval_size", "drift_rmse", "rel_spread"])
        for m, r in rows:
            w.writerow([m, repr(r), repr(spread)])
    return ["benchmark.csv"]


def cmd_oracle(cfg, out):
    preset = get_preset(cfg["preset"])
    ep = _endpoints(preset, cfg, _size(preset, cfg))
    if preset.process == "brownian":
        paths = simulate_true_reversed_bridge(ep, preset.sigma, cfg["N"], seed=cfg["seed"], B=cfg["n_samples"])
    else:
        # no closed-form bridge for the landmark flow: unconditioned forward paths instead
        paths = simulate_forward(preset.spec(), ep.x0, ep.T, cfg["N"], cfg["n_samples"], seed=cfg["seed"])
    save_paths(out / "paths", paths, {"x0": ep.x0.values.tolist(), "v": ep.v.values.tolist()})
    return ["paths"]


HANDLERS = {"generate": cmd_generate, "train": cmd_train, "sample": cmd_sample, "evaluate": cmd_evaluate,
            "benchmark": cmd_benchmark, "oracle": cmd_oracle}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args.command, args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        outputs = HANDLERS[args.command](cfg, out)
        _write_manifest(out, args.command, cfg, outputs)
        print(f"{args.command}: wrote {', '.join(outputs)} to {out} in {time.perf_counter() - start:.1f}s",
              file=sys.stderr)
        return 0
    except (NumericalBlowup, FloatingPointError) as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return 3
    except (ConfigError, ValueError, TypeError, KeyError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
