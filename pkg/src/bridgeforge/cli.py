"""Experiment command line: train, sample, evaluate, adjoint-check.

Configs are strict JSON: unknown keys are rejected with their path so typos
fail before any computation. Every run writes a manifest recording the
config hash, seed, command, and artifact paths; reruns with the same config
and seed reproduce all outputs bit for bit regardless of --workers.

Exit codes: 0 success, 1 config error, 2 numerical failure,
3 adjoint-check failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .adjoint import adjoint_expectation, build_adjoint
from .bridge import (ExactBrownianScore, ExactOuScore, NetworkScore,
                     sample_bridge, score_error_report)
from .integrator import BACKEND, SimulationError, TimeGrid, write_csv
from .models import SdeModel, UnknownModelError, make_model
from .scorenet import ScoreNetwork
from .training import (EndpointSpec, TrainConfig, TrainingError, train,
                       write_training_log)


class ConfigError(Exception):
    """Invalid or inconsistent run configuration."""


class AdjointCheckFailure(Exception):
    """An adjoint identity check fell outside its tolerance."""


# ----------------------------------------------------------------------
# config loading and validation
# ----------------------------------------------------------------------

def _require_keys(section: dict, path: str, required: tuple, optional: tuple = ()):
    if not isinstance(section, dict):
        raise ConfigError(f"{path}: expected an object, got {type(section).__name__}")
    unknown = sorted(set(section) - set(required) - set(optional))
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {unknown}")
    missing = [k for k in required if k not in section]
    if missing:
        raise ConfigError(f"{path}: missing required key(s) {missing}")


def _num(section: dict, path: str, key: str, default=None, positive=False):
    if key not in section:
        return default
    val = section[key]
    if isinstance(val, bool) or not isinstance(val, (int, float)):
        raise ConfigError(f"{path}.{key}: expected a number, got {val!r}")
    if positive and not val > 0:
        raise ConfigError(f"{path}.{key}: must be positive, got {val}")
    return float(val)


def _intval(section: dict, path: str, key: str, default=None, minimum=None):
    if key not in section:
        return default
    val = section[key]
    if isinstance(val, bool) or not isinstance(val, int):
        raise ConfigError(f"{path}.{key}: expected an integer, got {val!r}")
    if minimum is not None and val < minimum:
        raise ConfigError(f"{path}.{key}: must be >= {minimum}, got {val}")
    return val


def _strval(section: dict, path: str, key: str, default=None, choices=None):
    if key not in section:
        return default
    val = section[key]
    if not isinstance(val, str):
        raise ConfigError(f"{path}.{key}: expected a string, got {val!r}")
    if choices is not None and val not in choices:
        raise ConfigError(f"{path}.{key}: expected one of {sorted(choices)}, got {val!r}")
    return val


def _vector(section: dict, path: str, key: str, default=None):
    if key not in section:
        return default
    val = section[key]
    if (not isinstance(val, list) or not val
            or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                       for v in val)):
        raise ConfigError(f"{path}.{key}: expected a non-empty list of numbers")
    return np.asarray(val, dtype=np.float64)


def load_config(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, "
                          f"column {exc.colno}: {exc.msg}") from None


def build_model_from_config(cfg: dict) -> SdeModel:
    _require_keys(cfg.get("model", {}), "model", ("name",), ("params",))
    name = _strval(cfg["model"], "model", "name")
    params = cfg["model"].get("params", {})
    if not isinstance(params, dict):
        raise ConfigError("model.params: expected an object")
    try:
        return make_model(name, **params)
    except UnknownModelError as exc:
        raise ConfigError(f"model.name: {exc.args[0]}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model.params: {exc}") from None


def build_grid_from_config(cfg: dict) -> TimeGrid:
    _require_keys(cfg.get("grid", {}), "grid", ("T", "L"), ("t0",))
    t0 = _num(cfg["grid"], "grid", "t0", default=0.0)
    T = _num(cfg["grid"], "grid", "T", positive=True)
    L = _intval(cfg["grid"], "grid", "L", minimum=1)
    try:
        return TimeGrid(t0, T, L)
    except ValueError as exc:
        raise ConfigError(f"grid: {exc}") from None


def build_endpoint_from_config(section: dict, path: str, dim: int) -> EndpointSpec:
    _require_keys(section, path, ("mode",),
                  ("y", "name", "radius", "low", "high"))
    mode = _strval(section, path, "mode",
                   choices={"fixed", "distribution", "multi_fixed"})
    if mode == "fixed":
        y = _vector(section, path, "y")
        if y is None:
            raise ConfigError(f"{path}: fixed mode needs 'y'")
        spec = EndpointSpec.fixed(y)
    elif mode == "distribution":
        name = _strval(section, path, "name", default="circle",
                       choices={"circle"})
        radius = _num(section, path, "radius", default=3.0, positive=True)
        spec = EndpointSpec.circle(radius)
    else:
        low = _vector(section, path, "low")
        high = _vector(section, path, "high")
        if low is None or high is None:
            raise ConfigError(f"{path}: multi_fixed mode needs 'low' and 'high'")
        try:
            spec = EndpointSpec.multi_fixed(low, high)
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    if spec.dim != dim:
        raise ConfigError(f"{path}: endpoint dimension {spec.dim} does not "
                          f"match model dimension {dim}")
    return spec


_TOP_KEYS = ("model", "grid", "seed", "training", "sampling", "evaluation",
             "adjoint_check", "output_dir")


def validate_top_level(cfg: dict, needed: tuple):
    _require_keys(cfg, "config", (), _TOP_KEYS)
    missing = [k for k in needed if k not in cfg]
    if missing:
        raise ConfigError(f"config: missing required section(s) {missing}")


def build_train_config(cfg: dict, model: SdeModel, grid: TimeGrid,
                       seed: int, workers: int) -> TrainConfig:
    section = cfg["training"]
    _require_keys(section, "training", ("iterations", "n_paths", "endpoint"),
                  ("lr", "beta1", "beta2", "eps", "hidden", "time_features",
                   "weight_mode", "metric_weighting", "average_tail"))
    if abs(grid.t0) > 1e-12:
        raise ConfigError("grid.t0: training requires t0 = 0")
    endpoint = build_endpoint_from_config(section["endpoint"],
                                          "training.endpoint", model.dim)
    hidden = section.get("hidden", [32, 32, 32, 32])
    if (not isinstance(hidden, list)
            or not all(isinstance(h, int) and h > 0 for h in hidden)):
        raise ConfigError("training.hidden: expected a list of positive integers")
    try:
        return TrainConfig(
            model=model, T=grid.T, L=grid.L,
            n_paths=_intval(section, "training", "n_paths", minimum=1),
            iterations=_intval(section, "training", "iterations", minimum=0),
            endpoint=endpoint, seed=seed,
            lr=_num(section, "training", "lr", default=1e-3, positive=True),
            beta1=_num(section, "training", "beta1", default=0.9),
            beta2=_num(section, "training", "beta2", default=0.999),
            eps=_num(section, "training", "eps", default=1e-8, positive=True),
            hidden=tuple(hidden),
            time_features=_intval(section, "training", "time_features",
                                  default=8, minimum=1),
            weight_mode=_strval(section, "training", "weight_mode",
                                default="normalized",
                                choices={"raw", "normalized"}),
            metric_weighting=_strval(section, "training", "metric_weighting",
                                     default="plain",
                                     choices={"plain", "sigma_sq"}),
            average_tail=_num(section, "training", "average_tail",
                              default=0.0),
            workers=workers)
    except ValueError as exc:
        raise ConfigError(f"training: {exc}") from None


# ----------------------------------------------------------------------
# manifests
# ----------------------------------------------------------------------

def _config_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config_path, cfg: dict,
                   seed: int, started_at: str, wall_time_ms: float,
                   artifacts: list) -> Path:
    manifest = {
        "command": command,
        "config_sha256": _config_sha256(config_path),
        "config": cfg,
        "seed": seed,
        "started_at": started_at,
        "wall_time_ms": round(wall_time_ms, 3),
        "artifact_paths": [str(a) for a in artifacts],
        "backend": BACKEND,
        "versions": {"bridgeforge": __version__, "numpy": np.__version__,
                     "python": sys.version.split()[0]},
    }
    path = out_dir / "manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _start_run(args, needed: tuple):
    cfg = load_config(args.config)
    validate_top_level(cfg, needed)
    seed = args.seed if args.seed is not None else _intval(cfg, "config", "seed",
                                                           default=0)
    out_dir = Path(args.out if args.out is not None
                   else cfg.get("output_dir", "runs"))
    out_dir.mkdir(parents=True, exist_ok=True)
    model = build_model_from_config(cfg)
    grid = build_grid_from_config(cfg)
    return cfg, seed, out_dir, model, grid


def _load_checkpoint(args, model: SdeModel) -> ScoreNetwork:
    if args.checkpoint is None:
        raise ConfigError("this command needs --checkpoint")
    try:
        net = ScoreNetwork.load(args.checkpoint)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {args.checkpoint}") from None
    if net.dim != model.dim:
        raise ConfigError(f"checkpoint dimension {net.dim} does not match "
                          f"model dimension {model.dim}")
    return net


def _network_score(net: ScoreNetwork, cfg_section: dict, path: str) -> NetworkScore:
    y = _vector(cfg_section, path, "y")
    if net.conditioned:
        if y is None:
            raise ConfigError(f"{path}: conditioned checkpoint needs 'y'")
        return NetworkScore(net, y)
    if y is not None:
        raise ConfigError(f"{path}: checkpoint is unconditioned; remove 'y'")
    return NetworkScore(net)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg, seed, out_dir, model, grid = _start_run(args, ("model", "grid", "training"))
    tc = build_train_config(cfg, model, grid, seed, args.workers)
    started_at = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    net, history = train(tc)
    wall = (time.perf_counter() - t0) * 1e3
    ckpt = out_dir / "checkpoint.npz"
    net.save(ckpt)
    log = out_dir / "training_log.csv"
    write_training_log(history, log)
    manifest = write_manifest(out_dir, "train", args.config, cfg, seed,
                              started_at, wall, [ckpt, log])
    print(f"trained {tc.iterations} iterations "
          f"(final loss {history[-1][1]:.6g})" if history else
          "trained 0 iterations")
    print(f"checkpoint: {ckpt}")
    print(f"manifest: {manifest}")
    return 0


def cmd_sample(args) -> int:
    cfg, seed, out_dir, model, grid = _start_run(args, ("model", "grid", "sampling"))
    section = cfg["sampling"]
    _require_keys(section, "sampling", ("x0", "n_paths"),
                  ("endpoint_handling", "y"))
    x0_raw = section["x0"]
    if not isinstance(x0_raw, list) or not x0_raw:
        raise ConfigError("sampling.x0: expected a non-empty list of start points")
    if all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in x0_raw):
        x0_raw = [x0_raw]
    x0s = []
    for i, point in enumerate(x0_raw):
        if (not isinstance(point, list)
                or len(point) != model.dim
                or not all(isinstance(v, (int, float)) and not isinstance(v, bool)
                           for v in point)):
            raise ConfigError(f"sampling.x0[{i}]: expected a list of "
                              f"{model.dim} numbers")
        x0s.append(np.asarray(point, dtype=np.float64))
    n_paths = _intval(section, "sampling", "n_paths", minimum=1)
    handling = _strval(section, "sampling", "endpoint_handling", default="free",
                       choices={"free", "pin"})
    net = _load_checkpoint(args, model)
    score = _network_score(net, section, "sampling")

    started_at = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    artifacts = []
    for i, x0 in enumerate(x0s):
        batch = sample_bridge(model, score, x0, grid, n_paths,
                              rng_seed(seed, i), endpoint_handling=handling,
                              workers=args.workers)
        path = out_dir / f"samples_{i:03d}.csv"
        write_csv(batch, path)
        artifacts.append(path)
    wall = (time.perf_counter() - t0) * 1e3
    manifest = write_manifest(out_dir, "sample", args.config, cfg, seed,
                              started_at, wall, artifacts)
    print(f"wrote {len(artifacts)} trajectory file(s) to {out_dir}")
    print(f"manifest: {manifest}")
    return 0


def rng_seed(seed: int, index: int) -> int:
    """Stable per-start-point seed derivation for the sample command."""
    from .rng import derive_seed
    return derive_seed(seed, f"sample-{index}")


def _exact_score_for(model: SdeModel, T: float, y: np.ndarray):
    if model.name == "ou":
        return ExactOuScore(model.params["theta"], model.params["sigma"], T, y)
    if model.name == "brownian":
        return ExactBrownianScore(model.params["sigma"], T, y)
    raise ConfigError(f"no exact score oracle for model {model.name!r}; "
                      "score_mse evaluation supports 'ou' and 'brownian'")


def cmd_evaluate(args) -> int:
    cfg, seed, out_dir, model, grid = _start_run(args, ("model", "grid", "evaluation"))
    section = cfg["evaluation"]
    _require_keys(section, "evaluation", ("kind",),
                  ("n_paths", "t_cutoff_frac", "x0", "y", "radius", "target",
                   "hit_radius"))
    kind = _strval(section, "evaluation", "kind",
                   choices={"score_mse", "circle_residual", "endpoint_hit"})
    n_paths = _intval(section, "evaluation", "n_paths", default=200, minimum=1)
    net = _load_checkpoint(args, model)

    started_at = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    artifacts = []
    metrics: dict = {"kind": kind, "n_paths": n_paths}

    if kind == "score_mse":
        y = _vector(section, "evaluation", "y")
        if y is None:
            raise ConfigError("evaluation.y: score_mse needs the conditioning "
                              "endpoint")
        x0 = _vector(section, "evaluation", "x0",
                     default=np.ones(model.dim))
        frac = _num(section, "evaluation", "t_cutoff_frac", default=0.95,
                    positive=True)
        exact = _exact_score_for(model, grid.T, y)
        eval_states = sample_bridge(model, exact, x0, grid, n_paths,
                                    rng_seed(seed, 0), workers=args.workers)
        net_score = NetworkScore(net, y) if net.conditioned else NetworkScore(net)
        report = score_error_report(net_score, exact, eval_states,
                                    t_cutoff=frac * grid.T)
        csv_path = out_dir / "score_mse.csv"
        report.to_csv(csv_path)
        artifacts.append(csv_path)
        metrics.update(report.summary())
    elif kind == "circle_residual":
        radius = _num(section, "evaluation", "radius", default=3.0, positive=True)
        x0 = _vector(section, "evaluation", "x0", default=np.zeros(model.dim))
        score = _network_score(net, section, "evaluation")
        batch = sample_bridge(model, score, x0, grid, n_paths,
                              rng_seed(seed, 0), workers=args.workers)
        # last node before the horizon avoids the score singularity at T
        end = batch.states[:, -2, :]
        residuals = np.abs(np.linalg.norm(end, axis=1) - radius)
        metrics.update({"radius": radius,
                        "mean_abs_residual": float(residuals.mean()),
                        "max_abs_residual": float(residuals.max())})
    else:  # endpoint_hit
        target = _vector(section, "evaluation", "target")
        if target is None:
            raise ConfigError("evaluation.target: endpoint_hit needs a target point")
        if target.shape[0] != model.dim:
            raise ConfigError("evaluation.target: dimension mismatch")
        hit_radius = _num(section, "evaluation", "hit_radius", default=0.3,
                          positive=True)
        x0 = _vector(section, "evaluation", "x0", default=np.zeros(model.dim))
        score = _network_score(net, section, "evaluation")
        batch = sample_bridge(model, score, x0, grid, n_paths,
                              rng_seed(seed, 0), workers=args.workers)
        dist = np.linalg.norm(batch.states[:, -1, :] - target, axis=1)
        metrics.update({"target": target.tolist(), "hit_radius": hit_radius,
                        "hit_fraction": float((dist <= hit_radius).mean()),
                        "mean_distance": float(dist.mean())})

    metrics_path = out_dir / "metrics.json"
    with open(metrics_path, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")
    artifacts.append(metrics_path)
    wall = (time.perf_counter() - t0) * 1e3
    manifest = write_manifest(out_dir, "evaluate", args.config, cfg, seed,
                              started_at, wall, artifacts)
    print(json.dumps(metrics, indent=2, sort_keys=True))
    print(f"manifest: {manifest}")
    return 0


def _adjoint_cases(model: SdeModel, T: float, y: np.ndarray):
    """(label, g, closed_form, deterministic_weight) per registered model."""
    if model.name == "ou":
        theta = model.params["theta"]
        d = model.dim
        with np.errstate(over="ignore"):  # extreme horizons overflow to inf
            norm_cf = float(np.exp(theta * d * T))
            mean_cf = float(y[0] * np.exp(theta * T * (d + 1)))
        return [
            ("g=1", lambda x: np.ones(x.shape[0]), norm_cf, True),
            ("g=x_0", lambda x: x[:, 0], mean_cf, False),
        ]
    if model.name == "brownian":
        sigma = model.params["sigma"]
        return [
            ("g=1", lambda x: np.ones(x.shape[0]), 1.0, True),
            ("g=x_0", lambda x: x[:, 0], float(y[0]), False),
            ("g=x_0^2", lambda x: x[:, 0] ** 2,
             float(y[0] ** 2 + sigma * sigma * T), False),
        ]
    raise ConfigError(f"no closed-form adjoint checks registered for model "
                      f"{model.name!r}; supported: 'ou', 'brownian'")


def cmd_adjoint_check(args) -> int:
    cfg, seed, out_dir, model, grid = _start_run(args, ("model", "grid"))
    section = cfg.get("adjoint_check", {})
    _require_keys(section, "adjoint_check", (), ("n_paths", "y"))
    n_paths = _intval(section, "adjoint_check", "n_paths", default=100000,
                      minimum=2)
    y = _vector(section, "adjoint_check", "y", default=np.ones(model.dim))
    if y.shape[0] != model.dim:
        raise ConfigError("adjoint_check.y: dimension mismatch")
    if abs(grid.t0) > 1e-12:
        raise ConfigError("grid.t0: adjoint-check requires t0 = 0")

    adj = build_adjoint(model, 0.0, grid.T)
    cases = _adjoint_cases(model, grid.T, y)
    started_at = datetime.now(timezone.utc).isoformat()
    t0 = time.perf_counter()
    rows = []
    all_pass = True
    for label, g, closed_form, deterministic in cases:
        est, se = adjoint_expectation(adj, y, grid, g, n_paths, seed,
                                      workers=args.workers)
        if deterministic:
            # the weight is state-independent here, so the estimate carries
            # no Monte Carlo error; judge by absolute deviation
            ok = abs(est - closed_form) <= 1e-6 * max(1.0, abs(closed_form))
            z = 0.0
            detail = f"abs_err={abs(est - closed_form):.2e}"
        else:
            z = (est - closed_form) / se if se > 0 else float("inf")
            ok = abs(z) <= 4.0
            detail = f"z={z:+.2f}"
        all_pass &= ok
        rows.append((label, est, closed_form, se, z, ok))
        print(f"{label:10s} estimate={est:.6f} closed_form={closed_form:.6f} "
              f"std_error={se:.2e} {detail} {'PASS' if ok else 'FAIL'}")

    report_path = out_dir / "adjoint_check.csv"
    with open(report_path, "w") as fh:
        fh.write("case,estimate,closed_form,std_error,z,pass\n")
        for label, est, cf, se, z, ok in rows:
            fh.write(f"{label},{est:.17g},{cf:.17g},{se:.17g},{z:.17g},"
                     f"{int(ok)}\n")
    wall = (time.perf_counter() - t0) * 1e3
    manifest = write_manifest(out_dir, "adjoint-check", args.config, cfg, seed,
                              started_at, wall, [report_path])
    print(f"manifest: {manifest}")
    if not all_pass:
        raise AdjointCheckFailure("one or more adjoint identities failed")
    return 0


# ----------------------------------------------------------------------
# entry point
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="bridgeforge",
        description="Train and evaluate endpoint-conditioned diffusion bridges.")
    parser.add_argument("--version", action="version",
                        version=f"bridgeforge {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_ckpt in (
            ("train", cmd_train, False),
            ("sample", cmd_sample, True),
            ("evaluate", cmd_evaluate, True),
            ("adjoint-check", cmd_adjoint_check, False)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--checkpoint", default=None,
                       help="network checkpoint (.npz)" +
                            (" [required]" if needs_ckpt else ""))
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        p.add_argument("--workers", type=int, default=1,
                       help="path-simulation worker threads (does not change "
                            "results)")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (SimulationError, TrainingError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except AdjointCheckFailure as exc:
        print(f"adjoint-check failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
