"""Command-line frontend: dataset generation, model training, sampling,
metric evaluation, and the concentration-limit grid oracle.

Exit codes: 0 success, 2 usage/config error, 3 numerical failure.
All outputs are pure functions of (input files, flags, seed); reruns
are byte-identical. Floats in CSVs carry 17 significant digits.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import bench, experts
from .diffusion import (
    DiffusionModel,
    NoiseSchedule,
    TrainConfig,
    TrainingDivergedError,
    train_score,
)
from .ndmath import MlpSpec, TimeInput
from .sampler import ChainsDivergedError, SamplerConfig, sample

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


class ConfigError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _require_keys(d: dict, allowed: set, required: set, where: str):
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    missing = required - set(d)
    if missing:
        raise ConfigError(f"missing keys in {where}: {sorted(missing)}")


def _load_json(path: str) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _read_csv_points(path: str) -> np.ndarray:
    try:
        with open(path) as fh:
            header = fh.readline().strip()
            if not header.startswith("x0"):
                raise ConfigError(f"malformed CSV header in {path}: {header!r}")
            ncols = len(header.split(","))
            rows = []
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                parts = line.split(",")
                if len(parts) != ncols:
                    raise ConfigError(f"malformed CSV row in {path}: {line!r}")
                rows.append([float(p) for p in parts])
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"malformed CSV in {path}: {exc}") from exc
    if not rows:
        raise ConfigError(f"empty dataset: {path}")
    return np.array(rows)


def _write_csv_points(path, X, header_cols):
    with open(path, "w") as fh:
        fh.write(",".join(header_cols) + "\n")
        for row in np.atleast_2d(X):
            fh.write(",".join(_fmt(v) for v in row) + "\n")


# --- config parsing --------------------------------------------------------

def _parse_time_input(d: dict) -> TimeInput:
    _require_keys(d, {"kind", "num_features", "scale"}, {"kind"}, "mlp.time_input")
    return TimeInput.from_json(d)


def _parse_mlp(d: dict, x_dim: int, out_dim: int) -> MlpSpec:
    _require_keys(d, {"hidden", "activation", "time_input"}, {"hidden"}, "mlp")
    time_input = _parse_time_input(d.get("time_input", {"kind": "scalar_concat"}))
    widths = [x_dim + time_input.width] + [int(w) for w in d["hidden"]] + [out_dim]
    return MlpSpec(tuple(widths), activation=d.get("activation", "relu"),
                   time_input=time_input)


def _parse_schedule(d: dict) -> NoiseSchedule:
    _require_keys(d, {"kind", "noise_min", "noise_max", "horizon_T"}, set(), "schedule")
    return NoiseSchedule(
        kind=d.get("kind", "vp_linear"),
        noise_min=float(d.get("noise_min", 0.01)),
        noise_max=float(d.get("noise_max", 2.0)),
        horizon_T=float(d.get("horizon_T", 1.0)),
    )


def _parse_train(d: dict) -> TrainConfig:
    _require_keys(d, {"epochs", "batch_size", "learning_rate", "seed", "weighting"},
                  set(), "train")
    return TrainConfig(
        epochs=int(d.get("epochs", 1000)),
        batch_size=int(d.get("batch_size", 128)),
        learning_rate=float(d.get("learning_rate", 0.001)),
        seed=int(d.get("seed", 0)),
        weighting=d.get("weighting", "sigma2"),
    )


def _parse_sampler(d: dict) -> SamplerConfig:
    allowed = {"stage1_steps", "stage1_dt", "stage2_steps", "stage2_dt",
               "stage2_beta", "beta_schedule", "use_mh", "num_chains",
               "seed", "record_every", "grad_clip"}
    _require_keys(d, allowed, set(), "sampler")
    bs = d.get("beta_schedule", {"kind": "constant", "beta_max": 5.0})
    _require_keys(bs, {"kind", "beta_max", "rate", "beta0"}, {"kind"},
                  "sampler.beta_schedule")
    defaults = SamplerConfig()
    merged = defaults.to_json()
    merged.update({k: v for k, v in d.items() if k != "beta_schedule"})
    merged["beta_schedule"] = bs
    return SamplerConfig.from_json(merged)


def _parse_experts(d: dict, model_dir: Path):
    allowed = {"objectives", "halfspaces", "beta_prime"}
    _require_keys(d, allowed, set(), "experts")
    out = []
    for od in d.get("objectives", []):
        _require_keys(od, {"kind", "beta", "path", "center", "scale"},
                      {"kind", "beta"}, "experts.objectives[]")
        kind = od["kind"]
        if kind == "branin":
            obj = experts.BraninObjective()
        elif kind == "quadratic":
            obj = experts.QuadraticObjective(od.get("center", [0.0, 0.0]),
                                             od.get("scale", 1.0))
        elif kind == "surrogate":
            if "path" not in od:
                raise ConfigError("surrogate objective needs a path")
            path = Path(od["path"])
            if not path.is_absolute():
                path = model_dir / path
            obj = experts.SurrogateObjective.from_json(_load_json(str(path)))
        else:
            raise ConfigError(f"unknown objective kind {kind!r}")
        out.append(experts.boltzmann_expert(obj, float(od["beta"])))
    halfspaces = []
    for hd in d.get("halfspaces", []):
        _require_keys(hd, {"normal", "offset"}, {"normal", "offset"},
                      "experts.halfspaces[]")
        halfspaces.append(experts.Halfspace(np.array(hd["normal"], dtype=float),
                                            float(hd["offset"])))
    if halfspaces:
        out.append(experts.hinge_constraint_expert(halfspaces,
                                                   float(d.get("beta_prime", 10.0))))
    return out


TOP_KEYS = {"seed", "dataset", "model", "out_dir", "mlp", "schedule",
            "train", "sampler", "experts"}


def _load_run_config(path: str) -> dict:
    cfg = _load_json(path)
    _require_keys(cfg, TOP_KEYS, set(), "config")
    return cfg


# --- commands --------------------------------------------------------------

def cmd_gen_data(args) -> int:
    if args.task != "branin-ellipse":
        raise ConfigError(f"unknown task {args.task!r}")
    if args.n <= 0:
        raise ConfigError("n must be positive")
    X = bench.gen_ellipse_dataset(args.n, args.seed)
    if args.labels:
        vals, _ = experts.BraninObjective().eval_grad_batch(X)
        _write_csv_points(args.out, np.column_stack([X, vals]), ["x0", "x1", "y"])
    else:
        _write_csv_points(args.out, X, ["x0", "x1"])
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args.config)
    if "dataset" not in cfg:
        raise ConfigError("train requires a dataset path in the config")
    data = _read_csv_points(cfg["dataset"])[:, :2] if args.task == "branin-ellipse" \
        else _read_csv_points(cfg["dataset"])
    dim = data.shape[1]
    spec = _parse_mlp(cfg.get("mlp", {"hidden": [1024]}), dim, dim)
    schedule = _parse_schedule(cfg.get("schedule", {}))
    train_cfg = _parse_train(cfg.get("train", {}))
    try:
        model = train_score(data, spec, schedule, args.mode, train_cfg)
    except TrainingDivergedError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    _write_json(args.out, model.to_json())
    print(f"final loss: {model.loss_history[-1]:.6f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    cfg = _load_run_config(args.config)
    if "model" not in cfg:
        raise ConfigError("sample requires a model path in the config")
    model = DiffusionModel.from_json(_load_json(cfg["model"]))
    sampler_cfg = _parse_sampler(cfg.get("sampler", {}))
    expert_list = _parse_experts(cfg.get("experts", {}), Path(args.config).parent)
    if sampler_cfg.use_mh and model.mode != "energy":
        raise ConfigError("MH requires energy model")

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "seed": cfg.get("seed", sampler_cfg.seed),
        "model": cfg["model"],
        "sampler": sampler_cfg.to_json(),
        "experts": cfg.get("experts", {}),
    }
    try:
        result = sample(model, expert_list, sampler_cfg)
    except ChainsDivergedError as exc:
        _write_json(out_dir / "manifest.json", manifest)
        print(f"sampling failed: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    cols = [f"x{i}" for i in range(model.dim)]
    _write_csv_points(out_dir / "samples.csv", result.final_points, cols)
    if sampler_cfg.record_every > 0:
        with open(out_dir / "trajectory.csv", "w") as fh:
            fh.write(",".join(["chain", "step", "stage"] + cols) + "\n")
            for chain, step, stage, point in result.trajectories:
                vals = ",".join(_fmt(v) for v in point)
                fh.write(f"{chain},{step},{stage},{vals}\n")
    if result.acceptance_rate is not None:
        manifest["acceptance_rate"] = result.acceptance_rate
    manifest["diverged_chains"] = result.diverged_chains
    _write_json(out_dir / "manifest.json", manifest)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.task != "branin-ellipse":
        raise ConfigError(f"unknown task {args.task!r}")
    X = _read_csv_points(args.samples)[:, :2]
    objective = experts.BraninObjective()
    if args.with_halfspaces:
        def feasible(x):
            return bench.in_ellipse(x) and all(
                hs.satisfied(x) for hs in experts.BRANIN_HALFSPACES)
    else:
        feasible = bench.in_ellipse
    report = bench.compute_metrics(X, objective, feasible)
    _write_json(args.out, report.to_json())
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.task != "double-well":
        raise ConfigError(f"unknown task {args.task!r}")
    betas = [float(b) for b in args.beta.split(",")]
    h = bench.DoubleWellObjective()
    grid = np.linspace(-2.0, 2.0, args.grid_points)[:, None]
    if args.tilt:
        log_p = grid[:, 0].copy()  # p(x) proportional to exp(x)
    else:
        log_p = np.zeros(grid.shape[0])  # uniform
    minimizers = [np.array([1.0]), np.array([-1.0])]
    entries = []
    for beta in betas:
        rep = bench.grid_oracle_prop21(h, log_p, grid, beta, minimizers)
        m_plus, m_minus = rep["masses"]
        pred = rep["predicted_weights"]
        entries.append({
            "beta": beta,
            "mass_plus": m_plus,
            "mass_minus": m_minus,
            "observed_ratio": m_plus / m_minus if m_minus > 0 else None,
            "predicted_ratio": pred[0] / pred[1],
        })
    _write_json(args.out, {"task": args.task, "tilt": bool(args.tilt),
                           "results": entries})
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="diffopt")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a benchmark dataset CSV")
    g.add_argument("--task", default="branin-ellipse")
    g.add_argument("--n", type=int, default=6000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--labels", action="store_true",
                   help="append objective values as a y column")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a diffusion model")
    t.add_argument("--config", required=True)
    t.add_argument("--mode", choices=["score", "energy"], default="score")
    t.add_argument("--task", default="branin-ellipse")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="run the two-stage sampler")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="compute metrics over a sample CSV")
    e.add_argument("--samples", required=True)
    e.add_argument("--task", default="branin-ellipse")
    e.add_argument("--with-halfspaces", action="store_true")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", help="grid oracle for the beta-concentration limit")
    o.add_argument("--task", default="double-well")
    o.add_argument("--beta", default="5,20,50")
    o.add_argument("--tilt", action="store_true",
                   help="use log p(x) = x instead of a uniform base density")
    o.add_argument("--grid-points", type=int, default=4001)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    # DIFFOPT_THREADS caps chain parallelism; chains are vectorized, so any
    # cap yields identical output. Validate the value only.
    threads = os.environ.get("DIFFOPT_THREADS")
    if threads is not None:
        try:
            if int(threads) < 0:
                raise ValueError
        except ValueError:
            print(f"invalid DIFFOPT_THREADS: {threads!r}", file=sys.stderr)
            return EXIT_CONFIG
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDivergedError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
