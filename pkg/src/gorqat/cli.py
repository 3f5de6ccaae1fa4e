"""``gorqat`` command line: train, sweep, dynamics, evaluate, inspect.

Exit codes: 0 ok, 2 configuration error, 3 divergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import os
import sys
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import dynamics as dyn
from .checkpoint import load_checkpoint, save_checkpoint
from .data import DataError, Dataset, ParseError, ingest
from .models import TeacherEnsemble
from .regularizer import DivergenceError, GoRState, SingleScalarState
from .trainer import (
    ConfigError,
    TrainConfig,
    evaluate,
    render_table,
    static_sweep,
    sweep_table,
    train,
    train_teacher,
    write_metrics_csv,
)

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4
DEFAULT_OUT = "runs"

_TRAIN_FIELDS = {f.name for f in dataclasses.fields(TrainConfig)}
_TEACHER_KEYS = {"teachers", "teacher_widths", "teacher_epochs", "teacher_seed"}
_SWEEP_KEYS = {"alphas", "seeds", "include_gor"}
_DATA_KEYS = {"source", "k", "n", "sigma", "seed", "dim", "test_fraction", "path", "num_classes",
              "images", "labels", "test_images", "test_labels"}
_DYNAMICS_DEFAULTS = {
    "variant": "gor",
    "steps": 10_000,
    "eta_alpha": 1e-2,
    "alpha_task": 1.0,
    "alpha_kd": 1.0,
    "beta": 0.5,
    "clip_floor": 1e-4,
    "script": "constant",
    "loss_task": 4.0,
    "loss_kd": 1.0,
    "segments": [],
    "sigma": 0.0,
    "seed": 0,
    "scan": False,
    "scan_lo": 0.1,
    "scan_hi": 10.0,
    "scan_n": 5,
    "plot": False,
    "jobs": 1,
}
_DEFAULT_DATA = {"source": "blobs", "k": 2, "n": 2000, "sigma": 0.45, "seed": 7}


class CLIError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def load_config(path) -> dict:
    """Read a TOML (or JSON, as echoed by previous runs) config file."""
    if path is None:
        return {}
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise CLIError(EXIT_CONFIG, f"cannot read config {path}: {exc.strerror}") from None
    try:
        if path.suffix == ".json":
            return json.loads(raw)
        return tomllib.loads(raw.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as exc:
        raise CLIError(EXIT_CONFIG, f"config {path} does not parse: {exc}") from None


def _check_keys(cfg: dict, allowed: set[str], where: str) -> None:
    unknown = sorted(set(cfg) - allowed)
    if unknown:
        raise CLIError(EXIT_CONFIG, f"unknown {where} key(s): {', '.join(unknown)}")


def _overrides(args) -> dict:
    pairs = {
        "seed": args.seed, "mode": getattr(args, "mode", None), "wbits": getattr(args, "wbits", None),
        "abits": getattr(args, "abits", None), "alpha": getattr(args, "alpha", None),
        "eta_theta": getattr(args, "eta_theta", None), "eta_alpha": args.eta_alpha,
        "tau": getattr(args, "tau", None),
    }
    out = {k: v for k, v in pairs.items() if v is not None}
    if getattr(args, "teachers", None):
        out["teachers"] = args.teachers
    return out


def resolve_train(raw: dict, args, extra: set[str] = frozenset()) -> dict:
    cfg = dict(raw)
    _check_keys(cfg, _TRAIN_FIELDS | _TEACHER_KEYS | {"data"} | set(extra), "config")
    cfg.update(_overrides(args))
    cfg["data"] = _data_spec(cfg.pop("data", {}))
    return cfg


def _data_spec(given: dict) -> dict:
    _check_keys(given, _DATA_KEYS, "[data]")
    if given.get("source", "blobs") != "blobs":
        return dict(given)
    return {**_DEFAULT_DATA, **given}


def _train_config(cfg: dict) -> TrainConfig:
    fields = {k: v for k, v in cfg.items() if k in _TRAIN_FIELDS}
    if "student_widths" in fields:
        fields["student_widths"] = tuple(int(w) for w in fields["student_widths"])
    try:
        return TrainConfig(**fields).validate()
    except (ConfigError, TypeError) as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from None


def _dataset(spec: dict) -> Dataset:
    params = {k: v for k, v in spec.items() if k != "source"}
    try:
        return ingest(spec.get("source", "blobs"), **params)
    except (OSError, ParseError) as exc:
        raise CLIError(EXIT_IO, f"cannot load data: {exc}") from None
    except (DataError, ValueError, TypeError) as exc:
        raise CLIError(EXIT_CONFIG, f"bad data spec: {exc}") from None


def _teachers(cfg: dict, tc: TrainConfig, data: Dataset, run_dir: Path | None) -> TeacherEnsemble | None:
    from .trainer import KD_MODES

    if tc.mode not in KD_MODES:
        return None
    paths, widths = cfg.get("teachers") or [], cfg.get("teacher_widths") or []
    if not paths and not widths:
        raise CLIError(EXIT_CONFIG, f"mode {tc.mode} needs 'teachers' (checkpoint paths) or 'teacher_widths'")
    models = []
    for p in paths:
        if not Path(p).is_file():
            raise CLIError(EXIT_CONFIG, f"teacher checkpoint {p} does not exist")
        try:
            model = load_checkpoint(p)[0]
        except OSError as exc:
            raise CLIError(EXIT_IO, f"cannot read teacher {p}: {exc}") from None
        model.role = "teacher"
        models.append(model.freeze())
    for i, w in enumerate(widths):
        model = train_teacher(w, data, seed=int(cfg.get("teacher_seed", 0)) + i, epochs=int(cfg.get("teacher_epochs", 20)))
        if run_dir is not None:
            save_checkpoint(run_dir / f"teacher-{i}.ckpt", model)
        models.append(model)
    try:
        return TeacherEnsemble(models)
    except ValueError as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from None


def _run_dir(args, default_name: str) -> Path:
    if args.out:
        path = Path(args.out)
    else:
        path = Path(os.environ.get("GORQAT_OUT", DEFAULT_OUT)) / default_name
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(EXIT_IO, f"cannot create run directory {path}: {exc.strerror}") from None
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _emit(args, payload: dict, text: str) -> None:
    print(json.dumps(payload, sort_keys=True) if args.json else text)


# ----------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    cfg = resolve_train(load_config(args.config), args)
    tc = _train_config(cfg)
    run_dir = _run_dir(args, f"train-{tc.mode}-seed{tc.seed}")
    _write_json(run_dir / "config.json", cfg)
    data = _dataset(cfg["data"])
    teachers = _teachers(cfg, tc, data, run_dir)
    try:
        result = train(tc, data, teachers)
    except ConfigError as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from None
    except DivergenceError as exc:
        good = getattr(exc, "last_good", None)
        if good is not None:
            write_metrics_csv(good.metrics, run_dir / "metrics.csv")
            save_checkpoint(run_dir / "last_good.ckpt", good.model, good.state, good.plan)
        _write_json(run_dir / "divergence.json", {"error": str(exc), "record": exc.diagnostics})
        raise CLIError(EXIT_DIVERGED, str(exc)) from None
    write_metrics_csv(result.metrics, run_dir / "metrics.csv")
    save_checkpoint(run_dir / "student.ckpt", result.model, result.state, result.plan)
    summary = dict(result.summary, config=cfg)
    if result.tau is not None:
        summary["tau"] = result.tau
    _write_json(run_dir / "summary.json", summary)
    _emit(args, {"run_dir": str(run_dir), **result.summary},
          f"{tc.mode} seed {tc.seed}: test_acc {result.summary['test_acc']:.4f} -> {run_dir}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    raw = load_config(args.config)
    cfg = resolve_train(raw, args, extra=_SWEEP_KEYS)
    if args.grid is not None:
        cfg["alphas"] = [float(a) for a in args.grid.split(",") if a.strip()]
    cfg["mode"] = "qat_kd_gor"
    tc = _train_config(cfg)
    run_dir = _run_dir(args, f"sweep-seed{tc.seed}")
    _write_json(run_dir / "config.json", cfg)
    data = _dataset(cfg["data"])
    teachers = _teachers(cfg, tc, data, run_dir)
    seeds = cfg.get("seeds", [tc.seed])
    try:
        rows = static_sweep(
            tc, data, teachers, cfg.get("alphas", (0.0, 0.25, 0.5, 0.75, 1.0)),
            seeds=seeds, include_gor=cfg.get("include_gor", True), jobs=args.jobs,
        )
    except ConfigError as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from None
    except DivergenceError as exc:
        raise CLIError(EXIT_DIVERGED, str(exc)) from None
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "alpha", "seed", "test_acc", "train_acc"))
    for r in rows:
        w.writerow((r.method, "" if r.alpha is None else repr(r.alpha), r.seed, repr(r.test_acc), repr(r.train_acc)))
    (run_dir / "runs.csv").write_text(buf.getvalue())
    table = sweep_table(rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "alpha", "seeds", "mean_test_acc", "min_test_acc", "max_test_acc"))
    for t in table:
        w.writerow((t["method"], "" if t["alpha"] is None else repr(t["alpha"]), t["seeds"],
                    repr(t["mean_test_acc"]), repr(t["min_test_acc"]), repr(t["max_test_acc"])))
    (run_dir / "table.csv").write_text(buf.getvalue())
    text = render_table(table)
    (run_dir / "table.txt").write_text(text + "\n")
    _emit(args, {"run_dir": str(run_dir), "table": table}, text)
    return EXIT_OK


def resolve_dynamics(raw: dict, args) -> dict:
    _check_keys(raw, set(_DYNAMICS_DEFAULTS), "dynamics config")
    cfg = dict(_DYNAMICS_DEFAULTS)
    cfg.update(raw)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.eta_alpha is not None:
        cfg["eta_alpha"] = args.eta_alpha
    if args.variant is not None:
        cfg["variant"] = args.variant
    if args.steps is not None:
        cfg["steps"] = args.steps
    if args.scan:
        cfg["scan"] = True
    if args.plot:
        cfg["plot"] = True
    if args.jobs != 1:
        cfg["jobs"] = args.jobs
    return cfg


def _script(cfg: dict) -> dyn.LossScript:
    kind = cfg["script"]
    if kind == "constant":
        return dyn.LossScript.constant(cfg["loss_task"], cfg["loss_kd"])
    if kind == "noisy":
        return dyn.LossScript.noisy(cfg["loss_task"], cfg["loss_kd"], cfg["sigma"], cfg["seed"])
    if kind == "piecewise":
        return dyn.LossScript.piecewise([tuple(s) for s in cfg["segments"]])
    raise ValueError(f"unknown script {kind!r}")


def cmd_dynamics(args) -> int:
    cfg = resolve_dynamics(load_config(args.config), args)
    try:
        script = _script(cfg)
        if cfg["variant"] == "gor":
            initial = GoRState(cfg["alpha_task"], cfg["alpha_kd"], cfg["eta_alpha"], cfg["clip_floor"])
        else:
            initial = SingleScalarState(cfg["beta"], True, cfg["eta_alpha"], cfg["clip_floor"])
        run_dir = _run_dir(args, f"dynamics-{cfg['variant']}-seed{cfg['seed']}")
        _write_json(run_dir / "config.json", cfg)
        traj = dyn.simulate(initial, script, int(cfg["steps"]), cfg["variant"])
    except (ValueError, TypeError) as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from None
    except DivergenceError as exc:
        raise CLIError(EXIT_DIVERGED, str(exc)) from None
    (run_dir / "trajectory.csv").write_text(traj.to_csv())
    last = traj.records[-1]
    summary = {
        "variant": cfg["variant"],
        "steps": last.step,
        "ever_clipped": traj.ever_clipped,
    }
    if cfg["variant"] == "gor":
        summary.update(alpha_task=last.alpha_task, alpha_kd=last.alpha_kd, eq_residual=last.eq_residual)
    else:
        summary["beta"] = last.alpha_task
    if cfg["scan"]:
        grid = dyn.log_grid(cfg["scan_lo"], cfg["scan_hi"], int(cfg["scan_n"]))
        try:
            cells = dyn.basin_scan(grid, grid, script, int(cfg["steps"]), cfg["eta_alpha"], cfg["clip_floor"], int(cfg["jobs"]))
        except ValueError as exc:
            raise CLIError(EXIT_CONFIG, str(exc)) from None
        (run_dir / "scan.csv").write_text(dyn.scan_csv(cells))
        summary["scan_fraction_converged"] = float(np.mean([c.eq_residual <= 0.05 for c in cells]))
    if cfg["plot"]:
        try:
            dyn.plot_trajectory(traj, run_dir / "trajectory.png")
            if cfg["scan"]:
                dyn.plot_scan(cells, grid, grid, run_dir / "scan.png")
        except ImportError:
            raise CLIError(EXIT_CONFIG, "plotting needs matplotlib (pip install 'gorqat[plot]')") from None
    _write_json(run_dir / "summary.json", summary)
    if cfg["variant"] == "gor":
        text = f"gor: step {last.step} alpha_task {last.alpha_task:.6g} alpha_kd {last.alpha_kd:.6g} residual {last.eq_residual:.3g}"
    else:
        text = f"single_scalar: step {last.step} beta {last.alpha_task:.6g}"
    _emit(args, {"run_dir": str(run_dir), **summary}, text)
    return EXIT_OK


def _load(path):
    if not Path(path).is_file():
        raise CLIError(EXIT_IO, f"checkpoint {path} does not exist")
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CLIError(EXIT_IO, f"cannot read checkpoint {path}: {exc}") from None


def cmd_evaluate(args) -> int:
    model, _, plan = _load(args.checkpoint)
    raw = load_config(args.config)
    _check_keys(raw, _TRAIN_FIELDS | _TEACHER_KEYS | _SWEEP_KEYS | {"data"}, "config")
    data = _dataset(_data_spec(raw.get("data", {})))
    if plan is not None:
        plan.update_ranges = False
    try:
        result = {split: evaluate(model, *data.split(split), plan) for split in ("train", "test")}
    except ValueError as exc:
        raise CLIError(EXIT_CONFIG, str(exc)) from None
    _emit(args, result, f"train_acc {result['train']:.4f} test_acc {result['test']:.4f}")
    return EXIT_OK


def describe_checkpoint(model, state, plan) -> dict:
    out = {
        "role": model.role,
        "frozen": model.frozen,
        "layers": [
            {"name": l.name, "weight": list(l.weight.shape), "bias": list(l.bias.shape), "activation": l.activation}
            for l in model.layers
        ],
        "num_parameters": model.num_parameters(),
        "gor": None if state is None else dataclasses.asdict(state),
        "quant": None,
    }
    if plan is not None:
        def spec(name, s):
            return {
                "name": name, "bits": s.bits, "range_source": s.range_source,
                "x_min": s.x_min, "x_max": s.x_max,
                "scale": s.scale if s.finalized else None, "observed": s.observed,
            }

        out["quant"] = {
            "wbits": plan.wbits,
            "abits": plan.abits,
            "weights": [spec(k, v) for k, v in plan.weights.items()],
            "activations": [spec(k, v) for k, v in plan.activations.items()],
        }
    return out


def cmd_inspect(args) -> int:
    info = describe_checkpoint(*_load(args.checkpoint))
    if args.json:
        print(json.dumps(info, sort_keys=True))
        return EXIT_OK
    print(f"model ({info['role']}, {info['num_parameters']} parameters{', frozen' if info['frozen'] else ''})")
    for l in info["layers"]:
        print(f"  {l['name']}: weight {l['weight']} bias {l['bias']} {l['activation']}")
    if info["gor"] is not None:
        g = info["gor"]
        print(f"gor: alpha_task {g['alpha_task']!r} alpha_kd {g['alpha_kd']!r} eta {g['eta']!r} steps {g['step_count']}")
    if info["quant"] is not None:
        q = info["quant"]
        print(f"quant: W{q['wbits']}/A{q['abits']}")
        for s in q["weights"] + q["activations"]:
            print(f"  {s['name']}: n={s['bits']} s={s['scale']!r} range=[{s['x_min']!r}, {s['x_max']!r}]")
    return EXIT_OK


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gorqat", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, training: bool = True):
        p.add_argument("--config", help="TOML config file (JSON echoes from earlier runs also accepted)")
        p.add_argument("--seed", type=int)
        p.add_argument("--eta-alpha", type=float)
        p.add_argument("--out", help="run directory (default $GORQAT_OUT/<run name>)")
        p.add_argument("--jobs", type=int, default=1)
        p.add_argument("--json", action="store_true", help="machine-readable stdout")
        if training:
            p.add_argument("--mode")
            p.add_argument("--wbits", type=int)
            p.add_argument("--abits", type=int)
            p.add_argument("--alpha", type=float, help="static KD weight for qat_kd_static")
            p.add_argument("--eta-theta", type=float)
            p.add_argument("--tau", type=float)
            p.add_argument("--teachers", nargs="+", metavar="CKPT")

    p = sub.add_parser("train", help="run one training job")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sweep", help="static-weight arms versus the learned scalars")
    common(p)
    p.add_argument("--grid", help="comma-separated static alphas, e.g. 0,0.5,1")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("dynamics", help="simulate the scalar game on scripted losses")
    common(p, training=False)
    p.add_argument("--variant", choices=dyn.VARIANTS)
    p.add_argument("--steps", type=int)
    p.add_argument("--scan", action="store_true", help="also run a basin scan over a log grid")
    p.add_argument("--plot", action="store_true", help="render PNGs (needs matplotlib)")
    p.set_defaults(func=cmd_dynamics)

    p = sub.add_parser("evaluate", help="accuracy of a checkpoint on a dataset")
    p.add_argument("checkpoint")
    p.add_argument("--config", help="config whose [data] table names the dataset")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="print a checkpoint's shapes, quant specs and scalars")
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"gorqat: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"gorqat: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
