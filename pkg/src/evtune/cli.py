"""Command-line entry point: ``evtune <command> [options]``.

Exit status is 0 on success, 1 on a runtime or convergence failure and 2 on
a usage error. Configs are JSON files with one object per section
(``model``, ``signal``, ``camera``, ``scene``, ``plan``, ``target``,
``start``). ``--set section.key=value`` overrides a single field, and the
value is parsed as JSON when possible. ``EVTUNE_SEED`` overrides the
camera seed.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import dataclass, field
from importlib import metadata
from pathlib import Path
from typing import Any, Optional

import numpy as np

from .analytic import AnalyticRateModel, verify_hypotheses
from .budget import RateBudget, budget_table
from .controller import AnalyticRateSource, TuningError, TuningTarget, tune
from .core import BiasTuple, EvtuneError, InvalidArgumentError, estimate_rates, read_events, write_events
from .simulator import CameraConfig, SceneConfig, SimulationSizeError, SimulatorRateSource, simulate
from .solver import (
    check_monotone_in_C,
    default_counterexample_grid,
    find_counterexample,
    multistart_agreement,
    sensitivity,
    solve_balanced,
)
from .sweep import SweepFailedError, SweepPlan, analyze_grid, default_target, run_sweep

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
SEED_ENV = "EVTUNE_SEED"


class UsageError(Exception):
    pass


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: Optional[int]
    version: str = field(default_factory=tool_version)
    outputs: list[str] = field(default_factory=list)
    argv: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"command": self.command, "config": self.config, "seed": self.seed,
                "version": self.version, "outputs": self.outputs, "argv": self.argv}


# ---------------------------------------------------------------- config layering

def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path: Optional[str], overrides: list[str]) -> dict:
    """Merge a sectioned JSON config file with ``section.key=value`` overrides."""
    cfg: dict = {}
    if path:
        try:
            cfg = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(cfg, dict) or not all(isinstance(v, dict) for v in cfg.values()):
            raise UsageError("config must be a JSON object of section objects")
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not section or not name:
            raise UsageError(f"--set expects section.key=value, got {item!r}")
        cfg.setdefault(section, {})[name] = _parse_value(value)
    return cfg


def _build(cls, defaults: dict, section: Optional[dict]):
    merged = {**defaults, **(section or {})}
    try:
        return cls.from_dict(merged)
    except (TypeError, ValueError, KeyError) as exc:
        raise UsageError(f"invalid {cls.__name__} config: {exc}") from None


def _camera(cfg: dict) -> CameraConfig:
    cam = _build(CameraConfig, {}, cfg.get("camera"))
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cam = CameraConfig.from_dict({**cam.to_dict(), "seed": int(env)})
        except ValueError:
            raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return cam


def _target(cfg: dict, base: TuningTarget) -> TuningTarget:
    return _build(TuningTarget, base.to_dict(), cfg.get("target"))


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, allow_nan=True) + "\n")


def _emit(doc: dict, out: Optional[str], manifest: RunManifest) -> None:
    if out:
        manifest.outputs.append(out)
        _write_json(Path(out), {**doc, "manifest": manifest.to_dict()})
    else:
        print(json.dumps({**doc, "manifest": manifest.to_dict()}, indent=2))


# ---------------------------------------------------------------- commands

def cmd_verify_prop(args) -> int:
    cfg = load_config(args.config, args.set)
    model = _build(AnalyticRateModel, {}, cfg.get("model"))
    if args.grid < 2:
        raise UsageError("--grid must be >= 2")
    rng = np.random.default_rng(args.seed)
    checks: list[dict] = []

    hyp = verify_hypotheses(model, args.grid)
    checks.append({"name": "hypotheses", "mandatory": True, "passed": hyp.passed,
                   "failed": hyp.failed, "detail": hyp.to_dict()})

    s = model.scale(0, 0)
    worst = 0.0
    for _ in range(args.instances):
        c1, c2 = s * 10 ** rng.uniform(-2, 2, 2)
        worst = max(worst, multistart_agreement(model, c1, c2, rng.uniform(0.01, 0.99, (args.starts, 2))))
    checks.append({"name": "multistart_uniqueness", "mandatory": True, "passed": worst <= 1e-6,
                   "max_disagreement": worst})

    bad = 0
    for _ in range(args.instances):
        c, cp = np.sort(s * 10 ** rng.uniform(-2, 2, 2))
        if c < cp and not check_monotone_in_C(model, c, cp).ordered:
            bad += 1
    checks.append({"name": "monotone_in_C", "mandatory": True, "passed": bad == 0, "violations": bad})

    worst_rel = 0.0
    for _ in range(args.instances // 10 or 1):
        c = s * 10 ** rng.uniform(-1, 1)
        sol = solve_balanced(model, c)
        rep = sensitivity(model, sol)
        h = c * 1e-4
        lo, hi = solve_balanced(model, c - h), solve_balanced(model, c + h)
        fd = ((hi.x - lo.x) / (2 * h), (hi.y - lo.y) / (2 * h))
        worst_rel = max(worst_rel, abs(fd[0] / rep.dx_dC - 1), abs(fd[1] / rep.dy_dC - 1))
    checks.append({"name": "sensitivity_finite_difference", "mandatory": True,
                   "passed": worst_rel <= 1e-3, "max_relative_error": worst_rel})

    witness = find_counterexample(model, default_counterexample_grid())
    checks.append({"name": "counterexample_search", "mandatory": False, "passed": True,
                   "result": witness.to_dict() if witness else witness.to_dict()})

    ok = all(c["passed"] for c in checks if c["mandatory"])
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}", file=sys.stderr)
    manifest = RunManifest("verify-prop", {"model": model.to_dict(), "grid": args.grid,
                                           "instances": args.instances, "starts": args.starts},
                           args.seed, argv=sys.argv[1:])
    _emit({"passed": ok, "checks": checks}, args.out, manifest)
    return EXIT_OK if ok else EXIT_FAIL


def _start(cfg: dict, args) -> BiasTuple:
    start = dict(cfg.get("start", {}))
    if args.start:
        try:
            fo, hpf, on, off = (int(v) for v in args.start.split(","))
        except ValueError:
            raise UsageError("--start expects fo,hpf,diff_on,diff_off") from None
        start.update(fo=fo, hpf=hpf, diff_on=on, diff_off=off)
    try:
        return BiasTuple.from_dict(start)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid start biases: {exc}") from None


def cmd_tune(args) -> int:
    cfg = load_config(args.config, args.set)
    if args.source == "analytic":
        model = _build(AnalyticRateModel, {}, cfg.get("model"))
        source, ranges, extra = AnalyticRateSource(model), model.ranges, {"model": model.to_dict()}
        base = TuningTarget(100000.0, 0.02, 1.0)
        seed = None
    else:
        camera = _camera(cfg)
        scene = _build(SceneConfig, {"lamp_amplitude": 0.0}, cfg.get("scene"))
        source, ranges = SimulatorRateSource(scene, camera), None
        extra = {"camera": camera.to_dict(), "scene": scene.to_dict()}
        base = TuningTarget(20000.0, 0.2, 0.2)
        seed = camera.seed
    fields = {k: v for k, v in (("total_rate", args.total_rate), ("tolerance", args.tolerance),
                                ("window", args.window), ("max_iterations", args.max_iterations))
              if v is not None}
    target = _target({"target": {**cfg.get("target", {}), **fields}}, base)
    start = _start(cfg, args)
    if ranges is not None:
        try:
            start.validate(ranges)
        except InvalidArgumentError as exc:
            raise UsageError(str(exc)) from None
    manifest = RunManifest("tune", {"source": args.source, "target": target.to_dict(),
                                    "start": start.to_dict(), **extra}, seed, argv=sys.argv[1:])
    try:
        trace = tune(source, start, target, ranges=ranges)
        error = None
    except TuningError as exc:
        trace, error = exc.trace, f"{type(exc).__name__}: {exc}"
    print(trace.table(), file=sys.stderr)
    if error:
        print(error, file=sys.stderr)
    _emit({"trace": trace.to_dict(), "error": error}, args.out, manifest)
    return EXIT_OK if trace.converged and error is None else EXIT_FAIL


def cmd_sweep(args) -> int:
    cfg = load_config(args.config, args.set)
    camera = _camera(cfg)
    scene = _build(SceneConfig, {}, cfg.get("scene"))
    plan_cfg = dict(cfg.get("plan", {}))
    if "target" in cfg:
        plan_cfg["target"] = {**default_target().to_dict(), **cfg["target"]}
    plan = _build(SweepPlan, {}, plan_cfg)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    try:
        plan.check_scene(scene)
    except InvalidArgumentError as exc:
        raise UsageError(str(exc)) from None
    out = Path(args.out_dir)

    def progress(rec):
        if args.verbose:
            print(f"fo={rec.fo:>4} hpf={rec.hpf:>4} diff_on={rec.diff_on:>5} diff_off={rec.diff_off:>5} "
                  f"sig_pos={rec.sig_pos:8.2f} sig_neg={rec.sig_neg:8.2f} converged={rec.converged}",
                  file=sys.stderr)

    manifest = RunManifest("sweep", {"plan": plan.to_dict(), "scene": scene.to_dict(),
                                     "camera": camera.to_dict()}, camera.seed, argv=sys.argv[1:])
    try:
        grid = run_sweep(plan, scene, camera, jobs=args.jobs, progress=progress)
    except SweepFailedError as exc:
        print(f"sweep failed: {exc}", file=sys.stderr)
        return EXIT_FAIL
    summary = analyze_grid(grid)
    paths = [str(p) for p in grid.write_csv(out)]
    manifest.outputs.extend([str(out / "grid.json"), *paths, str(out / "summary.json")])
    grid.write_json(out / "grid.json", {"manifest": manifest.to_dict()})
    _write_json(out / "summary.json", {**summary.to_dict(), "manifest": manifest.to_dict()})
    print(json.dumps(summary.to_dict(), indent=2))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = load_config(args.config, args.set)
    camera = _camera(cfg)
    scene = _build(SceneConfig, {}, cfg.get("scene"))
    biases = _start(cfg, argparse.Namespace(start=args.biases))
    duration = scene.duration if args.duration is None else args.duration
    if not duration >= camera.dt:
        raise UsageError(f"duration must be >= dt ({camera.dt} s), got {duration}")
    manifest = RunManifest("simulate", {"scene": scene.to_dict(), "camera": camera.to_dict(),
                                        "biases": biases.to_dict(), "duration": duration},
                           camera.seed, argv=sys.argv[1:])
    try:
        stream = simulate(scene, biases, camera, duration=duration)
    except SimulationSizeError as exc:
        print(f"refused: {exc}", file=sys.stderr)
        return EXIT_FAIL
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_events(stream, out)
    manifest.outputs.append(str(out))
    rates = estimate_rates(stream, 0.0, duration)
    _write_json(out.with_name(out.name + ".manifest.json"),
                {"n_events": len(stream), "rates": rates.to_dict(), "manifest": manifest.to_dict()})
    print(f"wrote {len(stream)} events to {out}", file=sys.stderr)
    return EXIT_OK


def cmd_budget(args) -> int:
    cfg = load_config(args.config, args.set)
    budget = _build(RateBudget, {}, cfg.get("budget")) if "budget" in cfg else RateBudget()
    if (args.rate is None) == (args.events is None):
        raise UsageError("give exactly one of --rate or --events")
    estimate = None
    if args.events is not None:
        try:
            stream = read_events(args.events, args.width, args.height)
        except (OSError, EvtuneError) as exc:
            print(f"cannot read events: {exc}", file=sys.stderr)
            return EXIT_FAIL
        duration = args.duration if args.duration is not None else stream.duration_s
        if len(stream) and duration > 0:
            estimate = estimate_rates(stream, 0.0, duration)
            total = estimate.total_rate
        else:
            total = 0.0
        width, height = stream.width, stream.height
    else:
        if args.rate < 0 or not math.isfinite(args.rate):
            raise UsageError("--rate must be non-negative")
        total, width, height = args.rate, args.width or 1280, args.height or 720
    if width <= 0 or height <= 0:
        raise UsageError("width and height must be positive")
    table = budget_table(total, width, height, budget, estimate=estimate)
    manifest = RunManifest("budget", {"budget": budget.to_dict(), "rate": args.rate,
                                      "events": args.events}, None, argv=sys.argv[1:])
    _emit(table, args.out, manifest)
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="evtune", description="Event-camera bias tuning toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="sectioned JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config field (repeatable)")
        sp.add_argument("--out", help="write the JSON report here instead of stdout")

    v = sub.add_parser("verify-prop", help="check the rate-model hypotheses and solver properties")
    common(v)
    v.add_argument("--grid", type=int, default=50, help="hypothesis grid resolution")
    v.add_argument("--instances", type=int, default=50)
    v.add_argument("--starts", type=int, default=20, help="multistart points per instance")
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_verify_prop)

    t = sub.add_parser("tune", help="tune diff_on/diff_off to a background-rate target")
    common(t)
    t.add_argument("--source", choices=("analytic", "sim"), default="analytic")
    t.add_argument("--total-rate", "-D", type=float, dest="total_rate")
    t.add_argument("--tolerance", type=float)
    t.add_argument("--window", type=float)
    t.add_argument("--max-iterations", type=int, dest="max_iterations")
    t.add_argument("--start", help="fo,hpf,diff_on,diff_off")
    t.set_defaults(func=cmd_tune)

    s = sub.add_parser("sweep", help="tune and record every (fo, hpf) cell")
    common(s)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--jobs", type=int, default=1)
    s.add_argument("--verbose", action="store_true")
    s.set_defaults(func=cmd_sweep)

    m = sub.add_parser("simulate", help="simulate a scene to an event CSV")
    common(m)
    m.add_argument("--biases", help="fo,hpf,diff_on,diff_off")
    m.add_argument("--duration", type=float)
    m.set_defaults(func=cmd_simulate)
    m.set_defaults(out=None)

    b = sub.add_parser("budget", help="rate budget and cluster false-alarm table")
    common(b)
    b.add_argument("--rate", type=float, help="total event rate, ev/s")
    b.add_argument("--events", help="event CSV to measure the rate from")
    b.add_argument("--width", type=int)
    b.add_argument("--height", type=int)
    b.add_argument("--duration", type=float, help="seconds covered by --events (default: last timestamp)")
    b.set_defaults(func=cmd_budget)
    return p


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "simulate" and not args.out:
        parser.error("simulate requires --out")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TuningError, EvtuneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
