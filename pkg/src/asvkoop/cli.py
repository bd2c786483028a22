"""Command-line entry points for simulation, identification, scenario
runs, comparison studies, offline detection replay, and figure export."""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import shutil
import subprocess
import sys

import numpy as np

from .excitation import ExcitationSource, collect_dataset
from .harness import (
    ConfigError,
    ScenarioConfig,
    build_nominal_model,
    compare_runs,
    replay_detect,
    run_scenario,
    _SeedChain,
)
from .koopman import DataBatch, KoopmanModel, train
from .logs import LogRow, read_log, write_log
from .vessel import ControlCommand, VesselSimulator, VesselState

log = logging.getLogger("asvkoop")


def _load_config(path: str | None, seed: int | None, controller: str | None) -> ScenarioConfig:
    config = ScenarioConfig.load(path) if path else ScenarioConfig()
    if seed is not None:
        config = config.replace(seed=seed)
    if controller is not None:
        config = config.replace(controller=controller)
    return config


def cmd_simulate(args) -> int:
    config = _load_config(args.config, args.seed, None)
    sim = VesselSimulator(
        params=config.vessel,
        state=VesselState(*config.initial_pose, *config.initial_velocity),
        noise=config.noise,
        wind=config.wind,
        perturbations=config.perturbations,
        seed=config.seed,
        control_rate=config.control_rate_hz,
    )
    cmd = ControlCommand(args.port, args.starboard)
    rows = []
    n = int(args.duration * config.control_rate_hz)
    for _ in range(n):
        t = sim.t
        prev = sim.state
        sim.step(cmd)
        meas = sim.measure()
        rows.append(
            LogRow(
                t=t, x=prev.x, y=prev.y, psi=prev.psi, u=prev.u, v=prev.v, r=prev.r_yaw,
                x_meas=meas.x, y_meas=meas.y, psi_meas=meas.psi,
                u_meas=meas.u, v_meas=meas.v, r_meas=meas.r_yaw,
                a_p=cmd.a_port, a_s=cmd.a_star,
            )
        )
    os.makedirs(args.out, exist_ok=True)
    out = os.path.join(args.out, "simulate_log.csv")
    write_log(out, rows)
    print(f"wrote {len(rows)} steps to {out}")
    return 0


def cmd_collect(args) -> int:
    config = _load_config(args.config, args.seed, None)
    chain = _SeedChain(config.seed)
    plant = VesselSimulator(
        params=config.vessel,
        noise=config.noise,
        wind=config.wind,
        seed=chain.next_int(),
        control_rate=config.control_rate_hz,
    )
    source = ExcitationSource(config.excitation, chain.next_rng())
    batch = collect_dataset(plant, source, args.steps)
    batch.meta = {
        "sample_rate": config.control_rate_hz,
        "seed": config.seed,
        "channels": ["u", "v", "r"],
    }
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "dataset.npz")
    batch.save(path)
    print(f"collected {batch.beta} samples -> {path}")
    return 0


def cmd_train(args) -> int:
    config = _load_config(args.config, args.seed, None)
    batch = DataBatch.load(args.dataset)
    model = train(batch, config.train, np.random.default_rng(config.seed))
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "model.npz")
    model.save(path)
    print(
        f"trained model (val loss {model.meta['val_loss']:.3e}, "
        f"lift dim {model.r_lift}) -> {path}"
    )
    return 0


def cmd_run(args) -> int:
    config = _load_config(args.config, args.seed, args.controller)
    if args.no_cpd:
        config = config.replace(cpd_enabled=False)
    metrics, _ = run_scenario(config, out_dir=args.out)
    print(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_compare(args) -> int:
    with open(args.config) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "scenarios" not in doc:
        raise ConfigError("comparison document needs a 'scenarios' object")
    controllers = doc.get("controllers", ["pid", "c3d-nominal", "c3d-retrain"])
    base = ScenarioConfig.from_dict(doc.get("base", {}))
    scenarios = []
    for name, overrides in doc["scenarios"].items():
        merged = {**doc.get("base", {}), **overrides}
        variants = {}
        for ctrl in controllers:
            variants[ctrl] = ScenarioConfig.from_dict({**merged, "controller": ctrl})
        scenarios.append((name, variants))
    nominal_model = None
    if args.shared_model:
        nominal_model = build_nominal_model(base, _SeedChain(base.seed))
    table = compare_runs(scenarios, args.seeds, nominal_model=nominal_model, out_dir=args.out)
    print(json.dumps(table, indent=2, sort_keys=True))
    return 0


def cmd_detect(args) -> int:
    config = _load_config(args.config, None, None)
    rows = read_log(args.log)
    records = replay_detect(rows, config.cpd)
    alarms = [r for r in records if r["alarm"] != "none"]
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "detections.json")
    with open(path, "w") as fh:
        json.dump(
            {"alarms": alarms, "steps": len(records)},
            fh,
            indent=2,
            sort_keys=True,
            default=lambda v: None if isinstance(v, float) and math.isnan(v) else v,
        )
    print(f"{len(alarms)} alarm(s) over {len(records)} steps -> {path}")
    return 0


def _plotviz_command() -> list[str] | None:
    override = os.environ.get("PLOTVIZ_BIN")
    if override:
        return override.split()
    exe = shutil.which("plotviz")
    if exe:
        return [exe]
    here = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))
    bundled = os.path.join(here, "frontend", "dist", "cli.js")
    if os.path.exists(bundled):
        return ["node", bundled]
    return None


def cmd_export_figures(args) -> int:
    command = _plotviz_command()
    if command is None:
        print(
            "plotviz is not available: build the frontend (npm install && npm run build "
            "in frontend/) or set PLOTVIZ_BIN",
            file=sys.stderr,
        )
        return 1
    os.makedirs(args.out, exist_ok=True)
    jobs = [
        ("trajectory", args.log, os.path.join(args.out, "trajectory.svg"), ["--radii", "2,4"]),
        ("cpd", args.log, os.path.join(args.out, "cpd.svg"), ["--c1", str(args.c1)]),
    ]
    if args.comparison:
        jobs.append(("errorbars", args.comparison, os.path.join(args.out, "errorbars.svg"), []))
    for kind, src, dst, extra in jobs:
        argv = command + [kind, "--log", src, "--out", dst] + extra
        result = subprocess.run(argv)
        if result.returncode != 0:
            print(f"plotviz {kind} failed with code {result.returncode}", file=sys.stderr)
            return result.returncode
        print(f"wrote {dst}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="asvkoop",
        description="Adaptive station keeping: vessel simulation, lifted-linear "
        "identification, change detection, and cascaded control.",
    )
    parser.add_argument("--log-level", default="warning", choices=["debug", "info", "warning", "error"])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="open-loop rollout with a constant command")
    p.add_argument("--config", help="scenario config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out")
    p.add_argument("--duration", type=float, default=60.0)
    p.add_argument("--port", type=float, default=0.6)
    p.add_argument("--starboard", type=float, default=0.6)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("collect", help="collect an excitation dataset")
    p.add_argument("--config", help="scenario config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out")
    p.add_argument("--steps", type=int, default=5000)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("train", help="train a model from a dataset file")
    p.add_argument("--dataset", required=True)
    p.add_argument("--config", help="scenario config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("run", help="run one closed-loop scenario")
    p.add_argument("--config", help="scenario config JSON")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="out")
    p.add_argument("--controller", choices=["pid", "c3d-nominal", "c3d-retrain"])
    p.add_argument("--no-cpd", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("compare", help="multi-seed comparison study")
    p.add_argument("--config", required=True, help="comparison document JSON")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--out", default="out")
    p.add_argument("--shared-model", action="store_true",
                   help="train one nominal model and share it across runs")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("detect", help="replay a recorded log through the detector")
    p.add_argument("--log", required=True)
    p.add_argument("--config", help="scenario config JSON (detector settings)")
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("export-figures", help="render figures via plotviz")
    p.add_argument("--log", required=True)
    p.add_argument("--comparison", help="comparison table JSON for error bars")
    p.add_argument("--out", default="out")
    p.add_argument("--c1", type=float, default=2.0)
    p.set_defaults(func=cmd_export_figures)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level.upper()))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
