"""Command-line entry point.

Exit codes: 0 success or converged, 1 runtime error, 2 usage or configuration
error, 3 training stopped at the iteration cap.
"""

import argparse
import logging
import math
import sys
from pathlib import Path

import torch
from pydantic import ValidationError

from app.core.config import EvalConfig, RunConfig, configure_logging, get_settings, load_run_config
from app.core.exceptions import ConfigError, RydbergControlError
from app.models.physics import GateKind
from app.models.schemas import FitModel, RatioResponse, TrainStatus
from app.services.evaluation import (
    decomposition_ratio,
    decomposition_time,
    evaluate_family,
    fit_times,
    load_report,
    preset_ratio,
    write_report,
)
from app.services.pulse_export import export_pulse, load_pulse, pulse_for, save_pulse, simulate_pulse_file
from app.services.trainer import fixed_angle_optimize, train_family, two_stage_blockade
from app.services.weights_io import load_family, load_network
from app.utils.helpers import write_model

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MAX_ITERS = 3


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rydpulse", description="Neural-network pulse families for Rydberg phase gates")
    parser.add_argument("--seed", type=int, default=None, help="Global seed (overrides the config)")
    parser.add_argument("--threads", type=int, default=None, help="Cap on torch worker threads")
    parser.add_argument("--log-level", default=None, help="Logging level")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="Train a pulse family")
    train.add_argument("--gate", choices=[g.value for g in GateKind], default=None)
    train.add_argument("--config", type=Path, default=None, help="TOML or JSON run configuration (required)")
    train.add_argument("--stage", choices=["infinite-first", "finite-only"], default=None)
    train.add_argument("--output", type=Path, default=None)
    train.add_argument("--resume", action="store_true", help="Continue from checkpoints in the output directory")

    ev = sub.add_parser("eval", help="Evaluate a trained family or an exported pulse")
    source = ev.add_mutually_exclusive_group(required=True)
    source.add_argument("--weights", type=Path, help="Family weights directory")
    source.add_argument("--pulse", type=Path, help="Exported pulse file")
    ev.add_argument("--config", type=Path, default=None)
    ev.add_argument("--samples", type=int, default=None)
    ev.add_argument("--gamma", type=float, default=None, help="Decay rate override (omega_max units)")
    ev.add_argument("--blockade", type=float, default=None, help="Blockade strength override")
    ev.add_argument("--output", type=Path, default=None)

    export = sub.add_parser("export-pulse", help="Sample a trained pulse on a uniform grid")
    export.add_argument("--weights", type=Path, required=True, help="Family directory or single weights file")
    export.add_argument("--phi", type=float, required=True)
    export.add_argument("--resolution", type=int, default=None)
    export.add_argument("--config", type=Path, default=None)
    export.add_argument("--output", type=Path, required=True)

    fit = sub.add_parser("fit", help="Fit T_phi against phi from an evaluation report")
    fit.add_argument("--report", type=Path, required=True)
    fit.add_argument("--model", choices=[m.value for m in FitModel], default=FitModel.ARCSINH.value)
    fit.add_argument("--output", type=Path, default=None)

    ratio = sub.add_parser("ratio", help="Decomposition-time ratio R_k")
    ratio.add_argument("--preset", choices=[g.value for g in GateKind], default=None)
    ratio.add_argument("--gate", action="append", default=[], metavar="COUNTxDURATION", help="e.g. 2x7.612")
    ratio.add_argument("--native", type=float, default=None, help="Average native pulse time")
    ratio.add_argument("--c1z-time", type=float, default=None)
    ratio.add_argument("--config", type=Path, default=None)

    fixed = sub.add_parser("fixed-angle", help="Optimize a single-angle pulse directly")
    fixed.add_argument("--gate", choices=[g.value for g in GateKind], default=None)
    fixed.add_argument("--phi", type=float, default=math.pi)
    fixed.add_argument("--config", type=Path, default=None)
    fixed.add_argument("--output", type=Path, default=None)

    serve = sub.add_parser("serve", help="Start the HTTP service")
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)
    return parser


def _run_config(args: argparse.Namespace) -> RunConfig:
    overrides = {}
    if getattr(args, "gate", None) and isinstance(args.gate, str):
        overrides["gate"] = args.gate
    cfg = load_run_config(getattr(args, "config", None), overrides)
    if args.seed is not None:
        cfg = cfg.model_copy(update={"seed": args.seed, "train": cfg.train.model_copy(update={"seed": args.seed})})
    return cfg


def _output_dir(args: argparse.Namespace, cfg: RunConfig, name: str) -> Path:
    if getattr(args, "output", None) is not None:
        return args.output
    base = cfg.output_dir or get_settings().output_dir
    return Path(base) / name


def cmd_train(args: argparse.Namespace) -> int:
    if args.config is None:
        raise ConfigError("train needs a run configuration", details=["pass --config FILE (see configs/)"])
    cfg = _run_config(args)
    stage = args.stage or cfg.train.blockade_stage
    out = _output_dir(args, cfg, f"train-{cfg.gate.value}")
    scheme, n_steps = cfg.physics.scheme, cfg.physics.n_steps
    if stage == "infinite-first":
        run = two_stage_blockade(cfg.gate, cfg.train, cfg.system(), out, resume=args.resume, n_steps=n_steps, scheme=scheme)
    else:
        run = train_family(cfg.gate, cfg.train, cfg.system(), out, resume=args.resume, n_steps=n_steps, scheme=scheme)
    write_model(out / "summary.json", run.summary())
    for line in run.stage_log:
        print(line)
    return EXIT_OK if run.converged else EXIT_MAX_ITERS


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    updates = {
        key: value
        for key, value in (("n_samples", args.samples), ("gamma", args.gamma), ("blockade_b", args.blockade))
        if value is not None
    }
    try:
        eval_cfg = EvalConfig.model_validate(cfg.eval.model_dump() | updates)
    except ValidationError as e:
        raise ConfigError("Invalid evaluation options", details=[err["msg"] for err in e.errors()]) from e
    cfg = cfg.model_copy(update={"eval": eval_cfg})

    if args.pulse is not None:
        pulse_file = load_pulse(args.pulse)
        cfg = cfg.model_copy(update={"gate": pulse_file.header.gate})
        report = simulate_pulse_file(pulse_file, cfg.eval_system(), cfg.physics.n_steps, cfg.physics.scheme)
        print(report.model_dump_json(indent=2))
        if args.output is not None:
            write_model(args.output, report)
        return EXIT_OK

    family = load_family(args.weights)
    cfg = cfg.model_copy(update={"gate": family.gate})
    report = evaluate_family(
        family,
        family.gate,
        cfg.eval_system(),
        n_samples=cfg.eval.n_samples,
        seed=cfg.seed,
        n_steps=cfg.physics.n_steps,
        scheme=cfg.physics.scheme,
        theta_grid=cfg.eval.theta_grid,
        batch_size=cfg.eval.batch_size,
    )
    paths = write_report(report, _output_dir(args, cfg, f"eval-{family.gate.value}"))
    print(f"<1-F> = {report.mean_infid_total:.4e} over {report.n_samples} samples -> {paths['report']}")
    return EXIT_OK


def cmd_export_pulse(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    if args.weights.is_dir():
        source = load_family(args.weights, require_coverage=False)
        gate = source.gate
    else:
        source, header = load_network(args.weights)
        gate = header.gate
    pulse = pulse_for(source, args.phi)
    pulse_file = export_pulse(
        pulse, gate, args.resolution or cfg.eval.resolution, cfg.physics.rabi_frequency_mhz
    )
    save_pulse(args.output, pulse_file)
    print(
        f"{gate.value} phi={pulse.phi:.6f}: T={pulse.duration:.4f}/omega_max"
        f" = {pulse_file.header.duration_us:.4f} us -> {args.output}"
    )
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    report = load_report(args.report)
    result = fit_times(
        [r.phi for r in report.records], [r.duration for r in report.records], FitModel(args.model)
    )
    print(result.model_dump_json(indent=2))
    if args.output is not None:
        write_model(args.output, result)
    return EXIT_OK


def _parse_gate_entry(entry: str) -> tuple[int, float]:
    try:
        count, duration = entry.lower().split("x", 1)
        return int(count), float(duration)
    except ValueError as e:
        raise ConfigError(f"Gate entry must look like COUNTxDURATION, got '{entry}'") from e


def cmd_ratio(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    c1z_time = args.c1z_time or cfg.ratio.c1z_time
    native = args.native or cfg.ratio.native_time
    entries = [_parse_gate_entry(entry) for entry in args.gate] or cfg.ratio.gate_counts
    if entries:
        if native is None:
            raise ConfigError("An explicit decomposition needs --native")
        t_d = decomposition_time(entries)
        response = RatioResponse(decomposition_time=t_d, native_time=native, ratio=decomposition_ratio(t_d, native))
    else:
        gate = GateKind(args.preset) if args.preset else cfg.gate
        t_d, t_n, ratio = preset_ratio(gate, c1z_time, native)
        response = RatioResponse(decomposition_time=t_d, native_time=t_n, ratio=ratio)
    print(response.model_dump_json(indent=2))
    return EXIT_OK


def cmd_fixed_angle(args: argparse.Namespace) -> int:
    cfg = _run_config(args)
    result = fixed_angle_optimize(
        cfg.gate, args.phi, cfg.train, cfg.system(), n_steps=cfg.physics.n_steps, scheme=cfg.physics.scheme
    )
    print(
        f"{cfg.gate.value} phi={args.phi:.6f}: T={result.pulse.duration:.4f}/omega_max"
        f" 1-F={result.report.infid_total:.4e} theta_c={result.pulse.theta_c:.6f}"
    )
    if args.output is not None:
        pulse_file = export_pulse(result.pulse, cfg.gate, cfg.eval.resolution, cfg.physics.rabi_frequency_mhz)
        save_pulse(args.output, pulse_file)
    return EXIT_OK if result.run.status is TrainStatus.CONVERGED else EXIT_MAX_ITERS


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    settings = get_settings()
    uvicorn.run(
        "app.main:app",
        host=args.host or settings.host,
        port=args.port or settings.port,
        reload=settings.debug,
    )
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "export-pulse": cmd_export_pulse,
    "fit": cmd_fit,
    "ratio": cmd_ratio,
    "fixed-angle": cmd_fixed_angle,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    settings = get_settings()
    configure_logging(args.log_level or settings.log_level)
    threads = args.threads or settings.threads
    if threads:
        torch.set_num_threads(threads)

    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"error: {e.message}", file=sys.stderr)
        for detail in e.details or []:
            print(f"  {detail}", file=sys.stderr)
        return EXIT_USAGE
    except RydbergControlError as e:
        print(f"error: {e.message}", file=sys.stderr)
        if e.details:
            print(f"  details: {e.details}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
