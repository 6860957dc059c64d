"""Training loops for pulse families and single-angle pulses.

Each iteration draws fresh angles, evolves the batch, and takes an Adam step on
the time-penalized cost. The time penalty is switched on once the mean
infidelity drops below ``TrainConfig.mu_switch``.
"""

import copy
import io
import logging
import math
import time
from collections.abc import Callable
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from app.core.config import TrainConfig
from app.core.exceptions import DomainError, PropagationError, TrainingDivergedError
from app.models.physics import AtomSystem, GateKind, StepScheme
from app.models.schemas import (
    EvalReport,
    FidelityReport,
    IntervalSummary,
    ProgressRecord,
    StageEvaluation,
    TrainRunSummary,
    TrainStatus,
)
from app.services.ansatz import (
    DEFAULT_ARCH,
    T_BOUND_FACTOR,
    T_OPT_PI,
    ChainedNetwork,
    FixedAnglePulse,
    Interval,
    PulseBatch,
    PulseFamily,
    PulseSource,
    PulseSpec,
    uniform_intervals,
)
from app.services.evaluation import evaluate_family
from app.services.fidelity import (
    batch_steps,
    cost_J,
    cost_J_opt,
    gate_fidelities,
    infidelity_decomposition,
    propagate_block,
)
from app.services.hamiltonians import HamiltonianModel
from app.services.weights_io import interval_filename, load_network, save_family, save_network
from app.utils.helpers import append_jsonl, atomic_write_bytes, write_model

logger = logging.getLogger(__name__)

DEFAULT_INTERVALS = {GateKind.C1P: 5, GateKind.C2P: 14}
PROGRESS_NAME = "progress.jsonl"
SUMMARY_NAME = "summary.json"
STAGE_REPORT_NAME = "stage_{}_report.json"


def sample_angles(interval: Interval, m: int, rng: np.random.Generator) -> torch.Tensor:
    """``m`` i.i.d. uniform angles in (low, high]."""
    if m < 1:
        raise ValueError(f"Batch size must be positive, got {m}")
    u = rng.random(m)
    return torch.as_tensor(interval.high - u * interval.width, dtype=torch.float64)


def resolve_intervals(gate: GateKind, cfg: TrainConfig) -> list[Interval]:
    if cfg.intervals is not None:
        return [Interval(low, high) for low, high in sorted(cfg.intervals)]
    return uniform_intervals(cfg.n_intervals or DEFAULT_INTERVALS[gate])


def t_bound_for(gate: GateKind, cfg: TrainConfig) -> float:
    return T_BOUND_FACTOR * (cfg.t_opt or T_OPT_PI[gate])


def new_network(gate: GateKind, cfg: TrainConfig, seed: int | None = None) -> ChainedNetwork:
    """Randomly initialized network with the configured or default architecture."""
    return ChainedNetwork(
        cfg.arch or DEFAULT_ARCH[gate],
        t_bound=t_bound_for(gate, cfg),
        n_knots=cfg.n_knots,
        delta_bound=cfg.delta_bound,
        seed=cfg.seed if seed is None else seed,
    )


def training_model(gate: GateKind, sys: AtomSystem) -> HamiltonianModel:
    return HamiltonianModel.build(sys.with_overrides(n_atoms=gate.n_atoms), decay=True)


def batch_cost(
    source: PulseSource,
    phis: torch.Tensor,
    gate: GateKind,
    model: HamiltonianModel,
    mu: float = 0.0,
    n_steps: int | None = None,
    scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
) -> tuple[torch.Tensor, torch.Tensor, PulseBatch]:
    """Differentiable (J, J_opt) for one batch of angles."""
    batch = source(phis)
    steps = batch_steps(batch.durations, n_steps)
    block = propagate_block(model, batch.durations, batch.sampler(), steps, scheme)
    j = cost_J(gate_fidelities(block, phis, batch.theta_c, gate.k))
    return j, cost_J_opt(j, batch.durations, mu), batch


@dataclass
class IntervalResult:
    """Outcome of one optimization run."""

    interval: Interval
    net: nn.Module
    status: TrainStatus
    iterations: int
    trace: list[ProgressRecord]
    losses: list[float]
    stage: str = "main"

    @property
    def final(self) -> ProgressRecord:
        return self.trace[-1]

    def summary(self, weights_file: str | None = None) -> IntervalSummary:
        return IntervalSummary(
            interval=(self.interval.low, self.interval.high),
            status=self.status,
            iterations=self.iterations,
            final_j=self.final.j,
            final_j_opt=self.final.j_opt,
            mean_duration=self.final.mean_duration,
            weights_file=weights_file,
        )


@dataclass
class TrainRun:
    """Per-interval networks and traces of a family run."""

    gate: GateKind
    seed: int
    results: list[IntervalResult]
    wall_time: float
    stage_log: list[str] = field(default_factory=list)
    stages: dict[str, list[IntervalResult]] = field(default_factory=dict)
    stage_reports: dict[str, EvalReport] = field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return all(result.status is TrainStatus.CONVERGED for result in self.results)

    @property
    def family(self) -> PulseFamily:
        return PulseFamily(self.gate, [(result.interval, result.net) for result in self.results])

    def summary(self) -> TrainRunSummary:
        ordered = sorted(self.results, key=lambda result: result.interval.low)
        return TrainRunSummary(
            gate=self.gate,
            seed=self.seed,
            wall_time=self.wall_time,
            intervals=[result.summary(interval_filename(i)) for i, result in enumerate(ordered)],
            stage_log=self.stage_log,
            stage_evaluations={
                stage: StageEvaluation.from_report(report, STAGE_REPORT_NAME.format(stage))
                for stage, report in self.stage_reports.items()
            },
        )


@dataclass
class _LoopState:
    iteration: int = 0
    mu_active: bool = False
    window: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    trace: list[ProgressRecord] = field(default_factory=list)
    retries: int = 0
    elapsed: float = 0.0


def _optim_path(checkpoint: Path) -> Path:
    return checkpoint.with_name(checkpoint.name + ".optim.pt")


def _save_checkpoint(
    path: Path,
    source: nn.Module,
    gate: GateKind,
    interval: Interval,
    optimizer: torch.optim.Optimizer,
    scheduler: torch.optim.lr_scheduler.ReduceLROnPlateau,
    state: _LoopState,
    rng: np.random.Generator,
) -> None:
    save_network(path, source, gate, interval)
    buffer = io.BytesIO()
    torch.save(
        {
            "optimizer": optimizer.state_dict(),
            "scheduler": scheduler.state_dict(),
            "iteration": state.iteration,
            "mu_active": state.mu_active,
            "window": state.window,
            "losses": state.losses,
            "trace": [record.model_dump() for record in state.trace],
            "retries": state.retries,
            "elapsed": state.elapsed,
            "rng": rng.bit_generator.state,
        },
        buffer,
    )
    atomic_write_bytes(_optim_path(path), buffer.getvalue())


def _load_checkpoint(
    path: Path,
    source: nn.Module,
    optimizer: torch.optim.Optimizer,
    scheduler: torch.optim.lr_scheduler.ReduceLROnPlateau,
    rng: np.random.Generator,
) -> _LoopState:
    net, _ = load_network(path)
    source.load_state_dict(net.state_dict())
    saved = torch.load(_optim_path(path), weights_only=False)
    optimizer.load_state_dict(saved["optimizer"])
    scheduler.load_state_dict(saved["scheduler"])
    rng.bit_generator.state = saved["rng"]
    logger.info("Resumed from %s at iteration %d", path, saved["iteration"])
    return _LoopState(
        iteration=saved["iteration"],
        mu_active=saved["mu_active"],
        window=list(saved["window"]),
        losses=list(saved["losses"]),
        trace=[ProgressRecord.model_validate(record) for record in saved["trace"]],
        retries=saved["retries"],
        elapsed=saved["elapsed"],
    )


def _plateaued(window: list[float], size: int, threshold: float) -> bool:
    """Relative improvement between the last two moving-average windows is below threshold."""
    if len(window) < 2 * size:
        return False
    previous = sum(window[-2 * size : -size]) / size
    current = sum(window[-size:]) / size
    if previous == 0.0:
        return True
    return (previous - current) / abs(previous) < threshold


def optimize(
    source: nn.Module,
    draw: Callable[[], torch.Tensor],
    gate: GateKind,
    model: HamiltonianModel,
    cfg: TrainConfig,
    interval: Interval,
    rng: np.random.Generator,
    stage: str = "main",
    progress_path: Path | None = None,
    checkpoint_path: Path | None = None,
    resume: bool = False,
    n_steps: int | None = None,
    scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
) -> IntervalResult:
    """Adam on J_opt until the moving average plateaus or ``max_iters`` is reached.

    Raises:
        TrainingDivergedError: If the loss stays non-finite after
            ``cfg.divergence_retries`` restarts from the last good state.
    """
    optimizer = torch.optim.Adam(source.parameters(), lr=cfg.learning_rate, betas=(0.9, 0.999), eps=1e-8)
    scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
        optimizer, mode="min", factor=cfg.lr_factor, patience=cfg.lr_patience, min_lr=cfg.min_lr
    )
    state = _LoopState()
    if resume and checkpoint_path is not None and checkpoint_path.exists():
        state = _load_checkpoint(checkpoint_path, source, optimizer, scheduler, rng)

    last_good = (copy.deepcopy(source.state_dict()), copy.deepcopy(optimizer.state_dict()), state.iteration)
    start = time.perf_counter() - state.elapsed
    status = TrainStatus.MAX_ITERS

    while state.iteration < cfg.max_iters:
        phis = draw()
        mu = cfg.mu if state.mu_active else 0.0
        try:
            j, j_opt, batch = batch_cost(source, phis, gate, model, mu, n_steps, scheme)
            finite = bool(torch.isfinite(j_opt))
        except PropagationError:
            finite = False
        if finite:
            optimizer.zero_grad()
            j_opt.backward()
            finite = all(
                p.grad is None or bool(torch.isfinite(p.grad).all()) for p in source.parameters()
            )

        if not finite:
            state.retries += 1
            if state.retries > cfg.divergence_retries:
                source.load_state_dict(last_good[0])
                if checkpoint_path is not None:
                    _save_checkpoint(checkpoint_path, source, gate, interval, optimizer, scheduler, state, rng)
                raise TrainingDivergedError(
                    f"Loss diverged on interval ({interval.low:.4f}, {interval.high:.4f}]",
                    details={"last_good_iteration": last_good[2]},
                )
            source.load_state_dict(last_good[0])
            optimizer.load_state_dict(last_good[1])
            for group in optimizer.param_groups:
                group["lr"] *= 0.5
            logger.warning(
                "Non-finite loss at iteration %d; restored iteration %d and halved the learning rate",
                state.iteration,
                last_good[2],
            )
            continue

        lr_before = optimizer.param_groups[0]["lr"]
        optimizer.step()
        loss = float(j_opt.detach())
        scheduler.step(loss)
        lr = optimizer.param_groups[0]["lr"]
        if lr < lr_before:
            logger.warning("Plateau: learning rate %.3g -> %.3g at iteration %d", lr_before, lr, state.iteration)

        state.iteration += 1
        state.losses.append(loss)
        state.window.append(loss)
        state.elapsed = time.perf_counter() - start
        j_value = float(j.detach())
        mean_duration = float(batch.durations.detach().mean())

        switched = not state.mu_active and cfg.mu > 0 and j_value < cfg.mu_switch
        done = _plateaued(state.window, cfg.plateau_window, cfg.plateau_threshold)
        last = done or state.iteration >= cfg.max_iters
        if switched or last or state.iteration % cfg.log_every == 0:
            record = ProgressRecord(
                iter=state.iteration,
                j=j_value,
                j_opt=loss,
                mean_duration=mean_duration,
                wall_time=state.elapsed,
                lr=lr,
                mu_active=state.mu_active,
                stage=stage,
            )
            state.trace.append(record)
            if progress_path is not None:
                append_jsonl(progress_path, record)
            logger.info(
                "[%s] iter %d  J=%.3e  J_opt=%.3e  <T>=%.4f  lr=%.2e",
                stage,
                record.iter,
                record.j,
                record.j_opt,
                record.mean_duration,
                record.lr,
            )
        if switched:
            state.mu_active = True
            state.window.clear()
            logger.warning("Time penalty mu=%.3g enabled at iteration %d (J=%.3e)", cfg.mu, state.iteration, j_value)
        last_good = (copy.deepcopy(source.state_dict()), copy.deepcopy(optimizer.state_dict()), state.iteration)

        if checkpoint_path is not None and state.iteration % cfg.checkpoint_every == 0:
            _save_checkpoint(checkpoint_path, source, gate, interval, optimizer, scheduler, state, rng)
        if done and not switched:
            status = TrainStatus.CONVERGED
            break

    if not state.trace:
        with torch.no_grad():
            j, j_opt, batch = batch_cost(source, draw(), gate, model, 0.0, n_steps, scheme)
        state.trace.append(
            ProgressRecord(
                iter=state.iteration,
                j=float(j),
                j_opt=float(j_opt),
                mean_duration=float(batch.durations.mean()),
                wall_time=time.perf_counter() - start,
                lr=optimizer.param_groups[0]["lr"],
                mu_active=state.mu_active,
                stage=stage,
            )
        )
    if checkpoint_path is not None:
        _save_checkpoint(checkpoint_path, source, gate, interval, optimizer, scheduler, state, rng)
    return IntervalResult(
        interval=interval,
        net=source,
        status=status,
        iterations=state.iteration,
        trace=state.trace,
        losses=state.losses,
        stage=stage,
    )


def train_interval(
    net: ChainedNetwork,
    interval: Interval,
    cfg: TrainConfig,
    sys: AtomSystem,
    gate: GateKind,
    rng: np.random.Generator | None = None,
    model: HamiltonianModel | None = None,
    **kwargs,
) -> IntervalResult:
    """Train ``net`` on fresh uniform angle batches from ``interval``."""
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    model = training_model(gate, sys) if model is None else model
    return optimize(
        net,
        lambda: sample_angles(interval, cfg.batch_m, rng),
        gate,
        model,
        cfg,
        interval,
        rng,
        **kwargs,
    )


def train_family(
    gate: GateKind,
    cfg: TrainConfig,
    sys: AtomSystem,
    output_dir: str | Path | None = None,
    resume: bool = False,
    stage: str = "main",
    init: dict[Interval, nn.Module] | None = None,
    n_steps: int | None = None,
    scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
) -> TrainRun:
    """Train one network per interval.

    The interval ending at pi starts from random weights; every other interval
    is warm-started from its converged neighbour on the pi side. ``init``
    supplies explicit starting weights per interval instead.
    """
    intervals = resolve_intervals(gate, cfg)
    model = training_model(gate, sys)
    out = Path(output_dir) / stage if output_dir is not None else None
    started = time.perf_counter()
    stage_log = [f"{stage}: {len(intervals)} intervals, B={sys.blockade_b}, gamma={sys.gamma:.3e}"]

    results: dict[int, IntervalResult] = {}
    previous: nn.Module | None = None
    for index in reversed(range(len(intervals))):
        interval = intervals[index]
        net = new_network(gate, cfg)
        if init is not None and interval in init:
            net.load_state_dict(init[interval].state_dict())
            origin = "initial guess"
        elif previous is not None:
            net.load_state_dict(previous.state_dict())
            origin = "warm start"
        else:
            origin = "random init"

        done = _load_completed(out, index, interval, stage) if resume else None
        if done is not None:
            results[index] = done
            previous = results[index].net
            stage_log.append(f"{stage}: interval {index} loaded from previous run")
            continue

        logger.info("[%s] interval %d (%.4f, %.4f] from %s", stage, index, interval.low, interval.high, origin)
        result = train_interval(
            net,
            interval,
            cfg,
            sys,
            gate,
            rng=np.random.default_rng([cfg.seed, index]),
            model=model,
            stage=stage,
            progress_path=out / PROGRESS_NAME if out else None,
            checkpoint_path=out / "checkpoints" / f"{interval_filename(index)}.ckpt" if out else None,
            resume=resume,
            n_steps=n_steps,
            scheme=scheme,
        )
        results[index] = result
        previous = result.net
        stage_log.append(
            f"{stage}: interval {index} {result.status.value} after {result.iterations} iterations"
            f" (J={result.final.j:.3e}, <T>={result.final.mean_duration:.4f})"
        )
        if out is not None:
            save_network(out / interval_filename(index), result.net, gate, interval)
            write_model(out / f"{interval_filename(index)}.done.json", result.summary(interval_filename(index)))

    run = TrainRun(
        gate=gate,
        seed=cfg.seed,
        results=[results[i] for i in range(len(intervals))],
        wall_time=time.perf_counter() - started,
        stage_log=stage_log,
    )
    run.stages[stage] = run.results
    if out is not None:
        save_family(out, run.family)
        write_model(out / SUMMARY_NAME, run.summary())
    return run


def _load_completed(out: Path | None, index: int, interval: Interval, stage: str) -> IntervalResult | None:
    """Result of an interval finished by an earlier run, or None."""
    if out is None:
        return None
    marker = out / f"{interval_filename(index)}.done.json"
    weights = out / interval_filename(index)
    if not (marker.exists() and weights.exists()):
        return None
    summary = IntervalSummary.model_validate_json(marker.read_text(encoding="utf-8"))
    net, _ = load_network(weights)
    record = ProgressRecord(
        iter=summary.iterations,
        j=summary.final_j,
        j_opt=summary.final_j_opt,
        mean_duration=summary.mean_duration,
        wall_time=0.0,
        lr=0.0,
        mu_active=False,
        stage=stage,
    )
    return IntervalResult(
        interval=interval,
        net=net,
        status=summary.status,
        iterations=summary.iterations,
        trace=[record],
        losses=[],
        stage=stage,
    )


def two_stage_blockade(
    gate: GateKind,
    cfg: TrainConfig,
    sys: AtomSystem,
    output_dir: str | Path | None = None,
    resume: bool = False,
    n_steps: int | None = None,
    scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
) -> TrainRun:
    """Train under perfect blockade, then retrain the same weights at ``cfg.eval_b``.

    Both stages are then evaluated at ``cfg.eval_b`` so the run reports how much
    blockade infidelity the finite stage removed.
    """
    if gate is not GateKind.C2P:
        raise DomainError("The blockade curriculum is defined for the c2p gate")
    started = time.perf_counter()
    first = train_family(
        gate,
        cfg,
        sys.with_overrides(blockade_b=math.inf),
        output_dir,
        resume=resume,
        stage="infinite",
        n_steps=n_steps,
        scheme=scheme,
    )
    second = train_family(
        gate,
        cfg,
        sys.with_overrides(blockade_b=cfg.eval_b),
        output_dir,
        resume=resume,
        stage="finite",
        init={result.interval: result.net for result in first.results},
        n_steps=n_steps,
        scheme=scheme,
    )
    run = TrainRun(
        gate=gate,
        seed=cfg.seed,
        results=second.results,
        wall_time=time.perf_counter() - started,
        stage_log=first.stage_log + second.stage_log,
        stages={"infinite": first.results, "finite": second.results},
    )
    run.stage_reports = evaluate_stages(gate, run.stages, cfg, sys, n_steps=n_steps, scheme=scheme)
    infinite, finite = run.stage_reports["infinite"], run.stage_reports["finite"]
    run.stage_log.append(
        f"curriculum at B={cfg.eval_b}: <(1-F)_int> infinite={infinite.mean_infid_blockade:.3e}"
        f" finite={finite.mean_infid_blockade:.3e}, <T> finite={finite.mean_duration:.4f}"
    )
    run.wall_time = time.perf_counter() - started
    if output_dir is not None:
        for stage, report in run.stage_reports.items():
            write_model(Path(output_dir) / STAGE_REPORT_NAME.format(stage), report)
        write_model(Path(output_dir) / SUMMARY_NAME, run.summary())
    return run


def evaluate_stages(
    gate: GateKind,
    stages: dict[str, list[IntervalResult]],
    cfg: TrainConfig,
    sys: AtomSystem,
    n_steps: int | None = None,
    scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
) -> dict[str, EvalReport]:
    """Infidelity decomposition of every stage family at the finite blockade ``cfg.eval_b``."""
    eval_sys = sys.with_overrides(blockade_b=cfg.eval_b)
    reports = {}
    for stage, results in stages.items():
        family = PulseFamily(gate, [(result.interval, result.net) for result in results])
        reports[stage] = evaluate_family(
            family,
            gate,
            eval_sys,
            n_samples=cfg.stage_eval_samples,
            seed=cfg.seed,
            n_steps=n_steps,
            scheme=scheme,
            theta_grid=None,
        )
        logger.info("Stage %s at B=%s: <(1-F)_int>=%.3e", stage, cfg.eval_b, reports[stage].mean_infid_blockade)
    return reports


@dataclass
class FixedAngleResult:
    pulse: PulseSpec
    fidelity: float
    report: FidelityReport
    run: IntervalResult


def fixed_angle_optimize(
    gate: GateKind,
    phi: float,
    cfg: TrainConfig,
    sys: AtomSystem,
    n_knots: int | None = None,
    initial_duration: float | None = None,
    n_steps: int | None = None,
    scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
    checkpoint_path: Path | None = None,
    initial: PulseSpec | None = None,
) -> FixedAngleResult:
    """Optimize knots, duration and correction angle directly for one angle.

    ``initial`` warm-starts from an earlier pulse, e.g. one optimized under
    perfect blockade. ``fidelity`` is the trace fidelity under the training
    model (decay included when ``sys.gamma`` > 0).
    """
    if not 0.0 < phi <= math.pi:
        raise DomainError(f"Gate angle must lie in (0, pi], got {phi}")
    pulse_net = FixedAnglePulse(
        t_bound=t_bound_for(gate, cfg),
        n_knots=n_knots or (len(initial.knots) if initial is not None else cfg.n_knots),
        delta_bound=cfg.delta_bound,
        initial_duration=initial_duration,
        seed=cfg.seed,
    )
    if initial is not None:
        pulse_net.warm_start(initial)
    phis = torch.tensor([phi], dtype=torch.float64)
    run = optimize(
        pulse_net,
        lambda: phis,
        gate,
        training_model(gate, sys),
        cfg,
        Interval(0.0, phi),
        np.random.default_rng(cfg.seed),
        stage="fixed",
        checkpoint_path=checkpoint_path,
        n_steps=n_steps,
        scheme=scheme,
    )
    with torch.no_grad():
        pulse = pulse_net(phis).specs(phis)[0]
    report = infidelity_decomposition(pulse, gate, sys, n_steps=n_steps, scheme=scheme)
    logger.info(
        "Fixed-angle %s phi=%.4f: T=%.4f  1-F=%.3e", gate.value, phi, pulse.duration, report.infid_total
    )
    return FixedAngleResult(pulse=pulse, fidelity=1.0 - report.infid_total, report=report, run=run)
