"""Domain-averaged evaluation, pulse-time fits and decomposition-time ratios."""

import logging
import math
from pathlib import Path

import numpy as np
import torch
from scipy.integrate import quad
from scipy.optimize import curve_fit

from app.core.exceptions import DomainError, FitError
from app.models.physics import AtomSystem, GateKind, GateTarget, StepScheme
from app.models.schemas import EvalRecord, EvalReport, FitModel, FitResult
from app.services.ansatz import Interval, PulseFamily, PulseSource
from app.services.fidelity import THETA_GRID_POINTS, best_correction_angle, decompose_batch
from app.utils.helpers import write_jsonl, write_model

logger = logging.getLogger(__name__)

DEFAULT_SAMPLES = 200
C1Z_TIME = 7.612
# Gate-count presets: number of C_1Z-equivalent two-qubit gates per decomposition.
DECOMPOSITION_PRESETS = {GateKind.C1P: 2, GateKind.C2P: 8}
# Published pulse-time fits of trained families, used for the native reference times.
REFERENCE_FITS = {
    GateKind.C1P: (FitModel.ARCSINH, (1.07, 275.86)),
    GateKind.C2P: (FitModel.POLY2, (-0.70, 5.24, 7.44)),
}
CSV_COLUMNS = ("phi", "duration", "infid_total", "infid_decay", "infid_blockade", "infid_haar", "theta_c")


def evaluate_family(
    source: PulseSource,
    gate: GateKind,
    sys: AtomSystem,
    n_samples: int = DEFAULT_SAMPLES,
    seed: int = 0,
    n_steps: int | None = None,
    scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
    theta_grid: int | None = THETA_GRID_POINTS,
    batch_size: int = 50,
) -> EvalReport:
    """Evaluate ``n_samples`` uniform angles on (0, pi] and decompose their infidelities.

    Raises:
        CoverageError: If ``source`` is a family that does not cover (0, pi].
    """
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    if isinstance(source, PulseFamily):
        source.require_coverage()

    rng = np.random.default_rng(seed)
    phis = torch.as_tensor(math.pi * (1.0 - rng.random(n_samples)), dtype=torch.float64)

    records: list[EvalRecord] = []
    for start in range(0, n_samples, batch_size):
        chunk = phis[start : start + batch_size]
        with torch.no_grad():
            batch = source(chunk)
        result = decompose_batch(gate, chunk, batch, sys, n_steps=n_steps, scheme=scheme)
        for i, report in enumerate(result.reports()):
            phi = float(chunk[i])
            theta_grid_best = infid_grid = None
            if theta_grid:
                theta_grid_best, fid = best_correction_angle(
                    result.block_decay[i], GateTarget(k=gate.k, phi=min(phi, math.pi)), theta_grid
                )
                infid_grid = 1.0 - fid
            records.append(
                EvalRecord(
                    phi=phi,
                    duration=float(batch.durations[i]),
                    infid_total=report.infid_total,
                    infid_decay=report.infid_decay,
                    infid_blockade=report.infid_blockade,
                    infid_haar=report.infid_haar,
                    theta_c=report.theta_c_used,
                    theta_c_grid=theta_grid_best,
                    infid_grid=infid_grid,
                )
            )
        logger.debug("Evaluated %d/%d samples", min(start + batch_size, n_samples), n_samples)

    intervals = source.intervals if isinstance(source, PulseFamily) else None
    warnings = monotonicity_warnings(records, intervals)
    report = EvalReport(
        gate=gate,
        blockade_b=sys.blockade_b,
        gamma=sys.gamma,
        seed=seed,
        n_samples=n_samples,
        records=records,
        warnings=warnings,
    )
    logger.info(
        "%s over %d samples: <1-F>=%.3e  <(1-F)_r>=%.3e  <(1-F)_int>=%.3e  <1-F'>=%.3e",
        gate.value,
        n_samples,
        report.mean_infid_total,
        report.mean_infid_decay,
        report.mean_infid_blockade,
        report.mean_infid_haar,
    )
    return report


def monotonicity_warnings(
    records: list[EvalRecord], intervals: list[Interval] | None = None, tol: float = 1e-9
) -> list[str]:
    """Places where T_phi decreases with phi; logged, never raised."""
    ordered = sorted(records, key=lambda record: record.phi)

    def interval_of(phi: float) -> int | None:
        if intervals is None:
            return None
        for index, interval in enumerate(intervals):
            if interval.low < phi <= interval.high + 1e-12:
                return index
        return None

    warnings = []
    for left, right in zip(ordered, ordered[1:]):
        if right.duration + tol >= left.duration:
            continue
        junction = interval_of(left.phi) != interval_of(right.phi)
        where = "at an interval junction" if junction else "within an interval"
        message = (
            f"T_phi decreases {where}: T({left.phi:.5f})={left.duration:.5f}"
            f" > T({right.phi:.5f})={right.duration:.5f}"
        )
        logger.warning(message)
        warnings.append(message)
    return warnings


def write_report(report: EvalReport, directory: str | Path) -> dict[str, Path]:
    """Write the summary document, the record lines and the plot columns."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = {
        "report": write_model(directory / "report.json", report),
        "records": write_jsonl(directory / "records.jsonl", report.records),
        "plot": directory / "plot_data.csv",
    }
    columns = np.array(
        [[getattr(record, name) for name in CSV_COLUMNS] for record in report.records], dtype=np.float64
    )
    np.savetxt(paths["plot"], columns, delimiter=",", header=",".join(CSV_COLUMNS), comments="", fmt="%.10e")
    return paths


def load_report(path: str | Path) -> EvalReport:
    """Read ``report.json``, or the one inside a report directory."""
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    return EvalReport.model_validate_json(path.read_text(encoding="utf-8"))


def arcsinh_model(phi: np.ndarray, a: float, b: float) -> np.ndarray:
    return a * np.arcsinh(b * phi)


def poly2_model(phi: np.ndarray, a: float, b: float, c: float) -> np.ndarray:
    return a * phi**2 + b * phi + c


def _arcsinh_guess(phis: np.ndarray, durations: np.ndarray) -> tuple[float, float]:
    """Large-argument form a*ln(phi) + a*ln(2b) fitted linearly."""
    a0, c0 = np.polyfit(np.log(phis), durations, 1)
    if not np.isfinite(a0) or a0 <= 0 or not np.isfinite(math.exp(min(c0 / a0, 700.0))):
        return float(np.max(durations) / np.arcsinh(np.max(phis))), 1.0
    return float(a0), float(math.exp(min(c0 / a0, 700.0)) / 2.0)


def fit_times(phis: list[float] | np.ndarray, durations: list[float] | np.ndarray, model: FitModel) -> FitResult:
    """Least-squares fit of T_phi against phi.

    Raises:
        FitError: For fewer than four points, repeated angles, or a failed fit.
    """
    x = np.asarray(phis, dtype=np.float64)
    y = np.asarray(durations, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise FitError("Angles and durations must be 1-D arrays of equal length")
    if x.size < 4:
        raise FitError(f"A fit needs at least 4 points, got {x.size}")
    if np.unique(x).size != x.size:
        raise FitError("Angles must be distinct")

    if model is FitModel.POLY2:
        params = np.polyfit(x, y, 2)
        predicted = poly2_model(x, *params)
    else:
        if np.any(x <= 0):
            raise FitError("The arcsinh model needs positive angles")
        try:
            params, _ = curve_fit(arcsinh_model, x, y, p0=_arcsinh_guess(x, y), method="lm", maxfev=20000)
        except (RuntimeError, ValueError) as e:
            raise FitError("arcsinh fit did not converge", details=str(e)) from e
        predicted = arcsinh_model(x, *params)

    if not np.all(np.isfinite(params)):
        raise FitError("Fit produced non-finite parameters", details=params.tolist())
    residuals = y - predicted
    ss_res = float(residuals @ residuals)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r_squared = 1.0 - ss_res / ss_tot if ss_tot > 0 else (1.0 if ss_res <= 1e-24 else 0.0)
    return FitResult(
        model=model,
        params=[float(p) for p in params],
        residual_norm=math.sqrt(ss_res),
        r_squared=min(r_squared, 1.0),
        n_points=int(x.size),
    )


def decomposition_time(gate_counts: list[tuple[int, float]]) -> float:
    """Total two-qubit gate time of a decomposition; single-qubit gates are not counted."""
    if not gate_counts:
        raise DomainError("A decomposition needs at least one two-qubit gate")
    total = 0.0
    for count, duration in gate_counts:
        if count < 0 or duration <= 0:
            raise DomainError(f"Invalid gate entry ({count}, {duration})")
        total += count * duration
    return total


def decomposition_ratio(t_two_qubit_total: float, t_native_avg: float) -> float:
    """R_k = T_d / T_n."""
    if t_two_qubit_total <= 0 or t_native_avg <= 0:
        raise DomainError(
            "Both times must be positive",
            details={"decomposition": t_two_qubit_total, "native": t_native_avg},
        )
    return t_two_qubit_total / t_native_avg


def reference_native_time(gate: GateKind) -> float:
    """Mean over (0, pi] of the published pulse-time fit for ``gate``."""
    model, params = REFERENCE_FITS[gate]
    func = arcsinh_model if model is FitModel.ARCSINH else poly2_model
    integral, _ = quad(lambda phi: func(phi, *params), 0.0, math.pi, limit=200)
    return integral / math.pi


def preset_ratio(gate: GateKind, c1z_time: float = C1Z_TIME, native_time: float | None = None) -> tuple[float, float, float]:
    """(T_d, T_n, R_k) of the built-in decomposition of ``gate``."""
    t_d = decomposition_time([(DECOMPOSITION_PRESETS[gate], c1z_time)])
    t_n = reference_native_time(gate) if native_time is None else native_time
    return t_d, t_n, decomposition_ratio(t_d, t_n)
