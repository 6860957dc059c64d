"""Pydantic schemas for reports, file formats and API request/response models."""

import math
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field, model_validator

from app.models.physics import GateKind

WEIGHTS_FORMAT_VERSION = 1
PULSE_FORMAT_VERSION = 1
REPORT_FORMAT_VERSION = 1


class FitModel(str, Enum):
    """Pulse-time models."""

    ARCSINH = "arcsinh"
    POLY2 = "poly2"


class TrainStatus(str, Enum):
    """How an interval's training stopped."""

    CONVERGED = "converged"
    MAX_ITERS = "max_iters"


class FidelityReport(BaseModel):
    """Infidelity decomposition of one pulse.

    ``infid_decay`` = F - F_decay and ``infid_blockade`` = F_inf - F_fin are
    differences of fidelities; the blockade term may come out marginally
    negative for pulses optimized at finite blockade.
    """

    infid_total: float = Field(..., ge=0, le=1, description="1 - F with decay at finite B")
    infid_decay: float = Field(..., description="F - F_decay")
    infid_blockade: float = Field(..., description="F_inf - F_fin")
    infid_haar: float = Field(..., ge=0, le=1, description="1 - Haar-averaged fidelity")
    theta_c_used: float = Field(..., description="Correction angle applied")


class EvalRecord(BaseModel):
    """One evaluated angle."""

    phi: float = Field(..., gt=0, le=math.pi + 1e-12, description="Gate angle")
    duration: float = Field(..., ge=0, description="Pulse duration (1/omega_max)")
    infid_total: float = Field(..., description="1 - F")
    infid_decay: float = Field(..., description="(1 - F)_r")
    infid_blockade: float = Field(..., description="(1 - F)_int")
    infid_haar: float = Field(..., description="1 - F'")
    theta_c: float = Field(..., description="Trained correction angle")
    theta_c_grid: float | None = Field(default=None, description="Grid-maximizing correction angle")
    infid_grid: float | None = Field(default=None, description="1 - F at the grid correction angle")


class EvalReport(BaseModel):
    """Domain-averaged evaluation of a pulse family."""

    format_version: int = Field(default=REPORT_FORMAT_VERSION)
    gate: GateKind = Field(..., description="Evaluated gate")
    blockade_b: float = Field(..., description="Blockade strength used")
    gamma: float = Field(..., description="Decay rate used")
    seed: int = Field(default=0, description="Sampling seed")
    n_samples: int = Field(..., ge=1, description="Number of sampled angles")
    records: list[EvalRecord] = Field(default_factory=list, description="Per-angle records")
    mean_infid_total: float = Field(default=0.0)
    mean_infid_decay: float = Field(default=0.0)
    mean_infid_blockade: float = Field(default=0.0)
    mean_infid_haar: float = Field(default=0.0)
    mean_duration: float = Field(default=0.0)
    warnings: list[str] = Field(default_factory=list, description="Non-fatal findings")

    @model_validator(mode="after")
    def _fill_means(self) -> "EvalReport":
        if len(self.records) != self.n_samples:
            raise ValueError(f"Expected {self.n_samples} records, got {len(self.records)}")
        count = len(self.records)
        self.mean_infid_total = sum(r.infid_total for r in self.records) / count
        self.mean_infid_decay = sum(r.infid_decay for r in self.records) / count
        self.mean_infid_blockade = sum(r.infid_blockade for r in self.records) / count
        self.mean_infid_haar = sum(r.infid_haar for r in self.records) / count
        self.mean_duration = sum(r.duration for r in self.records) / count
        return self


class FitResult(BaseModel):
    """Least-squares fit of pulse duration against angle."""

    model: FitModel = Field(..., description="Fitted model")
    params: list[float] = Field(..., description="(a, b) for arcsinh, (a, b, c) for poly2")
    residual_norm: float = Field(..., ge=0, description="Euclidean norm of residuals")
    r_squared: float = Field(..., le=1.0 + 1e-12, description="Coefficient of determination")
    n_points: int = Field(..., ge=1, description="Number of fitted points")


class PulseHeader(BaseModel):
    """Header of an exported pulse."""

    format_version: int = Field(default=PULSE_FORMAT_VERSION)
    gate: GateKind
    phi: float = Field(..., gt=0, le=math.pi + 1e-12)
    duration: float = Field(..., ge=0, description="Duration in 1/omega_max")
    duration_us: float = Field(..., ge=0, description="Duration in microseconds")
    theta_c: float = Field(..., description="Correction angle (rad)")
    rabi_frequency_mhz: float = Field(..., gt=0, description="omega_max / 2 pi in MHz")
    delta_bound: float = Field(..., gt=0, description="Detuning bound in omega_max units")


class PulseFile(BaseModel):
    """Detuning waveform sampled on a uniform grid, in both unit systems."""

    header: PulseHeader
    times: list[float] = Field(..., min_length=2, description="Time grid (1/omega_max)")
    times_us: list[float] = Field(..., min_length=2, description="Time grid (us)")
    detuning: list[float] = Field(..., min_length=2, description="Detuning (omega_max)")
    detuning_mhz: list[float] = Field(..., min_length=2, description="Detuning / 2 pi (MHz)")

    @model_validator(mode="after")
    def _check_grid(self) -> "PulseFile":
        n = len(self.times)
        if not (len(self.times_us) == len(self.detuning) == len(self.detuning_mhz) == n):
            raise ValueError("All pulse columns must have the same length")
        if self.header.duration > 0 and any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("Time grid must be strictly increasing")
        if any(abs(d) >= self.header.delta_bound for d in self.detuning):
            raise ValueError("Detuning samples exceed the bound")
        return self


class TensorEntry(BaseModel):
    name: str
    shape: list[int]


class WeightsHeader(BaseModel):
    """Header of a weights container."""

    model_config = ConfigDict(extra="forbid")

    format_version: int = Field(default=WEIGHTS_FORMAT_VERSION)
    kind: str = Field(default="chained", description="'chained' or 'fixed'")
    gate: GateKind
    interval: tuple[float, float] = Field(..., description="Angle interval (low, high]")
    arch: tuple[int, int, int, int] | None = Field(default=None, description="(m_L^T, m_N^T, m_L^C, m_N^C)")
    n_knots: int = Field(..., ge=2)
    delta_bound: float = Field(..., gt=0)
    t_bound: float = Field(..., gt=0)
    correction_head: bool = Field(default=True)
    tensors: list[TensorEntry] = Field(default_factory=list)


class ProgressRecord(BaseModel):
    """One line of the training progress log."""

    iter: int
    j: float = Field(..., description="Mean infidelity of the batch")
    j_opt: float = Field(..., description="Time-penalized cost")
    mean_duration: float
    wall_time: float = Field(..., description="Seconds since the run started")
    lr: float
    mu_active: bool
    stage: str = Field(default="main")


class IntervalSummary(BaseModel):
    """Outcome of training one interval."""

    interval: tuple[float, float]
    status: TrainStatus
    iterations: int
    final_j: float
    final_j_opt: float
    mean_duration: float
    weights_file: str | None = None


class StageEvaluation(BaseModel):
    """Domain averages of one curriculum stage evaluated at the finite blockade."""

    report: str = Field(..., description="Evaluation report file next to the summary")
    blockade_b: float
    n_samples: int
    mean_infid_total: float
    mean_infid_decay: float
    mean_infid_blockade: float
    mean_duration: float

    @classmethod
    def from_report(cls, report: EvalReport, filename: str) -> "StageEvaluation":
        return cls(
            report=filename,
            blockade_b=report.blockade_b,
            n_samples=report.n_samples,
            mean_infid_total=report.mean_infid_total,
            mean_infid_decay=report.mean_infid_decay,
            mean_infid_blockade=report.mean_infid_blockade,
            mean_duration=report.mean_duration,
        )


class TrainRunSummary(BaseModel):
    """On-disk summary of a training run."""

    gate: GateKind
    seed: int
    wall_time: float
    intervals: list[IntervalSummary]
    stage_log: list[str] = Field(default_factory=list)
    stage_evaluations: dict[str, StageEvaluation] = Field(default_factory=dict)

    @property
    def converged(self) -> bool:
        return all(item.status is TrainStatus.CONVERGED for item in self.intervals)


class FidelityRequest(BaseModel):
    """Request model for evaluating a sampled pulse."""

    gate: GateKind = Field(..., description="Target gate")
    phi: float = Field(..., gt=0, le=math.pi, description="Gate angle")
    duration: float = Field(..., ge=0, description="Pulse duration (1/omega_max)")
    detuning: list[float] = Field(..., min_length=2, description="Uniform detuning samples (omega_max)")
    theta_c: float = Field(default=0.0, description="Correction angle")
    blockade_b: float = Field(default=21.1, gt=0, description="Blockade strength")
    gamma: float = Field(default=0.0, ge=0, description="Decay rate (omega_max units)")


class FitRequest(BaseModel):
    """Request model for a pulse-time fit."""

    phis: list[float] = Field(..., min_length=4)
    durations: list[float] = Field(..., min_length=4)
    model: FitModel = Field(default=FitModel.ARCSINH)


class RatioRequest(BaseModel):
    """Request model for the decomposition-time ratio."""

    preset: GateKind | None = Field(default=None, description="Built-in gate-count preset")
    gate_counts: list[tuple[int, float]] | None = Field(
        default=None, description="(count, duration) pairs of two-qubit gates"
    )
    native_time: float | None = Field(default=None, gt=0, description="Average native pulse time")


class RatioResponse(BaseModel):
    decomposition_time: float
    native_time: float
    ratio: float


class ErrorResponse(BaseModel):
    """Error response model."""

    success: bool = Field(default=False)
    error: str = Field(..., description="Error message")
    details: str | None = Field(default=None, description="Additional error details")


class HealthResponse(BaseModel):
    """Health check response."""

    status: str = Field(default="healthy")
    version: str = Field(default="1.0.0")


class FamilyMember(BaseModel):
    interval: tuple[float, float]
    file: str


class FamilyManifest(BaseModel):
    """Index of a pulse-family weights directory."""

    format_version: int = Field(default=WEIGHTS_FORMAT_VERSION)
    gate: GateKind
    members: list[FamilyMember] = Field(default_factory=list)
