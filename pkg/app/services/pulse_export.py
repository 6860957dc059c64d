"""Export trained pulses to sampled waveform files and re-simulate them."""

import logging
import math
from pathlib import Path

import numpy as np
import torch
from pydantic import ValidationError
from scipy.interpolate import CubicSpline

from app.core.exceptions import DomainError, WeightsFormatError
from app.models.physics import AtomSystem, GateKind, StepScheme
from app.models.schemas import FidelityReport, PulseFile, PulseHeader
from app.services.ansatz import ChainedNetwork, PulseFamily, PulseSpec
from app.services.fidelity import decompose
from app.services.propagator import ControlSampler
from app.utils.helpers import write_model
from app.utils.units import detuning_to_mhz, time_to_us

logger = logging.getLogger(__name__)


def pulse_for(source: ChainedNetwork | PulseFamily, phi: float) -> PulseSpec:
    """Evaluate one angle on a single network or on the covering member of a family."""
    if not 0.0 < phi <= math.pi:
        raise DomainError(f"Gate angle must lie in (0, pi], got {phi}")
    net = source.network_for(phi) if isinstance(source, PulseFamily) else source
    return net.pulse(phi)


def export_pulse(
    pulse: PulseSpec,
    gate: GateKind,
    resolution: int,
    rabi_frequency_mhz: float = 10.0,
) -> PulseFile:
    """Sample ``pulse`` on ``resolution`` uniform intervals (``resolution + 1`` points)."""
    if resolution < 1:
        raise DomainError(f"Grid resolution must be at least 1, got {resolution}")
    times = np.linspace(0.0, pulse.duration, resolution + 1)
    detuning = np.asarray(pulse.waveform(times), dtype=np.float64)
    header = PulseHeader(
        gate=gate,
        phi=pulse.phi,
        duration=pulse.duration,
        duration_us=time_to_us(pulse.duration, rabi_frequency_mhz),
        theta_c=pulse.theta_c,
        rabi_frequency_mhz=rabi_frequency_mhz,
        delta_bound=pulse.delta_bound,
    )
    return PulseFile(
        header=header,
        times=times.tolist(),
        times_us=[time_to_us(t, rabi_frequency_mhz) for t in times],
        detuning=detuning.tolist(),
        detuning_mhz=[detuning_to_mhz(d, rabi_frequency_mhz) for d in detuning],
    )


def save_pulse(path: str | Path, pulse_file: PulseFile) -> Path:
    return write_model(path, pulse_file)


def load_pulse(path: str | Path) -> PulseFile:
    try:
        return PulseFile.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except ValidationError as e:
        raise WeightsFormatError(f"Invalid pulse file {path}", details=e.errors()) from e


def sampled_control(detuning: list[float] | np.ndarray) -> ControlSampler:
    """Control sampler interpolating uniform samples over normalized time."""
    values = np.asarray(detuning, dtype=np.float64)
    if values.ndim != 1 or values.size < 2:
        raise DomainError("A sampled waveform needs at least two points")
    if not np.all(np.isfinite(values)):
        raise DomainError("Detuning samples must be finite")
    spline = CubicSpline(np.linspace(0.0, 1.0, values.size), values)

    def sample(points: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(spline(points.numpy()), dtype=torch.float64)[None]

    return sample


def simulate_samples(
    gate: GateKind,
    phi: float,
    duration: float,
    detuning: list[float] | np.ndarray,
    theta_c: float,
    sys: AtomSystem,
    n_steps: int | None = None,
    scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
) -> FidelityReport:
    """Infidelity decomposition of a waveform given as uniform samples over [0, duration]."""
    if not 0.0 < phi <= math.pi:
        raise DomainError(f"Gate angle must lie in (0, pi], got {phi}")
    if duration < 0:
        raise DomainError("Pulse duration must be non-negative")
    result = decompose(
        gate,
        torch.tensor([phi], dtype=torch.float64),
        torch.tensor([duration], dtype=torch.float64),
        sampled_control(detuning),
        torch.tensor([theta_c], dtype=torch.float64),
        sys,
        n_steps=n_steps,
        scheme=scheme,
    )
    return result.reports()[0]


def simulate_pulse_file(
    pulse_file: PulseFile,
    sys: AtomSystem,
    n_steps: int | None = None,
    scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
) -> FidelityReport:
    """Re-simulate an exported pulse from its samples alone."""
    header = pulse_file.header
    return simulate_samples(
        header.gate,
        header.phi,
        header.duration,
        pulse_file.detuning,
        header.theta_c,
        sys,
        n_steps=n_steps,
        scheme=scheme,
    )
