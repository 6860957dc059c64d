"""Neural-network pulse ansatz.

A chained pair of feedforward networks maps a gate angle to a pulse: N_T gives
the duration, N_C takes (angle, duration) and gives detuning knot values plus a
correction angle. Knots sit uniformly on [0, T] and are joined by a natural cubic
spline, so every pulse is smooth and bounded.
"""

import logging
import math
from dataclasses import dataclass
from typing import NamedTuple, Protocol

import numpy as np
import torch
from scipy.interpolate import CubicSpline
from torch import nn

from app.core.exceptions import CoverageError, DomainError
from app.models.physics import GateKind

logger = logging.getLogger(__name__)

DEFAULT_KNOTS = 48
DELTA_BOUND = 2.5
T_BOUND_FACTOR = 1.2
SIGMOID_MARGIN = 1e-12
# Time-optimal C_kZ durations in units of 1/omega_max.
T_OPT_PI = {GateKind.C1P: 7.612, GateKind.C2P: 16.44}
DEFAULT_ARCH = {GateKind.C1P: (3, 45, 10, 300), GateKind.C2P: (4, 45, 20, 300)}

_SPLINE_CACHE: dict[tuple[int, bytes], torch.Tensor] = {}


class Architecture(NamedTuple):
    """Layer counts (including input and output) and hidden widths of N_T and N_C."""

    t_layers: int
    t_width: int
    c_layers: int
    c_width: int


@dataclass(frozen=True, eq=False)
class PulseSpec:
    """A single bounded pulse for one gate angle."""

    phi: float
    duration: float
    knots: np.ndarray
    theta_c: float
    delta_bound: float = DELTA_BOUND

    def waveform(self, t: float | np.ndarray) -> float | np.ndarray:
        return waveform(self, t)


@dataclass
class PulseBatch:
    """Differentiable pulses for M angles."""

    durations: torch.Tensor
    knots: torch.Tensor
    theta_c: torch.Tensor
    delta_bound: float = DELTA_BOUND

    def sampler(self):
        return knot_sampler(self.knots, self.delta_bound)

    def specs(self, phis: torch.Tensor) -> list[PulseSpec]:
        return [
            PulseSpec(
                phi=float(phi),
                duration=float(duration),
                knots=knots.detach().cpu().numpy().copy(),
                theta_c=float(theta),
                delta_bound=self.delta_bound,
            )
            for phi, duration, knots, theta in zip(
                phis, self.durations.detach(), self.knots.detach(), self.theta_c.detach()
            )
        ]


class PulseSource(Protocol):
    """Anything that turns gate angles into bounded pulses."""

    n_knots: int
    delta_bound: float
    t_bound: float

    def __call__(self, phis: torch.Tensor) -> PulseBatch: ...


def check_angles(phis: torch.Tensor, low: float = 0.0, high: float = math.pi) -> None:
    """Raise DomainError unless every angle lies in (low, high]."""
    if phis.numel() == 0:
        return
    if torch.any(phis <= low) or torch.any(phis > high + 1e-12):
        raise DomainError(
            f"Gate angles must lie in ({low:.6g}, {high:.6g}]",
            details={"min": float(phis.min()), "max": float(phis.max())},
        )


def spline_matrix(n_knots: int, points: torch.Tensor) -> torch.Tensor:
    """Matrix S with S @ knots = natural cubic spline through uniform knots at ``points``.

    Knots sit at s = 0, 1/(K-1), ..., 1 and ``points`` are normalized times in [0, 1].
    The spline is linear in its data, so S has shape (P, K).
    """
    if n_knots < 2:
        raise ValueError("A spline needs at least two knots")
    key = (n_knots, points.detach().cpu().numpy().tobytes())
    if key not in _SPLINE_CACHE:
        abscissae = np.linspace(0.0, 1.0, n_knots)
        basis = CubicSpline(abscissae, np.eye(n_knots), bc_type="natural")
        _SPLINE_CACHE[key] = torch.as_tensor(basis(points.detach().cpu().numpy()), dtype=torch.float64)
    return _SPLINE_CACHE[key]


def _open_bound(delta_bound: float) -> float:
    return delta_bound * (1.0 - 1e-9)


def knot_sampler(knots: torch.Tensor, delta_bound: float = DELTA_BOUND):
    """Control sampler for knot values of shape (M, K).

    Spline overshoot between knots is clipped just inside the detuning bound.
    """
    limit = _open_bound(delta_bound)

    def sample(points: torch.Tensor) -> torch.Tensor:
        values = knots @ spline_matrix(knots.shape[-1], points).T
        return torch.clamp(values, -limit, limit)

    return sample


def waveform(spec: PulseSpec, t: float | np.ndarray) -> float | np.ndarray:
    """Detuning of ``spec`` at time(s) ``t`` in [0, duration]."""
    times = np.asarray(t, dtype=np.float64)
    tol = 1e-12 * max(1.0, spec.duration)
    if np.any(times < -tol) or np.any(times > spec.duration + tol):
        raise DomainError(f"Time outside [0, {spec.duration}]", details={"t": times.tolist()})
    if spec.duration == 0.0:
        values = np.full_like(times, spec.knots[0])
    else:
        abscissae = np.linspace(0.0, spec.duration, len(spec.knots))
        values = CubicSpline(abscissae, spec.knots, bc_type="natural")(times)
    limit = _open_bound(spec.delta_bound)
    values = np.clip(values, -limit, limit)
    return float(values) if values.ndim == 0 else values


def _open_sigmoid(raw: torch.Tensor) -> torch.Tensor:
    """Sigmoid kept strictly inside (0, 1); float64 saturates to 0 or 1 for large |raw|."""
    return torch.clamp(torch.sigmoid(raw), SIGMOID_MARGIN, 1.0 - SIGMOID_MARGIN)


def bound_duration(raw: torch.Tensor, t_bound: float) -> torch.Tensor:
    return t_bound * _open_sigmoid(raw)


def bound_detuning(raw: torch.Tensor, delta_bound: float) -> torch.Tensor:
    return delta_bound * (2.0 * _open_sigmoid(raw) - 1.0)


def bound_angle(raw: torch.Tensor) -> torch.Tensor:
    return math.pi * (2.0 * _open_sigmoid(raw) - 1.0)


class MLP(nn.Module):
    """Fully connected network with ReLU hidden layers.

    ``n_layers`` counts the input and output layers, so there are
    ``n_layers - 1`` affine maps. The output is the pre-activation of the
    sigmoid output layer; the bounding maps apply the sigmoid.
    """

    def __init__(self, input_dim: int, output_dim: int, n_layers: int, width: int) -> None:
        super().__init__()
        if n_layers < 2:
            raise ValueError("An MLP needs at least an input and an output layer")
        dims = [input_dim] + [width] * (n_layers - 2) + [output_dim]
        layers: list[nn.Module] = []
        for i, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
            layers.append(nn.Linear(d_in, d_out, dtype=torch.float64))
            if i < len(dims) - 2:
                layers.append(nn.ReLU())
        self.layers = nn.Sequential(*layers)
        self.input_dim = input_dim
        self.output_dim = output_dim

    def reset_parameters(self, output_scale: float = 0.1) -> None:
        """Glorot-uniform weights, zero biases, shrunken output layer."""
        linears = [m for m in self.layers if isinstance(m, nn.Linear)]
        for layer in linears:
            nn.init.xavier_uniform_(layer.weight)
            nn.init.zeros_(layer.bias)
        with torch.no_grad():
            linears[-1].weight.mul_(output_scale)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.layers(x)


class ChainedNetwork(nn.Module):
    """N_T (angle -> duration) chained into N_C (angle, duration -> knots, correction)."""

    def __init__(
        self,
        arch: Architecture | tuple[int, int, int, int],
        t_bound: float,
        n_knots: int = DEFAULT_KNOTS,
        delta_bound: float = DELTA_BOUND,
        correction_head: bool = True,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.arch = Architecture(*arch)
        self.t_bound = float(t_bound)
        self.n_knots = n_knots
        self.delta_bound = float(delta_bound)
        self.correction_head = correction_head
        self.n_t = MLP(1, 1, self.arch.t_layers, self.arch.t_width)
        self.n_c = MLP(2, n_knots + int(correction_head), self.arch.c_layers, self.arch.c_width)
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.n_t.reset_parameters()
            self.n_c.reset_parameters()

    def forward(self, phis: torch.Tensor) -> PulseBatch:
        phis = torch.as_tensor(phis, dtype=torch.float64).reshape(-1)
        check_angles(phis)
        x = phis / math.pi
        durations = bound_duration(self.n_t(x[:, None]).squeeze(-1), self.t_bound)
        raw = self.n_c(torch.stack([x, durations / self.t_bound], dim=-1))
        knots = bound_detuning(raw[:, : self.n_knots], self.delta_bound)
        if self.correction_head:
            theta = bound_angle(raw[:, self.n_knots])
        else:
            theta = torch.zeros_like(phis)
        return PulseBatch(
            durations=durations, knots=knots, theta_c=theta, delta_bound=self.delta_bound
        )

    def pulse(self, phi: float) -> PulseSpec:
        """Evaluate one angle without building a graph."""
        phis = torch.tensor([phi], dtype=torch.float64)
        with torch.no_grad():
            return self(phis).specs(phis)[0]


class FixedAnglePulse(nn.Module):
    """Directly parametrized pulse for a single angle, through the same bounds."""

    def __init__(
        self,
        t_bound: float,
        n_knots: int = DEFAULT_KNOTS,
        delta_bound: float = DELTA_BOUND,
        initial_duration: float | None = None,
        seed: int = 0,
    ) -> None:
        super().__init__()
        self.t_bound = float(t_bound)
        self.n_knots = n_knots
        self.delta_bound = float(delta_bound)
        fraction = 0.8 if initial_duration is None else initial_duration / t_bound
        fraction = min(max(fraction, 1e-3), 1.0 - 1e-3)
        generator = torch.Generator().manual_seed(seed)
        self.raw_duration = nn.Parameter(torch.tensor(math.log(fraction / (1.0 - fraction)), dtype=torch.float64))
        self.raw_knots = nn.Parameter(0.1 * torch.randn(n_knots, generator=generator, dtype=torch.float64))
        self.raw_theta = nn.Parameter(torch.zeros((), dtype=torch.float64))

    def warm_start(self, spec: PulseSpec) -> None:
        """Set the raw parameters so that the pulse reproduces ``spec``."""
        if len(spec.knots) != self.n_knots:
            raise DomainError(f"Expected {self.n_knots} knots, got {len(spec.knots)}")
        duration = torch.tensor(spec.duration / self.t_bound, dtype=torch.float64)
        knots = torch.as_tensor(np.asarray(spec.knots), dtype=torch.float64) / self.delta_bound
        theta = torch.tensor(spec.theta_c / math.pi, dtype=torch.float64)
        with torch.no_grad():
            self.raw_duration.copy_(torch.logit(duration, eps=SIGMOID_MARGIN))
            self.raw_knots.copy_(torch.logit((knots + 1.0) / 2.0, eps=SIGMOID_MARGIN))
            self.raw_theta.copy_(torch.logit((theta + 1.0) / 2.0, eps=SIGMOID_MARGIN))

    def forward(self, phis: torch.Tensor) -> PulseBatch:
        phis = torch.as_tensor(phis, dtype=torch.float64).reshape(-1)
        check_angles(phis)
        m = phis.shape[0]
        duration = bound_duration(self.raw_duration, self.t_bound)
        knots = bound_detuning(self.raw_knots, self.delta_bound)
        theta = bound_angle(self.raw_theta)
        return PulseBatch(
            durations=duration.expand(m),
            knots=knots.expand(m, self.n_knots),
            theta_c=theta.expand(m),
            delta_bound=self.delta_bound,
        )

    def pulse(self, phi: float) -> PulseSpec:
        phis = torch.tensor([phi], dtype=torch.float64)
        with torch.no_grad():
            return self(phis).specs(phis)[0]


@dataclass(frozen=True)
class Interval:
    """Half-open angle interval (low, high]."""

    low: float
    high: float

    def __post_init__(self) -> None:
        if not self.high > self.low:
            raise DomainError(f"Empty interval ({self.low}, {self.high}]")

    def contains(self, phis: torch.Tensor) -> torch.Tensor:
        return (phis > self.low) & (phis <= self.high + 1e-12)

    @property
    def width(self) -> float:
        return self.high - self.low


def uniform_intervals(count: int, high: float = math.pi) -> list[Interval]:
    """Uniform partition of (0, high] into ``count`` intervals."""
    edges = np.linspace(0.0, high, count + 1)
    return [Interval(float(lo), float(hi)) for lo, hi in zip(edges[:-1], edges[1:])]


class PulseFamily:
    """Per-interval networks jointly covering (0, pi]."""

    def __init__(self, gate: GateKind, members: list[tuple[Interval, ChainedNetwork]]) -> None:
        if not members:
            raise CoverageError("A pulse family needs at least one network", details=[(0.0, math.pi)])
        self.gate = gate
        self.members = sorted(members, key=lambda member: member[0].low)

    @property
    def n_knots(self) -> int:
        return self.members[0][1].n_knots

    @property
    def delta_bound(self) -> float:
        return self.members[0][1].delta_bound

    @property
    def t_bound(self) -> float:
        return max(net.t_bound for _, net in self.members)

    @property
    def intervals(self) -> list[Interval]:
        return [interval for interval, _ in self.members]

    def missing_intervals(self, tol: float = 1e-9) -> list[tuple[float, float]]:
        """Gaps in the coverage of (0, pi]."""
        gaps = []
        cursor = 0.0
        for interval in self.intervals:
            if interval.low > cursor + tol:
                gaps.append((cursor, interval.low))
            cursor = max(cursor, interval.high)
        if cursor < math.pi - tol:
            gaps.append((cursor, math.pi))
        return gaps

    def require_coverage(self) -> None:
        gaps = self.missing_intervals()
        if gaps:
            raise CoverageError("Trained networks do not cover (0, pi]", details=gaps)

    def network_for(self, phi: float) -> ChainedNetwork:
        for interval, net in self.members:
            if interval.low < phi <= interval.high + 1e-12:
                return net
        raise CoverageError(f"No network covers angle {phi}", details=self.missing_intervals())

    def __call__(self, phis: torch.Tensor) -> PulseBatch:
        """Evaluate every angle with the network of its interval; order is preserved."""
        phis = torch.as_tensor(phis, dtype=torch.float64).reshape(-1)
        check_angles(phis)
        n_knots = self.members[0][1].n_knots
        durations = torch.zeros_like(phis)
        knots = torch.zeros(phis.shape[0], n_knots, dtype=torch.float64)
        theta = torch.zeros_like(phis)
        covered = torch.zeros_like(phis, dtype=torch.bool)
        for interval, net in self.members:
            mask = interval.contains(phis) & ~covered
            if not torch.any(mask):
                continue
            batch = net(phis[mask])
            durations = durations.index_put((mask,), batch.durations)
            knots = knots.index_put((mask,), batch.knots)
            theta = theta.index_put((mask,), batch.theta_c)
            covered |= mask
        if not torch.all(covered):
            raise CoverageError(
                "Angles outside the trained intervals",
                details=phis[~covered].tolist(),
            )
        return PulseBatch(
            durations=durations,
            knots=knots,
            theta_c=theta,
            delta_bound=self.members[0][1].delta_bound,
        )
