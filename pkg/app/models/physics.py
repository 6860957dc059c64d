"""Physics parameter records: atom systems, controls, gate targets and time grids.

All quantities are in internal units: hbar = 1, frequencies in units of the
maximal Rabi frequency and times in units of its inverse.
"""

import math
from enum import Enum

from pydantic import BaseModel, ConfigDict, Field


class GateKind(str, Enum):
    """Parametrized phase gates with one or two control qubits."""

    C1P = "c1p"
    C2P = "c2p"

    @property
    def k(self) -> int:
        """Number of control qubits."""
        return 1 if self is GateKind.C1P else 2

    @property
    def n_atoms(self) -> int:
        """Number of atoms the gate acts on."""
        return self.k + 1

    @classmethod
    def from_k(cls, k: int) -> "GateKind":
        return cls.C1P if k == 1 else cls.C2P


class StepScheme(str, Enum):
    """Per-step propagator used by the time-ordered evolution."""

    MIDPOINT_EXPONENTIAL = "midpoint-exponential"
    RK4 = "rk4"


class BlockadeModel(str, Enum):
    """Which interaction model a Hamiltonian is built for."""

    FINITE = "finite"
    INFINITE = "infinite"


class AtomSystem(BaseModel):
    """Register of equidistant three-level atoms driven by one global laser."""

    model_config = ConfigDict(frozen=True)

    n_atoms: int = Field(..., ge=1, description="Number of atoms in the register")
    omega_max: float = Field(default=1.0, gt=0, description="Rabi amplitude (internal unit is 1)")
    blockade_b: float = Field(
        default=21.1,
        gt=0,
        description="Blockade strength B = V / omega_max; math.inf for perfect blockade",
    )
    gamma: float = Field(default=0.0, ge=0, description="Decay rate of the Rydberg state")
    equidistant: bool = Field(default=True, description="All pair interactions are equal")

    @property
    def infinite_blockade(self) -> bool:
        return math.isinf(self.blockade_b)

    @property
    def interaction(self) -> float:
        """Pair interaction energy V = B * omega_max."""
        return self.blockade_b * self.omega_max

    @property
    def dim(self) -> int:
        return 3**self.n_atoms

    def with_overrides(self, **updates: float | bool | int) -> "AtomSystem":
        """Return a validated copy with some fields replaced."""
        return AtomSystem.model_validate(self.model_dump() | updates)


class ControlValue(BaseModel):
    """Instantaneous laser controls."""

    model_config = ConfigDict(frozen=True)

    omega: float = Field(default=1.0, description="Rabi frequency")
    delta: float = Field(default=0.0, description="Detuning")


class GateTarget(BaseModel):
    """A C_kP gate at a given angle."""

    model_config = ConfigDict(frozen=True)

    k: int = Field(..., ge=1, le=2, description="Number of control qubits")
    phi: float = Field(..., gt=0, le=math.pi, description="Gate angle in (0, pi]")

    @property
    def n_atoms(self) -> int:
        return self.k + 1

    @property
    def dim(self) -> int:
        """Dimension of the computational block."""
        return 2 ** (self.k + 1)


class TimeGrid(BaseModel):
    """Uniform discretization of a pulse duration."""

    model_config = ConfigDict(frozen=True)

    duration: float = Field(..., ge=0, description="Pulse duration")
    n_steps: int = Field(..., ge=8, description="Number of propagation steps")
    scheme: StepScheme = Field(default=StepScheme.MIDPOINT_EXPONENTIAL)

    @property
    def dt(self) -> float:
        return self.duration / self.n_steps

    @classmethod
    def for_duration(
        cls, duration: float, scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL
    ) -> "TimeGrid":
        """Grid with the default step count for ``duration``."""
        return cls(duration=duration, n_steps=default_steps(duration), scheme=scheme)


def default_steps(duration: float, minimum: int = 64, points_per_period: float = 50.0) -> int:
    """Step count resolving the fastest in-scope frequency.

    max(minimum, ceil(points_per_period * duration / (2 pi))).
    """
    return max(minimum, math.ceil(points_per_period * duration / (2.0 * math.pi)))
