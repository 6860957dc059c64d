"""Time-ordered evolution under piecewise-sampled detuning controls.

Gradients are those of the discretized evolution: the autograd graph built while
stepping is the tape, and backpropagating through it differentiates exactly the
computed product of step propagators.
"""

import logging
from collections.abc import Callable
from dataclasses import dataclass

import torch

from app.core.exceptions import PropagationError
from app.models.physics import StepScheme, TimeGrid
from app.services.hamiltonians import HamiltonianModel

logger = logging.getLogger(__name__)

# Maps normalized times s in [0, 1] of shape (P,) to detunings of shape (M, P).
ControlSampler = Callable[[torch.Tensor], torch.Tensor]


@dataclass
class Propagation:
    """Result of evolving M samples.

    ``final_unitary`` has shape (M, d, c): the evolved images of the c initial
    columns (c = d when evolving the identity). ``rydberg_time`` is the integrated
    Rydberg population per column. ``controls`` holds the detuning values that
    entered the evolution; together with the autograd graph it is the tape.
    """

    final_unitary: torch.Tensor
    rydberg_time: torch.Tensor
    controls: torch.Tensor
    durations: torch.Tensor
    n_steps: int
    scheme: StepScheme

    @property
    def integrated_rydberg_population(self) -> torch.Tensor:
        return self.rydberg_time


def sample_points(n_steps: int, scheme: StepScheme) -> torch.Tensor:
    """Normalized times at which a scheme evaluates the Hamiltonian."""
    if scheme is StepScheme.MIDPOINT_EXPONENTIAL:
        return (torch.arange(n_steps, dtype=torch.float64) + 0.5) / n_steps
    return torch.arange(2 * n_steps + 1, dtype=torch.float64) / (2 * n_steps)


def _population(rydberg: torch.Tensor, state: torch.Tensor) -> torch.Tensor:
    """Rydberg population of every column, shape (M, c)."""
    return torch.einsum("r,mrc->mc", rydberg, state.real**2 + state.imag**2)


def time_ordered_product(
    hamiltonians: torch.Tensor,
    durations: torch.Tensor,
    n_steps: int,
    scheme: StepScheme,
    rydberg: torch.Tensor,
    initial: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Step M samples through their sampled Hamiltonians.

    Args:
        hamiltonians: Shape (M, P, d, d), sampled at :func:`sample_points`.
        durations: Shape (M,); sample m uses dt = durations[m] / n_steps.
        n_steps: Number of steps.
        scheme: Step scheme matching the sampling of ``hamiltonians``.
        rydberg: Excitation count per basis state, shape (d,).
        initial: Initial columns (d, c); identity when omitted.

    Returns:
        Tuple of (evolved columns (M, d, c), integrated Rydberg population (M, c)).
    """
    batch, _, dim, _ = hamiltonians.shape
    if initial is None:
        initial = torch.eye(dim, dtype=torch.complex128)
    state = initial.to(torch.complex128).expand(batch, *initial.shape)
    dt = durations / n_steps
    dt_c = dt.to(torch.complex128)[:, None, None]

    populations = [_population(rydberg, state)]
    if scheme is StepScheme.MIDPOINT_EXPONENTIAL:
        steps = torch.linalg.matrix_exp(-1j * hamiltonians * dt_c[:, None])
        for j in range(n_steps):
            state = steps[:, j] @ state
            populations.append(_population(rydberg, state))
    else:
        for j in range(n_steps):
            h0, hm, h1 = (hamiltonians[:, 2 * j + offset] for offset in range(3))
            k1 = -1j * (h0 @ state)
            k2 = -1j * (hm @ (state + 0.5 * dt_c * k1))
            k3 = -1j * (hm @ (state + 0.5 * dt_c * k2))
            k4 = -1j * (h1 @ (state + dt_c * k3))
            state = state + dt_c / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            populations.append(_population(rydberg, state))

    # Trapezoid rule over the step boundaries.
    pops = torch.stack(populations, dim=1)
    rydberg_time = dt[:, None] * (pops.sum(dim=1) - 0.5 * (pops[:, 0] + pops[:, -1]))
    return state, rydberg_time


class Propagator:
    """Evolves batches of pulses under one Hamiltonian model."""

    def __init__(
        self,
        model: HamiltonianModel,
        scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
    ) -> None:
        self.model = model
        self.scheme = scheme
        self._drift, self._detuning = model.tensors()
        self._rydberg = torch.as_tensor(model.rydberg_diag, dtype=torch.float64)

    def propagate(
        self,
        durations: torch.Tensor,
        controls: ControlSampler,
        n_steps: int,
        initial: torch.Tensor | None = None,
    ) -> Propagation:
        """Evolve M pulses with durations ``durations`` (shape (M,)).

        Args:
            durations: Pulse durations, one per sample.
            controls: Sampler returning the detuning at normalized times.
            n_steps: Common number of steps; each sample uses dt = T / n_steps.
            initial: Initial columns of shape (d, c); identity when omitted.
        """
        if n_steps < 1:
            raise PropagationError(f"n_steps must be positive, got {n_steps}")
        durations = torch.as_tensor(durations, dtype=torch.float64).reshape(-1)
        if torch.any(durations < 0):
            raise PropagationError("Pulse durations must be non-negative")

        points = sample_points(n_steps, self.scheme)
        deltas = controls(points)
        expected = (durations.shape[0], points.shape[0])
        if tuple(deltas.shape) != expected:
            raise PropagationError(
                f"Control sampler returned shape {tuple(deltas.shape)}, expected {expected}"
            )
        bad = ~torch.isfinite(deltas).all(dim=1)
        if torch.any(bad):
            raise PropagationError(
                "Non-finite detuning values in controls",
                details={"samples": torch.nonzero(bad).flatten().tolist()},
            )

        hamiltonians = self._drift + deltas.to(torch.complex128)[..., None, None] * self._detuning
        state, rydberg_time = time_ordered_product(
            hamiltonians, durations, n_steps, self.scheme, self._rydberg, initial
        )
        return Propagation(
            final_unitary=state,
            rydberg_time=rydberg_time,
            controls=deltas,
            durations=durations,
            n_steps=n_steps,
            scheme=self.scheme,
        )


def evolve(
    h_of_t: Callable[[torch.Tensor], torch.Tensor],
    grid: TimeGrid,
    rydberg_diag: torch.Tensor | None = None,
) -> Propagation:
    """Evolve the identity under an arbitrary time-dependent Hamiltonian.

    ``h_of_t`` maps a 1-D tensor of times to a stack of Hamiltonians (P, d, d).
    """
    points = sample_points(grid.n_steps, grid.scheme)
    hamiltonians = torch.as_tensor(h_of_t(points * grid.duration), dtype=torch.complex128)
    if not torch.isfinite(torch.view_as_real(hamiltonians)).all():
        raise PropagationError("Hamiltonian contains non-finite entries")
    dim = hamiltonians.shape[-1]
    rydberg = torch.zeros(dim, dtype=torch.float64) if rydberg_diag is None else rydberg_diag
    durations = torch.tensor([grid.duration], dtype=torch.float64)

    state, rydberg_time = time_ordered_product(
        hamiltonians[None], durations, grid.n_steps, grid.scheme, rydberg
    )
    return Propagation(
        final_unitary=state,
        rydberg_time=rydberg_time,
        controls=torch.empty(1, 0, dtype=torch.float64),
        durations=durations,
        n_steps=grid.n_steps,
        scheme=grid.scheme,
    )


def evolve_grad(
    model: HamiltonianModel,
    sampler_factory: Callable[[torch.Tensor], ControlSampler],
    knots: torch.Tensor,
    grid: TimeGrid,
    cost: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """Gradient of ``cost(final_unitary)`` with respect to control knots.

    Args:
        model: Hamiltonian model to evolve under.
        sampler_factory: Builds a control sampler from a (1, K) knot tensor.
        knots: Knot values, shape (K,).
        grid: Duration, step count and scheme.
        cost: Scalar function of the (d, d) final unitary.
    """
    knots = knots.detach().clone().to(torch.float64).requires_grad_(True)
    result = Propagator(model, grid.scheme).propagate(
        torch.tensor([grid.duration], dtype=torch.float64),
        sampler_factory(knots[None]),
        grid.n_steps,
    )
    loss = cost(result.final_unitary[0])
    if loss.grad_fn is None:
        raise PropagationError("Cost is not connected to the controls; no tape to differentiate")
    (grad,) = torch.autograd.grad(loss, knots)
    return grad
