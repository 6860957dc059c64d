"""Tests for time-ordered propagation and its gradients."""

import math

import numpy as np
import pytest
import torch

from app.core.exceptions import PropagationError
from app.models.physics import AtomSystem, StepScheme, TimeGrid, default_steps
from app.services.ansatz import knot_sampler
from app.services.hamiltonians import HamiltonianModel, bright_state
from app.services.linalg import ONE, RYDBERG, basis_index, ket
from app.services.propagator import Propagator, evolve, evolve_grad, sample_points


def _constant(value: float, m: int = 1):
    return lambda s: torch.full((m, s.shape[0]), value, dtype=torch.float64)


def _sinusoid(s: torch.Tensor) -> torch.Tensor:
    return (1.5 * torch.sin(2 * math.pi * s))[None]


@pytest.fixture
def single_atom() -> HamiltonianModel:
    return HamiltonianModel.build(AtomSystem(n_atoms=1))


def _final(model: HamiltonianModel, duration: float, sampler, n_steps: int, scheme=StepScheme.MIDPOINT_EXPONENTIAL):
    result = Propagator(model, scheme).propagate(torch.tensor([duration], dtype=torch.float64), sampler, n_steps)
    return result.final_unitary[0]


class TestSamplePoints:
    """Test cases for the evaluation times of each scheme."""

    def test_midpoints(self):
        """Test the step midpoints of the midpoint-exponential scheme."""
        np.testing.assert_allclose(sample_points(4, StepScheme.MIDPOINT_EXPONENTIAL), [0.125, 0.375, 0.625, 0.875])

    def test_rk4_half_steps(self):
        """Test that RK4 samples both ends and every half step."""
        points = sample_points(4, StepScheme.RK4)
        assert points.shape == (9,)
        assert float(points[0]) == 0.0 and float(points[-1]) == 1.0

    def test_default_steps(self):
        """Test the default step count for typical durations."""
        assert default_steps(7.612) == 64
        assert default_steps(1.2 * 16.44) == 157


class TestPropagator:
    """Test cases for batched propagation."""

    def test_zero_duration_is_identity(self, c1p_model: HamiltonianModel):
        """Test that a zero-length pulse gives the identity."""
        u = _final(c1p_model, 0.0, _constant(1.0), 16)
        np.testing.assert_allclose(u.numpy(), np.eye(9), atol=1e-15)

    def test_two_level_pi_pulse(self, single_atom: HamiltonianModel):
        """Test that a resonant drive for t = pi moves |1> fully to |r>."""
        u = _final(single_atom, math.pi, _constant(0.0), 64)
        assert abs(complex(u[RYDBERG, ONE])) == pytest.approx(1.0, abs=1e-8)

    def test_blockaded_pair_oscillates_at_sqrt2(self):
        """Test that |11> reaches the bright state at the sqrt(2) enhanced Rabi frequency."""
        model = HamiltonianModel.build(AtomSystem(n_atoms=2, blockade_b=math.inf))
        initial = torch.as_tensor(ket([ONE, ONE]))[:, None]
        result = Propagator(model).propagate(torch.tensor([math.pi / math.sqrt(2)], dtype=torch.float64), _constant(0.0), 64, initial)
        overlap = torch.as_tensor(bright_state(2)).conj() @ result.final_unitary[0, :, 0]
        assert abs(complex(overlap)) == pytest.approx(1.0, abs=1e-8)

    @pytest.mark.parametrize("n_atoms", [2, 3])
    def test_collective_rabi_frequency(self, n_atoms: int):
        """Test that |1...1> returns at the sqrt(N) enhanced frequency under perfect blockade."""
        model = HamiltonianModel.build(AtomSystem(n_atoms=n_atoms, blockade_b=math.inf))
        times = torch.linspace(0.0, 20.0, 2001, dtype=torch.float64)
        initial = torch.as_tensor(ket([ONE] * n_atoms))[:, None]
        states = Propagator(model).propagate(times, _constant(0.0, times.shape[0]), 1, initial).final_unitary
        signal = (states[:, basis_index([ONE] * n_atoms), 0].abs() ** 2 - 0.5).numpy()
        t = times.numpy()

        flips = np.nonzero(np.sign(signal[:-1]) * np.sign(signal[1:]) < 0)[0]
        crossings = t[flips] - signal[flips] * (t[flips + 1] - t[flips]) / (signal[flips + 1] - signal[flips])
        slope = np.polyfit(np.arange(crossings.size), crossings, 1)[0]

        assert crossings.size >= 8
        assert math.pi / slope == pytest.approx(math.sqrt(n_atoms), rel=1e-4)

    def test_unitary_without_decay(self, c1p_model: HamiltonianModel):
        """Test that the evolution is unitary without decay."""
        u = _final(c1p_model, 7.6, lambda s: (0.8 * torch.cos(3 * s))[None], 128).numpy()
        np.testing.assert_allclose(u.conj().T @ u, np.eye(9), atol=1e-10)

    def test_decay_is_contraction(self):
        """Test that decay makes the evolution a contraction."""
        model = HamiltonianModel.build(AtomSystem(n_atoms=2, gamma=0.01))
        u = _final(model, 7.6, _constant(0.4), 64).numpy()
        assert np.linalg.svd(u, compute_uv=False).max() <= 1.0 + 1e-10

    def test_batch_matches_individual(self, c1p_model: HamiltonianModel):
        """Test that a batch evolves like its members one at a time."""
        durations = torch.tensor([3.0, 5.0])

        def sampler(s: torch.Tensor) -> torch.Tensor:
            return torch.stack([0.2 * torch.ones_like(s), -0.5 * s])

        batched = Propagator(c1p_model).propagate(durations, sampler, 32).final_unitary
        first = _final(c1p_model, 3.0, _constant(0.2), 32)
        second = _final(c1p_model, 5.0, lambda s: (-0.5 * s)[None], 32)
        np.testing.assert_allclose(batched[0].numpy(), first.numpy(), atol=1e-13)
        np.testing.assert_allclose(batched[1].numpy(), second.numpy(), atol=1e-13)

    def test_second_order_convergence(self, single_atom: HamiltonianModel):
        """Test that halving dt cuts the midpoint-exponential error by about four."""
        reference = _final(single_atom, 5.0, _sinusoid, 2048).numpy()
        err32 = np.abs(_final(single_atom, 5.0, _sinusoid, 32).numpy() - reference).max()
        err64 = np.abs(_final(single_atom, 5.0, _sinusoid, 64).numpy() - reference).max()
        assert 3.0 < err32 / err64 < 5.0

    def test_schemes_agree(self, single_atom: HamiltonianModel):
        """Test that both step schemes agree on a fine grid."""
        midpoint = _final(single_atom, 5.0, _sinusoid, 1024)
        rk4 = _final(single_atom, 5.0, _sinusoid, 1024, StepScheme.RK4)
        np.testing.assert_allclose(midpoint.numpy(), rk4.numpy(), atol=1e-4)

    def test_loss_matches_rydberg_time(self):
        """Test that the norm loss equals Gamma times the integrated Rydberg population."""
        gamma = 1e-3
        model = HamiltonianModel.build(AtomSystem(n_atoms=1, gamma=gamma))
        initial = torch.as_tensor(ket([ONE]))[:, None]
        result = Propagator(model).propagate(torch.tensor([math.pi], dtype=torch.float64), _constant(0.0), 256, initial)
        state = result.final_unitary[0, :, 0]
        loss = 1.0 - float((state.abs() ** 2).sum())
        assert loss == pytest.approx(gamma * float(result.rydberg_time[0, 0]), rel=1e-2)

    def test_non_finite_controls(self, c1p_model: HamiltonianModel):
        """Test that NaN detunings are rejected."""
        with pytest.raises(PropagationError):
            Propagator(c1p_model).propagate(torch.tensor([1.0]), _constant(float("nan")), 16)

    def test_wrong_sampler_shape(self, c1p_model: HamiltonianModel):
        """Test that a sampler of the wrong batch size is rejected."""
        with pytest.raises(PropagationError):
            Propagator(c1p_model).propagate(torch.tensor([1.0, 2.0]), _constant(0.0, m=1), 16)

    def test_negative_duration(self, c1p_model: HamiltonianModel):
        """Test that negative durations are rejected."""
        with pytest.raises(PropagationError):
            Propagator(c1p_model).propagate(torch.tensor([-1.0]), _constant(0.0), 16)


class TestEvolve:
    """Test cases for evolution under an arbitrary Hamiltonian."""

    def test_zero_duration(self):
        """Test that a zero-length grid gives the identity."""
        h = torch.eye(3, dtype=torch.complex128)
        result = evolve(lambda t: h.expand(t.shape[0], 3, 3), TimeGrid(duration=0.0, n_steps=8))
        np.testing.assert_allclose(result.final_unitary[0].numpy(), np.eye(3), atol=1e-15)

    def test_constant_hamiltonian(self, single_atom: HamiltonianModel):
        """Test a resonant pi pulse through the generic evolver."""
        h = torch.as_tensor(single_atom.at(0.0))
        result = evolve(lambda t: h.expand(t.shape[0], 3, 3), TimeGrid(duration=math.pi, n_steps=8))
        assert abs(complex(result.final_unitary[0, RYDBERG, ONE])) == pytest.approx(1.0, abs=1e-12)

    def test_non_finite_hamiltonian(self):
        """Test that non-finite Hamiltonian entries are rejected."""
        h = torch.full((3, 3), float("inf"), dtype=torch.complex128)
        with pytest.raises(PropagationError):
            evolve(lambda t: h.expand(t.shape[0], 3, 3), TimeGrid(duration=1.0, n_steps=8))


class TestEvolveGrad:
    """Test cases for gradients through the evolution."""

    @staticmethod
    def _transfer_cost(u: torch.Tensor) -> torch.Tensor:
        return 1.0 - u[RYDBERG, ONE].abs() ** 2

    def test_matches_finite_differences(self, single_atom: HamiltonianModel):
        """Test the knot gradient against central differences."""
        grid = TimeGrid(duration=math.pi, n_steps=64)
        knots = torch.tensor([0.3, 0.1, -0.2, 0.4], dtype=torch.float64)
        grad = evolve_grad(single_atom, knot_sampler, knots, grid, self._transfer_cost)

        def cost_at(values: torch.Tensor) -> float:
            with torch.no_grad():
                u = _final(single_atom, math.pi, knot_sampler(values[None]), 64)
                return float(self._transfer_cost(u))

        step = 1e-5
        for i in range(knots.shape[0]):
            shift = torch.zeros_like(knots)
            shift[i] = step
            fd = (cost_at(knots + shift) - cost_at(knots - shift)) / (2 * step)
            assert float(grad[i]) == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_zero_duration_has_zero_gradient(self, single_atom: HamiltonianModel):
        """Test that a zero-length pulse has a zero knot gradient."""
        grid = TimeGrid(duration=0.0, n_steps=8)
        grad = evolve_grad(single_atom, knot_sampler, torch.zeros(4), grid, self._transfer_cost)
        np.testing.assert_array_equal(grad.numpy(), np.zeros(4))

    def test_disconnected_cost(self, single_atom: HamiltonianModel):
        """Test that a cost independent of the evolution is rejected."""
        grid = TimeGrid(duration=1.0, n_steps=8)
        with pytest.raises(PropagationError):
            evolve_grad(single_atom, knot_sampler, torch.zeros(4), grid, lambda u: torch.tensor(1.0))
