"""Gate fidelities, training costs and the infidelity decomposition.

Targets are diagonal on the computational block, so every overlap reduces to a
weighted sum over the block diagonal. All tensor functionals take a leading
batch dimension and are differentiable.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
import torch

from app.models.physics import AtomSystem, GateKind, GateTarget, StepScheme, default_steps
from app.models.schemas import FidelityReport
from app.services.ansatz import PulseBatch, PulseSpec
from app.services.hamiltonians import HamiltonianModel
from app.services.linalg import CMatrix, computational_indices
from app.services.propagator import ControlSampler, Propagator

logger = logging.getLogger(__name__)

THETA_GRID_POINTS = 4096


def excitation_weights(n_atoms: int) -> torch.Tensor:
    """Number of qubits in |1> for each computational state, |0...0> first."""
    states = torch.arange(2**n_atoms)
    return torch.stack([(states >> shift) & 1 for shift in range(n_atoms)]).sum(dim=0).to(torch.float64)


def target_diagonal(k: int, phis: torch.Tensor) -> torch.Tensor:
    """Diagonals of the C_kP targets, shape (M, 2^(k+1))."""
    phis = torch.as_tensor(phis, dtype=torch.float64).reshape(-1)
    diag = torch.ones(phis.shape[0], 2 ** (k + 1), dtype=torch.complex128)
    all_ones = torch.exp(1j * phis.to(torch.complex128))
    return torch.cat([diag[:, :-1], all_ones[:, None]], dim=1)


def target_unitary(target: GateTarget) -> CMatrix:
    """Diagonal C_kP matrix: e^{i phi} on |1...1>, 1 elsewhere."""
    return np.diag(target_diagonal(target.k, torch.tensor([target.phi], dtype=torch.float64))[0].numpy())


def correction_phases(theta_c: torch.Tensor, n_atoms: int) -> torch.Tensor:
    """Diagonal of R_Z(theta_c)^(x)N with R_Z(theta) = diag(1, e^{-i theta}), shape (M, 2^N)."""
    theta_c = torch.as_tensor(theta_c, dtype=torch.float64).reshape(-1)
    weights = excitation_weights(n_atoms)
    return torch.exp(-1j * (theta_c[:, None] * weights[None, :]).to(torch.complex128))


def computational_block(u_out: torch.Tensor, n_atoms: int) -> torch.Tensor:
    """P U P restricted to the computational states.

    Accepts full evolutions (..., 3^N, 3^N) or column propagations
    (..., 3^N, 2^N) started from the computational states.
    """
    idx = torch.tensor(computational_indices(n_atoms))
    rows = u_out[..., idx, :]
    if u_out.shape[-1] == 3**n_atoms:
        return rows[..., idx]
    if u_out.shape[-1] != 2**n_atoms:
        raise ValueError(f"Cannot extract a {n_atoms}-atom block from shape {tuple(u_out.shape)}")
    return rows


def _overlap(block: torch.Tensor, phis: torch.Tensor, theta_c: torch.Tensor, k: int) -> torch.Tensor:
    """Tr(U_tgt^dagger R_Z^(x)N M) per sample."""
    weights = target_diagonal(k, phis).conj() * correction_phases(theta_c, k + 1)
    return (weights * torch.diagonal(block, dim1=-2, dim2=-1)).sum(dim=-1)


def gate_fidelities(
    block: torch.Tensor, phis: torch.Tensor, theta_c: torch.Tensor, k: int
) -> torch.Tensor:
    """|Tr(U_tgt^dagger R_Z^(x)N M)|^2 / d^2 for a batch of blocks (M, d, d)."""
    tr = _overlap(block, phis, theta_c, k)
    d = 2 ** (k + 1)
    return (tr.real**2 + tr.imag**2) / d**2


def haar_fidelities(
    block: torch.Tensor, phis: torch.Tensor, theta_c: torch.Tensor, k: int
) -> torch.Tensor:
    """Average fidelity over Haar-random computational input states.

    (Tr(M^dagger M) + |Tr(U_tgt^dagger R M)|^2) / (d (d + 1)); the first term
    accounts for leakage out of the computational block.
    """
    tr = _overlap(block, phis, theta_c, k)
    d = 2 ** (k + 1)
    norm = (block.real**2 + block.imag**2).sum(dim=(-2, -1))
    return (norm + tr.real**2 + tr.imag**2) / (d * (d + 1))


def gate_fidelity(u_out: CMatrix, target: GateTarget, theta_c: float = 0.0) -> float:
    """Trace fidelity of a single evolution (full or computational-column form)."""
    block = _as_block(u_out, target)
    return float(gate_fidelities(block, torch.tensor([target.phi], dtype=torch.float64), torch.tensor([theta_c], dtype=torch.float64), target.k)[0])


def haar_avg_fidelity(u_out: CMatrix, target: GateTarget, theta_c: float = 0.0) -> float:
    block = _as_block(u_out, target)
    return float(haar_fidelities(block, torch.tensor([target.phi], dtype=torch.float64), torch.tensor([theta_c], dtype=torch.float64), target.k)[0])


def _as_block(u_out: CMatrix | torch.Tensor, target: GateTarget) -> torch.Tensor:
    if torch.is_tensor(u_out):
        u = u_out.to(torch.complex128)
    else:
        u = torch.from_numpy(np.asarray(u_out, dtype=np.complex128))
    if u.shape[-1] == target.dim and u.shape[-2] == target.dim:
        block = u
    else:
        block = computational_block(u, target.n_atoms)
    return block.reshape(1, target.dim, target.dim)


def cost_J(fidelities: torch.Tensor) -> torch.Tensor:
    """Mean infidelity over the batch."""
    if fidelities.numel() == 0:
        raise ValueError("cost_J needs at least one sample")
    return (1.0 - fidelities).mean()


def cost_J_opt(j: torch.Tensor, durations: torch.Tensor, mu: float) -> torch.Tensor:
    """Time-penalized cost J + mu * mean(T)."""
    if mu < 0:
        raise ValueError("mu must be non-negative")
    return j + mu * durations.mean()


def best_correction_angle(
    u_out: CMatrix, target: GateTarget, grid: int = THETA_GRID_POINTS
) -> tuple[float, float]:
    """Grid maximizer of the trace fidelity over theta_c in (-pi, pi].

    Returns:
        Tuple of (theta_c, fidelity at theta_c).
    """
    block = _as_block(u_out, target)[0].numpy()
    thetas = -math.pi + 2.0 * math.pi * np.arange(1, grid + 1) / grid
    weights = excitation_weights(target.n_atoms).numpy()
    terms = target_diagonal(target.k, torch.tensor([target.phi], dtype=torch.float64))[0].numpy().conj() * np.diag(block)
    traces = np.exp(-1j * np.outer(thetas, weights)) @ terms
    fids = np.abs(traces) ** 2 / target.dim**2
    best = int(np.argmax(fids))
    return float(thetas[best]), float(fids[best])


def propagate_block(
    model: HamiltonianModel,
    durations: torch.Tensor,
    controls: ControlSampler,
    n_steps: int,
    scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
) -> torch.Tensor:
    """Evolve the computational columns and return the (M, d, d) blocks."""
    n_atoms = model.n_atoms
    initial = torch.zeros(3**n_atoms, 2**n_atoms, dtype=torch.complex128)
    initial[computational_indices(n_atoms), torch.arange(2**n_atoms)] = 1.0
    result = Propagator(model, scheme).propagate(durations, controls, n_steps, initial=initial)
    return computational_block(result.final_unitary, n_atoms)


def batch_steps(durations: torch.Tensor, n_steps: int | None = None) -> int:
    """Common step count for a batch: explicit, or the default for its longest pulse."""
    if n_steps is not None:
        return n_steps
    longest = float(durations.detach().max()) if durations.numel() else 0.0
    return default_steps(longest)


@dataclass
class Decomposition:
    """Fidelities of one batch under the three evaluation models."""

    phis: torch.Tensor
    theta_c: torch.Tensor
    fid_decay: torch.Tensor
    fid_clean: torch.Tensor
    fid_infinite: torch.Tensor
    haar_decay: torch.Tensor
    block_decay: torch.Tensor

    def reports(self) -> list[FidelityReport]:
        return [
            FidelityReport(
                infid_total=min(max(1.0 - float(f_decay), 0.0), 1.0),
                infid_decay=float(f_clean - f_decay),
                infid_blockade=float(f_inf - f_clean),
                infid_haar=min(max(1.0 - float(haar), 0.0), 1.0),
                theta_c_used=float(theta),
            )
            for f_decay, f_clean, f_inf, haar, theta in zip(
                self.fid_decay, self.fid_clean, self.fid_infinite, self.haar_decay, self.theta_c
            )
        ]


def decompose(
    gate: GateKind,
    phis: torch.Tensor,
    durations: torch.Tensor,
    controls: ControlSampler,
    theta_c: torch.Tensor,
    sys: AtomSystem,
    n_steps: int | None = None,
    scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
) -> Decomposition:
    """Run the decayed, decay-free and infinite-blockade propagations of a batch.

    The decay term is F - F_decay at ``sys.blockade_b``; the blockade term is
    F_inf - F_fin, both without decay. For an infinite ``sys.blockade_b`` the
    two blockade models coincide and the blockade term vanishes.
    """
    k = gate.k
    sys = sys.with_overrides(n_atoms=gate.n_atoms)
    steps = batch_steps(durations, n_steps)
    infinite = sys.with_overrides(blockade_b=math.inf)

    with torch.no_grad():
        block_decay = propagate_block(HamiltonianModel.build(sys, decay=True), durations, controls, steps, scheme)
        block_clean = propagate_block(HamiltonianModel.build(sys, decay=False), durations, controls, steps, scheme)
        if sys.infinite_blockade:
            block_inf = block_clean
        else:
            block_inf = propagate_block(
                HamiltonianModel.build(infinite, decay=False), durations, controls, steps, scheme
            )

    return Decomposition(
        phis=phis,
        theta_c=theta_c,
        fid_decay=gate_fidelities(block_decay, phis, theta_c, k),
        fid_clean=gate_fidelities(block_clean, phis, theta_c, k),
        fid_infinite=gate_fidelities(block_inf, phis, theta_c, k),
        haar_decay=haar_fidelities(block_decay, phis, theta_c, k),
        block_decay=block_decay,
    )


def decompose_batch(
    gate: GateKind,
    phis: torch.Tensor,
    batch: PulseBatch,
    sys: AtomSystem,
    n_steps: int | None = None,
    scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
) -> Decomposition:
    return decompose(
        gate,
        phis,
        batch.durations.detach(),
        batch.sampler(),
        batch.theta_c.detach(),
        sys,
        n_steps=n_steps,
        scheme=scheme,
    )


def infidelity_decomposition(
    pulse: PulseSpec,
    gate: GateKind,
    sys: AtomSystem,
    n_steps: int | None = None,
    scheme: StepScheme = StepScheme.MIDPOINT_EXPONENTIAL,
) -> FidelityReport:
    """Decayed, decay-free and infinite-blockade fidelities of one pulse."""
    phis = torch.tensor([pulse.phi], dtype=torch.float64)
    batch = PulseBatch(
        durations=torch.tensor([pulse.duration], dtype=torch.float64),
        knots=torch.as_tensor(pulse.knots, dtype=torch.float64)[None],
        theta_c=torch.tensor([pulse.theta_c], dtype=torch.float64),
        delta_bound=pulse.delta_bound,
    )
    return decompose_batch(gate, phis, batch, sys, n_steps=n_steps, scheme=scheme).reports()[0]
