"""Hamiltonians of globally driven Rydberg-atom registers.

Sign conventions:
    * multi-Rydberg diagonals carry +B * omega_max, so doubly excited states are
      energetically detuned;
    * decay enters as -i Gamma/2 per Rydberg excitation, so a lone |r> amplitude
      decays as exp(-Gamma t / 2) under exp(-i H t).
"""

import itertools
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from app.core.exceptions import UnsupportedSystemError
from app.models.physics import AtomSystem, BlockadeModel, ControlValue
from app.services.linalg import (
    CMatrix,
    ONE,
    RYDBERG,
    StateVector,
    atom_permutation,
    embed,
    excitation_projector,
    ket,
    level_projector,
    rydberg_number,
)

logger = logging.getLogger(__name__)


def h_single(cv: ControlValue) -> CMatrix:
    """Single-atom Hamiltonian on {|0>, |1>, |r>}."""
    h = np.zeros((3, 3), dtype=np.complex128)
    h[ONE, RYDBERG] = h[RYDBERG, ONE] = cv.omega / 2.0
    h[RYDBERG, RYDBERG] = -cv.delta
    return h


def _drive(n_atoms: int, cv: ControlValue) -> CMatrix:
    single = h_single(cv)
    return sum(embed(single, site, n_atoms) for site in range(n_atoms))


def _interaction(n_atoms: int) -> CMatrix:
    """Sum over pairs of |r><r|_i |r><r|_j, without the V prefactor."""
    n_r = level_projector(RYDBERG)
    dim = 3**n_atoms
    term = np.zeros((dim, dim), dtype=np.complex128)
    for i, j in itertools.combinations(range(n_atoms), 2):
        term += embed(n_r, i, n_atoms) @ embed(n_r, j, n_atoms)
    return term


def h_full(sys: AtomSystem, cv: ControlValue) -> CMatrix:
    """Full N-atom Hamiltonian with finite van der Waals blockade."""
    if not sys.equidistant:
        raise UnsupportedSystemError("Only equidistant atom geometries are supported")
    if sys.infinite_blockade:
        raise UnsupportedSystemError(
            "h_full needs a finite blockade strength; use the blockaded model for B -> inf"
        )
    return _drive(sys.n_atoms, cv) + sys.interaction * _interaction(sys.n_atoms)


def h_blockaded(sys: AtomSystem, cv: ControlValue) -> CMatrix:
    """Infinite-blockade model: states with two or more excitations projected out."""
    if not sys.equidistant:
        raise UnsupportedSystemError("Only equidistant atom geometries are supported")
    proj = excitation_projector(sys.n_atoms, max_excitations=1)
    return proj @ _drive(sys.n_atoms, cv) @ proj


def permutation_sum(op: CMatrix, n_atoms: int) -> CMatrix:
    """Sum of ``op`` over all distinct relabellings of the atoms."""
    seen: dict[bytes, CMatrix] = {}
    for perm in itertools.permutations(range(n_atoms)):
        p = atom_permutation(n_atoms, perm)
        permuted = p @ op @ p.conj().T
        seen.setdefault(np.round(permuted, 14).tobytes(), permuted)
    return sum(seen.values())


def bright_state(n_atoms: int) -> StateVector:
    """Symmetric single-excitation state over the |1...r...1> permutations."""
    if n_atoms not in (2, 3):
        raise UnsupportedSystemError(f"Bright states are defined for 2 or 3 atoms, got {n_atoms}")
    vec = sum(
        ket([RYDBERG if site == excited else ONE for site in range(n_atoms)])
        for excited in range(n_atoms)
    )
    return vec / np.sqrt(n_atoms)


def h_effective_3q(cv: ControlValue) -> CMatrix:
    """Three-atom Hamiltonian in the limit B -> inf, assembled from permutation sums."""
    omega, delta = cv.omega, cv.delta
    zero_bright = np.kron(ket([0]), bright_state(2))

    coupling = (
        omega / 2.0 * permutation_sum(np.outer(ket([0, 0, 1]), ket([0, 0, RYDBERG])), 3)
        + math.sqrt(2.0) * omega / 2.0 * permutation_sum(np.outer(ket([0, 1, 1]), zero_bright), 3)
        + math.sqrt(3.0) * omega / 2.0 * np.outer(ket([1, 1, 1]), bright_state(3).conj())
    )

    # |01r> and |10r> share one orbit; distinctness holds across the whole sum.
    orbits: dict[bytes, CMatrix] = {}
    for i, j in itertools.product((0, 1), repeat=2):
        orbit = permutation_sum(np.outer(ket([i, j, RYDBERG]), ket([i, j, RYDBERG])), 3)
        orbits.setdefault(orbit.tobytes(), orbit)
    detuning = sum(orbits.values())

    return coupling + coupling.conj().T - delta * detuning


def add_decay(h: CMatrix, sys: AtomSystem) -> CMatrix:
    """Add the non-Hermitian Rydberg decay term to ``h``."""
    if sys.gamma == 0.0:
        return h
    return h - 0.5j * sys.gamma * rydberg_number(sys.n_atoms)


@dataclass(frozen=True, eq=False)
class HamiltonianModel:
    """Affine control form H(delta) = drift + delta * detuning_op.

    The Rabi frequency is held at ``sys.omega_max``; only the detuning varies.
    """

    sys: AtomSystem
    blockade: BlockadeModel
    decay: bool
    drift: CMatrix
    detuning_op: CMatrix
    rydberg_diag: np.ndarray
    _tensors: dict = field(default_factory=dict, repr=False, compare=False)

    @classmethod
    def build(
        cls,
        sys: AtomSystem,
        blockade: BlockadeModel | None = None,
        decay: bool = True,
    ) -> "HamiltonianModel":
        """Build the model for ``sys``.

        ``blockade`` defaults to INFINITE when ``sys.blockade_b`` is infinite.
        """
        if blockade is None:
            blockade = BlockadeModel.INFINITE if sys.infinite_blockade else BlockadeModel.FINITE

        def at(delta: float) -> CMatrix:
            cv = ControlValue(omega=sys.omega_max, delta=delta)
            if blockade is BlockadeModel.FINITE:
                return h_full(sys, cv)
            if sys.n_atoms == 3:
                return h_effective_3q(cv)
            return h_blockaded(sys, cv)

        drift = at(0.0)
        detuning_op = at(1.0) - drift
        if decay and sys.gamma > 0:
            drift = add_decay(drift, sys)
            if blockade is BlockadeModel.INFINITE:
                proj = excitation_projector(sys.n_atoms, 1)
                drift = proj @ drift @ proj

        rydberg_diag = np.real(np.diag(rydberg_number(sys.n_atoms)))
        logger.debug(
            "Built %s-blockade model for %d atoms (B=%s, gamma=%s, decay=%s)",
            blockade.value,
            sys.n_atoms,
            sys.blockade_b,
            sys.gamma,
            decay,
        )
        return cls(
            sys=sys,
            blockade=blockade,
            decay=decay,
            drift=drift,
            detuning_op=detuning_op,
            rydberg_diag=rydberg_diag,
        )

    @property
    def dim(self) -> int:
        return self.drift.shape[0]

    @property
    def n_atoms(self) -> int:
        return self.sys.n_atoms

    def at(self, delta: float) -> CMatrix:
        """Hamiltonian matrix at detuning ``delta``."""
        return self.drift + delta * self.detuning_op

    def tensors(self) -> tuple[torch.Tensor, torch.Tensor]:
        """(drift, detuning_op) as complex128 tensors, built once."""
        if not self._tensors:
            self._tensors["drift"] = torch.as_tensor(self.drift, dtype=torch.complex128)
            self._tensors["detuning"] = torch.as_tensor(self.detuning_op, dtype=torch.complex128)
        return self._tensors["drift"], self._tensors["detuning"]
