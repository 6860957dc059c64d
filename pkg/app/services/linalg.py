"""Dense complex linear algebra and basis bookkeeping for three-level atom registers.

Single-atom levels are indexed 0 -> |0>, 1 -> |1>, 2 -> |r>. Register basis
states are ordered big-endian: atom 1 is the most significant ternary digit.
"""

import itertools
from collections.abc import Sequence
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray

CMatrix = NDArray[np.complex128]
StateVector = NDArray[np.complex128]

LEVELS = 3
GROUND, ONE, RYDBERG = 0, 1, 2


def kron(a: CMatrix, b: CMatrix) -> CMatrix:
    """Tensor product of two square matrices."""
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or b.ndim != 2 or b.shape[0] != b.shape[1]:
        raise ValueError(f"kron expects square matrices, got {a.shape} and {b.shape}")
    return np.kron(a, b)


def hs_overlap(a: CMatrix, b: CMatrix) -> complex:
    """Hilbert-Schmidt inner product Tr(a^dagger b)."""
    a = np.asarray(a, dtype=np.complex128)
    b = np.asarray(b, dtype=np.complex128)
    if a.shape != b.shape:
        raise ValueError(f"Dimension mismatch: {a.shape} vs {b.shape}")
    return complex(np.vdot(a, b))


def basis_index(digits: Sequence[int]) -> int:
    """Index of the basis state with per-atom levels ``digits``."""
    index = 0
    for digit in digits:
        if digit not in (GROUND, ONE, RYDBERG):
            raise ValueError(f"Level digit must be 0, 1 or 2, got {digit}")
        index = index * LEVELS + digit
    return index


def basis_digits(index: int, n_atoms: int) -> tuple[int, ...]:
    """Inverse of :func:`basis_index`."""
    if not 0 <= index < LEVELS**n_atoms:
        raise ValueError(f"Index {index} out of range for {n_atoms} atoms")
    digits = []
    for _ in range(n_atoms):
        index, digit = divmod(index, LEVELS)
        digits.append(digit)
    return tuple(reversed(digits))


@lru_cache(maxsize=None)
def _all_digits(n_atoms: int) -> tuple[tuple[int, ...], ...]:
    return tuple(itertools.product(range(LEVELS), repeat=n_atoms))


def embed(op: CMatrix, site: int, n_atoms: int) -> CMatrix:
    """Embed a single-atom operator at ``site`` (0-based) of an n-atom register."""
    if not 0 <= site < n_atoms:
        raise ValueError(f"Site {site} out of range for {n_atoms} atoms")
    result = np.eye(1, dtype=np.complex128)
    identity = np.eye(LEVELS, dtype=np.complex128)
    for i in range(n_atoms):
        result = kron(result, op if i == site else identity)
    return result


def level_projector(level: int) -> CMatrix:
    """Single-atom projector |level><level|."""
    proj = np.zeros((LEVELS, LEVELS), dtype=np.complex128)
    proj[level, level] = 1.0
    return proj


def excitation_counts(n_atoms: int) -> NDArray[np.int64]:
    """Number of atoms in |r> for every basis state."""
    return np.array([d.count(RYDBERG) for d in _all_digits(n_atoms)], dtype=np.int64)


def rydberg_number(n_atoms: int) -> CMatrix:
    """Diagonal operator counting Rydberg excitations."""
    return np.diag(excitation_counts(n_atoms).astype(np.complex128))


def computational_indices(n_atoms: int) -> list[int]:
    """Indices of the 2^N computational states, |0...0> first."""
    return [basis_index(bits) for bits in itertools.product((GROUND, ONE), repeat=n_atoms)]


def computational_projector(n_atoms: int) -> CMatrix:
    """Projector onto states whose atoms are all in |0> or |1>."""
    if n_atoms < 1:
        raise ValueError("n_atoms must be at least 1")
    diag = np.zeros(LEVELS**n_atoms, dtype=np.complex128)
    diag[computational_indices(n_atoms)] = 1.0
    return np.diag(diag)


def excitation_projector(n_atoms: int, max_excitations: int = 1) -> CMatrix:
    """Projector onto states with at most ``max_excitations`` atoms in |r>."""
    keep = excitation_counts(n_atoms) <= max_excitations
    return np.diag(keep.astype(np.complex128))


def atom_permutation(n_atoms: int, perm: Sequence[int]) -> CMatrix:
    """Basis operator moving the level of atom ``i`` to atom ``perm[i]``."""
    if sorted(perm) != list(range(n_atoms)):
        raise ValueError(f"{perm} is not a permutation of {n_atoms} atoms")
    dim = LEVELS**n_atoms
    op = np.zeros((dim, dim), dtype=np.complex128)
    for digits in _all_digits(n_atoms):
        moved = [0] * n_atoms
        for i, level in enumerate(digits):
            moved[perm[i]] = level
        op[basis_index(moved), basis_index(digits)] = 1.0
    return op


def ket(digits: Sequence[int]) -> StateVector:
    """Basis vector for per-atom levels ``digits``."""
    vec = np.zeros(LEVELS ** len(digits), dtype=np.complex128)
    vec[basis_index(digits)] = 1.0
    return vec


def is_hermitian(h: CMatrix, atol: float = 1e-14) -> bool:
    return bool(np.max(np.abs(h - h.conj().T), initial=0.0) < atol)
