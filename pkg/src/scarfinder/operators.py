"""Local operator sets.

Spin-1 basis order is ``(|+>, |0>, |->)`` with ``Sz = diag(1, 0, -1)``.
Spin-1/2 basis order is ``(|up>, |down>)`` with ``sigma_z = diag(1, -1)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType

import numpy as np


def _frozen(a):
    a = np.array(a, dtype=complex)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class LocalOperatorSet:
    """Named single-site operators acting on a ``local_dim`` dimensional space."""

    local_dim: int
    ops: MappingProxyType = field(repr=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.ops[name]

    def __contains__(self, name: str) -> bool:
        return name in self.ops

    @property
    def names(self) -> tuple:
        return tuple(self.ops)


def _spin1():
    s2 = np.sqrt(2.0)
    splus = np.array([[0, s2, 0], [0, 0, s2], [0, 0, 0]], dtype=complex)
    sminus = splus.conj().T
    sx = (splus + sminus) / 2
    sy = (splus - sminus) / 2j
    sz = np.diag([1.0, 0.0, -1.0]).astype(complex)
    eye = np.eye(3, dtype=complex)
    ops = {
        "I": eye,
        "Sx": sx,
        "Sy": sy,
        "Sz": sz,
        "Splus": splus,
        "Sminus": sminus,
        "Splus2": splus @ splus,
        "Sminus2": sminus @ sminus,
        "P0": eye - sz @ sz,
    }
    for i, lam in enumerate(gell_mann_matrices(), start=1):
        ops[f"gell_mann_{i}"] = lam
    return LocalOperatorSet(3, MappingProxyType({k: _frozen(v) for k, v in ops.items()}))


def _spin_half():
    ops = {
        "I": np.eye(2),
        "sigma_x": np.array([[0, 1], [1, 0]]),
        "sigma_y": np.array([[0, -1j], [1j, 0]]),
        "sigma_z": np.diag([1.0, -1.0]),
        "P_down": np.diag([0.0, 1.0]),
        "P_up": np.diag([1.0, 0.0]),
    }
    return LocalOperatorSet(2, MappingProxyType({k: _frozen(v) for k, v in ops.items()}))


def gell_mann_matrices() -> list:
    """The eight Gell-Mann matrices in the standard order, ``Tr(l_i l_j) = 2 δ_ij``."""

    def e(i, j):
        m = np.zeros((3, 3), dtype=complex)
        m[i, j] = 1.0
        return m

    return [
        e(0, 1) + e(1, 0),
        -1j * e(0, 1) + 1j * e(1, 0),
        e(0, 0) - e(1, 1),
        e(0, 2) + e(2, 0),
        -1j * e(0, 2) + 1j * e(2, 0),
        e(1, 2) + e(2, 1),
        -1j * e(1, 2) + 1j * e(2, 1),
        np.diag([1.0, 1.0, -2.0]).astype(complex) / np.sqrt(3.0),
    ]


SPIN1 = _spin1()
SPIN_HALF = _spin_half()

# Single-site basis states.
SPIN1_PLUS = _frozen([1, 0, 0])
SPIN1_ZERO = _frozen([0, 1, 0])
SPIN1_MINUS = _frozen([0, 0, 1])
UP = _frozen([1, 0])
DOWN = _frozen([0, 1])


def kron_all(*ops) -> np.ndarray:
    """Kronecker product of the arguments, leftmost most significant."""
    out = np.ones((1, 1), dtype=complex)
    for op in ops:
        out = np.kron(out, op)
    return out
