"""Hamiltonians and initial states.

A :class:`HamiltonianSpec` is a list of k-local terms on a unit cell.  Term
``Term(start, span, op, c)`` stands for ``sum_c' c * op`` acting on sites
``start + m c', ..., start + m c' + span - 1`` for every cell ``c'``, where ``m``
is the unit cell.  Spans may cross cell boundaries.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInputError, UnsupportedGeometryError
from .imps import UniformMPS, canonicalize, product_state
from .operators import DOWN, SPIN1, SPIN1_MINUS, SPIN1_PLUS, SPIN_HALF, UP, gell_mann_matrices, kron_all


@dataclass(frozen=True)
class Term:
    """``coefficient * op`` on ``span`` consecutive sites starting at ``start``."""

    start: int
    span: int
    op: np.ndarray = field(repr=False)
    coefficient: complex = 1.0


@dataclass(frozen=True)
class HamiltonianSpec:
    """Translation-invariant Hamiltonian on a chain with an ``unit_cell``-site cell.

    Attributes
    ----------
    terms : tuple of Term
        Hermitian physics.  The operator sum over all terms must be Hermitian.
    penalty : tuple of Term
        Non-Hermitian suppression terms with coefficient ``-i mu``; used only by
        time evolution, never in energies or exact diagonalization.
    constraint : ndarray or None
        ``(d, d)`` 0/1 matrix; ``constraint[a, b] = 0`` forbids local states
        ``a, b`` on adjacent sites.  Exact diagonalization works in the allowed
        configuration space.
    """

    name: str
    unit_cell: int
    local_dim: int
    terms: tuple
    penalty: tuple = ()
    constraint: np.ndarray | None = field(default=None, repr=False)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(self.terms))
        object.__setattr__(self, "penalty", tuple(self.penalty))
        if self.unit_cell < 1 or self.local_dim < 1:
            raise InvalidInputError("unit_cell and local_dim must be positive")
        for t in self.terms + self.penalty:
            if t.op.shape != (self.local_dim**t.span,) * 2:
                raise InvalidInputError(f"term on {t.span} sites has shape {t.op.shape}")
            if not 0 <= t.start < self.unit_cell:
                raise InvalidInputError("term start must lie inside the unit cell")
        for t in self.penalty:
            c = complex(t.coefficient)
            if abs(c.real) > 0 or not c.imag < 0:
                raise InvalidInputError("penalty coefficients must be -i mu with mu > 0")

    @property
    def max_span(self) -> int:
        return max(t.span for t in self.terms + self.penalty)

    @property
    def mu(self) -> float:
        return float(-complex(self.penalty[0].coefficient).imag) if self.penalty else 0.0

    def without_penalty(self) -> "HamiltonianSpec":
        return HamiltonianSpec(self.name, self.unit_cell, self.local_dim, self.terms, (), self.constraint,
                               dict(self.params))

    def with_extra_terms(self, terms, name: str | None = None) -> "HamiltonianSpec":
        return HamiltonianSpec(name or self.name, self.unit_cell, self.local_dim, self.terms + tuple(terms),
                               self.penalty, self.constraint, dict(self.params))


def _tiled(unit_cell, span, op, coefficient=1.0):
    return [Term(s, span, np.asarray(op, dtype=complex), coefficient) for s in range(unit_cell)]


# ----------------------------------------------------------------------------
# Hamiltonians

PERTURBATIONS = (None, "V1", "V1prime", "V2", "V2prime")


def v1prime_operator() -> np.ndarray:
    """Single-site operator ``sum_i sin(100 i) lambda_i`` over the Gell-Mann matrices."""
    return sum(np.sin(100.0 * i) * lam for i, lam in enumerate(gell_mann_matrices(), start=1))


def v2_operator() -> np.ndarray:
    """Three-site ``[(S+)^2 (S-)^2 + (S-)^2 (S+)^2] (x) Sx``."""
    pm = np.kron(SPIN1["Splus2"], SPIN1["Sminus2"])
    return np.kron(pm + pm.conj().T, SPIN1["Sx"])


def spin1_xy(h: float = 1.0, perturbation: str | None = None, seed: int | None = None,
             strength: float = 1.0) -> HamiltonianSpec:
    """Spin-1 XY chain ``sum (SxSx + SySy) - h sum Sz + V`` on a 2-site cell.

    Parameters
    ----------
    h : float
        Field along z.
    perturbation : {None, 'V1', 'V1prime', 'V2', 'V2prime'}
        ``V1 = sum P0_j Sx_{j+1}``; ``V1prime`` replaces Sx by the Gell-Mann
        combination with coefficients ``sin(100 i)``; ``V2`` is the three-site
        term of :func:`v2_operator`; ``V2prime`` is a seeded random three-site
        term projected off the local support of the Type-2 tower (see
        :func:`scarfinder.parent.projective_embedding`).
    seed : int, optional
        Required for ``V2prime``.
    strength : float
        Overall prefactor of the perturbation.
    """
    if perturbation not in PERTURBATIONS:
        raise InvalidInputError(f"unknown perturbation {perturbation!r}")
    if not np.isfinite(h):
        raise InvalidInputError("h must be finite")
    sx, sy, sz, p0 = SPIN1["Sx"], SPIN1["Sy"], SPIN1["Sz"], SPIN1["P0"]
    terms = _tiled(2, 2, np.kron(sx, sx) + np.kron(sy, sy))
    if h != 0:
        terms += _tiled(2, 1, sz, -h)
    if perturbation == "V1":
        terms += _tiled(2, 2, np.kron(p0, sx), strength)
    elif perturbation == "V1prime":
        terms += _tiled(2, 2, np.kron(p0, v1prime_operator()), strength)
    elif perturbation == "V2":
        terms += _tiled(2, 3, v2_operator(), strength)
    elif perturbation == "V2prime":
        if seed is None:
            raise InvalidInputError("V2prime needs a seed")
        from .ed import type2_tower
        from .parent import projective_embedding

        emb = projective_embedding(type2_tower(8), cluster_size=3, seed=seed)
        terms += _tiled(2, 3, emb.terms[0].op, strength)
    params = {"h": h, "perturbation": perturbation, "seed": seed, "strength": strength}
    return HamiltonianSpec(f"spin1_xy[{perturbation}]", 2, 3, terms, params=params)


def pxp(omega: float = 1.0, mu: float = 100.0) -> HamiltonianSpec:
    """PXP chain ``omega sum P_{j-1} sigma^x_j P_{j+1}`` with the blockade penalty.

    The penalty ``-i mu |up up><up up|`` on every adjacent pair is attached when
    ``mu > 0``.  ``P`` projects on the ground (down) state.
    """
    if not omega > 0:
        raise InvalidInputError("omega must be positive")
    if mu < 0:
        raise InvalidInputError("mu must be non-negative")
    pd, sx = SPIN_HALF["P_down"], SPIN_HALF["sigma_x"]
    terms = [Term(0, 3, kron_all(pd, sx, pd), omega)]
    penalty = []
    if mu > 0:
        upup = np.kron(SPIN_HALF["P_up"], SPIN_HALF["P_up"])
        penalty = [Term(0, 2, upup, -1j * mu)]
    constraint = np.array([[0, 1], [1, 1]])
    return HamiltonianSpec("pxp", 1, 2, terms, penalty, constraint, {"omega": omega, "mu": mu})


def mixed_field_ising(J: float = 1.0, h: float = 0.5, g: float = 1.05) -> HamiltonianSpec:
    """``-J sum sz sz - h sum sz - g sum sx`` on a 2-site cell."""
    sz, sx = SPIN_HALF["sigma_z"], SPIN_HALF["sigma_x"]
    terms = _tiled(2, 2, np.kron(sz, sz), -J)
    if h != 0:
        terms += _tiled(2, 1, sz, -h)
    if g != 0:
        terms += _tiled(2, 1, sx, -g)
    return HamiltonianSpec("mixed_field_ising", 2, 2, terms, params={"J": J, "h": h, "g": g})


@dataclass(frozen=True)
class LatticeGeometry:
    """Cylinder of columns with ``sites_per_column`` sites around the circumference.

    ``intra_links`` are pairs ``(a, b)`` inside one column; ``inter_links`` are
    pairs ``(a, b)`` joining site ``a`` of column ``x`` to site ``b`` of ``x + 1``.
    """

    name: str
    sites_per_column: int
    intra_links: tuple
    inter_links: tuple

    @property
    def labels(self) -> tuple:
        return tuple("ABCDEFGH"[: self.sites_per_column])


def cylinder_geometry(name: str, sites_per_column: int = 4) -> LatticeGeometry:
    """``square`` (straight rungs) or ``triangular`` (rungs plus one diagonal)."""
    if sites_per_column != 4:
        raise UnsupportedGeometryError(f"only 4-site circumferences are implemented, got {sites_per_column}")
    n = sites_per_column
    intra = tuple((i, (i + 1) % n) for i in range(n))
    if name == "square":
        inter = tuple((i, i) for i in range(n))
    elif name == "triangular":
        inter = tuple((i, i) for i in range(n)) + tuple((i, (i + 1) % n) for i in range(n))
    else:
        raise UnsupportedGeometryError(f"unknown cylinder geometry {name!r}")
    return LatticeGeometry(name, n, intra, inter)


def column_states(geometry: LatticeGeometry) -> list:
    """Occupation tuples of one column allowed by the intra-column blockade."""
    n = geometry.sites_per_column
    out = []
    for occ in itertools.product((0, 1), repeat=n):
        if all(not (occ[a] and occ[b]) for a, b in geometry.intra_links):
            out.append(occ)
    return out


def _inter_allowed(geometry, left, right):
    return all(not (left[a] and right[b]) for a, b in geometry.inter_links)


def pxp_cylinder(geometry, omega: float = 1.0, mu: float = 100.0) -> HamiltonianSpec:
    """PXP on a 4-leg cylinder written as a chain of blocked column sites.

    Each column is one site whose states are the intra-column independent sets
    (dimension 7 for both geometries here).  A flip of site ``a`` in column ``x``
    needs every linked site in columns ``x - 1``, ``x`` and ``x + 1`` to be down,
    so the blocked Hamiltonian is a three-column term.  The inter-column blockade
    enters through ``constraint`` and a two-column penalty.
    """
    if isinstance(geometry, str):
        geometry = cylinder_geometry(geometry)
    if geometry.sites_per_column != 4:
        raise UnsupportedGeometryError("only 4-site circumferences are implemented")
    states = column_states(geometry)
    d = len(states)
    index = {s: i for i, s in enumerate(states)}
    n = geometry.sites_per_column
    term = np.zeros((d**3, d**3), dtype=complex)
    for a in range(n):
        flip = np.zeros((d, d))
        for s in states:
            t = list(s)
            t[a] ^= 1
            t = tuple(t)
            if t in index:
                flip[index[t], index[s]] = 1.0
        left_nb = [p for p, q in geometry.inter_links if q == a]
        right_nb = [q for p, q in geometry.inter_links if p == a]
        pl = np.diag([float(all(s[p] == 0 for p in left_nb)) for s in states])
        pr = np.diag([float(all(s[q] == 0 for q in right_nb)) for s in states])
        term += kron_all(pl, flip, pr)
    allowed = np.array([[int(_inter_allowed(geometry, s, t)) for t in states] for s in states])
    penalty = []
    if mu > 0:
        penalty = [Term(0, 2, np.diag(1.0 - allowed.ravel()).astype(complex), -1j * mu)]
    params = {"geometry": geometry.name, "omega": omega, "mu": mu, "column_states": states}
    return HamiltonianSpec(f"pxp_cylinder[{geometry.name}]", 1, d, [Term(0, 3, term, omega)], penalty,
                           allowed, params)


# ----------------------------------------------------------------------------
# states


def type1_local_vector(theta: float, xi: float, parity: int) -> np.ndarray:
    """Normalized ``|-> + xi (-1)^j e^{-2 i theta} |+>`` for site parity ``j``."""
    v = SPIN1_MINUS + xi * (-1) ** parity * np.exp(-2j * theta) * SPIN1_PLUS
    return v / np.linalg.norm(v)


def type1_scar_state(theta: float = 0.0, xi: float = 1.0) -> UniformMPS:
    """Type-1 scar family member: a 2-site-cell product state.

    The amplitude of ``|+>`` relative to ``|->`` is ``xi (-1)^j`` and the z rotation
    by ``theta`` multiplies it by ``e^{-2 i theta}``.
    """
    return product_state([type1_local_vector(theta, xi, j) for j in (0, 1)])


def imperfect_state(alpha: float) -> UniformMPS:
    """``type1_scar_state(0, 1)`` with a staggered z rotation.

    Per site ``|-> + (-1)^j e^{-i alpha (-1)^j} |+>`` up to normalization, i.e. the
    rotation ``exp(-i (alpha/2) (-1)^j Sz_j)`` applied to each site.
    """
    vecs = []
    for j in (0, 1):
        sg = (-1) ** j
        rot = np.diag(np.exp(-0.5j * alpha * sg * np.diag(SPIN1["Sz"]).real))
        vecs.append(rot @ type1_local_vector(0.0, 1.0, j))
    return product_state(vecs)


def type2_raw_tensors(phi: float, theta: float) -> list:
    """Bond-dimension-2 tensors ``A_j[s]`` (shape ``(3, 2, 2)``) for parities 0 and 1."""
    out = []
    c, s = np.cos(phi / 2), np.sin(phi / 2)
    for j in (0, 1):
        sg = (-1) ** j
        a = np.zeros((3, 2, 2), dtype=complex)
        a[0] = [[s * np.exp(1j * theta), 0], [0, 0]]
        a[1] = [[0, c], [sg * s, 0]]
        a[2] = [[0, 0], [0, sg * c * np.exp(-1j * theta)]]
        out.append(a)
    return out


def type2_scar_mps(phi: float, theta: float = 0.0) -> UniformMPS:
    """Type-2 scar state: canonicalized bond-dimension-2 MPS on a 2-site cell."""
    return canonicalize(type2_raw_tensors(phi, theta))


NAMED_STATES = ("Z2", "Z2prime", "Z3", "all_down", "CDW_square", "theta_product")


def named_product_state(name: str, theta: float | None = None) -> UniformMPS:
    """Named product states.

    ``Z2`` is ``|down up down up ...>``, ``Z2prime`` its translate, ``Z3`` is
    ``|up down down ...>``, ``CDW_square`` alternates the two column
    checkerboards of the blocked square cylinder, and ``theta_product`` is
    ``(cos theta |up> + sin theta |down>)`` on every site (2-site cell).
    """
    if name == "Z2":
        return product_state([DOWN, UP])
    if name == "Z2prime":
        return product_state([UP, DOWN])
    if name == "Z3":
        return product_state([UP, DOWN, DOWN])
    if name == "all_down":
        return product_state([DOWN, DOWN])
    if name == "theta_product":
        if theta is None:
            raise InvalidInputError("theta_product needs theta")
        v = np.cos(theta) * UP + np.sin(theta) * DOWN
        return product_state([v, v])
    if name == "CDW_square":
        states = column_states(cylinder_geometry("square"))
        d = len(states)
        e = np.eye(d)
        return product_state([e[states.index((1, 0, 1, 0))], e[states.index((0, 1, 0, 1))]])
    raise InvalidInputError(f"unknown named state {name!r}")


def random_imps(chi: int, unit_cell: int, local_dim: int, seed) -> UniformMPS:
    """Random state: i.i.d. complex Gaussian entries ``(x + i y)/sqrt(2)``, then canonicalized.

    Uses ``numpy.random.default_rng(seed)``; bond dimension ``chi`` on every bond.
    """
    if min(chi, unit_cell, local_dim) < 1:
        raise InvalidInputError("chi, unit_cell and local_dim must be >= 1")
    rng = np.random.default_rng(seed)
    tensors = []
    for _ in range(unit_cell):
        re = rng.standard_normal((local_dim, chi, chi))
        im = rng.standard_normal((local_dim, chi, chi))
        tensors.append((re + 1j * im) / np.sqrt(2))
    return canonicalize(tensors)


def triangular_S_state(L: int = 4):
    """``P prod_x (|0> - |Z2> - |Z2'>)`` on ``L`` columns of the triangular cylinder (PBC).

    Returns a normalized :class:`scarfinder.ed.FiniteState` on the constrained space.
    """
    from .ed import FiniteHilbert, FiniteState

    h = pxp_cylinder("triangular")
    states = h.params["column_states"]
    hil = FiniteHilbert.constrained(L, h.local_dim, h.constraint)
    amp = np.zeros(h.local_dim)
    amp[states.index((0, 0, 0, 0))] = 1.0
    amp[states.index((1, 0, 1, 0))] = -1.0
    amp[states.index((0, 1, 0, 1))] = -1.0
    digits = hil.digits()
    vec = np.prod(amp[digits], axis=1).astype(complex)
    nv = np.linalg.norm(vec)
    return FiniteState(vec / nv, hil)
