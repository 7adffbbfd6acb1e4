"""Exact diagonalization on finite periodic chains.

Configurations are encoded as integers with site 0 the most significant digit
in base ``local_dim``.  Constrained spaces keep only configurations whose
adjacent pairs are allowed by the model's ``constraint`` matrix; the allowed
codes are stored sorted so lookups are a binary search.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse
import scipy.sparse.linalg

from .errors import DimensionCapError, InvalidInputError
from .imps import UniformMPS
from .linalg import von_neumann_entropy
from .operators import SPIN1

DEFAULT_CAP = 200_000
DENSE_CAP = 6_000


@dataclass(frozen=True, eq=False)
class FiniteHilbert:
    """Allowed configurations of ``L`` sites with ``local_dim`` states each."""

    L: int
    local_dim: int
    codes: np.ndarray = field(repr=False)
    constrained: bool = False

    @classmethod
    def full(cls, L: int, local_dim: int, cap: int = DEFAULT_CAP) -> "FiniteHilbert":
        if local_dim**L > cap:
            raise DimensionCapError(f"dimension {local_dim ** L} exceeds cap {cap}; reduce L")
        return cls(L, local_dim, np.arange(local_dim**L, dtype=np.int64), False)

    @classmethod
    def constrained(cls, L: int, local_dim: int, allowed, pbc: bool = True, cap: int = DEFAULT_CAP):
        """Configurations whose neighbouring pairs all satisfy ``allowed[a, b] = 1``."""
        allowed = np.asarray(allowed).astype(bool)
        seqs = np.arange(local_dim, dtype=np.int64)[:, None]
        for _ in range(1, L):
            last = seqs[:, -1]
            rows, nxt = np.nonzero(allowed[last])
            seqs = np.column_stack([seqs[rows], nxt])
            if len(seqs) > cap:
                raise DimensionCapError(f"constrained dimension exceeds cap {cap}; reduce L")
        if pbc and L > 1:
            seqs = seqs[allowed[seqs[:, -1], seqs[:, 0]]]
        weights = local_dim ** np.arange(L - 1, -1, -1, dtype=np.int64)
        codes = np.sort(seqs @ weights)
        return cls(L, local_dim, codes, True)

    @property
    def dim(self) -> int:
        return len(self.codes)

    def digits(self, codes=None) -> np.ndarray:
        """``(n, L)`` array of local states, site 0 first."""
        c = self.codes if codes is None else np.asarray(codes, dtype=np.int64)
        out = np.empty((len(c), self.L), dtype=np.int64)
        for j in range(self.L - 1, -1, -1):
            out[:, j] = c % self.local_dim
            c = c // self.local_dim
        return out

    def encode(self, digits) -> np.ndarray:
        weights = self.local_dim ** np.arange(self.L - 1, -1, -1, dtype=np.int64)
        return np.asarray(digits, dtype=np.int64) @ weights

    def index(self, codes) -> np.ndarray:
        """Positions of ``codes`` in the basis, ``-1`` where absent."""
        codes = np.asarray(codes, dtype=np.int64)
        pos = np.searchsorted(self.codes, codes)
        pos = np.minimum(pos, self.dim - 1)
        return np.where(self.codes[pos] == codes, pos, -1)


@dataclass(frozen=True, eq=False)
class FiniteState:
    """Dense state vector over the configurations of a :class:`FiniteHilbert`."""

    vector: np.ndarray
    hilbert: FiniteHilbert

    def __post_init__(self):
        v = np.asarray(self.vector, dtype=complex)
        if v.shape != (self.hilbert.dim,):
            raise InvalidInputError(f"vector length {v.shape} does not match dimension {self.hilbert.dim}")
        object.__setattr__(self, "vector", v)

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.vector))

    def normalized(self) -> "FiniteState":
        n = self.norm
        if n == 0:
            raise InvalidInputError("cannot normalize the zero vector")
        return FiniteState(self.vector / n, self.hilbert)


def hilbert_for(h, L: int, pbc: bool = True, cap: int = DEFAULT_CAP) -> FiniteHilbert:
    """Configuration space of model ``h`` on ``L`` sites."""
    if h.constraint is not None:
        return FiniteHilbert.constrained(L, h.local_dim, h.constraint, pbc, cap)
    return FiniteHilbert.full(L, h.local_dim, cap)


def build_operator(hilbert: FiniteHilbert, terms, unit_cell: int, pbc: bool = True):
    """Sparse matrix of ``sum`` over translated terms, projected on the allowed space."""
    L, d = hilbert.L, hilbert.local_dim
    if L % unit_cell:
        raise InvalidInputError(f"L={L} is not a multiple of the unit cell {unit_cell}")
    digits = hilbert.digits()
    codes = hilbert.codes
    rows, cols, vals = [], [], []
    for t in terms:
        if pbc and t.span > L:
            raise InvalidInputError(f"term span {t.span} exceeds L={L}")
        op = np.asarray(t.op, dtype=complex) * t.coefficient
        nz_out, nz_in = np.nonzero(op)
        for p in range(t.start, L, unit_cell):
            sites = [(p + j) % L for j in range(t.span)]
            if not pbc and p + t.span > L:
                continue
            place = d ** np.arange(t.span - 1, -1, -1, dtype=np.int64)
            site_w = d ** (L - 1 - np.array(sites, dtype=np.int64))
            local = digits[:, sites] @ place
            base = codes - digits[:, sites] @ site_w
            for o, i in zip(nz_out, nz_in):
                sel = np.nonzero(local == i)[0]
                if not len(sel):
                    continue
                out_digits = (o // place) % d
                new = base[sel] + out_digits @ site_w
                idx = hilbert.index(new)
                ok = idx >= 0
                rows.append(idx[ok])
                cols.append(sel[ok])
                vals.append(np.full(ok.sum(), op[o, i]))
    if rows:
        r, c, v = np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
    else:
        r = c = np.zeros(0, dtype=np.int64)
        v = np.zeros(0, dtype=complex)
    return scipy.sparse.csr_matrix((v, (r, c)), shape=(hilbert.dim, hilbert.dim))


def build_finite_hamiltonian(h, L: int, pbc: bool = True, hilbert: FiniteHilbert | None = None,
                             cap: int = DEFAULT_CAP):
    """Sparse CSR Hamiltonian of the Hermitian terms of ``h`` on ``L`` sites.

    Penalty terms are excluded.  The basis is :func:`hilbert_for` unless given.
    """
    if L % h.unit_cell:
        raise InvalidInputError(f"L={L} is not a multiple of the unit cell {h.unit_cell}")
    if hilbert is None:
        hilbert = hilbert_for(h, L, pbc, cap)
    elif hilbert.dim > cap:
        raise DimensionCapError(f"dimension {hilbert.dim} exceeds cap {cap}")
    return build_operator(hilbert, h.terms, h.unit_cell, pbc)


# ----------------------------------------------------------------------------
# translation sectors


def translate_codes(hilbert: FiniteHilbert, codes, step: int) -> np.ndarray:
    """Codes of ``T^step`` applied to configurations: site ``j`` moves to ``j + step``."""
    dig = hilbert.digits(codes)
    return hilbert.encode(np.roll(dig, step, axis=1))


def translate(state: FiniteState, step: int) -> FiniteState:
    new = state.hilbert.index(translate_codes(state.hilbert, state.hilbert.codes, step))
    if np.any(new < 0):
        raise InvalidInputError("configuration space is not translation invariant")
    out = np.zeros_like(state.vector)
    out[new] = state.vector
    return FiniteState(out, state.hilbert)


@dataclass(frozen=True, eq=False)
class SymmetrySector:
    """Momentum-``k`` sector of translations by ``step`` sites.

    ``basis`` is a sparse ``(dim, n)`` matrix whose columns are the orthonormal
    states ``|r, k> = R^-1/2 sum_m exp(-i k m) T^m |r>`` over orbits of length
    ``R`` compatible with ``k``.
    """

    hilbert: FiniteHilbert
    step: int
    k: float
    basis: scipy.sparse.csr_matrix = field(repr=False)
    hamiltonian: np.ndarray | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return self.basis.shape[1]


def _orbits(hilbert: FiniteHilbert, step: int):
    n_tr = hilbert.L // step
    cur = hilbert.codes.copy()
    images = [cur]
    for _ in range(1, n_tr):
        cur = translate_codes(hilbert, cur, step)
        images.append(cur)
    images = np.array(images)  # (n_tr, dim)
    rep = images.min(axis=0)
    period = np.full(hilbert.dim, n_tr)
    for m in range(n_tr - 1, 0, -1):
        period[images[m] == images[0]] = m
    return images, rep, period


def sector_decompose(hilbert: FiniteHilbert, step: int, k: float, hamiltonian=None) -> SymmetrySector:
    """Orbit construction of the momentum sector ``k`` (radians per ``step`` sites)."""
    if step < 1 or hilbert.L % step:
        raise InvalidInputError(f"L={hilbert.L} is not divisible by step {step}")
    images, rep, period = _orbits(hilbert, step)
    if hilbert.index(images.ravel()).min() < 0:
        raise InvalidInputError("configuration space is not translation invariant")
    is_rep = rep == hilbert.codes
    rows, cols, vals = [], [], []
    col = 0
    for i in np.nonzero(is_rep)[0]:
        r = period[i]
        if abs(np.exp(1j * k * r) - 1) > 1e-9:
            continue
        idx = hilbert.index(images[:r, i])
        rows.append(idx)
        cols.append(np.full(r, col))
        vals.append(np.exp(-1j * k * np.arange(r)) / np.sqrt(r))
        col += 1
    if col:
        basis = scipy.sparse.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(hilbert.dim, col)
        )
    else:
        basis = scipy.sparse.csr_matrix((hilbert.dim, 0), dtype=complex)
    hk = None
    if hamiltonian is not None:
        hk = (basis.conj().T @ (hamiltonian @ basis)).toarray()
        hk = (hk + hk.conj().T) / 2
    return SymmetrySector(hilbert, step, k, basis, hk)


def full_sector(hilbert: FiniteHilbert, hamiltonian) -> SymmetrySector:
    """The whole space as a trivial sector."""
    basis = scipy.sparse.identity(hilbert.dim, dtype=complex, format="csr")
    hk = hamiltonian.toarray() if scipy.sparse.issparse(hamiltonian) else np.asarray(hamiltonian)
    return SymmetrySector(hilbert, hilbert.L, 0.0, basis, hk)


def momenta(L: int, step: int) -> np.ndarray:
    n = L // step
    return 2 * np.pi * np.arange(n) / n


# ----------------------------------------------------------------------------
# spectra


@dataclass(frozen=True, eq=False)
class SpectrumResult:
    """Eigenpairs of a sector with optional half-chain entropies and probe overlaps."""

    energies: np.ndarray
    vectors: np.ndarray = field(repr=False)
    entropies: np.ndarray | None
    overlaps: np.ndarray | None
    sector: SymmetrySector | None = field(default=None, repr=False)


def _cut_indices(hilbert: FiniteHilbert, cut: int):
    dig = hilbert.digits()
    d = hilbert.local_dim
    left = dig[:, :cut] @ (d ** np.arange(cut - 1, -1, -1, dtype=np.int64))
    right = dig[:, cut:] @ (d ** np.arange(hilbert.L - cut - 1, -1, -1, dtype=np.int64))
    lu, li = np.unique(left, return_inverse=True)
    ru, ri = np.unique(right, return_inverse=True)
    return li, ri, len(lu), len(ru)


def schmidt_values(state: FiniteState, cut: int | None = None) -> np.ndarray:
    """Schmidt coefficients of the cut after ``cut`` sites (default ``L // 2``)."""
    hil = state.hilbert
    cut = hil.L // 2 if cut is None else cut
    li, ri, nl, nr = _cut_indices(hil, cut)
    m = np.zeros((nl, nr), dtype=complex)
    m[li, ri] = state.vector
    return np.linalg.svd(m, compute_uv=False)


def entanglement_entropy(state: FiniteState, cut: int | None = None) -> float:
    return von_neumann_entropy(schmidt_values(state, cut))


def eigensystem(sector: SymmetrySector, probe: FiniteState | None = None, entropies: bool = True,
                cut: int | None = None) -> SpectrumResult:
    """Full dense diagonalization of a sector.

    Entropies are computed for the half cut after lifting each eigenvector to the
    configuration basis.  With a ``probe``, its squared overlaps with every
    eigenvector are attached.
    """
    if sector.hamiltonian is None:
        raise InvalidInputError("sector has no Hamiltonian attached")
    if sector.dim > DENSE_CAP:
        raise DimensionCapError(f"sector dimension {sector.dim} exceeds dense cap {DENSE_CAP}; reduce L")
    if sector.dim == 0:
        empty = np.zeros(0)
        return SpectrumResult(empty, np.zeros((0, 0), complex), empty, empty if probe is not None else None, sector)
    e, v = scipy.linalg.eigh(sector.hamiltonian)
    ent = None
    if entropies:
        hil = sector.hilbert
        c = hil.L // 2 if cut is None else cut
        li, ri, nl, nr = _cut_indices(hil, c)
        lifted = sector.basis @ v
        ent = np.empty(len(e))
        m = np.zeros((nl, nr), dtype=complex)
        for n in range(len(e)):
            m[li, ri] = lifted[:, n]
            ent[n] = von_neumann_entropy(np.linalg.svd(m, compute_uv=False))
    ov = None
    if probe is not None:
        coeff = sector.basis.conj().T @ probe.vector
        ov = np.abs(v.conj().T @ coeff) ** 2
    return SpectrumResult(e, v, ent, ov, sector)


def overlaps(psi: FiniteState, spectrum: SpectrumResult):
    """``(energies, |<n|psi>|^2, sector weight)`` for the eigenstates of a spectrum."""
    coeff = spectrum.sector.basis.conj().T @ psi.vector
    weight = float(np.vdot(coeff, coeff).real)
    ov = np.abs(spectrum.vectors.conj().T @ coeff) ** 2 if len(spectrum.energies) else np.zeros(0)
    return spectrum.energies, ov, weight


def verify_eigenstate(h, psi: FiniteState, E: float) -> float:
    """``||(H - E) psi||`` with ``h`` a sparse/dense matrix or a HamiltonianSpec."""
    if hasattr(h, "terms"):
        h = build_finite_hamiltonian(h, psi.hilbert.L, hilbert=psi.hilbert)
    return float(np.linalg.norm(h @ psi.vector - E * psi.vector))


def expectation(h, psi: FiniteState) -> float:
    return float(np.vdot(psi.vector, h @ psi.vector).real)


# ----------------------------------------------------------------------------
# scar towers and the finite ScarFinder step


def _q_plus(hilbert: FiniteHilbert):
    from .models import Term

    sp2 = np.asarray(SPIN1["Splus2"])
    return build_operator(hilbert, [Term(0, 1, sp2, 1.0), Term(1, 1, sp2, -1.0)], 2)


def scar_tower(L: int) -> list:
    """Normalized ``(Q+)^n |- ... ->`` for ``n = 0 .. L``, ``Q+ = sum (-1)^j (S+_j)^2``."""
    if L % 2:
        raise InvalidInputError("the scar tower needs even L")
    hil = FiniteHilbert.full(L, 3)
    q = _q_plus(hil)
    v = np.zeros(hil.dim, dtype=complex)
    v[-1] = 1.0  # all sites in |-> (digit 2)
    out = []
    while np.linalg.norm(v) > 1e-12:
        v = v / np.linalg.norm(v)
        out.append(FiniteState(v, hil))
        v = q @ v
    return out


def finite_mps_vector(tensors, L: int) -> np.ndarray:
    """Periodic-trace contraction ``Tr(A_0 ... A_{L-1})`` of a repeating cell of tensors."""
    n = len(tensors)
    if L % n:
        raise InvalidInputError(f"L={L} is not a multiple of the unit cell {n}")
    a0 = np.asarray(tensors[0]).transpose(1, 0, 2)  # l, s, r
    x = a0
    for j in range(1, L):
        b = np.asarray(tensors[j % n]).transpose(1, 0, 2)
        x = np.tensordot(x, b, axes=(-1, 0))
        x = x.reshape(x.shape[0], -1, x.shape[-1])
    return np.trace(x, axis1=0, axis2=2).reshape(-1)


def type2_tower(L: int, phi: float = np.pi / 2, theta: float = 0.0) -> list:
    """Magnetization-sector components of the finite Type-2 MPS, each normalized."""
    from .models import type2_raw_tensors

    hil = FiniteHilbert.full(L, 3)
    vec = finite_mps_vector(type2_raw_tensors(phi, theta), L)
    sz = np.array([1, 0, -1])[hil.digits()].sum(axis=1)
    out = []
    for m in np.unique(sz):
        part = np.where(sz == m, vec, 0)
        nrm = np.linalg.norm(part)
        if nrm > 1e-10 * np.linalg.norm(vec):
            out.append(FiniteState(part / nrm, hil))
    return out


def eta_decomposition(psi: FiniteState, tower) -> float:
    """Norm of the component of normalized ``psi`` outside the span of ``tower``."""
    t = np.column_stack([s.vector for s in tower])
    q, _ = np.linalg.qr(t)
    v = psi.vector / np.linalg.norm(psi.vector)
    return float(np.linalg.norm(v - q @ (q.conj().T @ v)))


def family_eta(psi: FiniteState, grid: int = 64) -> float:
    """``sqrt(1 - max |<s|psi>|^2)`` over product members ``s`` of the Type-1 family.

    Members are ``cos b |-> + sin b (-1)^j e^{-2 i theta} |+>`` on every site; the
    maximum is found on a grid and refined with Nelder-Mead.
    """
    hil = psi.hilbert
    L = hil.L
    v = (psi.vector / np.linalg.norm(psi.vector)).reshape((3,) * L)

    def overlap(beta, theta):
        out = v
        for j in range(L):
            loc = np.zeros(3, dtype=complex)
            loc[2] = np.cos(beta)
            loc[0] = (-1) ** j * np.sin(beta) * np.exp(-2j * theta)
            out = np.tensordot(loc.conj(), out, axes=(0, 0))
        return abs(complex(out))

    bs = np.linspace(0, np.pi / 2, grid)
    ts = np.linspace(0, np.pi, grid, endpoint=False)
    vals = np.array([[overlap(b, t) for t in ts] for b in bs])
    i, j = np.unravel_index(np.argmax(vals), vals.shape)
    res = scipy.optimize.minimize(lambda p: -overlap(p[0], p[1]), [bs[i], ts[j]], method="Nelder-Mead",
                                  options={"xatol": 1e-10, "fatol": 1e-14})
    best = max(-res.fun, vals.max())
    return float(np.sqrt(max(0.0, 1.0 - best**2)))


def leading_schmidt_product(state: FiniteState, cut: int | None = None) -> FiniteState:
    """Replace ``state`` by its normalized leading Schmidt term across ``cut``.

    Degenerate leading values (within 1e-12) are resolved by taking the
    lexicographically smallest left vector after the SVD phase gauge.
    """
    hil = state.hilbert
    cut = hil.L // 2 if cut is None else cut
    li, ri, nl, nr = _cut_indices(hil, cut)
    m = np.zeros((nl, nr), dtype=complex)
    m[li, ri] = state.vector
    u, s, vh = np.linalg.svd(m, full_matrices=False)
    piv = u[np.argmax(np.abs(u), axis=0), np.arange(u.shape[1])]
    ph = piv / np.abs(piv)
    u, vh = u * ph.conj(), vh * ph[:, None]
    ties = np.nonzero(s >= s[0] - 1e-12)[0]
    pick = 0
    if len(ties) > 1:
        keys = [tuple(np.round(np.concatenate([u[:, t].real, u[:, t].imag]), 12)) for t in ties]
        pick = ties[min(range(len(ties)), key=lambda q: keys[q])]
    prod = np.outer(u[:, pick], vh[pick])
    return FiniteState(prod[li, ri], hil).normalized()


def finite_scarfinder_step(psi: FiniteState, h, dt: float, cut: int | None = None) -> FiniteState:
    """Evolve by ``exp(-i H dt)`` and project on the leading Schmidt product state.

    ``h`` is a sparse or dense matrix on ``psi``'s basis (or a HamiltonianSpec).
    """
    if hasattr(h, "terms"):
        h = build_finite_hamiltonian(h, psi.hilbert.L, hilbert=psi.hilbert)
    if psi.hilbert.L % 2:
        raise InvalidInputError("finite ScarFinder step needs even L")
    if dt == 0:
        v = psi.vector
    elif scipy.sparse.issparse(h):
        v = scipy.sparse.linalg.expm_multiply(-1j * dt * h.tocsc(), psi.vector)
    else:
        v = scipy.linalg.expm(-1j * dt * np.asarray(h)) @ psi.vector
    return leading_schmidt_product(FiniteState(v, psi.hilbert), cut)


def imps_to_finite(psi: UniformMPS, L: int, hilbert: FiniteHilbert | None = None,
                   cap: int = DEFAULT_CAP) -> FiniteState:
    """Tile the unit cell over ``L`` sites, close the trace periodically, normalize.

    With a constrained ``hilbert`` the amplitudes of its configurations are kept.
    """
    if L % psi.unit_cell:
        raise InvalidInputError(f"L={L} is not a multiple of the unit cell {psi.unit_cell}")
    if psi.local_dim**L > cap:
        raise DimensionCapError(f"dimension {psi.local_dim ** L} exceeds cap {cap}")
    vec = finite_mps_vector(psi.tensors, L)
    full = FiniteHilbert.full(L, psi.local_dim, cap)
    if hilbert is not None and hilbert.constrained:
        vec = vec[hilbert.codes]
        return FiniteState(vec, hilbert).normalized()
    return FiniteState(vec, full).normalized()


def product_finite_state(vectors, L: int) -> FiniteState:
    """Dense product state repeating the given single-site vectors."""
    out = np.ones(1, dtype=complex)
    for j in range(L):
        out = np.kron(out, np.asarray(vectors[j % len(vectors)], dtype=complex))
    d = len(vectors[0])
    return FiniteState(out, FiniteHilbert.full(L, d)).normalized()
