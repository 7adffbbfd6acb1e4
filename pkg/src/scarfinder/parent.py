"""Parent Hamiltonians for a set of target states.

Two constructions are provided.  The inverse method builds the quantum
covariance matrix of a translation-invariant operator basis over the targets;
its null space holds every Hamiltonian in the span of the basis for which the
targets form a degenerate eigenspace.  Projective embedding sandwiches a random
cluster operator between projectors that annihilate the targets locally.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .ed import FiniteHilbert, FiniteState, build_operator
from .errors import EmbeddingError, InvalidInputError
from .models import HamiltonianSpec, Term
from .operators import kron_all

SPAN_RULES = ("single_site", "two_site", "three_site")


@dataclass(frozen=True)
class OperatorBasis:
    """Translation-invariant operator basis generated from local building blocks.

    Parameters
    ----------
    blocks : dict
        Single-site matrices keyed by name.
    rule : {'single_site', 'two_site', 'three_site'}
        All products of ``1``, ``2`` or ``3`` consecutive blocks.  A product
        that is not Hermitian is replaced by its two Hermitian combinations
        ``P + P^dagger`` and ``i (P - P^dagger)``.
    include_identity : bool
        Keep the all-identity product.  It is trivially in every null space, so
        it is dropped by default.
    """

    blocks: dict
    rule: str = "two_site"
    include_identity: bool = False
    names: tuple = field(init=False)
    ops: tuple = field(init=False, repr=False)

    def __post_init__(self):
        if self.rule not in SPAN_RULES:
            raise InvalidInputError(f"unknown span rule {self.rule!r}")
        if not self.blocks:
            raise InvalidInputError("empty block list")
        mats = {k: np.asarray(v, dtype=complex) for k, v in self.blocks.items()}
        d = {m.shape for m in mats.values()}
        if len(d) != 1 or next(iter(d))[0] != next(iter(d))[1]:
            raise InvalidInputError("blocks must be square matrices of one size")
        dim = next(iter(d))[0]
        span = SPAN_RULES.index(self.rule) + 1
        names, ops = [], []
        for combo in itertools.product(mats, repeat=span):
            p = kron_all(*(mats[c] for c in combo))
            if not self.include_identity and np.allclose(p, np.eye(dim ** span)):
                continue
            label = "*".join(combo)
            if np.allclose(p, p.conj().T, atol=1e-13):
                names.append(label)
                ops.append(p)
            else:
                names.append(f"re[{label}]")
                ops.append(p + p.conj().T)
                names.append(f"im[{label}]")
                ops.append(1j * (p - p.conj().T))
        object.__setattr__(self, "names", tuple(names))
        object.__setattr__(self, "ops", tuple(ops))

    @property
    def span(self) -> int:
        return SPAN_RULES.index(self.rule) + 1

    @property
    def local_dim(self) -> int:
        return int(round(self.ops[0].shape[0] ** (1.0 / self.span)))

    def __len__(self) -> int:
        return len(self.ops)

    def terms(self, coefficients) -> list:
        """Local ``Term`` list for ``sum_a c_a h_a`` (one term per nonzero coefficient)."""
        c = np.asarray(coefficients)
        return [Term(0, self.span, op, complex(x)) for op, x in zip(self.ops, c) if abs(x) > 0]


@dataclass(frozen=True)
class CovarianceMatrix:
    """Covariance matrix in an orthonormalized coordinate system.

    Attributes
    ----------
    matrix : ndarray
        Real symmetric ``C`` in HS-orthonormal coordinates.
    transform : ndarray
        ``T`` with columns giving each orthonormal operator in the raw basis.
    gram : ndarray
        HS Gram matrix of the traceless raw operators (on the reference ring).
    basis : OperatorBasis
    n_targets : int
    L : int
    """

    matrix: np.ndarray
    transform: np.ndarray
    gram: np.ndarray
    basis: OperatorBasis
    n_targets: int
    L: int

    def coordinates(self, raw_coefficients) -> np.ndarray:
        """Orthonormal coordinates of ``sum_a x_a h_a`` with its trace removed."""
        x = np.asarray(raw_coefficients, dtype=complex)
        return self.transform.T @ (self.gram @ x)


def _hs_gram(basis: OperatorBasis, ring: int) -> np.ndarray:
    """HS Gram matrix of the translation-invariant traceless sums on a small ring."""
    d = basis.local_dim
    hil = FiniteHilbert.full(ring, d)
    mats = []
    for op in basis.ops:
        m = build_operator(hil, [Term(0, basis.span, op, 1.0)], 1).toarray()
        m -= np.trace(m) / m.shape[0] * np.eye(m.shape[0])
        mats.append(m.reshape(-1))
    a = np.array(mats)
    # Hermitian operators have a real HS Gram matrix.
    return (a.conj() @ a.T).real / hil.dim


def _orthonormal_transform(gram: np.ndarray, rel_tol: float = 1e-10) -> np.ndarray:
    w, v = np.linalg.eigh(gram)
    keep = w > rel_tol * w.max()
    return v[:, keep] / np.sqrt(w[keep])


def covariance_matrix(targets, basis: OperatorBasis, pbc: bool = True) -> CovarianceMatrix:
    """Covariance ``C_ab = Re avg<h_a h_b> - avg<h_a> avg<h_b>`` over ``targets``.

    The average is uniform over the targets.  Each basis operator is summed
    over all translations of the chain the targets live on, and the result is
    expressed in HS-orthonormal coordinates so that null-space dimensions count
    linearly independent Hamiltonians.
    """
    targets = list(targets)
    if not targets:
        raise InvalidInputError("covariance needs at least one target")
    hil = targets[0].hilbert
    for s in targets:
        if s.hilbert is not hil and s.hilbert.dim != hil.dim:
            raise InvalidInputError("targets must share a Hilbert space")
        if abs(s.norm - 1.0) > 1e-8:
            raise InvalidInputError("targets must be normalized")
    psi = np.column_stack([s.vector for s in targets])
    n = psi.shape[1]
    hpsi = []
    for op in basis.ops:
        hpsi.append(build_operator(hil, [Term(0, basis.span, op, 1.0)], 1, pbc) @ psi)
    hpsi = np.array(hpsi)  # (a, dim, n)
    flat = hpsi.transpose(0, 2, 1).reshape(len(basis), -1)
    second = (flat.conj() @ flat.T).real / n
    means = np.einsum("in,ain->a", psi.conj(), hpsi).real / n
    c_raw = second - np.outer(means, means)
    ring = max(2 * basis.span + 1, 4)
    gram = _hs_gram(basis, ring)
    t = _orthonormal_transform(gram)
    c = t.T @ c_raw @ t
    c = (c + c.T) / 2
    return CovarianceMatrix(c, t, gram, basis, n, hil.L)


def null_space(cov: CovarianceMatrix, tol: float = 1e-8) -> np.ndarray:
    """Orthonormal null-space vectors of ``C`` as columns, in orthonormal coordinates.

    Eigenvalues below ``tol * lambda_max`` count as zero; if ``C`` vanishes the
    whole coordinate space is returned.
    """
    if not tol > 0:
        raise InvalidInputError("tol must be positive")
    w, v = np.linalg.eigh(cov.matrix)
    if not w.size:
        return v
    lam_max = w.max()
    if lam_max <= 0:
        return v
    return v[:, w < tol * lam_max]


def raw_coefficients(cov: CovarianceMatrix, vectors) -> np.ndarray:
    """Map orthonormal-coordinate columns back to raw basis coefficients."""
    return cov.transform @ np.asarray(vectors)


def span_residual(cov: CovarianceMatrix, null_vectors, raw) -> float:
    """Relative norm of ``sum x_a h_a`` outside the span of ``null_vectors``."""
    y = cov.coordinates(raw)
    nrm = np.linalg.norm(y)
    if nrm == 0:
        return 0.0
    q = np.asarray(null_vectors)
    return float(np.linalg.norm(y - q @ (q.conj().T @ y)) / nrm)


def eigen_residual(cov: CovarianceMatrix, raw, targets, pbc: bool = True) -> float:
    """Largest ``||H psi - <H> psi||`` over targets for ``H = sum x_a h_a``."""
    hil = targets[0].hilbert
    hm = build_operator(hil, cov.basis.terms(raw), 1, pbc)
    worst = 0.0
    for s in targets:
        hv = hm @ s.vector
        e = np.vdot(s.vector, hv)
        worst = max(worst, float(np.linalg.norm(hv - e * s.vector)))
    return worst


def null_space_terms(cov: CovarianceMatrix, null_vectors, atol: float = 1e-10) -> list:
    """Human-readable term lists ``[{name: coefficient}]`` for each null vector.

    Each vector is scaled so that its largest raw coefficient is one.
    """
    out = []
    for col in np.asarray(raw_coefficients(cov, null_vectors)).T:
        k = np.argmax(np.abs(col))
        col = col / col[k]
        entry = {}
        for name, x in zip(cov.basis.names, col):
            if abs(x) > atol:
                entry[name] = float(x.real) if abs(x.imag) < atol else [float(x.real), float(x.imag)]
        out.append(entry)
    return out


def cluster_support_projector(targets, cluster_size: int, rel_tol: float = 1e-10) -> np.ndarray:
    """Projector onto the union of supports of all ``cluster_size``-site RDMs."""
    if not targets:
        raise InvalidInputError("no targets")
    hil = targets[0].hilbert
    L, d = hil.L, hil.local_dim
    if cluster_size < 1 or cluster_size > L:
        raise InvalidInputError("cluster size out of range")
    if hil.dim != d ** L:
        raise InvalidInputError("projective embedding needs the full Hilbert space")
    cols = []
    for s in targets:
        t = s.vector.reshape((d,) * L)
        for j in range(L):
            rolled = np.moveaxis(t, list(range(L)), [(k - j) % L for k in range(L)])
            m = rolled.reshape(d ** cluster_size, -1)
            u, sv, _ = np.linalg.svd(m, full_matrices=False)
            cols.append(u[:, sv > rel_tol * max(sv.max(), 1e-300)])
    q, sv, _ = np.linalg.svd(np.hstack(cols), full_matrices=False)
    q = q[:, sv > rel_tol * sv.max()]
    return q @ q.conj().T


def gue_matrix(dim: int, rng) -> np.ndarray:
    """Hermitian ``(X + X^dagger) / (2 sqrt(dim))`` with ``X`` standard complex Gaussian."""
    x = (rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))) / np.sqrt(2)
    return (x + x.conj().T) / (2 * np.sqrt(dim))


def projective_embedding(targets, cluster_size: int = 3, seed=None) -> HamiltonianSpec:
    """Random cluster term ``(1 - P) h (1 - P)`` that annihilates every target.

    Returns a one-site-cell :class:`HamiltonianSpec` with a single term of span
    ``cluster_size``.

    Raises
    ------
    EmbeddingError
        If the targets' cluster supports fill the whole cluster space.
    """
    targets = list(targets)
    p = cluster_support_projector(targets, cluster_size)
    dim = p.shape[0]
    q = np.eye(dim) - p
    if np.linalg.norm(q) < 1e-8:
        raise EmbeddingError(f"targets span the full {cluster_size}-site cluster space")
    rng = np.random.default_rng(seed)
    op = q @ gue_matrix(dim, rng) @ q
    op = (op + op.conj().T) / 2
    d = targets[0].hilbert.local_dim
    params = {"cluster_size": cluster_size, "seed": seed, "support_rank": int(round(np.trace(p).real))}
    return HamiltonianSpec("projective_embedding", 1, d, (Term(0, cluster_size, op, 1.0),),
                           params=params)
