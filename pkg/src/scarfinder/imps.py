"""Uniform (infinite) matrix product states with an ``n``-site unit cell.

States are stored in right-canonical form: site tensor ``B_i`` has shape
``(d, chi_i, chi_{i+1})`` and satisfies ``sum_s B_i[s] B_i[s]^† = 1``.  The bond
weights ``lambda_i`` live on the bond to the left of site ``i`` (bond ``n`` is
bond ``0``), so ``diag(lambda_i) B_i`` is the orthogonality-centre tensor of site
``i``.  Time evolution uses Trotterized k-site gates with the Hastings update,
which never divides by small singular values.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize
import scipy.sparse.linalg

from .errors import ConfigurationError, ConvergenceError, DegenerateStateError, GaugeError, InvalidInputError
from .linalg import dominant_eigenvalue, matrix_exponential, svd_truncate, von_neumann_entropy

CANONICAL_TOL = 1e-8


def _readonly(a):
    a = np.ascontiguousarray(a, dtype=complex)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class UniformMPS:
    """Translation-invariant MPS in right-canonical form.

    Parameters
    ----------
    tensors : sequence of ndarray
        ``B_i`` with shape ``(d, chi_i, chi_{i+1})``.
    weights : sequence of ndarray
        ``lambda_i`` with shape ``(chi_i,)``, descending, unit 2-norm.
    """

    tensors: tuple
    weights: tuple

    def __post_init__(self):
        tensors = tuple(_readonly(b) for b in self.tensors)
        weights = tuple(np.array(w, dtype=float) for w in self.weights)
        for w in weights:
            w.setflags(write=False)
        n = len(tensors)
        if n == 0 or len(weights) != n:
            raise InvalidInputError("need one weight vector per site tensor")
        d = tensors[0].shape[0]
        for i, b in enumerate(tensors):
            if b.ndim != 3 or b.shape[0] != d:
                raise InvalidInputError(f"site tensor {i} has shape {b.shape}")
            if b.shape[2] != tensors[(i + 1) % n].shape[1]:
                raise InvalidInputError(f"bond mismatch between sites {i} and {(i + 1) % n}")
            if weights[i].shape != (b.shape[1],):
                raise InvalidInputError(f"weights {i} do not match bond dimension {b.shape[1]}")
        object.__setattr__(self, "tensors", tensors)
        object.__setattr__(self, "weights", weights)

    @property
    def unit_cell(self) -> int:
        return len(self.tensors)

    @property
    def local_dim(self) -> int:
        return self.tensors[0].shape[0]

    @property
    def bond_dims(self) -> tuple:
        return tuple(len(w) for w in self.weights)

    @property
    def chi(self) -> int:
        return max(self.bond_dims)

    def tile(self, reps: int) -> "UniformMPS":
        """The same state written on a cell ``reps`` times larger."""
        return UniformMPS(self.tensors * reps, self.weights * reps)

    def shift(self, k: int) -> "UniformMPS":
        """Translate the state by ``k`` sites (site ``i`` becomes site ``i - k``)."""
        n = self.unit_cell
        order = [(i + k) % n for i in range(n)]
        return UniformMPS([self.tensors[i] for i in order], [self.weights[i] for i in order])

    def to_cell(self, n: int) -> "UniformMPS":
        if n % self.unit_cell:
            raise InvalidInputError(f"cell {n} is not a multiple of {self.unit_cell}")
        return self.tile(n // self.unit_cell)


# ----------------------------------------------------------------------------
# transfer-matrix fixed points and canonical form


def _apply_right(tensors, x):
    """``x -> sum_s M_s x M_s^†`` for the cell product ``M``."""
    for a in reversed(tensors):
        x = np.tensordot(a, x, axes=(2, 0))  # s, l, r'
        x = np.tensordot(x, a.conj(), axes=([0, 2], [0, 2]))
    return x


def _apply_left(tensors, x):
    """``x -> sum_s M_s^† x M_s`` for the cell product ``M``."""
    for a in tensors:
        x = np.tensordot(x, a, axes=(1, 1))  # l', s, r
        x = np.tensordot(a.conj(), x, axes=([0, 1], [1, 0]))
    return x


def _hermitian_fixed_point(apply, chi, x0, power_iters=60):
    """Dominant fixed point ``x`` of a completely positive map, with eigenvalue."""
    x = x0 / np.linalg.norm(x0)
    eta = 0.0
    for _ in range(power_iters):
        y = apply(x)
        eta = np.vdot(x, y)
        res = np.linalg.norm(y - eta * x) / max(np.linalg.norm(y), 1e-300)
        x = y / np.linalg.norm(y)
        if res < 1e-14:
            break
    else:
        op = scipy.sparse.linalg.LinearOperator(
            (chi * chi, chi * chi), matvec=lambda v: apply(v.reshape(chi, chi)).ravel(), dtype=complex
        )
        if chi * chi <= 4:
            dense = np.column_stack([op.matvec(e) for e in np.eye(chi * chi)])
            vals, vecs = np.linalg.eig(dense)
            i = int(np.argmax(np.abs(vals)))
            eta, v = vals[i], vecs[:, i]
        else:
            try:
                vals, vecs = scipy.sparse.linalg.eigs(op, k=1, which="LM", v0=x.ravel(), tol=1e-14, maxiter=10_000)
            except scipy.sparse.linalg.ArpackNoConvergence as exc:
                raise ConvergenceError("transfer-matrix fixed point did not converge", iterations=10_000) from exc
            eta, v = vals[0], vecs[:, 0]
        x = v.reshape(chi, chi)
    tr = np.trace(x)
    x = x * (abs(tr) / tr) if abs(tr) > 0 else x
    x = (x + x.conj().T) / 2
    return float(np.real(eta)), x / np.real(np.trace(x))


def _psd_factor(x, cutoff):
    w, v = np.linalg.eigh(x)
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    keep = w > cutoff * max(w[0], 1e-300)
    return w[keep], v[:, keep]


def canonicalize(tensors, cutoff: float = 1e-14, weights_hint=None) -> UniformMPS:
    """Bring an arbitrary (injective) cell of site tensors into right-canonical form.

    Steps: right fixed point of the cell transfer map, gauge it to the identity,
    diagonalize the left fixed point (its eigenvalues become the bond-0 weights),
    restore per-site right isometry with an RQ sweep, then a left-to-right SVD
    sweep fixes the remaining bond weights.  The state is normalized so the
    dominant transfer eigenvalue is 1.  Directions with fixed-point weight below
    ``cutoff`` (relative) are discarded.  ``weights_hint`` (bond-0 weights of a
    nearby canonical state) only seeds the left fixed-point iteration.
    """
    if isinstance(tensors, UniformMPS):
        weights_hint = tensors.weights[0] if weights_hint is None else weights_hint
        tensors = tensors.tensors
    a = [np.array(t, dtype=complex) for t in tensors]
    if not a:
        raise InvalidInputError("empty unit cell")
    for t in a:
        if not np.all(np.isfinite(t)):
            raise InvalidInputError("site tensor has non-finite entries")
    hint = None
    if weights_hint is not None and len(weights_hint) == a[0].shape[1]:
        hint = np.diag(np.asarray(weights_hint, dtype=complex) ** 2)
    for _ in range(4):
        psi, truncated = _canonicalize_once(a, cutoff, hint)
        if not truncated:
            return psi
        a = [np.array(t) for t in psi.tensors]
        hint = None
    return psi


def _canonicalize_once(a, cutoff, hint=None):
    n = len(a)
    d = a[0].shape[0]
    chi0 = a[0].shape[1]
    truncated = False

    eta, r = _hermitian_fixed_point(lambda x: _apply_right(a, x), chi0, np.eye(chi0, dtype=complex))
    if eta <= 0:
        raise DegenerateStateError("state has zero norm")
    w, v = _psd_factor(r, cutoff)
    truncated |= len(w) < chi0
    x = v * np.sqrt(w)
    xinv = (v / np.sqrt(w)).conj().T
    a[0] = np.tensordot(xinv, a[0], axes=(1, 1)).transpose(1, 0, 2)
    a[-1] = np.tensordot(a[-1], x, axes=(2, 0))

    k0 = len(w)
    guess = hint if hint is not None and k0 == chi0 else np.eye(k0, dtype=complex)
    _, lmat = _hermitian_fixed_point(lambda y: _apply_left(a, y), k0, guess)
    lw, u = _psd_factor(lmat, cutoff)
    truncated |= len(lw) < k0
    a[0] = np.tensordot(u.conj().T, a[0], axes=(1, 1)).transpose(1, 0, 2)
    a[-1] = np.tensordot(a[-1], u, axes=(2, 0))
    a[0] = a[0] / np.sqrt(eta)
    lam0 = np.sqrt(lw / lw.sum())

    # RQ sweep: sites n-1 .. 1 become right isometries, site 0 inherits it from the fixed point.
    for i in range(n - 1, 0, -1):
        di, cl, cr = a[i].shape
        m = a[i].transpose(1, 0, 2).reshape(cl, di * cr)
        rmat, q = scipy.linalg.rq(m, mode="economic")
        k = q.shape[0]
        truncated |= k < cl
        a[i] = q.reshape(k, di, cr).transpose(1, 0, 2)
        a[i - 1] = np.tensordot(a[i - 1], rmat, axes=(2, 0))

    # Site 0: polar factor removes residual non-isometry from round-off.
    m0 = a[0].transpose(1, 0, 2).reshape(a[0].shape[1], -1)
    uu, _, vh = np.linalg.svd(m0, full_matrices=False)
    a[0] = (uu @ vh).reshape(a[0].shape[1], d, a[0].shape[2]).transpose(1, 0, 2)

    weights = [lam0]
    for i in range(n - 1):
        di, cl, cr = a[i].shape
        m = (weights[i][None, :, None] * a[i]).reshape(di * cl, cr)
        _, s, wh = np.linalg.svd(m, full_matrices=False)
        keep = s > cutoff * s[0]
        s, wh = s[keep], wh[keep]
        if len(s) < cr:
            truncated = True
        wmat = wh.conj().T
        a[i] = np.tensordot(a[i], wmat, axes=(2, 0))
        a[i + 1] = np.tensordot(wh, a[i + 1], axes=(1, 1)).transpose(1, 0, 2)
        weights.append(s / np.linalg.norm(s))
    return UniformMPS(a, weights), truncated


def canonical_error(psi: UniformMPS) -> float:
    """Largest deviation from the right/left canonical conditions over the cell."""
    err = 0.0
    n = psi.unit_cell
    for i, b in enumerate(psi.tensors):
        right = np.einsum("sab,scb->ac", b, b.conj())
        err = max(err, np.abs(right - np.eye(b.shape[1])).max())
        lam = psi.weights[i] ** 2
        left = np.einsum("sab,a,sac->bc", b.conj(), lam, b)
        err = max(err, np.abs(left - np.diag(psi.weights[(i + 1) % n] ** 2)).max())
    for w in psi.weights:
        err = max(err, abs(np.linalg.norm(w) - 1.0))
    return float(err)


def check_canonical(psi: UniformMPS, tol: float = CANONICAL_TOL) -> None:
    """Raise :class:`GaugeError` unless ``psi`` satisfies the canonical conditions."""
    err = canonical_error(psi)
    if not err < tol:
        raise GaugeError(f"state is not canonical (deviation {err:.2e}); call canonicalize first")


def product_state(vectors) -> UniformMPS:
    """chi = 1 state from one single-site vector per cell site."""
    tensors = []
    for v in vectors:
        v = np.asarray(v, dtype=complex)
        nv = np.linalg.norm(v)
        if nv == 0:
            raise DegenerateStateError("zero local vector")
        tensors.append((v / nv).reshape(-1, 1, 1))
    return UniformMPS(tensors, [np.ones(1)] * len(tensors))


# ----------------------------------------------------------------------------
# Trotter gates and iTEBD


@dataclass(frozen=True)
class Gate:
    """A ``span``-site gate applied at every position ``offset + N c``."""

    offset: int
    span: int
    matrix: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class GatePlan:
    """Ordered layers of gates for one Trotter step on an ``unit_cell``-site cell."""

    layers: tuple
    unit_cell: int
    order: int
    dt: complex
    unitary: bool = True


def _padded(term_op, span, k, d):
    if span == k:
        return np.asarray(term_op, dtype=complex)
    return np.kron(term_op, np.eye(d ** (k - span)))


def bond_hamiltonians(h, n: int, include_penalty: bool = True):
    """Per-offset ``K``-site Hamiltonians on an ``n``-site cell.

    Every term is padded with identities on its right to the maximal span ``K``
    and attached to the offset of its first site.
    """
    terms = list(h.terms) + (list(h.penalty) if include_penalty else [])
    k = max(t.span for t in terms)
    d = h.local_dim
    out = [np.zeros((d**k, d**k), dtype=complex) for _ in range(n)]
    for t in terms:
        for p in range(t.start % h.unit_cell, n, h.unit_cell):
            out[p] += t.coefficient * _padded(t.op, t.span, k, d)
    return k, out


def working_cell(h, unit_cell: int = 1) -> int:
    """Smallest multiple of ``lcm(state cell, Hamiltonian cell)`` holding the widest term."""
    spans = [t.span for t in list(h.terms) + list(h.penalty)]
    k = max(spans)
    base = math.lcm(h.unit_cell, unit_cell)
    return base * math.ceil(k / base)


def trotter_plan(h, dt: complex, order: int = 2, unit_cell: int = 1, include_penalty: bool = True,
                 cell: int | None = None) -> GatePlan:
    """Trotter decomposition of ``exp(-i H dt)`` into layers of k-site gates.

    Parameters
    ----------
    h : HamiltonianSpec
    dt : complex
        Step; ``dt = -i tau`` gives imaginary-time evolution ``exp(-H tau)``.
    order : {1, 2}
        First order (layers 0..N-1) or palindromic second order (Strang).
    unit_cell : int
        Unit cell of the state that will be evolved.
    cell : int, optional
        Force the working cell; it must hold the widest term and be a multiple of
        both unit cells.
    """
    if dt == 0:
        raise InvalidInputError("dt must be nonzero")
    if order not in (1, 2):
        raise InvalidInputError("order must be 1 or 2")
    n = working_cell(h, unit_cell)
    if cell is not None:
        k_max = max(t.span for t in list(h.terms) + list(h.penalty))
        base = math.lcm(h.unit_cell, unit_cell)
        if cell < k_max or cell % base:
            raise ConfigurationError(f"working cell {cell} cannot host terms of span {k_max}")
        n = cell
    k, hs = bond_hamiltonians(h, n, include_penalty)
    active = [o for o in range(n) if np.any(hs[o])]
    if not active:
        active = [0]

    def gate(o, step):
        return Gate(o, k, matrix_exponential(hs[o], -1j * step))

    if order == 1 or len(active) == 1:
        layers = [gate(o, dt) for o in active]
    else:
        half = [gate(o, dt / 2) for o in active[:-1]]
        layers = half + [gate(active[-1], dt)] + half[::-1]
    unitary = all(np.allclose(g.matrix.conj().T @ g.matrix, np.eye(len(g.matrix)), atol=1e-12) for g in layers)
    return GatePlan(tuple(layers), n, order, complex(dt), unitary)


def _apply_gate(tensors, weights, g: Gate, chi_max, cutoff):
    n = len(tensors)
    k = g.span
    o = g.offset
    sites = [(o + j) % n for j in range(k)]
    d = tensors[0].shape[0]
    # theta[a, s0..sk-1, b] from B tensors (d, l, r)
    th = tensors[sites[0]].transpose(1, 0, 2)
    for j in sites[1:]:
        th = np.tensordot(th, tensors[j], axes=(-1, 1))  # ..., s, r
        th = np.moveaxis(th, -2, -2)
    chil = th.shape[0]
    chir = th.shape[-1]
    th = th.reshape(chil, d**k, chir)
    th = np.matmul(g.matrix, th)
    raw = th
    cur = weights[sites[0]][:, None, None] * th
    if not np.linalg.norm(cur) > 1e-300:
        raise DegenerateStateError("gate annihilated the state")
    discarded = 0.0
    new_b = [None] * k
    right = chir
    for j in range(k - 1, 0, -1):
        m = cur.reshape(chil * d**j, d * right)
        svd = svd_truncate(m, chi_max, cutoff)
        s = svd.values
        if not s[0] > 0:
            raise DegenerateStateError("all singular values vanished")
        discarded += svd.discarded_weight
        new_b[j] = svd.right.reshape(len(s), d, right)
        weights[sites[j]] = s / np.linalg.norm(s)
        cur = (svd.left * s).reshape(chil, d**j, len(s))
        right = len(s)
    # Hastings update for the first site: contract the raw gated block with the new right isometries.
    x = raw.reshape((chil,) + (d,) * k + (chir,))
    for j in range(k - 1, 0, -1):
        x = np.tensordot(x, new_b[j].conj(), axes=([-2, -1], [1, 2]))
    tensors[sites[0]] = x.transpose(1, 0, 2)
    for j in range(1, k):
        tensors[sites[j]] = new_b[j].transpose(1, 0, 2)
    return discarded


def itebd_step(psi: UniformMPS, plan: GatePlan, chi_max: int, cutoff: float = 1e-14,
               recanonicalize: bool = True):
    """Apply one full Trotter step.

    Returns ``(psi', discarded_weight)`` where the discarded weight is summed over
    all SVD splits of the step.  The output is re-canonicalized (which also
    restores unit norm after non-unitary gates).  With ``recanonicalize=False``
    the raw Hastings output is returned; it is canonical up to the truncation
    error of the step when all gates are unitary.
    """
    if chi_max < 1:
        raise InvalidInputError("chi_max must be >= 1")
    if plan.unit_cell % psi.unit_cell:
        raise ConfigurationError(
            f"plan cell {plan.unit_cell} is not a multiple of the state cell {psi.unit_cell}"
        )
    psi = psi.to_cell(plan.unit_cell)
    tensors = [np.array(b) for b in psi.tensors]
    weights = [np.array(w) for w in psi.weights]
    discarded = 0.0
    for g in plan.layers:
        discarded += _apply_gate(tensors, weights, g, chi_max, cutoff)
    if recanonicalize:
        out = canonicalize(tensors, weights_hint=weights[0])
    else:
        out = UniformMPS(tensors, weights)
    return out, discarded


def evolve(psi: UniformMPS, h, t: float, dt: float, chi_max: int, order: int = 2, cutoff: float = 1e-14,
           plan: GatePlan | None = None):
    """Evolve for time ``t`` with steps ``dt``; returns ``(psi, total discarded weight)``."""
    nsteps = int(round(t / dt))
    if abs(nsteps * dt - t) > 1e-9 * max(1.0, abs(t)):
        raise InvalidInputError(f"t={t} is not a multiple of dt={dt}")
    if plan is None:
        plan = trotter_plan(h, dt, order, psi.unit_cell)
    total = 0.0
    for _ in range(nsteps):
        psi, w = itebd_step(psi, plan, chi_max, cutoff)
        total += w
    return psi, total


# ----------------------------------------------------------------------------
# observables


def _local_expectation(psi, op, span, i):
    n = psi.unit_cell
    th = psi.weights[i % n][:, None, None] * psi.tensors[i % n].transpose(1, 0, 2)
    for j in range(1, span):
        th = np.tensordot(th, psi.tensors[(i + j) % n], axes=(-1, 1))
        th = np.moveaxis(th, -2, -2)
    d = psi.local_dim
    th = th.reshape(th.shape[0], d**span, th.shape[-1])
    return complex(np.vdot(th, np.matmul(op, th)))


def expectation_local(psi: UniformMPS, op, span: int | None = None, site: int | None = None) -> complex:
    """Expectation of a ``span``-site operator, averaged over the unit cell.

    With ``site`` given, the value at that single position is returned instead.
    """
    op = np.asarray(op, dtype=complex)
    d = psi.local_dim
    if span is None:
        span = int(round(math.log(op.shape[0], d)))
    if op.shape != (d**span, d**span):
        raise InvalidInputError(f"operator shape {op.shape} does not match span {span}")
    check_canonical(psi)
    if site is not None:
        return _local_expectation(psi, op, span, site)
    n = psi.unit_cell
    return sum(_local_expectation(psi, op, span, i) for i in range(n)) / n


def energy_density(psi: UniformMPS, h) -> float:
    """Energy per site of the Hermitian part of ``h`` (penalty excluded)."""
    check_canonical(psi)
    n = math.lcm(psi.unit_cell, h.unit_cell)
    total = 0.0
    for t in h.terms:
        for p in range(t.start % h.unit_cell, n, h.unit_cell):
            total += (t.coefficient * _local_expectation(psi, t.op, t.span, p)).real
    return float(total / n)


def penalty_weight(psi: UniformMPS, h) -> float:
    """Average expectation of the (coefficient-free) penalty operators per site."""
    check_canonical(psi)
    if not h.penalty:
        return 0.0
    n = math.lcm(psi.unit_cell, h.unit_cell)
    total = 0.0
    for t in h.penalty:
        for p in range(t.start % h.unit_cell, n, h.unit_cell):
            total += _local_expectation(psi, t.op, t.span, p).real
    return float(total / n)


def half_chain_entropy(psi: UniformMPS, bond: int = 0) -> float:
    """Von Neumann entropy of the weights on ``bond`` (natural log)."""
    return von_neumann_entropy(psi.weights[bond % psi.unit_cell])


def _site_transfer(b1, b2):
    d, l1, r1 = b1.shape
    _, l2, r2 = b2.shape
    return np.einsum("sab,scd->acbd", b1, b2.conj()).reshape(l1 * l2, r1 * r2)


def mixed_transfer_eigenvalue(tensors1, tensors2) -> complex:
    """Dominant eigenvalue of the cell transfer matrix ``sum_s M1_s (x) conj(M2_s)``."""
    l1 = tensors1[0].shape[1]
    l2 = tensors2[0].shape[1]
    dim = l1 * l2
    if dim <= 256:
        t = np.eye(dim, dtype=complex)
        for b1, b2 in zip(tensors1, tensors2):
            t = t @ _site_transfer(b1, b2)
        return dominant_eigenvalue(t)

    def matvec(v):
        x = v.reshape(l1, l2)
        for b1, b2 in zip(reversed(tensors1), reversed(tensors2)):
            x = np.tensordot(b1, x, axes=(2, 0))
            x = np.tensordot(x, b2.conj(), axes=([0, 2], [0, 2]))
        return x.ravel()

    op = scipy.sparse.linalg.LinearOperator((dim, dim), matvec=matvec, dtype=complex)
    try:
        vals = scipy.sparse.linalg.eigs(op, k=min(4, dim - 2), which="LM", tol=1e-12,
                                        maxiter=10_000, return_eigenvectors=False)
    except scipy.sparse.linalg.ArpackNoConvergence as exc:
        raise ConvergenceError("mixed transfer eigenvalue did not converge", iterations=10_000) from exc
    return complex(vals[np.argmax(np.abs(vals))])


def _aligned(psi1, psi2):
    if psi1.local_dim != psi2.local_dim:
        raise InvalidInputError("states have different local dimensions")
    n = math.lcm(psi1.unit_cell, psi2.unit_cell)
    return psi1.to_cell(n), psi2.to_cell(n), n


def transfer_fidelity(psi1: UniformMPS, psi2: UniformMPS) -> float:
    """Per-site fidelity ``|eta|^(1/N)`` from the dominant mixed transfer eigenvalue.

    Both states are written on the least common multiple ``N`` of their cells.
    """
    a, b, n = _aligned(psi1, psi2)
    eta = mixed_transfer_eigenvalue(a.tensors, b.tensors)
    return float(abs(eta) ** (1.0 / n))


# ----------------------------------------------------------------------------
# scar-family fidelity


def _batched_cell_eigmax(mats):
    """``max |eig|`` for a batch of square matrices (last two axes)."""
    if mats.shape[-1] == 1:
        return np.abs(mats[..., 0, 0])
    return np.abs(np.linalg.eigvals(mats)).max(axis=-1)


def _type1_vectors(beta, theta):
    # site parity j = 0, 1: cos b |-> + sin b (-1)^j e^{-2 i theta} |+>
    beta = np.asarray(beta, dtype=float)
    theta = np.asarray(theta, dtype=float)
    out = np.zeros(beta.shape + (2, 3), dtype=complex)
    ph = np.exp(-2j * theta)
    for j in (0, 1):
        out[..., j, 2] = np.cos(beta)
        out[..., j, 0] = (-1) ** j * np.sin(beta) * ph
    return out


def _type1_fid(psi_cell, betas, thetas):
    """Per-site fidelity of ``psi_cell`` (even cell) with Type-1 members on a batch."""
    vecs = _type1_vectors(betas, thetas)  # (..., 2, 3)
    n = psi_cell.unit_cell
    chi0 = psi_cell.tensors[0].shape[1]
    t = np.broadcast_to(np.eye(chi0, dtype=complex), vecs.shape[:-2] + (chi0, chi0)).copy()
    for i, b in enumerate(psi_cell.tensors):
        site = np.einsum("...s,sab->...ab", vecs[..., i % 2, :].conj(), b)
        t = t @ site
    return _batched_cell_eigmax(t) ** (1.0 / n)


def _type2_raw(phi, theta):
    """Raw Type-2 tensors (before canonicalization) for both site parities, batched."""
    phi = np.asarray(phi, dtype=float)
    theta = np.asarray(theta, dtype=float)
    shape = np.broadcast(phi, theta).shape
    out = np.zeros(shape + (2, 3, 2, 2), dtype=complex)
    c, s = np.cos(phi / 2), np.sin(phi / 2)
    for j in (0, 1):
        sg = (-1) ** j
        out[..., j, 0, 0, 0] = s * np.exp(1j * theta)
        out[..., j, 1, 0, 1] = c
        out[..., j, 1, 1, 0] = sg * s
        out[..., j, 2, 1, 1] = sg * c * np.exp(-1j * theta)
    return out


def _type2_fid(psi_cell, phis, thetas):
    raw = _type2_raw(phis, thetas)  # (..., 2, d, 2, 2)
    n = psi_cell.unit_cell
    chi0 = psi_cell.tensors[0].shape[1]
    batch = raw.shape[:-4]
    t = np.broadcast_to(np.eye(2 * chi0, dtype=complex), batch + (2 * chi0, 2 * chi0)).copy()
    tn = np.broadcast_to(np.eye(4, dtype=complex), batch + (4, 4)).copy()
    for i, b in enumerate(psi_cell.tensors):
        a = raw[..., i % 2, :, :, :]
        cl, cr = b.shape[1], b.shape[2]
        site = np.einsum("sab,...scd->...acbd", b, a.conj()).reshape(batch + (cl * 2, cr * 2))
        t = t @ site
        selfsite = np.einsum("...sab,...scd->...acbd", a, a.conj()).reshape(batch + (4, 4))
        tn = tn @ selfsite
    num = _batched_cell_eigmax(t)
    den = np.sqrt(_batched_cell_eigmax(tn))
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.where(den > 0, num / den, 0.0)
    return val ** (1.0 / n)


@dataclass(frozen=True)
class FamilyFit:
    """Best family member found by :func:`scar_fidelity_fit`."""

    fidelity: float
    params: tuple


def scar_fidelity_fit(psi: UniformMPS, family: str = "Type1", grid: int = 64, xatol: float = 1e-6) -> FamilyFit:
    """Maximize the per-site transfer fidelity over a scar family.

    ``Type1`` members are product states ``cos b |-> + sin b (-1)^j e^{-2i theta} |+>``
    with ``b`` in ``[0, pi/2]`` (``tan b`` is the amplitude ``xi``) and ``theta`` in
    ``[0, pi)``.  ``Type2`` members are the bond-dimension-2 states with angles
    ``(phi, theta)``.  A ``grid x grid`` scan is refined with Nelder-Mead.
    Returned params are ``(theta, xi)`` for Type1 and ``(phi, theta)`` for Type2.
    """
    if family not in ("Type1", "Type2"):
        raise InvalidInputError(f"unknown scar family {family!r}")
    if psi.local_dim != 3:
        raise InvalidInputError("scar families live in the spin-1 chain")
    cell = psi.to_cell(math.lcm(psi.unit_cell, 2))
    if family == "Type1":
        xs = np.linspace(0, np.pi / 2, grid)
        ys = np.linspace(0, np.pi, grid, endpoint=False)
        fn = _type1_fid
    else:
        xs = np.linspace(0, 2 * np.pi, grid, endpoint=False)
        ys = np.linspace(0, 2 * np.pi, grid, endpoint=False)
        fn = _type2_fid
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    vals = fn(cell, gx, gy)
    best_val, best_x = -1.0, None
    for idx in np.argsort(vals.ravel())[::-1][:3]:
        x0 = np.array([gx.ravel()[idx], gy.ravel()[idx]])
        res = scipy.optimize.minimize(
            lambda p: -float(fn(cell, p[0], p[1])), x0, method="Nelder-Mead",
            options={"xatol": xatol, "fatol": 1e-14, "maxiter": 2000},
        )
        val = -res.fun
        if val > best_val:
            best_val, best_x = val, res.x
    best_val = max(best_val, float(vals.max()))
    if family == "Type1":
        params = (float(best_x[1] % np.pi), float(np.tan(best_x[0])))
    else:
        params = (float(best_x[0]), float(best_x[1]))
    return FamilyFit(float(min(best_val, 1.0 + 1e-12)), params)


def scar_fidelity(psi: UniformMPS, family: str = "Type1", grid: int = 64) -> float:
    """``F_S = max over the family of the per-site transfer fidelity with psi``."""
    return scar_fidelity_fit(psi, family, grid).fidelity


# ----------------------------------------------------------------------------
# trajectories


@dataclass(frozen=True)
class TrajectoryRecord:
    time: float
    energy: float
    entropy: tuple
    log_fidelity: float
    observables: dict = field(default_factory=dict)


@dataclass
class Trajectory:
    """Time series of free-evolution records; times strictly increasing."""

    records: list = field(default_factory=list)

    def append(self, rec: TrajectoryRecord) -> None:
        if self.records and not rec.time > self.records[-1].time:
            raise InvalidInputError("trajectory times must increase strictly")
        self.records.append(rec)

    def column(self, name: str) -> np.ndarray:
        if name in ("time", "energy", "log_fidelity"):
            return np.array([getattr(r, name) for r in self.records])
        if name == "entropy":
            return np.array([r.entropy[0] for r in self.records])
        if name == "max_entropy":
            return np.array([max(r.entropy) for r in self.records])
        return np.array([r.observables[name] for r in self.records])

    def __len__(self) -> int:
        return len(self.records)


def run_trajectory(psi0: UniformMPS, h, t_total: float, dt: float, chi_max: int, record_every: int = 1,
                   observables: dict | None = None, order: int = 2, cutoff: float = 1e-14):
    """Free evolution recording energy, bond entropies, log-fidelity and observables.

    ``observables`` maps names to ``(operator, span)``.  Returns ``(psi, Trajectory)``.
    """
    observables = observables or {}
    plan = trotter_plan(h, dt, order, psi0.unit_cell)
    ref = psi0
    traj = Trajectory()

    def record(psi, t):
        obs = {k: expectation_local(psi, op, span).real for k, (op, span) in observables.items()}
        fid = transfer_fidelity(psi, ref)
        ent = tuple(half_chain_entropy(psi, b) for b in range(psi.unit_cell))
        traj.append(TrajectoryRecord(t, energy_density(psi, h), ent, float(np.log(max(fid, 1e-300))), obs))

    psi = psi0
    record(psi, 0.0)
    nsteps = int(round(t_total / dt))
    for step in range(1, nsteps + 1):
        psi, _ = itebd_step(psi, plan, chi_max, cutoff)
        if step % record_every == 0 or step == nsteps:
            record(psi, step * dt)
    return psi, traj
