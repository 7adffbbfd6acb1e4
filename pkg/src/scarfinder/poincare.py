"""Poincare sections of PXP dynamics projected on a three-angle chi=2 manifold.

Each iteration evolves the ansatz state exactly (iTEBD at a working bond
dimension) for a short time and projects back by maximizing the per-site
overlap over the three angles.  Crossings of the plane ``theta_2 = 0`` are
recorded by linear interpolation on the lifted angle.  At finite ``dt`` the
iteration contracts onto the centres of stable islands, which
:func:`find_fixed_points` collects from many random starts.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.cluster.hierarchy
import scipy.optimize
import scipy.spatial.distance

from .errors import InvalidInputError, ProjectionLostError
from .imps import UniformMPS, canonicalize, energy_density, itebd_step, trotter_plan
from .models import pxp

log = logging.getLogger(__name__)

TWO_PI = 2 * np.pi
FUNDAMENTAL_DOMAIN = ((0.5 * np.pi, 1.5 * np.pi), (0.0, np.pi))
CLUSTER_RADIUS = 0.02 * np.pi
LOST_FIDELITY = 0.5
MAX_PERIOD = 2


def wrap(theta):
    """Canonical representative in ``[0, 2 pi)``."""
    return np.mod(np.asarray(theta, dtype=float), TWO_PI)


@dataclass(frozen=True)
class PoincarePoint:
    """Interpolated crossing of the plane ``theta_2 = 0 (mod 2 pi)``.

    ``direction`` is the sign of ``d theta_2`` across the crossing.
    """

    theta1: float
    theta3: float
    index: int
    trajectory: int = 0
    direction: int = 1


@dataclass(frozen=True)
class FixedPoint:
    """Cluster of terminal crossings from independent runs."""

    angles: tuple
    count: int
    radius: float
    members: tuple = field(default=(), repr=False)


@dataclass
class PoincareRun:
    """Result of :func:`poincare_run`.

    ``angles`` holds the lifted angle triple after every iteration, starting
    with the initial one.  ``lost`` is set when a projection fell below the
    trust threshold; the data up to that point are kept.
    """

    crossings: list
    angles: np.ndarray
    fidelities: np.ndarray
    lost: bool = False

    @property
    def final(self) -> np.ndarray:
        return self.angles[-1]


# ----------------------------------------------------------------------------
# ansatz


def ansatz_tensors(theta) -> list:
    """Raw site tensors ``(d, 2, 2)`` of the three-site cell, basis ``(up, down)``."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (3,) or not np.all(np.isfinite(theta)):
        raise InvalidInputError("need three finite angles")
    out = []
    for t in theta:
        a = np.zeros((2, 2, 2), dtype=complex)
        a[0, 0, 1] = 1j
        a[1, 0, 0] = np.cos(t)
        a[1, 1, 0] = np.sin(t)
        out.append(a)
    return out


def ansatz_mps(theta) -> UniformMPS:
    """Canonical iMPS of the angle triple (chi <= 2, 3-site cell)."""
    return canonicalize(ansatz_tensors(theta))


def _cell_transfer(bs, cs):
    t = None
    for b, c in zip(bs, cs):
        m = np.einsum("sab,scd->acbd", b, c.conj()).reshape(b.shape[1] * c.shape[1], -1)
        t = m if t is None else t @ m
    return t


def _eigmax(m):
    return float(np.abs(np.linalg.eigvals(m)).max())


def ansatz_fidelity(psi: UniformMPS, theta) -> float:
    """Per-site fidelity between canonical ``psi`` (3-site cell) and the ansatz state."""
    a = ansatz_tensors(theta)
    mixed = _eigmax(_cell_transfer(psi.tensors, a))
    norm = _eigmax(_cell_transfer(a, a))
    if norm <= 0:
        return 0.0
    return (mixed / math.sqrt(norm)) ** (1.0 / 3.0)


def project_to_ansatz(psi: UniformMPS, guess, xatol: float = 1e-7, restarts: int = 1):
    """Angles maximizing :func:`ansatz_fidelity`, found by Nelder-Mead from ``guess``.

    Returns ``(theta, fidelity)``.  The result is never worse than ``guess``.

    Raises
    ------
    ProjectionLostError
        If the best fidelity is below 0.5.
    """
    if psi.unit_cell != 3:
        psi = psi.to_cell(3) if 3 % psi.unit_cell == 0 else None
        if psi is None:
            raise InvalidInputError("state is not compatible with a three-site cell")
    x = np.asarray(guess, dtype=float)
    best = ansatz_fidelity(psi, x)

    def cost(v):
        return -ansatz_fidelity(psi, v)

    for _ in range(1 + restarts):
        res = scipy.optimize.minimize(cost, x, method="Nelder-Mead",
                                      options={"xatol": xatol, "fatol": 1e-15, "maxiter": 4000,
                                               "initial_simplex": x + np.vstack([np.zeros(3), 0.02 * np.eye(3)])})
        if -res.fun >= best:
            moved = np.max(np.abs(res.x - x))
            x, best = res.x, -res.fun
            if moved < xatol:
                break
        else:
            break
    if best < LOST_FIDELITY:
        raise ProjectionLostError(f"projection fidelity {best:.3f} below {LOST_FIDELITY}")
    return x, best


# ----------------------------------------------------------------------------
# iteration


def _crossings(prev, new, index, traj):
    """Crossings of ``theta_2 = 2 pi m`` on the lifted line between two iterates."""
    a, b = prev[1], new[1]
    if a == b:
        return []
    lo, hi = min(a, b), max(a, b)
    out = []
    m0 = math.ceil(lo / TWO_PI)
    for m in range(m0, math.floor(hi / TWO_PI) + 1):
        level = m * TWO_PI
        if level == a:
            continue  # counted at the previous step
        f = (level - a) / (b - a)
        p = prev + f * (new - prev)
        out.append(PoincarePoint(float(wrap(p[0])), float(wrap(p[2])), index, traj, 1 if b > a else -1))
    return out


def poincare_run(theta0, dt: float = 0.1, n_steps: int = 200, h=None, chi_work: int = 12,
                 dt_inner: float = 0.01, trajectory: int = 0, xatol: float = 1e-7) -> PoincareRun:
    """Iterate evolve-for-``dt`` / project-to-ansatz from ``theta0``.

    The blockade is preserved exactly by the PXP term, so the evolution uses the
    PXP Hamiltonian without the penalty.
    """
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    if n_steps < 0:
        raise InvalidInputError("n_steps must be non-negative")
    nin = int(round(dt / dt_inner))
    if nin < 1 or abs(nin * dt_inner - dt) > 1e-9 * dt:
        raise InvalidInputError("dt must be a multiple of dt_inner")
    h = h or pxp(mu=0.0)
    plan = trotter_plan(h, dt_inner, 2, 3, include_penalty=False)
    theta = np.asarray(theta0, dtype=float).copy()
    angles = [theta.copy()]
    fids = [1.0]
    crossings = []
    lost = False
    for step in range(1, n_steps + 1):
        psi = ansatz_mps(theta)
        for k in range(nin):
            psi, _ = itebd_step(psi, plan, chi_work, recanonicalize=k == nin - 1)
        try:
            new, fid = project_to_ansatz(psi, theta, xatol)
        except ProjectionLostError as exc:
            log.info("trajectory %d lost at step %d: %s", trajectory, step, exc)
            lost = True
            break
        # lift: stay on the branch closest to the previous iterate
        new = theta + np.mod(new - theta + np.pi, TWO_PI) - np.pi
        crossings += _crossings(theta, new, step, trajectory)
        theta = new
        angles.append(theta.copy())
        fids.append(fid)
    return PoincareRun(crossings, np.array(angles), np.array(fids), lost)


def ansatz_energy(theta, h=None) -> float:
    """PXP energy density of the ansatz state."""
    return energy_density(ansatz_mps(theta), h or pxp(mu=0.0))


# ----------------------------------------------------------------------------
# fixed points


def angle_distance(a, b) -> float:
    """Euclidean distance on the torus."""
    d = np.mod(np.asarray(a) - np.asarray(b) + np.pi, TWO_PI) - np.pi
    return float(np.linalg.norm(d))


def _cycle_length(pts, tol, max_period):
    """Smallest ``p`` such that each of the last ``p`` crossings lies within ``tol``
    of the crossing ``p`` places before it (0 if there is none)."""
    for p in range(1, min(max_period, len(pts) // 2) + 1):
        if all(angle_distance((pts[-j].theta1, pts[-j].theta3), (pts[-j - p].theta1, pts[-j - p].theta3)) < tol
               for j in range(1, p + 1)):
            return p
    return 0


def terminal_points(run: PoincareRun, tol: float = CLUSTER_RADIUS, max_period: int = MAX_PERIOD) -> list:
    """Settled crossings of a run, per crossing direction.

    An orbit may cross the plane ``p`` times per period in one direction.  When
    each of the last ``p`` crossings returns to within ``tol`` of the one ``p``
    crossings earlier (``p <= max_period``), those ``p`` crossings are the points
    of the closed orbit and all of them are returned.
    """
    out = []
    for sign in (1, -1):
        pts = [c for c in run.crossings if c.direction == sign]
        if len(pts) >= 2:
            p = _cycle_length(pts, tol, max_period)
            if p:
                out += pts[-p:]
    return out


def in_fundamental_domain(theta1: float, theta3: float) -> bool:
    (a0, a1), (b0, b1) = FUNDAMENTAL_DOMAIN
    return a0 <= theta1 <= a1 and b0 <= theta3 <= b1


def _torus_distances(xy):
    d = np.abs(xy[:, None, :] - xy[None, :, :])
    d = np.minimum(d, TWO_PI - d)
    return np.sqrt((d**2).sum(-1))


def cluster_points(points, radius: float = CLUSTER_RADIUS) -> list:
    """Single-linkage clustering on the ``(theta1, theta3)`` torus.

    Points closer than ``radius`` share a cluster, so a slowly converging
    spiral of terminal crossings is not split.  Centres are circular means of
    the members; counts are distinct trajectories.
    """
    points = list(points)
    if not points:
        return []
    if len(points) == 1:
        labels = np.zeros(1, dtype=int)
    else:
        xy = np.array([[p.theta1, p.theta3] for p in points])
        z = scipy.cluster.hierarchy.linkage(scipy.spatial.distance.squareform(_torus_distances(xy), checks=False),
                                            "single")
        labels = scipy.cluster.hierarchy.fcluster(z, radius, "distance")
    out = []
    for lab in np.unique(labels):
        c = [p for p, l in zip(points, labels) if l == lab]
        centre = _centre(c)
        spread = max(angle_distance(centre, (p.theta1, p.theta3)) for p in c)
        count = len({p.trajectory for p in c})
        out.append(FixedPoint((float(centre[0]), 0.0, float(centre[1])), count, spread, tuple(c)))
    out.sort(key=lambda f: (-f.count, f.angles))
    return out


def _centre(members):
    xy = np.array([[p.theta1, p.theta3] for p in members])
    return wrap(np.angle(np.exp(1j * xy).mean(axis=0)))


def find_fixed_points(n_samples: int, dt: float = 0.1, n_steps: int = 1000, seed=None,
                      radius: float = CLUSTER_RADIUS, domain_only: bool = True, engine: str = "batched",
                      starts=None, **run_kw):
    """Cluster the settled terminal crossings of ``n_samples`` random starts.

    Starts are uniform on the angle torus unless ``starts`` (shape
    ``(n_samples, 3)``) is given.  ``engine='batched'`` advances all
    trajectories together with :func:`batched_poincare`; ``'serial'`` uses
    :func:`poincare_run` one start at a time.

    Returns ``(fixed_points, runs)`` with fixed points sorted by basin count.
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    if engine not in ("batched", "serial"):
        raise InvalidInputError(f"unknown engine {engine!r}")
    if starts is None:
        starts = np.random.default_rng(seed).uniform(0, TWO_PI, size=(n_samples, 3))
    else:
        starts = np.asarray(starts, dtype=float).reshape(-1, 3)
        if len(starts) != n_samples:
            raise InvalidInputError("need one start per sample")
    if engine == "batched":
        runs = batched_poincare(starts, dt, n_steps, **run_kw)
    else:
        runs = [poincare_run(th, dt, n_steps, trajectory=i, **run_kw) for i, th in enumerate(starts)]
    points = []
    for run in runs:
        points += terminal_points(run, radius)
    clusters = cluster_points(points, radius)
    if domain_only:
        clusters = [c for c in clusters if in_fundamental_domain(c.angles[0], c.angles[2])]
    return clusters, runs


# ----------------------------------------------------------------------------
# batched engine for many trajectories
#
# The serial path above is the reference implementation.  The batched path runs
# the same iteration on a stack of trajectories: canonical form of the ansatz,
# second-order iTEBD at a fixed padded bond dimension and a Newton projection
# with analytic derivatives of the dominant transfer eigenvalue.


def _batched_ansatz(thetas):
    """Raw ansatz tensors for a stack of angle triples: three arrays ``(n, d, 2, 2)``."""
    n = len(thetas)
    out = []
    for i in range(3):
        a = np.zeros((n, 2, 2, 2), dtype=complex)
        a[:, 0, 0, 1] = 1j
        a[:, 1, 0, 0] = np.cos(thetas[:, i])
        a[:, 1, 1, 0] = np.sin(thetas[:, i])
        out.append(a)
    return out


def _site_maps(a):
    """``sum_s A_s (x) conj(A_s)`` for a stack of site tensors ``(n, d, l, r)``."""
    n, d, l, r = a.shape
    return np.einsum("nsab,nscd->nacbd", a, a.conj()).reshape(n, l * l, r * r)


def _dominant(m):
    """Dominant eigenvalue and eigenvector of a stack of square matrices."""
    w, v = np.linalg.eig(m)
    k = np.argmax(np.abs(w), axis=-1)
    idx = np.arange(len(m))
    return w[idx, k], v[idx, :, k]


def _hermitian_from_vec(v, chi):
    x = v.reshape(-1, chi, chi)
    tr = np.trace(x, axis1=1, axis2=2)
    x = x * (np.abs(tr) / tr)[:, None, None]
    x = (x + x.conj().transpose(0, 2, 1)) / 2
    return x / np.trace(x, axis1=1, axis2=2).real[:, None, None]


def _canonical_batch(a, cutoff=1e-12):
    """Right-canonical form of a stack of 3-site cells, mirroring :func:`canonicalize`.

    Returns ``(tensors, weights, ok)``; ``ok`` flags cells whose fixed points were
    well conditioned.  The other cells must be handled by the serial routine.
    """
    a = [x.copy() for x in a]
    n, d, chi, _ = a[0].shape
    t = _site_maps(a[0]) @ _site_maps(a[1]) @ _site_maps(a[2])
    eta, v = _dominant(t)
    r = _hermitian_from_vec(v, chi)
    w, u = np.linalg.eigh(r)
    ok = (w[:, 0] > cutoff * w[:, -1]) & (eta.real > 0)
    w = np.where(ok[:, None], w, 1.0)
    x = u * np.sqrt(w)[:, None, :]
    xinv = (u / np.sqrt(w)[:, None, :]).conj().transpose(0, 2, 1)
    a[0] = np.einsum("nij,nsjk->nsik", xinv, a[0])
    a[2] = np.einsum("nsij,njk->nsik", a[2], x)
    t = _site_maps(a[0]) @ _site_maps(a[1]) @ _site_maps(a[2])
    _, v = _dominant(t.conj().transpose(0, 2, 1))
    lmat = _hermitian_from_vec(v, chi)
    lw, lu = np.linalg.eigh(lmat)
    lw, lu = lw[:, ::-1], lu[:, :, ::-1]
    ok &= lw[:, -1] > cutoff * lw[:, 0]
    a[0] = np.einsum("nji,nsjk->nsik", lu.conj(), a[0]) / np.sqrt(np.abs(eta))[:, None, None, None]
    a[2] = np.einsum("nsij,njk->nsik", a[2], lu)
    lam0 = np.sqrt(np.clip(lw, 0, None) / lw.sum(axis=1, keepdims=True))
    # RQ sweep via QR of the adjoint
    for i in (2, 1):
        m = a[i].transpose(0, 2, 1, 3).reshape(n, chi, d * chi)
        q1, r1 = np.linalg.qr(m.conj().transpose(0, 2, 1))
        q = q1.conj().transpose(0, 2, 1)
        rm = r1.conj().transpose(0, 2, 1)
        a[i] = q.reshape(n, chi, d, chi).transpose(0, 2, 1, 3)
        a[i - 1] = np.einsum("nsij,njk->nsik", a[i - 1], rm)
    m0 = a[0].transpose(0, 2, 1, 3).reshape(n, chi, d * chi)
    uu, _, vh = np.linalg.svd(m0, full_matrices=False)
    a[0] = (uu @ vh).reshape(n, chi, d, chi).transpose(0, 2, 1, 3)
    weights = [lam0]
    for i in range(2):
        m = (weights[i][:, None, :, None] * a[i]).reshape(n, d * chi, chi)
        _, s, wh = np.linalg.svd(m, full_matrices=False)
        a[i] = np.einsum("nsij,nkj->nsik", a[i], wh.conj())
        a[i + 1] = np.einsum("nkj,nsjl->nskl", wh, a[i + 1])
        weights.append(s / np.linalg.norm(s, axis=1, keepdims=True))
    return a, weights, ok


def _pad(a, chi):
    n, d, l, r = a.shape
    out = np.zeros((n, d, chi, chi), dtype=complex)
    out[:, :, :l, :r] = a
    return out


def _pad_w(w, chi):
    out = np.zeros((w.shape[0], chi))
    out[:, : w.shape[1]] = w
    return out


def _initial_batch(thetas, chi):
    raw = _batched_ansatz(thetas)
    tens, wts, ok = _canonical_batch(raw)
    tens = [_pad(t, chi) for t in tens]
    wts = [_pad_w(w, chi) for w in wts]
    for j in np.nonzero(~ok)[0]:
        psi = ansatz_mps(thetas[j])
        for i in range(3):
            b = psi.tensors[i]
            tens[i][j] = 0
            tens[i][j, :, : b.shape[1], : b.shape[2]] = b
            wts[i][j] = 0
            wts[i][j, : len(psi.weights[i])] = psi.weights[i]
    return tens, wts


def _gate_sequence(plan, nin):
    """Gate list for ``nin`` Trotter steps with adjacent same-offset gates merged."""
    seq = []
    for _ in range(nin):
        for g in plan.layers:
            if seq and seq[-1][0] == g.offset:
                seq[-1] = (g.offset, g.matrix @ seq[-1][1])
            else:
                seq.append((g.offset, g.matrix))
    return seq


def _rank(s, chi, cutoff):
    """Common kept rank for a stack of singular-value rows."""
    k = int(np.max(np.sum(s > cutoff * s[:, :1], axis=1)))
    return max(1, min(chi, k))


def _right_svd(m, chi, cutoff):
    """Singular values and right vectors of a stack from the Gram matrix ``m^dagger m``.

    Squared values below ``cutoff`` relative to the largest are dropped; the
    Gram route cannot resolve them anyway.
    """
    w, v = np.linalg.eigh(m.conj().transpose(0, 2, 1) @ m)
    w, v = w[:, ::-1], v[:, :, ::-1]
    k = _rank(np.clip(w, 0, None), chi, cutoff)
    s = np.sqrt(np.clip(w[:, :k], 0, None))
    return s, v[:, :, :k].conj().transpose(0, 2, 1)


def _apply_gate_batch(tens, wts, offset, gate, chi, cutoff=1e-14):
    """One three-site gate on a stack of cells.

    Bonds are kept at the largest rank any cell of the stack needs (values above
    ``cutoff`` relative to the largest), capped at ``chi``.
    """
    n, d, cl, _ = tens[0].shape
    i0, i1, i2 = offset % 3, (offset + 1) % 3, (offset + 2) % 3
    b0 = tens[i0].transpose(0, 2, 1, 3)  # n, a, s, x
    b1 = tens[i1].transpose(0, 2, 1, 3)
    b2 = tens[i2].transpose(0, 2, 1, 3)
    ca, cx, cy, cb = b0.shape[1], b0.shape[3], b1.shape[3], b2.shape[3]
    th = b0.reshape(n, ca * d, cx) @ b1.reshape(n, cx, d * cy)
    th = th.reshape(n, ca * d * d, cy) @ b2.reshape(n, cy, d * cb)
    th = th.reshape(n, ca, d ** 3, cb)
    raw = np.matmul(gate, th)
    cur = wts[i0][:, :, None, None] * raw
    m = cur.reshape(n, ca * d * d, d * cb)
    s, vh = _right_svd(m, chi, cutoff)
    k2 = s.shape[1]
    nb2 = vh.reshape(n, k2, d, cb)
    wts[i2] = s / np.linalg.norm(s, axis=1, keepdims=True)
    cur = (m @ vh.conj().transpose(0, 2, 1)).reshape(n, ca * d, d * k2)
    s, vh = _right_svd(cur, chi, cutoff)
    k1 = s.shape[1]
    nb1 = vh.reshape(n, k1, d, k2)
    wts[i1] = s / np.linalg.norm(s, axis=1, keepdims=True)
    # Hastings update: contract the raw gated block with the new right isometries
    y = nb1.conj().reshape(n, k1 * d, k2) @ nb2.conj().reshape(n, k2, d * cb)  # n, (c t), (u b)
    y = y.reshape(n, k1, d * d * cb)
    nb0 = raw.reshape(n, ca * d, d * d * cb) @ y.transpose(0, 2, 1)  # n, (a s), c
    tens[i0] = nb0.reshape(n, ca, d, k1).transpose(0, 2, 1, 3)
    tens[i1] = nb1.transpose(0, 2, 1, 3)
    tens[i2] = nb2.transpose(0, 2, 1, 3)


def _ansatz_parts(tens):
    """Per-site ``(P, Q, R)`` with ``F(theta) = P + cos(theta) Q + sin(theta) R``."""
    parts = []
    e01 = np.zeros((2, 2)); e01[0, 1] = 1.0
    e00 = np.zeros((2, 2)); e00[0, 0] = 1.0
    e10 = np.zeros((2, 2)); e10[1, 0] = 1.0
    for b in tens:
        n, _, cl, cr = b.shape
        up, dn = b[:, 0], b[:, 1]
        p = np.einsum("nab,cd->nacbd", up, -1j * e01).reshape(n, 2 * cl, 2 * cr)
        q = np.einsum("nab,cd->nacbd", dn, e00).reshape(n, 2 * cl, 2 * cr)
        r = np.einsum("nab,cd->nacbd", dn, e10).reshape(n, 2 * cl, 2 * cr)
        parts.append((p, q, r))
    return parts


_NORM_PARTS = None


def _norm_parts():
    global _NORM_PARTS
    if _NORM_PARTS is None:
        # sum_s A_s (x) conj(A_s) = P + cos^2 Q + sin^2 R + sin cos (S + S^T) for the ansatz
        e = np.eye(2)
        def kk(i, j, k, l):
            return np.kron(np.outer(e[i], e[j]), np.outer(e[k], e[l]))
        p = kk(0, 1, 0, 1)
        q = kk(0, 0, 0, 0)
        r = kk(1, 0, 1, 0)
        s = kk(0, 0, 1, 0) + kk(1, 0, 0, 0)
        _NORM_PARTS = (p, q, r, s)
    return _NORM_PARTS


def _log_eig_derivs(mats, dmats, ddmats):
    """Value, gradient and Hessian of ``log |lambda_max|`` of a product of three factors.

    ``mats[i]``, ``dmats[i]``, ``ddmats[i]`` hold the factor ``i`` and its first and
    second derivative with respect to its own angle.
    """
    f0, f1, f2 = mats
    t = f0 @ f1 @ f2
    w, v = np.linalg.eig(t)
    n = len(t)
    k = np.argmax(np.abs(w), axis=-1)
    idx = np.arange(n)
    lam = w[idx, k]
    vinv = np.linalg.inv(v)
    d = [dmats[0] @ f1 @ f2, f0 @ dmats[1] @ f2, f0 @ f1 @ dmats[2]]
    dd = {
        (0, 0): ddmats[0] @ f1 @ f2, (1, 1): f0 @ ddmats[1] @ f2, (2, 2): f0 @ f1 @ ddmats[2],
        (0, 1): dmats[0] @ dmats[1] @ f2, (0, 2): dmats[0] @ f1 @ dmats[2], (1, 2): f0 @ dmats[1] @ dmats[2],
    }
    x = [vinv @ m @ v for m in d]
    gap = lam[:, None] - w
    gap[idx, k] = np.inf
    dl = np.stack([xa[idx, k, k] for xa in x], axis=1)
    hl = np.zeros((n, 3, 3), dtype=complex)
    for a in range(3):
        for b in range(a, 3):
            m = dd[(a, b)]
            first = np.einsum("ni,nij,nj->n", vinv[idx, k, :], m, v[idx, :, k])
            row_a = x[a][idx, k, :]
            col_b = x[b][idx, :, k]
            row_b = x[b][idx, k, :]
            col_a = x[a][idx, :, k]
            second = np.sum((row_a * col_b + row_b * col_a) / gap, axis=1)
            hl[:, a, b] = hl[:, b, a] = first + second
    g = np.real(dl / lam[:, None])
    hess = np.real(hl / lam[:, None, None] - dl[:, :, None] * dl[:, None, :] / lam[:, None, None] ** 2)
    return np.log(np.abs(lam)), g, hess


def _objective(parts, thetas):
    """Cell log-fidelity ``log|eta(psi, A)| - log(eta(A, A)) / 2`` with derivatives."""
    c, s = np.cos(thetas), np.sin(thetas)
    mats, dm, ddm = [], [], []
    for i, (p, q, r) in enumerate(parts):
        ci, si = c[:, i, None, None], s[:, i, None, None]
        mats.append(p + ci * q + si * r)
        dm.append(-si * q + ci * r)
        ddm.append(-ci * q - si * r)
    f, g, h = _log_eig_derivs(mats, dm, ddm)
    np_, nq, nr, ns = _norm_parts()
    nm, ndm, nddm = [], [], []
    for i in range(3):
        ci, si = c[:, i, None, None], s[:, i, None, None]
        nm.append(np_ + ci**2 * nq + si**2 * nr + si * ci * ns)
        ndm.append(-2 * si * ci * nq + 2 * si * ci * nr + (ci**2 - si**2) * ns)
        nddm.append(-2 * (ci**2 - si**2) * nq + 2 * (ci**2 - si**2) * nr - 4 * si * ci * ns)
    nf, ng, nh = _log_eig_derivs([m.astype(complex) for m in nm], [m.astype(complex) for m in ndm],
                                 [m.astype(complex) for m in nddm])
    return f - nf / 2, g - ng / 2, h - nh / 2


def _newton_project(parts, guess, tol=1e-10, grad_tol=1e-11, max_iter=30):
    """Damped Newton ascent of :func:`_objective` from ``guess`` (batched).

    Returns ``(theta, per-site fidelity)``.  Each accepted step does not lower
    the objective.
    """
    x = guess.copy()
    f, g, h = _objective(parts, x)
    active = np.ones(len(x), dtype=bool)
    for _ in range(max_iter):
        ia = np.nonzero(active & (np.max(np.abs(g), axis=1) > grad_tol))[0]
        if not len(ia):
            break
        w, u = np.linalg.eigh(h[ia])
        # ascent-safe curvature: negative definite with a floor
        w = -np.maximum(np.abs(w), 1e-6)
        step = -np.einsum("nij,nj,nkj,nk->ni", u, 1.0 / w, u, g[ia])
        step = np.clip(step, -0.2, 0.2)
        todo = np.arange(len(ia))
        alpha = np.ones(len(ia))
        done = np.zeros(len(ia), dtype=bool)
        for _ls in range(20):
            sel = ia[todo]
            trial = x[sel] + alpha[todo, None] * step[todo]
            sub = [tuple(m[sel] for m in pqr) for pqr in parts]
            ft, gt, ht = _objective(sub, trial)
            ok = ft >= f[sel] - 1e-15
            acc = sel[ok]
            x[acc], f[acc], g[acc], h[acc] = trial[ok], ft[ok], gt[ok], ht[ok]
            done[todo[ok]] = True
            todo = todo[~ok]
            if not len(todo):
                break
            alpha[todo] /= 2
        moved = np.where(done, np.max(np.abs(alpha[:, None] * step), axis=1), 0.0)
        active[ia] = done & (moved > tol)
    return x, np.exp(f / 3.0)


def batched_poincare(thetas0, dt: float = 0.1, n_steps: int = 300, chi_work: int = 12,
                     dt_inner: float = 0.01, settle_tol: float = 1e-5, h=None):
    """Run many trajectories together; returns a list of :class:`PoincareRun`.

    A trajectory stops early once its crossings in one direction repeat with
    some period ``p <= MAX_PERIOD`` to ``settle_tol`` (it sits on a closed orbit).
    """
    if not dt > 0:
        raise InvalidInputError("dt must be positive")
    thetas = np.array(thetas0, dtype=float).reshape(-1, 3)
    n = len(thetas)
    nin = int(round(dt / dt_inner))
    if nin < 1 or abs(nin * dt_inner - dt) > 1e-9 * dt:
        raise InvalidInputError("dt must be a multiple of dt_inner")
    h = h or pxp(mu=0.0)
    seq = _gate_sequence(trotter_plan(h, dt_inner, 2, 3, include_penalty=False), nin)
    angles = [[t.copy()] for t in thetas]
    fids = [[1.0] for _ in range(n)]
    crossings = [[] for _ in range(n)]
    lost = np.zeros(n, dtype=bool)
    alive = np.ones(n, dtype=bool)
    for step in range(1, n_steps + 1):
        ia = np.nonzero(alive)[0]
        if not len(ia):
            break
        cur = thetas[ia]
        tens, wts = _initial_batch(cur, 2)
        for off, g in seq:
            _apply_gate_batch(tens, wts, off, g, chi_work)
        new, fid = _newton_project(_ansatz_parts(tens), cur)
        new = cur + np.mod(new - cur + np.pi, TWO_PI) - np.pi
        for j, i in enumerate(ia):
            if fid[j] < LOST_FIDELITY:
                lost[i] = True
                alive[i] = False
                continue
            crossings[i] += _crossings(cur[j], new[j], step, int(i))
            thetas[i] = new[j]
            angles[i].append(new[j].copy())
            fids[i].append(float(fid[j]))
            pts = [p for p in crossings[i] if p.direction == crossings[i][-1].direction] if crossings[i] else []
            if len(pts) >= 2 and pts[-1].index == step and _cycle_length(pts, settle_tol, MAX_PERIOD):
                alive[i] = False
    return [PoincareRun(crossings[i], np.array(angles[i]), np.array(fids[i]), bool(lost[i])) for i in range(n)]
