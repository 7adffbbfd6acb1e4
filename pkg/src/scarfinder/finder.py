"""The evolve / project / energy-correct iteration on the iMPS manifold.

One iteration evolves the state for ``dt_projection`` at a working bond
dimension, truncates every bond back to ``chi_target`` and optionally pulls the
energy density back towards ``e_target`` with short imaginary-time steps, each
followed by another truncation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, CorrectionFailedError, DegenerateStateError, InvalidInputError
from .imps import (
    UniformMPS,
    canonicalize,
    energy_density,
    half_chain_entropy,
    itebd_step,
    run_trajectory,
    scar_fidelity,
    trotter_plan,
)
from .models import random_imps

log = logging.getLogger(__name__)

ENERGY_TOL = 1e-10


@dataclass(frozen=True)
class Selection:
    """Post-selection rule applied after the runs of :func:`sample_and_select`.

    ``min_entropy_at_t`` keeps the lowest bond-0 entropy after free evolution to
    ``t``.  ``revival_frequency_window`` keeps candidates whose dominant revival
    frequency lies in ``[f_lo, f_hi]`` and ranks them by the same entropy.
    """

    kind: str = "min_entropy_at_t"
    t: float = 30.0
    f_lo: float | None = None
    f_hi: float | None = None
    chi_eval: int | None = None
    dt_eval: float = 0.05

    def __post_init__(self):
        if self.kind not in ("min_entropy_at_t", "revival_frequency_window"):
            raise ConfigurationError(f"unknown selection {self.kind!r}")
        if self.kind == "revival_frequency_window" and (self.f_lo is None or self.f_hi is None):
            raise ConfigurationError("revival_frequency_window needs f_lo and f_hi")
        if not self.t > 0:
            raise ConfigurationError("selection time must be positive")


@dataclass(frozen=True)
class ScarFinderConfig:
    """Settings of one ScarFinder run.

    Parameters
    ----------
    dt_projection : float
        Evolution time between projections.
    n_steps : int
        Maximum number of iterations.
    chi_target : int
        Bond dimension of the manifold.
    e_target : float or None
        Target energy density; ``None`` disables the correction.
    energy_correction : bool
    n_imag_substeps : int
        Number of imaginary-time substeps per correction.
    dt_inner : float
        Trotter step of the real-time evolution.
    chi_work : int or None
        Working bond dimension, default ``max(3 chi_target, chi_target + 8)``.
    scar_family : {'Type1', 'Type2'} or None
        Family used to record scar fidelities.
    fs_every : int
        Record the scar fidelity every this many iterations (and at the end).
    stop_fidelity : float or None
        Stop once the scar fidelity exceeds this value.
    t_probe : float
        Length of the free-evolution entropy probe used for convergence
        detection; ``0`` disables it.
    """

    dt_projection: float = 0.2
    n_steps: int = 100
    chi_target: int = 2
    e_target: float | None = None
    energy_correction: bool = False
    n_imag_substeps: int = 10
    dt_inner: float = 0.01
    order: int = 2
    chi_work: int | None = None
    cutoff: float = 1e-14
    scar_family: str | None = None
    fs_every: int = 1
    stop_fidelity: float | None = None
    t_probe: float = 0.0
    probe_window: int = 5
    probe_tol: float = 1e-3
    stop_on_convergence: bool = False
    selection: Selection = field(default_factory=Selection)

    def __post_init__(self):
        if not self.dt_projection > 0:
            raise ConfigurationError("dt_projection must be positive")
        if self.n_imag_substeps < 1:
            raise ConfigurationError("n_imag_substeps must be >= 1")
        if self.chi_target < 1 or self.n_steps < 0:
            raise ConfigurationError("chi_target >= 1 and n_steps >= 0 required")
        if not self.dt_inner > 0:
            raise ConfigurationError("dt_inner must be positive")
        ratio = self.dt_projection / self.dt_inner
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigurationError("dt_projection must be a multiple of dt_inner")
        if self.energy_correction and self.e_target is None:
            raise ConfigurationError("energy correction needs e_target")

    @property
    def working_chi(self) -> int:
        if self.chi_work is not None:
            return self.chi_work
        return max(3 * self.chi_target, self.chi_target + 8)

    @property
    def inner_steps(self) -> int:
        return int(round(self.dt_projection / self.dt_inner))


@dataclass(frozen=True)
class IterationRecord:
    step: int
    energy_pre: float
    energy_post: float
    delta_e: float
    discarded_weight: float
    entropy: float
    scar_fidelity: float = float("nan")
    probe_entropy: float = float("nan")


@dataclass
class RunResult:
    """Outcome of :func:`scarfinder_run`.

    ``success`` is false when the energy correction failed; ``converged`` records
    the entropy-probe criterion (or reaching ``stop_fidelity``).
    """

    state: UniformMPS
    records: list
    success: bool = True
    converged: bool = False
    message: str = ""

    @property
    def final_fidelity(self) -> float:
        vals = [r.scar_fidelity for r in self.records if not math.isnan(r.scar_fidelity)]
        return vals[-1] if vals else float("nan")


def project_to_manifold(psi: UniformMPS, chi_target: int, cutoff: float = 0.0):
    """Truncate every bond to ``chi_target`` Schmidt values and re-canonicalize.

    Returns ``(state, discarded)`` with ``discarded`` the sum over bonds of the
    squared dropped weights.  Weights below ``cutoff`` relative to the largest are
    dropped as well.
    """
    if chi_target < 1:
        raise InvalidInputError("chi_target must be >= 1")
    keep = []
    discarded = 0.0
    for w in psi.weights:
        k = min(chi_target, len(w))
        if cutoff > 0:
            k = min(k, max(1, int(np.sum(w > cutoff * w[0]))))
        if not w[0] > 0:
            raise DegenerateStateError("bond weights vanished")
        keep.append(k)
        discarded += float(np.sum(w[k:] ** 2))
    if all(k == len(w) for k, w in zip(keep, psi.weights)):
        return psi, 0.0
    n = psi.unit_cell
    tensors = [psi.tensors[i][:, : keep[i], : keep[(i + 1) % n]] for i in range(n)]
    return canonicalize(tensors), discarded


def evolve_segment(psi: UniformMPS, plan, nsteps: int, chi_work: int, cutoff: float = 1e-14) -> UniformMPS:
    """``nsteps`` Trotter steps; canonical form is restored after every step only
    when the plan is non-unitary, and always after the last one."""
    for k in range(nsteps):
        psi, _ = itebd_step(psi, plan, chi_work, cutoff, recanonicalize=not plan.unitary or k == nsteps - 1)
    return psi


def _imag_plan(h, dtau, unit_cell, order):
    return trotter_plan(h, -1j * dtau, order, unit_cell, include_penalty=False)


def energy_correct(psi: UniformMPS, h, e_target: float, n: int = 10, chi_target: int | None = None,
                   order: int = 2, chi_work: int | None = None):
    """Imaginary-time pull of the energy density towards ``e_target``.

    Takes ``n`` substeps ``exp(-H dtau)`` with ``dtau = (E - e_target) / n``; a
    negative ``dtau`` raises the energy.  After each substep the state is truncated
    to ``chi_target`` (default: its own bond dimension).  The iterate closest to the
    target is returned; if none improves on the input, :class:`CorrectionFailedError`.
    """
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    e0 = energy_density(psi, h)
    delta = e0 - e_target
    if abs(delta) < ENERGY_TOL:
        return psi
    chi_target = chi_target or psi.chi
    chi_work = chi_work or max(3 * chi_target, chi_target + 8)
    plan = _imag_plan(h, delta / n, psi.unit_cell, order)
    best, best_err = psi, abs(delta)
    cur = psi
    for _ in range(n):
        cur, _ = itebd_step(cur, plan, chi_work)
        cur, _ = project_to_manifold(cur, chi_target)
        err = abs(energy_density(cur, h) - e_target)
        if err < best_err:
            best, best_err = cur, err
    if best is psi:
        raise CorrectionFailedError(f"energy correction moved away from the target (|dE|={abs(delta):.3e})")
    return best


def scarfinder_run(psi0: UniformMPS, h, cfg: ScarFinderConfig) -> RunResult:
    """Iterate evolve / project / correct for up to ``cfg.n_steps`` iterations."""
    if psi0.chi > cfg.chi_target:
        psi0, _ = project_to_manifold(psi0, cfg.chi_target)
    plan = trotter_plan(h, cfg.dt_inner, cfg.order, psi0.unit_cell)
    probe_plan = None
    psi = psi0
    records = []
    probe_hist = []
    converged = False
    for step in range(1, cfg.n_steps + 1):
        ev = evolve_segment(psi, plan, cfg.inner_steps, cfg.working_chi, cfg.cutoff)
        e_pre = energy_density(ev, h)
        proj, disc = project_to_manifold(ev, cfg.chi_target)
        if cfg.energy_correction:
            try:
                proj = energy_correct(proj, h, cfg.e_target, cfg.n_imag_substeps, cfg.chi_target, cfg.order,
                                      cfg.working_chi)
            except CorrectionFailedError as exc:
                log.info("run stopped at step %d: %s", step, exc)
                return RunResult(psi, records, False, False, str(exc))
        psi = proj
        e_post = energy_density(psi, h)
        fs = float("nan")
        if cfg.scar_family and (step % cfg.fs_every == 0 or step == cfg.n_steps):
            fs = scar_fidelity(psi, cfg.scar_family)
        pe = float("nan")
        if cfg.t_probe > 0:
            if probe_plan is None:
                probe_plan = trotter_plan(h, cfg.dt_inner, cfg.order, psi.unit_cell)
            pr = evolve_segment(psi, probe_plan, int(round(cfg.t_probe / cfg.dt_inner)), cfg.working_chi,
                                cfg.cutoff)
            pe = half_chain_entropy(pr, 0)
            probe_hist.append(pe)
            if len(probe_hist) > cfg.probe_window:
                diffs = np.abs(np.diff(probe_hist[-cfg.probe_window - 1:]))
                converged = bool(np.all(diffs < cfg.probe_tol))
        delta = e_post - cfg.e_target if cfg.e_target is not None else float("nan")
        records.append(IterationRecord(step, e_pre, e_post, delta, disc, half_chain_entropy(psi, 0), fs, pe))
        if cfg.stop_fidelity is not None and not math.isnan(fs) and fs > cfg.stop_fidelity:
            converged = True
            break
        if converged and cfg.stop_on_convergence:
            break
    return RunResult(psi, records, True, converged)


# ----------------------------------------------------------------------------
# sampling and post-selection


def revival_frequency(times, log_fidelity) -> float:
    """Dominant nonzero frequency (cycles per unit time) of a log-fidelity series."""
    times = np.asarray(times, dtype=float)
    y = np.asarray(log_fidelity, dtype=float)
    if len(y) < 4:
        return float("nan")
    dt = times[1] - times[0]
    y = y - y.mean()
    spec = np.abs(np.fft.rfft(y * np.hanning(len(y)), n=8 * len(y)))
    freqs = np.fft.rfftfreq(8 * len(y), d=dt)
    spec[0] = 0.0
    lo = 1.0 / (times[-1] - times[0])
    spec[freqs < lo] = 0.0
    return float(freqs[int(np.argmax(spec))])


@dataclass
class SelectionResult:
    """Best candidate of a sampling campaign (``best`` is ``None`` when nothing survived)."""

    best: UniformMPS | None
    best_index: int | None
    runs: list
    scores: list
    frequencies: list
    trajectories: list
    status: str = "ok"


def score_candidate(psi: UniformMPS, h, sel: Selection, chi_eval: int, cutoff: float = 1e-14):
    """Free evolution used for selection; returns ``(entropy at sel.t, frequency, trajectory)``."""
    _, traj = run_trajectory(psi, h, sel.t, sel.dt_eval, chi_eval, record_every=1, cutoff=cutoff)
    ent = float(traj.column("entropy")[-1])
    freq = revival_frequency(traj.column("time"), traj.column("log_fidelity"))
    return ent, freq, traj


def sample_and_select(h, n_samples: int, cfg: ScarFinderConfig, seed, unit_cell: int = 2,
                      initial_states: list | None = None) -> SelectionResult:
    """Run ScarFinder from ``n_samples`` random states and post-select one.

    Initial states are :func:`scarfinder.models.random_imps` draws seeded from
    ``numpy.random.SeedSequence(seed).spawn(n_samples)`` unless ``initial_states``
    is given.  Every successful run is scored by ``cfg.selection``.
    """
    if n_samples < 1:
        raise InvalidInputError("n_samples must be >= 1")
    sel = cfg.selection
    chi_eval = sel.chi_eval or cfg.working_chi
    if initial_states is None:
        seeds = np.random.SeedSequence(seed).spawn(n_samples)
        initial_states = [random_imps(cfg.chi_target, unit_cell, h.local_dim, s) for s in seeds]
    elif len(initial_states) != n_samples:
        raise InvalidInputError("need one initial state per sample")
    runs, scores, freqs, trajs = [], [], [], []
    for i, psi0 in enumerate(initial_states):
        res = scarfinder_run(psi0, h, cfg)
        runs.append(res)
        if not res.success:
            scores.append(float("nan"))
            freqs.append(float("nan"))
            trajs.append(None)
            continue
        ent, freq, traj = score_candidate(res.state, h, sel, chi_eval, cfg.cutoff)
        scores.append(ent)
        freqs.append(freq)
        trajs.append(traj)
        log.info("sample %d: entropy(t=%g)=%.4f frequency=%.4f", i, sel.t, ent, freq)
    ok = [i for i, s in enumerate(scores) if not math.isnan(s)]
    if sel.kind == "revival_frequency_window":
        ok = [i for i in ok if sel.f_lo <= freqs[i] <= sel.f_hi]
    if not ok:
        return SelectionResult(None, None, runs, scores, freqs, trajs, "empty")
    best = min(ok, key=lambda i: scores[i])
    return SelectionResult(runs[best].state, best, runs, scores, freqs, trajs, "ok")


def with_overrides(cfg: ScarFinderConfig, **kw) -> ScarFinderConfig:
    return replace(cfg, **kw)
