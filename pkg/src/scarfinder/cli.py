"""Command-line driver: ``scarfinder {scarfind,ed,poincare,parentham} --config FILE --out DIR``.

Exit status is 0 on success, 2 on a configuration error (nothing is written)
and 1 when a run fails after it started (a manifest with ``status: failed``
records the partial outputs).
"""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import ed, finder, io, models, parent, poincare
from .config import angles_from_config, build_model, load_config
from .errors import ConfigurationError, InvalidInputError, ScarFinderError
from .operators import SPIN1

log = logging.getLogger("scarfinder")

ITERATION_HEADER = ["trial", "step", "energy_pre", "energy_post", "delta_e", "discarded_weight", "entropy",
                    "scar_fidelity", "probe_entropy"]
TRAJECTORY_HEADER = ["time", "energy", "entropy", "max_entropy", "log_fidelity"]


class _Outputs(list):
    """Paths written so far, so a failing run can still list them in its manifest."""

    def csv(self, path, header, rows):
        self.append(io.write_csv(path, header, rows))

    def json(self, path, doc):
        path = Path(path)
        path.write_text(json.dumps(doc, indent=2, default=io.json_default), encoding="utf-8")
        self.append(path)


# ----------------------------------------------------------------------------
# scarfind


def _finder_config(cfg: dict) -> finder.ScarFinderConfig:
    sf = dict(cfg.get("scarfinder", {}))
    sel = dict(cfg.get("selection", {}))
    kind = sel.pop("kind", "min_entropy_at_t")
    selection = finder.Selection(**({} if kind == "none" else {"kind": kind, **sel}))
    return finder.ScarFinderConfig(chi_target=cfg["manifold"]["chi"], selection=selection, **sf)


def _iteration_rows(trial, records):
    return [[trial, r.step, r.energy_pre, r.energy_post, r.delta_e, r.discarded_weight, r.entropy,
             r.scar_fidelity, r.probe_entropy] for r in records]


def _trajectory_rows(traj):
    cols = [traj.column(c) for c in TRAJECTORY_HEADER]
    return list(zip(*cols))


def cmd_scarfind(cfg: dict, out: Path, seed: int, outputs: _Outputs) -> dict:
    h = build_model(cfg["model"])
    chi = cfg["manifold"]["chi"]
    cell = cfg["manifold"]["unit_cell"]
    if cell % h.unit_cell:
        raise ConfigurationError(f"unit cell {cell} is not a multiple of the model cell {h.unit_cell}")
    fcfg = _finder_config(cfg)
    trials = cfg.get("trials", 1)
    init = cfg.get("initial_state", {"kind": "random"})
    if init.get("kind", "random") == "named":
        psi = models.named_product_state(init["name"], init.get("theta"))
        if psi.local_dim != h.local_dim:
            raise ConfigurationError(f"initial state {init['name']!r} does not match the model's local dimension")
        if psi.unit_cell != cell:
            psi = psi.to_cell(cell)
        states = [psi] * trials
    else:
        seeds = np.random.SeedSequence(seed).spawn(trials)
        states = [models.random_imps(chi, cell, h.local_dim, s) for s in seeds]
    kind = cfg.get("selection", {}).get("kind", "min_entropy_at_t")
    if kind == "none":
        runs = []
        for i, psi0 in enumerate(states):
            runs.append(finder.scarfinder_run(psi0, h, fcfg))
            outputs.csv(out / f"iterations_trial{i:03d}.csv", ITERATION_HEADER, _iteration_rows(i, runs[-1].records))
        ok = [i for i, r in enumerate(runs) if r.success]
        best = max(ok, key=lambda i: np.nan_to_num(runs[i].final_fidelity, nan=-1.0)) if ok else None
        winner = runs[best].state if best is not None else None
        scores = [None] * trials
    else:
        res = finder.sample_and_select(h, trials, fcfg, seed, cell, initial_states=states)
        runs, best, winner, scores = res.runs, res.best_index, res.best, res.scores
        for i, r in enumerate(runs):
            outputs.csv(out / f"iterations_trial{i:03d}.csv", ITERATION_HEADER, _iteration_rows(i, r.records))
    thr = cfg.get("success_fidelity")
    trial_info = []
    for i, r in enumerate(runs):
        entry = {"trial": i, "success": r.success, "converged": r.converged,
                 "final_fidelity": None if math.isnan(r.final_fidelity) else r.final_fidelity,
                 "iterations": len(r.records)}
        if thr is not None:
            entry["reached_fidelity"] = bool(not math.isnan(r.final_fidelity) and r.final_fidelity > thr)
        if scores[i] is not None and not math.isnan(scores[i]):
            entry["selection_score"] = scores[i]
        trial_info.append(entry)
    extra = {"trials": trial_info, "winner": best}
    if winner is None:
        extra["status_detail"] = "no candidate survived selection"
        return extra
    outputs.append(io.dump_mps(winner, out / "winner.json"))
    ev = cfg.get("evolution", {})
    _, traj = finder.run_trajectory(winner, h, ev.get("t_total", 30.0), ev.get("dt", 0.05),
                                    ev.get("chi_max", fcfg.working_chi), ev.get("record_every", 1))
    outputs.csv(out / "winner_trajectory.csv", TRAJECTORY_HEADER, _trajectory_rows(traj))
    return extra


# ----------------------------------------------------------------------------
# ed


def _probe_state(probe_cfg, L, hilbert):
    kind = probe_cfg.get("kind", "none")
    if kind == "none":
        return None
    if kind == "named":
        psi = models.named_product_state(probe_cfg["name"], probe_cfg.get("theta"))
    else:
        try:
            psi = io.load_mps(probe_cfg["path"])
        except (OSError, KeyError) as exc:
            raise ConfigurationError(f"cannot load probe tensors: {exc}") from exc
    if L % psi.unit_cell:
        raise ConfigurationError(f"L={L} is not a multiple of the probe unit cell {psi.unit_cell}")
    return ed.imps_to_finite(psi, L, hilbert)


def cmd_ed(cfg: dict, out: Path, seed: int, outputs: _Outputs) -> dict:
    h = build_model(cfg["model"])
    L, pbc = cfg["L"], cfg.get("pbc", True)
    if L % h.unit_cell:
        raise ConfigurationError(f"L={L} is not a multiple of the unit cell {h.unit_cell}")
    sectors = cfg.get("sectors", "all")
    if sectors != "none" and not pbc:
        raise ConfigurationError("momentum sectors need periodic boundaries")
    hil = ed.hilbert_for(h, L, pbc, cfg.get("cap", ed.DEFAULT_CAP))
    ham = ed.build_finite_hamiltonian(h, L, pbc, hil)
    probe = _probe_state(cfg.get("probe", {}), L, hil)
    ks = ed.momenta(L, h.unit_cell)
    if sectors == "none":
        jobs = [("full", None)]
    else:
        idx = range(len(ks)) if sectors == "all" else sectors
        for i in idx:
            if i >= len(ks):
                raise ConfigurationError(f"sector index {i} out of range (0..{len(ks) - 1})")
        jobs = [(f"k{i:02d}", i) for i in idx]
    info = []
    for label, i in jobs:
        sec = ed.full_sector(hil, ham) if i is None else ed.sector_decompose(hil, h.unit_cell, ks[i], ham)
        spec = ed.eigensystem(sec, probe)
        k = 0.0 if i is None else float(ks[i])
        outputs.csv(out / f"entropy_{label}.csv", ["sector", "k", "energy", "entropy"],
                    [[label, k, e, s] for e, s in zip(spec.energies, spec.entropies)])
        if probe is not None:
            outputs.csv(out / f"overlap_{label}.csv", ["sector", "k", "energy", "overlap_sq"],
                        [[label, k, e, o] for e, o in zip(spec.energies, spec.overlaps)])
        info.append({"sector": label, "k": k, "dim": sec.dim})
    return {"hilbert_dim": hil.dim, "sectors": info}


# ----------------------------------------------------------------------------
# poincare

CROSSING_HEADER = ["trajectory", "crossing_index", "direction", "theta1_over_pi", "theta3_over_pi"]
FIXED_POINT_HEADER = ["rank", "theta1_over_pi", "theta2_over_pi", "theta3_over_pi", "basin_count",
                      "radius_over_pi"]


def _crossing_rows(runs):
    return [[p.trajectory, p.index, p.direction, p.theta1 / np.pi, p.theta3 / np.pi]
            for r in runs for p in r.crossings]


def cmd_poincare(cfg: dict, out: Path, seed: int, outputs: _Outputs) -> dict:
    kw = {k: cfg[k] for k in ("chi_work", "dt_inner", "settle_tol") if k in cfg}
    dt = cfg.get("dt", 0.1)
    n_steps = cfg.get("n_steps", 1000)
    try:
        if cfg["mode"] == "single":
            theta0 = angles_from_config(cfg["theta0"])
            runs = poincare.batched_poincare(theta0, dt, n_steps, **kw)
            clusters = []
        else:
            clusters, runs = poincare.find_fixed_points(cfg.get("n_samples", 640), dt, n_steps, seed,
                                                        cfg.get("radius", poincare.CLUSTER_RADIUS),
                                                        cfg.get("domain_only", True), **kw)
    except InvalidInputError as exc:
        raise ConfigurationError(str(exc)) from exc
    outputs.csv(out / "crossings.csv", CROSSING_HEADER, _crossing_rows(runs))
    if cfg["mode"] == "single":
        r = runs[0]
        rows = [[i, *(a / np.pi), f] for i, (a, f) in enumerate(zip(r.angles, r.fidelities))]
        outputs.csv(out / "angles.csv", ["step", "theta1_over_pi", "theta2_over_pi", "theta3_over_pi",
                                         "fidelity"], rows)
        return {"lost": r.lost, "final_over_pi": (poincare.wrap(r.final) / np.pi).tolist(),
                "n_crossings": len(r.crossings)}
    rows = [[n, c.angles[0] / np.pi, c.angles[1] / np.pi, c.angles[2] / np.pi, c.count, c.radius / np.pi]
            for n, c in enumerate(clusters)]
    outputs.csv(out / "fixed_points.csv", FIXED_POINT_HEADER, rows)
    return {"n_fixed_points": len(clusters), "lost": int(sum(r.lost for r in runs))}


# ----------------------------------------------------------------------------
# parentham


def cmd_parentham(cfg: dict, out: Path, seed: int, outputs: _Outputs) -> dict:
    tcfg = cfg["targets"]
    if tcfg["kind"] == "type1_tower":
        targets = ed.scar_tower(tcfg["L"])
    else:
        targets = ed.type2_tower(tcfg["L"], tcfg.get("phi", np.pi / 2), tcfg.get("theta", 0.0))
    names = cfg["basis"]["blocks"]
    missing = [b for b in names if b not in SPIN1]
    if missing:
        raise ConfigurationError(f"unknown spin-1 blocks {missing}; available: {list(SPIN1.names)}")
    blocks = {b: SPIN1[b] for b in names}
    try:
        basis = parent.OperatorBasis(blocks, cfg["basis"]["rule"])
    except InvalidInputError as exc:
        raise ConfigurationError(str(exc)) from exc
    tol = cfg.get("tol", 1e-8)
    cov = parent.covariance_matrix(targets, basis)
    w = np.linalg.eigvalsh(cov.matrix)
    outputs.csv(out / "covariance_spectrum.csv", ["index", "eigenvalue"], list(enumerate(w)))
    null = parent.null_space(cov, tol)
    doc = {
        "n_targets": len(targets),
        "L": tcfg["L"],
        "basis_size": len(basis),
        "orthonormal_dim": int(cov.matrix.shape[0]),
        "tol": tol,
        "null_dimension": int(null.shape[1]),
        "basis": list(basis.names),
        "terms": parent.null_space_terms(cov, null),
    }
    outputs.json(out / "null_space.json", doc)
    emb = cfg.get("embedding")
    if emb is not None:
        spec = parent.projective_embedding(targets, emb.get("cluster_size", 3), emb.get("seed", seed))
        op = spec.terms[0].op
        outputs.json(out / "embedding.json", {
            "cluster_size": spec.params["cluster_size"],
            "support_rank": spec.params["support_rank"],
            "seed": spec.params["seed"],
            "operator": io.encode_array(op),
        })
    return {"null_dimension": doc["null_dimension"]}


COMMAND_TABLE = {"scarfind": cmd_scarfind, "ed": cmd_ed, "poincare": cmd_poincare, "parentham": cmd_parentham}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scarfinder", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMAND_TABLE:
        s = sub.add_parser(name, help=f"run a {name} experiment")
        s.add_argument("--config", required=True, type=Path, help="YAML experiment file")
        s.add_argument("--out", required=True, type=Path, help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, text = load_config(args.config, args.command)
        if args.threads < 1:
            raise ConfigurationError("--threads must be >= 1")
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    outputs = _Outputs()
    t0 = time.perf_counter()
    status, extra, existed = "ok", {}, True
    try:
        # Configuration problems found while building the run still abort before any file exists.
        existed = args.out.exists()
        args.out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            extra = COMMAND_TABLE[args.command](cfg, args.out, seed, outputs) or {}
        if "status_detail" in extra:
            status = "partial"
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        if outputs:
            io.write_manifest(args.out, args.command, text, [seed], time.perf_counter() - t0, outputs,
                              "failed", {"error": str(exc)})
        elif not existed:
            args.out.rmdir()
        return 2
    except ScarFinderError as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        io.write_manifest(args.out, args.command, text, [seed], time.perf_counter() - t0, outputs,
                          "failed", {"error": f"{type(exc).__name__}: {exc}"})
        return 1
    io.write_manifest(args.out, args.command, text, [seed], time.perf_counter() - t0, outputs, status, extra)
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
