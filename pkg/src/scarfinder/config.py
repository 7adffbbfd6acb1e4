"""Experiment configuration: YAML files validated against per-command schemas."""
from __future__ import annotations

from pathlib import Path

import jsonschema
import numpy as np
import yaml

from .errors import ConfigurationError
from .models import HamiltonianSpec, mixed_field_ising, pxp, pxp_cylinder, spin1_xy

COMMANDS = ("scarfind", "ed", "poincare", "parentham")

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}
_int1 = {"type": "integer", "minimum": 1}
_seed = {"type": "integer", "minimum": 0}


def _obj(props, required=()):
    return {"type": "object", "properties": props, "required": list(required), "additionalProperties": False}


MODEL_SCHEMA = _obj(
    {
        "name": {"enum": ["pxp", "spin1_xy", "mixed_field_ising", "pxp_cylinder"]},
        "params": {"type": "object"},
    },
    ["name"],
)

SCARFIND_SCHEMA = _obj(
    {
        "command": {"const": "scarfind"},
        "model": MODEL_SCHEMA,
        "manifold": _obj({"chi": _int1, "unit_cell": _int1}, ["chi", "unit_cell"]),
        "scarfinder": _obj(
            {
                "dt_projection": _pos,
                "n_steps": {"type": "integer", "minimum": 0},
                "e_target": {"type": ["number", "null"]},
                "energy_correction": {"type": "boolean"},
                "n_imag_substeps": _int1,
                "dt_inner": _pos,
                "chi_work": {"type": ["integer", "null"], "minimum": 1},
                "scar_family": {"enum": ["Type1", "Type2", None]},
                "fs_every": _int1,
                "stop_fidelity": {"type": ["number", "null"]},
                "t_probe": {"type": "number", "minimum": 0},
            }
        ),
        "selection": _obj(
            {
                "kind": {"enum": ["min_entropy_at_t", "revival_frequency_window", "none"]},
                "t": _pos,
                "f_lo": _num,
                "f_hi": _num,
                "chi_eval": _int1,
                "dt_eval": _pos,
            }
        ),
        "initial_state": _obj({"kind": {"enum": ["random", "named"]}, "name": {"type": "string"},
                               "theta": _num}),
        "trials": _int1,
        "success_fidelity": _num,
        "seed": _seed,
        "evolution": _obj({"t_total": _pos, "dt": _pos, "chi_max": _int1, "record_every": _int1}),
    },
    ["command", "model", "manifold"],
)

ED_SCHEMA = _obj(
    {
        "command": {"const": "ed"},
        "model": MODEL_SCHEMA,
        "L": {"type": "integer", "minimum": 2},
        "pbc": {"type": "boolean"},
        "sectors": {"oneOf": [{"const": "all"}, {"const": "none"},
                              {"type": "array", "items": {"type": "integer", "minimum": 0}}]},
        "probe": _obj(
            {
                "kind": {"enum": ["named", "tensor_file", "none"]},
                "name": {"type": "string"},
                "theta": _num,
                "path": {"type": "string"},
            },
            ["kind"],
        ),
        "cap": _int1,
        "seed": _seed,
    },
    ["command", "model", "L"],
)

POINCARE_SCHEMA = _obj(
    {
        "command": {"const": "poincare"},
        "mode": {"enum": ["single", "sample"]},
        "theta0": {"type": "array", "items": _num, "minItems": 3, "maxItems": 3},
        "dt": _pos,
        "n_steps": _int1,
        "n_samples": _int1,
        "chi_work": _int1,
        "dt_inner": _pos,
        "settle_tol": _pos,
        "radius": _pos,
        "domain_only": {"type": "boolean"},
        "seed": _seed,
    },
    ["command", "mode"],
)

PARENTHAM_SCHEMA = _obj(
    {
        "command": {"const": "parentham"},
        "targets": _obj({"kind": {"enum": ["type1_tower", "type2_tower"]}, "L": {"type": "integer", "minimum": 2},
                         "phi": _num, "theta": _num}, ["kind", "L"]),
        "basis": _obj({"blocks": {"type": "array", "items": {"type": "string"}},
                       "rule": {"enum": ["single_site", "two_site", "three_site"]}}, ["blocks", "rule"]),
        "tol": _pos,
        "embedding": _obj({"cluster_size": _int1, "seed": _seed}),
        "seed": _seed,
    },
    ["command", "targets", "basis"],
)

SCHEMAS = {"scarfind": SCARFIND_SCHEMA, "ed": ED_SCHEMA, "poincare": POINCARE_SCHEMA,
           "parentham": PARENTHAM_SCHEMA}


def load_config(path, command: str | None = None) -> tuple:
    """Read and validate a YAML config; returns ``(config dict, raw text)``.

    Raises
    ------
    ConfigurationError
        Unreadable file, YAML error, schema violation or a command mismatch.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
        cfg = yaml.safe_load(text)
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError(f"{path}: expected a mapping at top level")
    validate(cfg, command)
    return cfg, text


def validate(cfg: dict, command: str | None = None) -> None:
    name = cfg.get("command")
    if name not in SCHEMAS:
        raise ConfigurationError(f"unknown or missing command {name!r}; expected one of {COMMANDS}")
    if command is not None and name != command:
        raise ConfigurationError(f"config is for {name!r}, not {command!r}")
    try:
        jsonschema.validate(cfg, SCHEMAS[name])
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigurationError(f"config error at {where}: {exc.message}") from exc
    if name == "poincare" and cfg["mode"] == "single" and "theta0" not in cfg:
        raise ConfigurationError("single-trajectory mode needs theta0")
    if name == "scarfind":
        sel = cfg.get("selection", {})
        if sel.get("kind") == "revival_frequency_window" and not ("f_lo" in sel and "f_hi" in sel):
            raise ConfigurationError("revival_frequency_window needs f_lo and f_hi")
    if name == "parentham" and not cfg["basis"]["blocks"]:
        raise ConfigurationError("empty operator basis")


_MODEL_PARAMS = {
    "pxp": {"omega", "mu"},
    "spin1_xy": {"h", "perturbation", "seed", "strength"},
    "mixed_field_ising": {"J", "h", "g"},
    "pxp_cylinder": {"geometry", "omega", "mu"},
}

_BUILDERS = {"pxp": pxp, "spin1_xy": spin1_xy, "mixed_field_ising": mixed_field_ising,
             "pxp_cylinder": pxp_cylinder}


def build_model(model_cfg: dict) -> HamiltonianSpec:
    """Model registry lookup; unknown parameters are configuration errors."""
    name = model_cfg["name"]
    params = dict(model_cfg.get("params") or {})
    extra = set(params) - _MODEL_PARAMS[name]
    if extra:
        raise ConfigurationError(f"unknown parameters for {name}: {sorted(extra)}")
    try:
        return _BUILDERS[name](**params)
    except (ValueError, TypeError) as exc:
        raise ConfigurationError(f"bad parameters for {name}: {exc}") from exc


def angles_from_config(values) -> np.ndarray:
    """Angles given in units of pi."""
    return np.pi * np.asarray(values, dtype=float)
