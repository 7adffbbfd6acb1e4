import json
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from scarfinder import cli, config, io, models
from scarfinder.errors import ConfigurationError, InvalidInputError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text, encoding="utf-8")
    return p


# ----------------------------------------------------------------------------
# file formats


def test_csv_round_trip(tmp_path):
    rows = [(1, 0.1, float("nan")), (2, 1 / 3, float("inf"))]
    p = io.write_csv(tmp_path / "a" / "t.csv", ["i", "x", "y"], rows)
    header, got = io.read_csv(p)
    assert header == ["i", "x", "y"]
    assert float(got[1][1]) == 1 / 3
    assert got[0][2] == "nan" and got[1][2] == "inf"


def test_tensor_round_trip(tmp_path):
    psi = models.random_imps(3, 2, 3, 8)
    back = io.load_mps(io.dump_mps(psi, tmp_path / "psi.json"))
    assert back.unit_cell == 2 and back.local_dim == 3
    for a, b in zip(psi.tensors, back.tensors):
        assert np.array_equal(a, b)
    for a, b in zip(psi.weights, back.weights):
        assert np.array_equal(a, b)


def test_tensor_header_checked(tmp_path):
    p = io.dump_mps(models.type1_scar_state(), tmp_path / "psi.json")
    doc = json.loads(p.read_text())
    doc["version"] = 99
    p.write_text(json.dumps(doc))
    with pytest.raises(InvalidInputError):
        io.load_mps(p)
    doc["format"] = "other"
    p.write_text(json.dumps(doc))
    with pytest.raises(InvalidInputError):
        io.load_mps(p)


def test_manifest_contents(tmp_path):
    out = tmp_path / "run"
    f = io.write_csv(out / "x.csv", ["a"], [(1,)])
    m = io.write_manifest(out, "ed", "text", [3], 1.5, [f])
    doc = json.loads(m.read_text())
    assert doc["config_sha256"] == io.config_hash("text")
    assert doc["seeds"] == [3] and doc["outputs"] == ["x.csv"] and doc["status"] == "ok"
    assert set(doc["versions"]) == {"scarfinder", "numpy", "scipy", "python"}


# ----------------------------------------------------------------------------
# configuration


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.yaml")), ids=lambda p: p.name)
def test_shipped_configs_validate(path):
    cfg, _ = config.load_config(path)
    if "model" in cfg:
        config.build_model(cfg["model"])


@pytest.mark.parametrize(
    "text",
    [
        "command: poincare\nmode: single\ndt: -0.1\ntheta0: [0.8, 0, 0.1]\n",
        "command: poincare\nmode: single\n",
        "command: ed\nmodel: {name: pxp}\nL: 8\nbogus: 1\n",
        "command: parentham\ntargets: {kind: type1_tower, L: 6}\nbasis: {blocks: [], rule: two_site}\n",
        "command: scarfind\nmodel: {name: pxp}\nmanifold: {chi: 2, unit_cell: 2}\n"
        "selection: {kind: revival_frequency_window}\n",
        "command: nothing\n",
        "- a list\n",
        "command: ed\nmodel: {name: pxp\n",
    ],
)
def test_invalid_configs(tmp_path, text):
    with pytest.raises(ConfigurationError):
        config.load_config(write(tmp_path, text))


def test_unknown_model_parameter():
    with pytest.raises(ConfigurationError):
        config.build_model({"name": "pxp", "params": {"omega": 1.0, "J": 2.0}})


def test_command_mismatch(tmp_path):
    p = write(tmp_path, "command: poincare\nmode: sample\n")
    with pytest.raises(ConfigurationError):
        config.load_config(p, "ed")


# ----------------------------------------------------------------------------
# command line


def test_bad_config_exit_code_and_no_outputs(tmp_path, capsys):
    cfg = write(tmp_path, "command: poincare\nmode: single\ndt: -0.1\ntheta0: [0.8, 0, 0.1]\n")
    out = tmp_path / "out"
    assert cli.run(["poincare", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
    assert "configuration error" in capsys.readouterr().err


def test_late_config_error_leaves_nothing(tmp_path):
    cfg = write(tmp_path, "command: ed\nmodel: {name: pxp, params: {J: 1.0}}\nL: 6\n")
    out = tmp_path / "out"
    assert cli.run(["ed", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()


def test_parentham_end_to_end(tmp_path):
    cfg = write(tmp_path, "command: parentham\ntargets: {kind: type1_tower, L: 6}\n"
                          "basis: {blocks: [I, Sx, Sy, Sz, P0], rule: two_site}\n"
                          "embedding: {cluster_size: 3, seed: 2}\n")
    out = tmp_path / "out"
    assert cli.run(["parentham", "--config", str(cfg), "--out", str(out)]) == 0
    ns = json.loads((out / "null_space.json").read_text())
    assert ns["null_dimension"] == 9
    header, rows = io.read_csv(out / "covariance_spectrum.csv")
    assert header == ["index", "eigenvalue"] and len(rows) > 9
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "ok"
    assert set(manifest["outputs"]) == {"null_space.json", "covariance_spectrum.csv", "embedding.json"}


def test_ed_end_to_end(tmp_path):
    cfg = write(tmp_path, "command: ed\nmodel: {name: pxp}\nL: 8\nsectors: [0]\n"
                          "probe: {kind: named, name: Z2}\n")
    out = tmp_path / "out"
    assert cli.run(["ed", "--config", str(cfg), "--out", str(out), "--seed", "4"]) == 0
    header, rows = io.read_csv(out / "entropy_k00.csv")
    assert header == ["sector", "k", "energy", "entropy"] and rows
    header, rows = io.read_csv(out / "overlap_k00.csv")
    assert header[-1] == "overlap_sq"
    assert sum(float(r[-1]) for r in rows) <= 1 + 1e-10
    assert json.loads((out / "manifest.json").read_text())["seeds"] == [4]


def test_poincare_single_end_to_end(tmp_path):
    cfg = write(tmp_path, "command: poincare\nmode: single\ntheta0: [0.8, -0.05, 0.1]\ndt: 0.1\nn_steps: 20\n")
    out = tmp_path / "out"
    assert cli.run(["poincare", "--config", str(cfg), "--out", str(out)]) == 0
    header, rows = io.read_csv(out / "angles.csv")
    assert len(rows) == 21 and float(rows[0][1]) == pytest.approx(0.8)
    header, rows = io.read_csv(out / "crossings.csv")
    assert header == ["trajectory", "crossing_index", "direction", "theta1_over_pi", "theta3_over_pi"]
    assert rows


def test_scarfind_end_to_end(tmp_path):
    cfg = write(tmp_path, "command: scarfind\nmodel: {name: spin1_xy, params: {h: 1.0, perturbation: V1}}\n"
                          "manifold: {chi: 1, unit_cell: 2}\n"
                          "scarfinder: {dt_projection: 0.2, n_steps: 5, scar_family: Type1}\n"
                          "selection: {kind: none}\ntrials: 1\nsuccess_fidelity: 0.5\n"
                          "evolution: {t_total: 1.0, dt: 0.05, chi_max: 4}\n")
    out = tmp_path / "out"
    assert cli.run(["scarfind", "--config", str(cfg), "--out", str(out)]) == 0
    header, rows = io.read_csv(out / "iterations_trial000.csv")
    assert header[:3] == ["trial", "step", "energy_pre"] and len(rows) == 5
    psi = io.load_mps(out / "winner.json")
    assert psi.unit_cell == 2
    header, rows = io.read_csv(out / "winner_trajectory.csv")
    assert header[0] == "time" and len(rows) == 21
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["trials"][0]["iterations"] == 5


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "scarfinder.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for name in ("scarfind", "ed", "poincare", "parentham"):
        assert name in res.stdout


def test_scarfind_state_model_mismatch(tmp_path):
    cfg = write(tmp_path, "command: scarfind\nmodel: {name: spin1_xy}\nmanifold: {chi: 1, unit_cell: 2}\n"
                          "initial_state: {kind: named, name: theta_product, theta: 0.3}\n")
    out = tmp_path / "out"
    assert cli.run(["scarfind", "--config", str(cfg), "--out", str(out)]) == 2
    assert not out.exists()
