import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nhecontrol.cli import main, run
from nhecontrol.config import KINDS, ExperimentConfig, formula_field, parse_formula
from nhecontrol.errors import ConfigError
from nhecontrol.spectral import cos_mode, ground_state, hs_norm, sin_mode


# Formulas

def test_formula_values():
    f = formula_field("Phi + 1e-3*(cos(x) + sin(2*x))/sqrt(pi)", 128)
    expect = ground_state() + 1e-3 * (cos_mode(1) + sin_mode(2))
    assert hs_norm(f - expect, 1) <= 1e-14
    g = formula_field("exp(-2)*Phi*(1 + 0.5*cos(x))**2", 64)
    x = 2 * np.pi * np.arange(64) / 64
    assert np.allclose(g.values(), math.exp(-2) / math.sqrt(2 * math.pi)
                       * (1 + 0.5 * np.cos(x)) ** 2, atol=1e-15)
    h = formula_field("cos(x)*sin(y)", 16, dim=2)
    assert h.dim == 2


@pytest.mark.parametrize("text", ["__import__('os')", "x.real", "open(x)", "cos(x, x)",
                                  "y", "lambda: 1", "[x]", "'a'", "", "cos(x", "True",
                                  "x if x else 1", "max(x)"])
def test_formula_rejects(text):
    with pytest.raises(ConfigError):
        parse_formula(text, 1, "config.initial")


def test_formula_nonfinite():
    with pytest.raises(ConfigError, match="config.initial"):
        formula_field("1/(cos(x) - cos(x))", 32, path="config.initial")


# Configs

@pytest.mark.parametrize("kind", KINDS)
def test_defaults_valid_and_round_trip(kind):
    cfg = ExperimentConfig.default(kind)
    again = ExperimentConfig.from_json(cfg.to_json())
    assert again == cfg and again.to_json() == cfg.to_json()


@given(st.sampled_from(KINDS), st.floats(0, 10), st.integers(0, 6).map(lambda p: 2 * p),
       st.floats(1e-3, 10), st.floats(1e-12, 1), st.one_of(st.none(), st.integers(0, 2**31)))
def test_round_trip_bit_exact(kind, kappa, p, T, tol, seed):
    data = {"kind": kind, "T": T, "tol": tol, "seed": seed}
    if kind not in ("exact-steer", "moment-solve"):
        data["pde"] = {"kappa": kappa, "p": p}
    cfg = ExperimentConfig.from_dict(data)
    again = ExperimentConfig.from_json(cfg.to_json())
    assert again == cfg
    assert again.T == T and again.tol == tol and again.pde.kappa == cfg.pde.kappa


@pytest.mark.parametrize("data,path", [
    ({"kind": "bogus"}, "config.kind"),
    ({"kind": "simulate", "colour": 1}, "config.colour"),
    ({"kind": "simulate", "pde": {"kappa": -1.0}}, "config.pde.kappa"),
    ({"kind": "simulate", "pde": {"n": 7}}, "config.pde.n"),
    ({"kind": "simulate", "pde": {"z": 1}}, "config.pde.z"),
    ({"kind": "simulate", "T": 0}, "config.T"),
    ({"kind": "simulate", "initial": "cos(q)"}, "config.initial"),
    ({"kind": "simulate", "params": {"speed": 1}}, "config.params.speed"),
    ({"kind": "approx-steer", "target": None}, "config.target"),
    ({"kind": "approx-steer", "params": {"mode": "fast"}}, "config.params.mode"),
    ({"kind": "exact-steer", "potentials": "mtA_d1"}, "config.potentials"),
    ({"kind": "limit-experiment", "params": {"deltas": []}}, "config.params.deltas"),
    ({"kind": "density-check", "params": {"generators": [[1.5]]}}, "config.params.generators"),
])
def test_config_errors_name_field(data, path):
    with pytest.raises(ConfigError) as info:
        ExperimentConfig.from_dict(data)
    assert str(info.value).startswith(path)


# Runs

def _files(out):
    return {p.name: p.read_bytes() for p in sorted(out.iterdir())}


FAST = {
    "density-check": {"params": {"generators": [[2]]}},
    "constants": {"params": {"nu": 4.0}},
    "audit-potentials": {},
    "moment-solve": {},
    "simulate": {"T": 0.05},
    "limit-experiment": {"params": {"deltas": [0.1, 0.03]}},
    "approx-steer": {"params": {"mode": "null"}, "initial": "Phi + 0.3*cos(x)", "T": 0.5,
                     "tol": 1e-2},
    "exact-steer": {"initial": "Phi + 1e-6*cos(x)/sqrt(pi)"},
}


@pytest.mark.parametrize("kind", sorted(FAST))
def test_run_kinds_deterministic(tmp_path, kind):
    cfg = ExperimentConfig.from_dict({"kind": kind, **FAST[kind]})
    s1, r1 = run(cfg, tmp_path / "a")
    cfg = ExperimentConfig.from_dict({"kind": kind, **FAST[kind]})
    s2, r2 = run(cfg, tmp_path / "b")
    assert s1 == s2 == 0, r1
    a, b = _files(tmp_path / "a"), _files(tmp_path / "b")
    assert a == b
    assert {"config.json", "result.json"} <= set(a)
    if kind != "density-check":
        assert "figure.svg" in a
    resolved = ExperimentConfig.from_json(a["config.json"].decode())
    assert resolved.kind == kind


def test_run_constants_matches_hand_value(tmp_path):
    cfg = ExperimentConfig.from_dict({"kind": "constants", "params": {"nu": 4.0}})
    _, res = run(cfg, tmp_path)
    s = res["summary"]
    hand = 2 * 4.0 + (max(math.log(s["C_Q"] ** 2), 0.0) + 1 + math.log(8)) / 2
    assert abs(s["Gamma0"] - hand) <= 1e-12
    assert s["K_bound_holds"] and s["series_identity"]


def test_run_density_failure_reason(tmp_path):
    cfg = ExperimentConfig.from_dict({"kind": "density-check",
                                      "pde": {"d": 2},
                                      "params": {"generators": [[1, 0], [0, 1]]}})
    status, res = run(cfg, tmp_path)
    assert status == 0 and res["summary"]["reason"] == "chain"


def test_main_exit_codes(tmp_path, capsys):
    assert main(["density-check", "--out", str(tmp_path / "ok")]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text('{"kind": "constants", "T": -1}')
    assert main(["constants", "--config", str(bad), "--out", str(tmp_path / "x")]) == 1
    assert "bad.json.T: must be positive" in capsys.readouterr().err
    wrong = tmp_path / "wrong.json"
    wrong.write_text('{"kind": "simulate"}')
    assert main(["constants", "--config", str(wrong)]) == 1
    assert main(["constants", "--config", str(tmp_path / "missing.json")]) == 1
    # a module failure: the default exact-steer residual grows in its first window
    fail = tmp_path / "fail.json"
    fail.write_text(json.dumps({"kind": "exact-steer", "params": {"n_max": 1}}))
    assert main(["exact-steer", "--config", str(fail), "--out", str(tmp_path / "f")]) == 2
    res = json.loads((tmp_path / "f" / "result.json").read_text())
    assert res["status"] == "failed"


def test_cli_help_lists_subcommands(capsys):
    with pytest.raises(SystemExit):
        main(["--help"])
    text = capsys.readouterr().out
    for kind in KINDS:
        assert kind in text
