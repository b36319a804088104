"""Experiment configuration and the state formula language.

A config is a JSON object.  States are formula strings over x (and y in
two dimensions) built from numbers, ``Phi``, ``pi``, ``cos``, ``sin``,
``exp``, ``sqrt``, ``+ - * / **``.  For example ``Phi*(1+0.5*cos(x))`` or
``Phi + 1e-3*(cos(x) + sin(2*x))/sqrt(pi)``; the normalized basis elements
are c_k = cos(kx)/sqrt(pi) and s_k = sin(kx)/sqrt(pi).
"""

from __future__ import annotations

import ast
import copy
import json
import math
import operator
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError
from .potentials import PRESETS
from .spectral import TorusField, ground_state_value

KINDS = ("simulate", "approx-steer", "exact-steer", "moment-solve", "limit-experiment",
         "density-check", "constants", "audit-potentials")

_FUNCS = {"cos": np.cos, "sin": np.sin, "exp": np.exp, "sqrt": np.sqrt}
_BINOPS = {ast.Add: operator.add, ast.Sub: operator.sub, ast.Mult: operator.mul,
           ast.Div: operator.truediv, ast.Pow: operator.pow}
_UNOPS = {ast.UAdd: operator.pos, ast.USub: operator.neg}


# Formulas -------------------------------------------------------------------

def _check(node, variables, path):
    if isinstance(node, ast.Expression):
        return _check(node.body, variables, path)
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ConfigError(f"{path}: only numeric literals are allowed")
        return
    if isinstance(node, ast.Name):
        if node.id not in variables and node.id not in ("Phi", "pi"):
            raise ConfigError(f"{path}: unknown name {node.id!r}")
        return
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        _check(node.left, variables, path)
        _check(node.right, variables, path)
        return
    if isinstance(node, ast.UnaryOp) and type(node.op) in _UNOPS:
        _check(node.operand, variables, path)
        return
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS:
            raise ConfigError(f"{path}: unsupported function call")
        if len(node.args) != 1 or node.keywords:
            raise ConfigError(f"{path}: {node.func.id} takes exactly one argument")
        _check(node.args[0], variables, path)
        return
    raise ConfigError(f"{path}: unsupported syntax {type(node).__name__}")


def _eval(node, env):
    if isinstance(node, ast.Expression):
        return _eval(node.body, env)
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        return _UNOPS[type(node.op)](_eval(node.operand, env))
    return _FUNCS[node.func.id](_eval(node.args[0], env))


def parse_formula(text, dim=1, path="formula"):
    """Callable f(*x) for a formula string; raises ConfigError on bad input."""
    if not isinstance(text, str) or not text.strip():
        raise ConfigError(f"{path}: expected a nonempty formula string")
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ConfigError(f"{path}: cannot parse {text!r} ({exc.msg})") from None
    variables = ("x", "y")[:dim]
    _check(tree, variables, path)
    phi = ground_state_value(dim)

    def func(*x):
        env = {"Phi": phi, "pi": math.pi, **dict(zip(variables, x))}
        with np.errstate(all="raise"):
            out = _eval(tree, env)
        return np.broadcast_to(np.asarray(out, dtype=float), np.shape(x[0]))

    return func


def formula_field(text, n, dim=1, path="formula", oversample=4):
    """Band-limited field of a formula string."""
    func = parse_formula(text, dim, path)
    try:
        return TorusField.from_function(func, n, dim, oversample)
    except FloatingPointError as exc:
        raise ConfigError(f"{path}: {text!r} is not finite on the grid ({exc})") from None


# Config ---------------------------------------------------------------------

@dataclass
class PDEConfig:
    d: int = 1
    kappa: float = 1.0
    p: int = 2
    n: int = 128


# Kind-specific defaults; a config may override any of these keys and no others.
PARAM_DEFAULTS = {
    "simulate": {"control": None, "record_every": 1},
    "approx-steer": {"mode": "positive", "hold_level": 1.0, "max_depth": 2, "eta": 1e-2,
                     "s": 1},
    "exact-steer": {"K": 12, "n_max": 8, "T0": 1.0, "steps_per_window": 4096,
                    "pipeline": False, "hold_level": 3.0, "entry_radius": None,
                    "entry_radii": [1e-4, 3e-5, 1e-5, 3e-6, 1e-6], "entry_runs": 20},
    "moment-solve": {"K": 12},
    "limit-experiment": {"phi": "1 + cos(x)", "control": None,
                         "deltas": [1e-1, 3e-2, 1e-2, 3e-3, 1e-3], "s": 1},
    "density-check": {"generators": [[1]]},
    "constants": {"nu": None, "K": 12, "T0": 1.0, "taus": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6,
                                                           0.7, 0.8, 0.9, 1.0],
                  "series_n": 30},
    "audit-potentials": {"kmax": 32},
}

# Defaults that reproduce the reference experiment of each kind.
KIND_DEFAULTS = {
    "simulate": {"initial": "Phi*(1 + 0.3*cos(x))", "T": 1.0},
    "approx-steer": {"initial": "1 + 0.2*cos(x)", "target": "1 + 0.2*sin(x)", "T": 1.0,
                     "tol": 5e-2},
    "exact-steer": {"potentials": "mtB_five",
                    "initial": "Phi + 1e-3*(cos(x) + sin(2*x))/sqrt(pi)", "T": 1.0,
                    "tol": 1e-8},
    "moment-solve": {"potentials": "mtB_five", "initial": "(cos(5*x) + sin(3*x))/sqrt(pi)",
                     "T": 0.5, "tol": 1e-8},
    "limit-experiment": {"initial": "Phi", "T": 0.1},
    "density-check": {},
    "constants": {"pde": {"kappa": 0.0, "p": 0}, "potentials": "mtB_five"},
    "audit-potentials": {"potentials": "mtB_five"},
}


@dataclass
class ExperimentConfig:
    """Resolved experiment description.  ``tol`` is the accuracy goal of the
    experiment (steering error, stopping residual or moment tolerance)."""

    kind: str
    pde: PDEConfig = field(default_factory=PDEConfig)
    potentials: str = "mtA_d1"
    initial: str = "Phi"
    target: str | None = None
    T: float = 1.0
    tol: float = 1e-2
    seed: int | None = None
    params: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, data, path="config"):
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected an object")
        data = copy.deepcopy(data)
        kind = data.get("kind")
        if kind not in KINDS:
            raise ConfigError(f"{path}.kind: expected one of {KINDS}, got {kind!r}")
        known = {"kind", "pde", "potentials", "initial", "target", "T", "tol", "seed",
                 "params"}
        for key in data:
            if key not in known:
                raise ConfigError(f"{path}.{key}: unknown field")
        merged = copy.deepcopy(KIND_DEFAULTS[kind])
        pde = {**merged.pop("pde", {}), **data.pop("pde", {})}
        for key in pde:
            if key not in PDEConfig.__dataclass_fields__:
                raise ConfigError(f"{path}.pde.{key}: unknown field")
        merged.update(data)
        params = {**copy.deepcopy(PARAM_DEFAULTS[kind]), **merged.pop("params", {})}
        for key in params:
            if key not in PARAM_DEFAULTS[kind]:
                raise ConfigError(f"{path}.params.{key}: unknown parameter for {kind}")
        cfg = cls(pde=PDEConfig(**pde), params=params, **merged)
        cfg.validate(path)
        return cfg

    @classmethod
    def from_json(cls, text, path="config"):
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data, path)

    @classmethod
    def load(cls, filename):
        with open(filename) as fh:
            return cls.from_json(fh.read(), str(filename))

    @classmethod
    def default(cls, kind):
        return cls.from_dict({"kind": kind})

    def validate(self, path="config"):
        pde = self.pde
        _need(isinstance(pde.d, int) and pde.d in (1, 2), f"{path}.pde.d", "must be 1 or 2")
        _need(_is_number(pde.kappa) and pde.kappa >= 0, f"{path}.pde.kappa",
              "must be a nonnegative number")
        _need(isinstance(pde.p, int) and pde.p >= 0, f"{path}.pde.p",
              "must be a nonnegative integer")
        _need(isinstance(pde.n, int) and pde.n >= 8 and pde.n % 2 == 0, f"{path}.pde.n",
              "must be an even integer >= 8")
        _need(self.potentials in PRESETS, f"{path}.potentials", f"must be one of {PRESETS}")
        _need(_is_number(self.T) and self.T > 0, f"{path}.T", "must be positive")
        _need(_is_number(self.tol) and self.tol > 0, f"{path}.tol", "must be positive")
        _need(self.seed is None or isinstance(self.seed, int), f"{path}.seed",
              "must be an integer")
        parse_formula(self.initial, pde.d, f"{path}.initial")
        if self.target is not None:
            parse_formula(self.target, pde.d, f"{path}.target")
        if self.kind == "approx-steer":
            _need(self.params["mode"] in ("positive", "same-sign", "null"),
                  f"{path}.params.mode", "must be positive, same-sign or null")
            _need(self.params["mode"] == "null" or self.target is not None,
                  f"{path}.target", "is required for this mode")
        if self.kind == "limit-experiment":
            parse_formula(self.params["phi"], pde.d, f"{path}.params.phi")
            deltas = self.params["deltas"]
            _need(isinstance(deltas, list) and deltas and all(
                _is_number(v) and v > 0 for v in deltas), f"{path}.params.deltas",
                "must be a nonempty list of positive numbers")
        if self.kind in ("exact-steer", "moment-solve"):
            _need(pde.d == 1, f"{path}.pde.d", "must be 1 for this experiment")
            _need(self.potentials == "mtB_five", f"{path}.potentials",
                  "must carry mu_1 and mu_2 (mtB_five)")
        if self.kind == "density-check":
            gens = self.params["generators"]
            _need(isinstance(gens, list) and gens and all(
                isinstance(k, list) and k and all(isinstance(v, int) for v in k)
                for k in gens), f"{path}.params.generators",
                "must be a nonempty list of integer vectors")
        if self.kind == "simulate" and self.params["control"] is not None:
            _need(isinstance(self.params["control"], list) and all(
                _is_number(v) for v in self.params["control"]),
                f"{path}.params.control", "must be a list of numbers")
        return self


def _is_number(v):
    return isinstance(v, (int, float)) and not isinstance(v, bool) and math.isfinite(v)


def _need(cond, path, msg):
    if not cond:
        raise ConfigError(f"{path}: {msg}")
