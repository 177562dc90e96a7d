"""Experiment configuration: TOML sections mapped onto the module configs."""
from __future__ import annotations

import copy
from pathlib import Path
from typing import Any, Dict

import tomli
import tomli_w

from .approximator import ActionSearchConfig, RegressorConfig
from .data_gen import BehaviorPolicyParams
from .fqi import FqiConfig
from .game import GameConfig
from .market_sim import ConstraintSpec
from .ope import METHODS, FqeConfig


class ConfigError(ValueError):
    pass


_REGRESSOR = {
    "hidden_sizes": [64, 64],
    "activation": "tanh",
    "learning_rate": 1e-3,
    "batch_size": 64,
    "epochs": 50,
    "weight_init_scale": 1.0,
}

DEFAULTS: Dict[str, Any] = {
    "seed": 0,
    "market": {
        "price_file": "",
        "n_stocks": 5,
        "n_days": 1259,
        "price_seed": 0,
        "drift": 0.0005,
        "vol": 0.02,
        "intraday_vol": 0.0,
        "window": 5,
        "var_threshold": 0.05,
        "var_confidence": 0.95,
        "box_low": 0.2,
        "box_high": 0.6,
        "cash_min": 0.0,
    },
    "behavior": {
        "concentration": 5.0,
        "momentum_lookback": 5,
        "cash_bias": 0.2,
        "momentum_strength": 20.0,
    },
    "dataset": {"episodes": 4, "horizon": 257},
    "fqi": {
        "iterations": 30,
        "gamma": 0.99,
        **_REGRESSOR,
        "restarts": 8,
        "steps": 100,
        "step_size": 0.05,
        "tolerance": 1e-6,
        "argmax_subsample": 0,
        "warm_start": True,
        "cost_sign": -1.0,
    },
    "fqe": {
        "iterations": 30,
        "gamma": 0.99,
        **_REGRESSOR,
        "initial_state_sample": 0,
        "warm_start": True,
    },
    "game": {
        "max_iterations": 20,
        "eta": 0.5,
        "bound": 10.0,
        "omega": -1.0,  # negative -> 0.05 * bound
        "tau": [0.05],
        "ope_method": "FQE",
        "bandwidth": 0.1,
        "eg_sign": 1.0,
        "per_step": True,
    },
    "report": {
        "rollout_episodes": 500,
        "rollout_horizon": 0,  # 0 -> dataset horizon
        "methods": ["FQE", "IS", "DR"],
    },
}


def _check_type(section: str, key: str, default, value):
    where = f"[{section}] {key}" if section else key
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, list):
            if key not in ("drift", "vol"):
                raise ConfigError(f"{where}: expected a number, got a list")
            if not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
                raise ConfigError(f"{where}: list entries must be numbers")
            return [float(v) for v in value]
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        return list(value)
    return value


def resolve(raw: Dict[str, Any], base_dir: Path = Path(".")) -> Dict[str, Any]:
    """Merge ``raw`` over the defaults, rejecting unknown sections/keys and bad types."""
    out = copy.deepcopy(DEFAULTS)
    for key, value in raw.items():
        if key not in DEFAULTS:
            raise ConfigError(f"unknown section or key {key!r}")
        if isinstance(DEFAULTS[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a section")
            for sub, v in value.items():
                if sub not in DEFAULTS[key]:
                    raise ConfigError(f"[{key}] unknown key {sub!r}")
                out[key][sub] = _check_type(key, sub, DEFAULTS[key][sub], v)
        else:
            out[key] = _check_type("", key, DEFAULTS[key], value)
    price_file = out["market"]["price_file"]
    if price_file:
        path = Path(price_file)
        if not path.is_absolute():
            path = base_dir / path
        if not path.exists():
            raise ConfigError(f"[market] price_file: file not found: {path}")
        out["market"]["price_file"] = str(path)
    methods = [m.upper() for m in out["report"]["methods"]]
    bad = [m for m in methods + [out["game"]["ope_method"].upper()] if m not in METHODS]
    if bad:
        raise ConfigError(f"unknown OPE method(s) {bad}; valid methods: {', '.join(METHODS)}")
    out["report"]["methods"] = methods
    out["game"]["ope_method"] = out["game"]["ope_method"].upper()
    try:
        build(out)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from None
    return out


def load(path) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomli.loads(path.read_text(encoding="utf-8"))
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return resolve(raw, path.parent)


def dumps(cfg: Dict[str, Any]) -> str:
    return tomli_w.dumps(cfg)


def _regressor(sec: Dict[str, Any], seed: int) -> RegressorConfig:
    return RegressorConfig(
        hidden_sizes=tuple(sec["hidden_sizes"]), activation=sec["activation"],
        learning_rate=sec["learning_rate"], batch_size=sec["batch_size"], epochs=sec["epochs"],
        seed=seed, weight_init_scale=sec["weight_init_scale"],
    )


def build(cfg: Dict[str, Any]) -> Dict[str, Any]:
    """Instantiate the module-level config objects from a resolved config."""
    seed = cfg["seed"]
    mk, fq, fe, gm = cfg["market"], cfg["fqi"], cfg["fqe"], cfg["game"]
    spec = ConstraintSpec(
        var_threshold=mk["var_threshold"], var_confidence=mk["var_confidence"],
        box_low=mk["box_low"], box_high=mk["box_high"], cash_min=mk["cash_min"],
    )
    spec.validate_for(mk["n_stocks"])
    behavior = BehaviorPolicyParams(**cfg["behavior"])
    search = ActionSearchConfig(
        restarts=fq["restarts"], steps=fq["steps"], step_size=fq["step_size"],
        tolerance=fq["tolerance"], seed=seed,
    )
    fqi = FqiConfig(
        iterations=fq["iterations"], gamma=fq["gamma"], regressor=_regressor(fq, seed),
        search=search, argmax_subsample=fq["argmax_subsample"], warm_start=fq["warm_start"],
        cost_sign=fq["cost_sign"], seed=seed,
    )
    fqe = FqeConfig(
        iterations=fe["iterations"], gamma=fe["gamma"], regressor=_regressor(fe, seed + 1),
        initial_state_sample=fe["initial_state_sample"], warm_start=fe["warm_start"], seed=seed,
    )
    game = GameConfig(
        max_iterations=gm["max_iterations"], eta=gm["eta"], bound=gm["bound"],
        omega=gm["omega"] if gm["omega"] > 0 else None, tau=tuple(gm["tau"]),
        ope_method=gm["ope_method"], bandwidth=gm["bandwidth"], eg_sign=gm["eg_sign"],
        per_step=gm["per_step"], fqi=fqi, fqe=fqe, seed=seed,
    )
    if behavior.momentum_lookback > mk["window"]:
        raise ConfigError("[behavior] momentum_lookback must not exceed [market] window")
    return {"spec": spec, "behavior": behavior, "fqi": fqi, "fqe": fqe, "game": game}
