"""Simulator rollouts of learned and baseline policies, run in lockstep over episodes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data_gen import BehaviorPolicyParams, behavior_alpha, CLAMP
from .market_sim import ConstraintSpec, PriceSeries, batch_value_at_risk


@dataclass
class RolloutResult:
    log_returns: np.ndarray  # episodes x horizon
    var_costs: np.ndarray  # episodes x horizon, currency units

    @property
    def mean_log_return(self) -> float:
        return float(self.log_returns.mean())

    @property
    def mean_var(self) -> float:
        return float(self.var_costs.mean())

    @property
    def mean_episode_return(self) -> float:
        return float(self.log_returns.sum(axis=1).mean())


# policy_fn(features (E, d), rng) -> weights (E, N+1)
PolicyFn = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def simulate(series: PriceSeries, policy_fn: PolicyFn, episodes: int, horizon: int,
             spec: ConstraintSpec, seed: int, window: int = 5) -> RolloutResult:
    rel = series.relative_price_matrix()
    if horizon + window >= series.n_days:
        raise ValueError("horizon + window must be smaller than the number of days")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 7]))
    starts = rng.integers(window - 1, rel.shape[0] - horizon, size=episodes)
    offsets = np.arange(-window + 1, 1)
    windows = rel[starts[:, None] + offsets[None, :]]
    value = np.ones(episodes)
    log_r = np.empty((episodes, horizon))
    var = np.empty((episodes, horizon))
    for k in range(horizon):
        w = policy_fn(windows.reshape(episodes, -1), rng)
        v_next = rel[starts + k + 1]
        gross = np.einsum("ek,ek->e", v_next, w)
        assert np.all(gross > 0)
        new_value = value * gross
        log_r[:, k] = np.log(new_value / value)
        windows = np.concatenate([windows[:, 1:], v_next[:, None, :]], axis=1)
        var[:, k] = batch_value_at_risk(windows, w, spec.var_confidence) * new_value
        value = new_value
    return RolloutResult(log_r, var)


def crp_fn(n_stocks: int) -> PolicyFn:
    """Uniform constant-rebalanced portfolio over the stocks."""
    w = np.concatenate([[0.0], np.full(n_stocks, 1.0 / n_stocks)])
    return lambda x, rng: np.tile(w, (x.shape[0], 1))


def behavior_fn(params: BehaviorPolicyParams, window: int, n_stocks: int) -> PolicyFn:
    def act(x, rng):
        wins = x.reshape(x.shape[0], window, n_stocks + 1)
        out = np.empty((x.shape[0], n_stocks + 1))
        for i, win in enumerate(wins):
            w = rng.dirichlet(behavior_alpha(win, params))
            if np.any(w < CLAMP):
                w = np.maximum(w, CLAMP)
                w = w / w.sum()
            out[i] = w
        return out
    return act


def mixed_fn(mixed, episodes: int, seed: int) -> PolicyFn:
    """Each episode samples one mixture component up front and follows it."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    comp = rng.choice(len(mixed.components), size=episodes, p=mixed.weights)

    def act(x, _rng):
        out = np.empty((x.shape[0], mixed.components[0].q.action_dim))
        for c in np.unique(comp):
            idx = np.flatnonzero(comp == c)
            out[idx] = mixed.components[c].act(x[idx])
        return out
    return act
