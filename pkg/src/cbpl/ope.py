"""Off-policy estimates of reward and constraint values: FQE, kernel IS and DR.

``policy`` arguments are anything with ``act(states) -> actions`` operating on
batches; ``q_hat`` arguments anything with ``predict(states, actions)``.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from .approximator import QFunction, RegressorConfig, fit
from .data_gen import BatchDataset
from .fqi import initial_q

METHODS = ("FQE", "IS", "DR")


class OpeError(ValueError):
    pass


@dataclass
class OpeEstimate:
    value: float
    method: str
    signal: str
    diagnostics: Dict[str, float] = field(default_factory=dict)
    model: Optional[QFunction] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise OpeError(f"{self.method} estimate for signal {self.signal} is not finite")

    def report_row(self) -> str:
        diag = ";".join(f"{k}={_fmt(v)}" for k, v in sorted(self.diagnostics.items()))
        return f"{self.method},{self.signal},{_fmt(self.value)},{diag}"


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def signal_name(which) -> str:
    return "r" if which == "r" else f"g{int(which) + 1}"


@dataclass(frozen=True)
class FqeConfig:
    iterations: int = 30
    gamma: float = 0.99
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    initial_state_sample: int = 0
    warm_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("FQE needs at least one iteration")
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")


def _initial_indices(dataset: BatchDataset, config: FqeConfig) -> np.ndarray:
    idx = dataset.initial_indices()
    if idx.size == 0:
        raise OpeError("dataset has no episode-initial transitions (step_index == 0)")
    if 0 < config.initial_state_sample < idx.size:
        rng = np.random.default_rng(np.random.SeedSequence([config.seed, 2]))
        idx = np.sort(rng.choice(idx, size=config.initial_state_sample, replace=False))
    return idx


def fqe(policy, dataset: BatchDataset, signal, config: FqeConfig,
        next_actions=None, initial_actions=None) -> OpeEstimate:
    """Fitted Q Evaluation of a fixed policy on one signal.

    Targets are ``e_i + gamma * Q_{k-1}(x'_i, pi(x'_i))``; the estimate is the
    mean of ``Q_K(x_0, pi(x_0))`` over episode-initial states.  Policy actions
    are computed once (the policy does not change between rounds) unless
    supplied by the caller.
    """
    if len(dataset) == 0:
        raise OpeError("empty dataset")
    e = dataset.signal(signal)
    init_idx = _initial_indices(dataset, config)
    x0 = dataset.x[init_idx]
    a_next = policy.act(dataset.x_next) if next_actions is None else next_actions
    a0 = policy.act(x0) if initial_actions is None else initial_actions
    q = initial_q(dataset, float(np.std(e)), config.regressor, config.seed)
    for k in range(1, config.iterations + 1):
        y = e + config.gamma * q.predict(dataset.x_next, a_next)
        reg = dataclasses.replace(config.regressor, seed=config.regressor.seed + k)
        q = fit(dataset.x, dataset.a, y, reg, init=q if (config.warm_start and k > 1) else None)
    value = float(np.mean(q.predict(x0, a0)))
    return OpeEstimate(
        value=value, method="FQE", signal=signal_name(signal),
        diagnostics={"final_mse": q.train_mse, "iterations": config.iterations,
                     "initial_states": int(init_idx.size)},
        model=q,
    )


def _episode_grid(dataset: BatchDataset):
    """Index matrix (episodes x max length) padded with -1, ordered by step."""
    eps = list(dataset.episodes())
    length = max(len(e) for e in eps)
    grid = np.full((len(eps), length), -1, dtype=np.int64)
    for i, e in enumerate(eps):
        grid[i, : len(e)] = e
    return grid


def kernel_log_density(a, center, bandwidth: float) -> np.ndarray:
    """Log of a normalized Gaussian kernel on the stock coordinates of the simplex.

    Cash is dropped (it is determined by the other coordinates), matching the
    chart in which the Dirichlet behavior density is expressed.
    """
    diff = np.atleast_2d(a)[:, 1:] - np.atleast_2d(center)[:, 1:]
    dim = diff.shape[1]
    sq = np.sum(diff * diff, axis=1)
    return -0.5 * dim * np.log(2.0 * np.pi * bandwidth**2) - sq / (2.0 * bandwidth**2)


def _check_densities(dataset: BatchDataset):
    logp = dataset.behavior_log_density
    if not np.all(np.isfinite(logp)):
        name = dataset.meta.get("name", dataset.meta.get("path", "<in-memory dataset>"))
        raise OpeError(f"dataset {name} lacks finite behavior log-densities; IS/DR need them")


def _normalized_weights(log_ratio: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Per-step self-normalized cumulative importance weights (episodes x steps)."""
    cum = np.cumsum(np.where(mask, log_ratio, 0.0), axis=1)
    cum = np.where(mask, cum, -np.inf)
    norm = logsumexp(cum, axis=0, keepdims=True)
    with np.errstate(invalid="ignore"):
        w = np.exp(cum - norm)
    return np.where(np.isfinite(norm), np.nan_to_num(w, nan=0.0), 0.0), cum


def _ess(logw: np.ndarray) -> float:
    logw = logw[np.isfinite(logw)]
    if logw.size == 0:
        return 0.0
    return float(np.exp(2 * logsumexp(logw) - logsumexp(2 * logw)))


def _is_parts(policy, dataset: BatchDataset, bandwidth: float, target_actions=None):
    if bandwidth <= 0:
        raise ValueError("kernel bandwidth must be positive")
    _check_densities(dataset)
    grid = _episode_grid(dataset)
    mask = grid >= 0
    safe = np.where(mask, grid, 0)
    pi_a = policy.act(dataset.x) if target_actions is None else target_actions
    log_ratio = kernel_log_density(dataset.a, pi_a, bandwidth) - dataset.behavior_log_density
    w, cum = _normalized_weights(log_ratio[safe], mask)
    last = mask.sum(axis=1) - 1
    ess = _ess(cum[np.arange(len(grid)), last])
    return grid, mask, safe, w, ess, pi_a


def importance_sampling(policy, dataset: BatchDataset, bandwidth: float, gamma: float,
                        signal="r", target_actions=None) -> OpeEstimate:
    """Per-decision importance sampling with weights self-normalized across trajectories.

    ``rho_t = K_h(a_t - pi(x_t)) / mu(a_t | x_t)``; the step-t reward of each
    trajectory is weighted by its normalized cumulative ratio ``rho_{0:t}``.
    """
    grid, mask, safe, w, ess, _ = _is_parts(policy, dataset, bandwidth, target_actions)
    e = np.where(mask, dataset.signal(signal)[safe], 0.0)
    disc = gamma ** np.arange(grid.shape[1])
    value = float(np.sum(disc * np.sum(w * e, axis=0)))
    return OpeEstimate(
        value=value, method="IS", signal=signal_name(signal),
        diagnostics={"ess": ess, "ess_fraction": ess / len(grid), "bandwidth": bandwidth,
                     "trajectories": len(grid)},
    )


def doubly_robust(policy, dataset: BatchDataset, q_hat, bandwidth: float, gamma: float,
                  signal="r", target_actions=None, initial_actions=None,
                  next_actions=None) -> OpeEstimate:
    """Step-wise doubly robust estimate with self-normalized ratios.

    ``V = mean V(x_0) + sum_t gamma^t sum_i wbar_{i,t} (e_t + gamma V(x_{t+1}) - Q(x_t, a_t))``
    with ``V(x) = Q(x, pi(x))`` and no bootstrap after a trajectory's last step.
    """
    grid, mask, safe, w, ess, pi_a = _is_parts(policy, dataset, bandwidth, target_actions)
    e = dataset.signal(signal)
    a_next = policy.act(dataset.x_next) if next_actions is None else next_actions
    v_next = np.asarray(q_hat.predict(dataset.x_next, a_next), dtype=np.float64)
    q_sa = np.asarray(q_hat.predict(dataset.x, dataset.a), dtype=np.float64)
    first = grid[:, 0]
    if initial_actions is None:
        v0 = np.asarray(q_hat.predict(dataset.x[first], pi_a[first]), dtype=np.float64)
    else:
        v0 = np.asarray(q_hat.predict(dataset.x[first], initial_actions), dtype=np.float64)
    is_last = np.zeros_like(mask)
    is_last[np.arange(len(grid)), mask.sum(axis=1) - 1] = True
    boot = np.where(is_last, 0.0, v_next[safe])
    resid = np.where(mask, e[safe] + gamma * boot - q_sa[safe], 0.0)
    disc = gamma ** np.arange(grid.shape[1])
    correction = float(np.sum(disc * np.sum(w * resid, axis=0)))
    baseline = float(np.mean(v0))
    return OpeEstimate(
        value=baseline + correction, method="DR", signal=signal_name(signal),
        diagnostics={"ess": ess, "ess_fraction": ess / len(grid), "bandwidth": bandwidth,
                     "baseline": baseline, "correction": correction},
    )


def per_step_scale(method: str, gamma: float, horizon: int, fqe_iterations: int) -> float:
    """Factor turning a discounted sum into a discount-weighted per-step average."""
    n = fqe_iterations if method == "FQE" else horizon
    return (1.0 - gamma) / (1.0 - gamma**n)


def evaluate_signals(policy, dataset: BatchDataset, method: str, gamma: float,
                     fqe_config: Optional[FqeConfig] = None, bandwidth: float = 0.1,
                     signals: Optional[Sequence] = None) -> List[OpeEstimate]:
    """Run one estimator on the reward and every constraint signal."""
    method = method.upper()
    if method not in METHODS:
        raise OpeError(f"unknown OPE method {method!r}; valid methods: {', '.join(METHODS)}")
    if signals is None:
        signals = ["r"] + list(range(dataset.n_constraints))
    fqe_config = dataclasses.replace(fqe_config or FqeConfig(), gamma=gamma)
    if method != "FQE":
        _check_densities(dataset)
    a_next = policy.act(dataset.x_next)
    a_cur = policy.act(dataset.x) if method != "FQE" else None
    init_idx = _initial_indices(dataset, fqe_config)
    a0 = policy.act(dataset.x[init_idx])
    out = []
    for s in signals:
        if method == "IS":
            out.append(importance_sampling(policy, dataset, bandwidth, gamma, s, target_actions=a_cur))
            continue
        est = fqe(policy, dataset, s, fqe_config, next_actions=a_next, initial_actions=a0)
        if method == "DR":
            est = doubly_robust(policy, dataset, est.model, bandwidth, gamma, s,
                                target_actions=a_cur, next_actions=a_next)
        out.append(est)
    return out


def estimate_policy(policy, dataset: BatchDataset, method: str, gamma: float,
                    fqe_config: Optional[FqeConfig] = None, bandwidth: float = 0.1,
                    per_step: bool = False) -> Tuple[float, np.ndarray]:
    """``(R_hat, G_hat)`` for the reward and the m constraint signals."""
    ests = evaluate_signals(policy, dataset, method, gamma, fqe_config, bandwidth)
    values = np.array([e.value for e in ests])
    if per_step:
        iters = (fqe_config or FqeConfig()).iterations
        values = values * per_step_scale(method.upper(), gamma, dataset.horizon, iters)
    return float(values[0]), values[1:]


def format_report(estimates: Sequence[OpeEstimate]) -> str:
    lines = ["method,signal,value,diagnostics"]
    lines.extend(e.report_row() for e in estimates)
    return "\n".join(lines) + "\n"
