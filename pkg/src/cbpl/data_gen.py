"""Synthetic prices, the momentum-tilted Dirichlet behavior policy, and batch datasets."""
from __future__ import annotations

import datetime as _dt
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Sequence

import numpy as np
from scipy.special import gammaln

from .market_sim import (
    ConstraintSpec,
    MarketState,
    PriceSeries,
    initial_state,
    step,
)

DATA_MAGIC = b"CBPLDATA"
DATA_VERSION = 1
_HEADER = struct.Struct("<8sIIIIIQI")  # magic, version, n_stocks, window, horizon, m, count, meta_len

CLAMP = 1e-8


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True)
class BehaviorPolicyParams:
    concentration: float = 5.0
    momentum_lookback: int = 5
    cash_bias: float = 0.2
    momentum_strength: float = 20.0

    def __post_init__(self):
        if not self.concentration > 0:
            raise ValueError("concentration must be positive")
        if not 0.0 <= self.cash_bias <= 1.0:
            raise ValueError("cash_bias must lie in [0, 1]")
        if self.momentum_lookback < 1:
            raise ValueError("momentum_lookback must be >= 1")


@dataclass
class BatchDataset:
    """Column-oriented store of logged transitions.

    ``x``/``x_next`` are flattened W x (N+1) windows, ``g`` has one column per
    constraint signal (column 0 is VaR in currency units).
    """

    x: np.ndarray
    a: np.ndarray
    x_next: np.ndarray
    r: np.ndarray
    g: np.ndarray
    behavior_log_density: np.ndarray
    episode_id: np.ndarray
    step_index: np.ndarray
    n_stocks: int
    window: int
    horizon: int
    meta: Dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.r)
        self.x = np.asarray(self.x, dtype=np.float64).reshape(n, -1)
        self.x_next = np.asarray(self.x_next, dtype=np.float64).reshape(n, -1)
        self.a = np.asarray(self.a, dtype=np.float64).reshape(n, -1)
        self.r = np.asarray(self.r, dtype=np.float64).reshape(n)
        self.g = np.asarray(self.g, dtype=np.float64).reshape(n, -1)
        self.behavior_log_density = np.asarray(self.behavior_log_density, dtype=np.float64).reshape(n)
        self.episode_id = np.asarray(self.episode_id, dtype=np.int64).reshape(n)
        self.step_index = np.asarray(self.step_index, dtype=np.int64).reshape(n)
        if self.a.shape[1] != self.n_stocks + 1:
            raise ValueError("action width must be n_stocks + 1")
        if self.x.shape[1] != self.state_dim or self.x_next.shape[1] != self.state_dim:
            raise ValueError("state width must be window * (n_stocks + 1)")
        pairs = set(zip(self.episode_id.tolist(), self.step_index.tolist()))
        if len(pairs) != n:
            raise ValueError("episode_id/step_index pairs must be unique")

    def __len__(self):
        return len(self.r)

    @property
    def state_dim(self) -> int:
        return self.window * (self.n_stocks + 1)

    @property
    def n_constraints(self) -> int:
        return self.g.shape[1]

    def signal(self, which) -> np.ndarray:
        """``"r"`` for reward, an int ``j`` for constraint column ``j``."""
        if which == "r":
            return self.r
        return self.g[:, int(which)]

    def episodes(self):
        """Yield index arrays, one per episode, ordered by step_index."""
        for eid in np.unique(self.episode_id):
            idx = np.flatnonzero(self.episode_id == eid)
            yield idx[np.argsort(self.step_index[idx], kind="stable")]

    def initial_indices(self) -> np.ndarray:
        return np.flatnonzero(self.step_index == 0)

    def subset(self, idx) -> "BatchDataset":
        idx = np.asarray(idx)
        return BatchDataset(
            x=self.x[idx], a=self.a[idx], x_next=self.x_next[idx], r=self.r[idx], g=self.g[idx],
            behavior_log_density=self.behavior_log_density[idx],
            episode_id=self.episode_id[idx], step_index=self.step_index[idx],
            n_stocks=self.n_stocks, window=self.window, horizon=self.horizon, meta=dict(self.meta),
        )

    def transition(self, i: int) -> Dict:
        return {
            "x": self.x[i], "a": self.a[i], "x_next": self.x_next[i], "r": float(self.r[i]),
            "g": self.g[i], "behavior_log_density": float(self.behavior_log_density[i]),
            "episode_id": int(self.episode_id[i]), "step_index": int(self.step_index[i]),
        }

    def equals(self, other: "BatchDataset") -> bool:
        arrays = ("x", "a", "x_next", "r", "g", "behavior_log_density", "episode_id", "step_index")
        same = all(
            np.array_equal(getattr(self, k), getattr(other, k), equal_nan=True) for k in arrays
        )
        return (
            same and self.n_stocks == other.n_stocks and self.window == other.window
            and self.horizon == other.horizon and self.meta == other.meta
        )


def synth_prices(
    n_stocks: int,
    n_days: int,
    seed: int,
    drift=0.0,
    vol=0.02,
    intraday_vol: float = 0.0,
    start_price: float = 100.0,
) -> PriceSeries:
    """Geometric random walk with the walk's daily step carried by the open.

    ``log(open_t / close_{t-1}) ~ N(drift, vol^2)`` so the log relative prices
    have mean ``drift``; ``close_t = open_t * exp(intraday_vol * z)``.
    """
    drift = np.broadcast_to(np.asarray(drift, dtype=np.float64), (n_stocks,))
    vol = np.broadcast_to(np.asarray(vol, dtype=np.float64), (n_stocks,))
    if np.any(vol < 0) or intraday_vol < 0:
        raise ValueError("volatilities must be nonnegative")
    if n_days < 2:
        raise ValueError("need at least 2 days")
    rng = np.random.default_rng(seed)
    gaps = drift + vol * rng.standard_normal((n_days - 1, n_stocks))
    intraday = intraday_vol * rng.standard_normal((n_days, n_stocks))
    opens = np.empty((n_days, n_stocks))
    closes = np.empty((n_days, n_stocks))
    opens[0] = start_price
    closes[0] = start_price * np.exp(intraday[0])
    for t in range(1, n_days):
        opens[t] = closes[t - 1] * np.exp(gaps[t - 1])
        closes[t] = opens[t] * np.exp(intraday[t])
    base = _dt.date(2000, 1, 3)
    dates = [(base + _dt.timedelta(days=i)).isoformat() for i in range(n_days)]
    return PriceSeries(
        tickers=tuple(f"S{i + 1}" for i in range(n_stocks)), opens=opens, closes=closes, dates=dates
    )


def dirichlet_log_density(w: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    return (
        gammaln(alpha.sum(axis=-1))
        - gammaln(alpha).sum(axis=-1)
        + ((alpha - 1.0) * np.log(w)).sum(axis=-1)
    )


def behavior_mean(window: np.ndarray, params: BehaviorPolicyParams) -> np.ndarray:
    """Dirichlet mean: cash_bias on cash, softmax of recent mean log-returns on stocks."""
    lookback = min(params.momentum_lookback, window.shape[0])
    momentum = np.log(window[-lookback:, 1:]).mean(axis=0) * params.momentum_strength
    tilt = np.exp(momentum - momentum.max())
    tilt /= tilt.sum()
    mean = np.concatenate([[params.cash_bias], (1.0 - params.cash_bias) * tilt])
    mean = np.maximum(mean, 1e-3)
    return mean / mean.sum()


def behavior_alpha(window: np.ndarray, params: BehaviorPolicyParams) -> np.ndarray:
    return params.concentration * behavior_mean(window, params)


def behavior_action(state: MarketState, params: BehaviorPolicyParams, rng: np.random.Generator):
    """Draw weights from the behavior policy; returns ``(weights, log_density)``."""
    alpha = behavior_alpha(state.window, params)
    w = rng.dirichlet(alpha)
    if np.any(w < CLAMP):
        w = np.maximum(w, CLAMP)
        w = w / w.sum()
    return w, float(dirichlet_log_density(w, alpha))


def _episode_rng(seed: int, episode_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(episode_id)]))


def generate_episode(
    rel: np.ndarray,
    params: BehaviorPolicyParams,
    horizon: int,
    window: int,
    spec: ConstraintSpec,
    seed: int,
    episode_id: int,
):
    rng = _episode_rng(seed, episode_id)
    start = int(rng.integers(window - 1, rel.shape[0] - horizon))
    state = initial_state(rel, start, window)
    rows = []
    for k in range(horizon):
        w, logp = behavior_action(state, params, rng)
        nxt, r, var = step(state, w, rel[start + k + 1], spec)
        rows.append((state.features(), w, nxt.features(), r, var, logp, k))
        state = nxt
    return rows


def generate_dataset(
    series: PriceSeries,
    params: BehaviorPolicyParams,
    episodes: int,
    horizon: int,
    spec: ConstraintSpec,
    seed: int,
    window: int = 5,
    meta: Optional[Dict] = None,
) -> BatchDataset:
    """Roll out the behavior policy from uniformly drawn start days, ``m_0 = 1``."""
    if episodes < 1 or horizon < 1:
        raise ValueError("episodes and horizon must be >= 1")
    if horizon + window >= series.n_days:
        raise ValueError(
            f"horizon {horizon} + window {window} must be < number of days {series.n_days}"
        )
    if params.momentum_lookback > window:
        raise ValueError("momentum_lookback must not exceed the window length")
    rel = series.relative_price_matrix()
    cols = {k: [] for k in ("x", "a", "x_next", "r", "g", "logp", "eid", "k")}
    for eid in range(episodes):
        for x, a, xn, r, var, logp, k in generate_episode(rel, params, horizon, window, spec, seed, eid):
            cols["x"].append(x)
            cols["a"].append(a)
            cols["x_next"].append(xn)
            cols["r"].append(r)
            cols["g"].append([var])
            cols["logp"].append(logp)
            cols["eid"].append(eid)
            cols["k"].append(k)
    info = {
        "seed": int(seed),
        "episodes": int(episodes),
        "behavior": {
            "concentration": params.concentration,
            "momentum_lookback": params.momentum_lookback,
            "cash_bias": params.cash_bias,
            "momentum_strength": params.momentum_strength,
        },
        "constraints": ["var"],
        "tickers": list(series.tickers),
    }
    if meta:
        info.update(meta)
    return BatchDataset(
        x=np.array(cols["x"]), a=np.array(cols["a"]), x_next=np.array(cols["x_next"]),
        r=np.array(cols["r"]), g=np.array(cols["g"]), behavior_log_density=np.array(cols["logp"]),
        episode_id=np.array(cols["eid"]), step_index=np.array(cols["k"]),
        n_stocks=series.n_stocks, window=window, horizon=horizon, meta=info,
    )


def _record_matrix(d: BatchDataset) -> np.ndarray:
    return np.hstack([
        d.x, d.a, d.x_next, d.r[:, None], d.g, d.behavior_log_density[:, None],
        d.episode_id[:, None].astype(np.float64), d.step_index[:, None].astype(np.float64),
    ])


def save_dataset(d: BatchDataset, path) -> None:
    meta = json.dumps(d.meta, sort_keys=True).encode("utf-8")
    header = _HEADER.pack(
        DATA_MAGIC, DATA_VERSION, d.n_stocks, d.window, d.horizon, d.n_constraints, len(d), len(meta)
    )
    body = np.ascontiguousarray(_record_matrix(d), dtype="<f8").tobytes()
    Path(path).write_bytes(header + meta + body)


def load_dataset(path) -> BatchDataset:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < _HEADER.size:
        raise DatasetFormatError(f"{path}: truncated dataset header")
    magic, version, n_stocks, window, horizon, m, count, meta_len = _HEADER.unpack_from(raw)
    if magic != DATA_MAGIC:
        raise DatasetFormatError(f"{path}: not a dataset file (bad magic {magic!r})")
    if version != DATA_VERSION:
        raise DatasetFormatError(f"{path}: unsupported dataset version {version}")
    sd = window * (n_stocks + 1)
    width = 2 * sd + (n_stocks + 1) + 1 + m + 3
    expected = _HEADER.size + meta_len + 8 * width * count
    if len(raw) != expected:
        raise DatasetFormatError(
            f"{path}: truncated or oversized dataset ({len(raw)} bytes, expected {expected})"
        )
    meta = json.loads(raw[_HEADER.size : _HEADER.size + meta_len].decode("utf-8"))
    rec = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size + meta_len).reshape(count, width)
    rec = rec.astype(np.float64)
    c = 0

    def take(k):
        nonlocal c
        out = rec[:, c : c + k]
        c += k
        return out

    x = take(sd)
    a = take(n_stocks + 1)
    xn = take(sd)
    r = take(1)[:, 0]
    g = take(m)
    logp = take(1)[:, 0]
    eid = take(1)[:, 0].astype(np.int64)
    k = take(1)[:, 0].astype(np.int64)
    return BatchDataset(
        x=x, a=a, x_next=xn, r=r, g=g, behavior_log_density=logp, episode_id=eid, step_index=k,
        n_stocks=n_stocks, window=window, horizon=horizon, meta=meta,
    )
