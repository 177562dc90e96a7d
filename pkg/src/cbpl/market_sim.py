"""Portfolio market environment: price ingestion, relative prices, accounting, VaR.

Index 0 of every weight / relative-price vector is cash.  Relative prices are
``open_t / close_{t-1}`` and cash always has relative price 1.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

SIMPLEX_TOL = 1e-9


class PriceFileError(ValueError):
    """Raised for malformed or invalid price files."""


def _frozen(arr) -> np.ndarray:
    out = np.array(arr, dtype=np.float64)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class PriceSeries:
    tickers: Tuple[str, ...]
    opens: np.ndarray
    closes: np.ndarray
    dates: Tuple[str, ...]

    def __post_init__(self):
        opens = _frozen(self.opens)
        closes = _frozen(self.closes)
        object.__setattr__(self, "opens", opens)
        object.__setattr__(self, "closes", closes)
        object.__setattr__(self, "tickers", tuple(self.tickers))
        object.__setattr__(self, "dates", tuple(str(d) for d in self.dates))
        n = len(self.tickers)
        if opens.ndim != 2 or opens.shape != closes.shape or opens.shape[1] != n:
            raise ValueError(
                f"opens/closes must both be T x {n}, got {opens.shape} and {closes.shape}"
            )
        if len(self.dates) != opens.shape[0]:
            raise ValueError("dates length does not match number of price rows")
        if not (np.all(opens > 0) and np.all(closes > 0)):
            raise ValueError("all prices must be strictly positive")

    @property
    def n_days(self) -> int:
        return self.opens.shape[0]

    @property
    def n_stocks(self) -> int:
        return self.opens.shape[1]

    def relative_price_matrix(self) -> np.ndarray:
        """All relative-price vectors, row ``t - 1`` holding ``v_t`` for t = 1..T-1."""
        out = np.ones((self.n_days - 1, self.n_stocks + 1))
        out[:, 1:] = self.opens[1:] / self.closes[:-1]
        return out


@dataclass(frozen=True)
class ConstraintSpec:
    var_threshold: float = 0.05
    var_confidence: float = 0.95
    box_low: float = 0.2
    box_high: float = 0.6
    cash_min: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.var_confidence < 1.0:
            raise ValueError("var_confidence must lie in (0, 1)")
        if self.box_low > self.box_high:
            raise ValueError("box_low must not exceed box_high")
        if self.box_low < 0.0 or self.cash_min < 0.0:
            raise ValueError("box_low and cash_min must be nonnegative")
        if self.cash_min > 1.0:
            raise ValueError("cash_min must not exceed 1")

    def validate_for(self, n_stocks: int) -> None:
        """Reject bounds that leave no feasible weight vector for ``n_stocks`` stocks."""
        if n_stocks * self.box_low > 1.0 - self.cash_min + 1e-12:
            raise ValueError(
                f"infeasible constraints: {n_stocks} stocks x box_low {self.box_low} "
                f"exceeds 1 - cash_min = {1.0 - self.cash_min}"
            )

    def lower_bounds(self, n_stocks: int) -> np.ndarray:
        lo = np.full(n_stocks + 1, float(self.box_low))
        lo[0] = self.cash_min
        return lo

    def upper_bounds(self, n_stocks: int) -> np.ndarray:
        hi = np.full(n_stocks + 1, float(self.box_high))
        hi[0] = 1.0
        return hi


@dataclass(frozen=True)
class MarketState:
    window: np.ndarray
    portfolio_value: float = 1.0
    current_weights: np.ndarray = None
    t: int = 0

    def __post_init__(self):
        window = _frozen(self.window)
        if window.ndim != 2 or window.shape[1] < 2:
            raise ValueError("window must be a W x (N+1) matrix")
        if np.any(window[:, 0] != 1.0) or np.any(window <= 0):
            raise ValueError("window rows must be valid relative-price vectors")
        if not self.portfolio_value > 0:
            raise ValueError("portfolio_value must be positive")
        object.__setattr__(self, "window", window)
        w = self.current_weights
        if w is None:
            w = np.zeros(window.shape[1])
            w[0] = 1.0
        object.__setattr__(self, "current_weights", _frozen(w))
        object.__setattr__(self, "portfolio_value", float(self.portfolio_value))

    @property
    def n_stocks(self) -> int:
        return self.window.shape[1] - 1

    def features(self) -> np.ndarray:
        """Flattened window, the state representation seen by function approximators."""
        return self.window.reshape(-1).copy()


def validate_weights(w: np.ndarray) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 1:
        raise ValueError("weights must be a vector")
    if np.any(w < 0) or abs(w.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"weights must be nonnegative and sum to 1, got {w}")
    return w


def load_prices(path) -> PriceSeries:
    """Read a ``date,<ticker>_open,<ticker>_close,...`` CSV file."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise PriceFileError(f"{path}: empty price file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[0].lower() != "date" or (len(header) - 1) % 2:
            raise PriceFileError(f"{path}: header must be date,<ticker>_open,<ticker>_close,...")
        tickers = []
        for k in range(1, len(header), 2):
            o, c = header[k], header[k + 1]
            if not (o.endswith("_open") and c.endswith("_close")) or o[:-5] != c[:-6]:
                raise PriceFileError(f"{path}: bad header columns {o!r}, {c!r}")
            tickers.append(o[:-5])

        dates, opens, closes = [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise PriceFileError(
                    f"{path}: line {lineno} has {len(row)} fields, expected {len(header)}"
                )
            day = len(dates) + 1
            vals = []
            for k, cell in enumerate(row[1:]):
                ticker = tickers[k // 2]
                kind = "open" if k % 2 == 0 else "close"
                try:
                    x = float(cell)
                except ValueError:
                    raise PriceFileError(
                        f"{path}: day {day} ({row[0]}, line {lineno}) ticker {ticker}: "
                        f"missing or non-numeric {kind} price {cell!r}"
                    ) from None
                if not (math.isfinite(x) and x > 0):
                    raise PriceFileError(
                        f"{path}: day {day} ({row[0]}, line {lineno}) ticker {ticker}: "
                        f"non-positive {kind} price {x}"
                    )
                vals.append(x)
            dates.append(row[0].strip())
            opens.append(vals[0::2])
            closes.append(vals[1::2])
    if not dates:
        raise PriceFileError(f"{path}: no data rows")
    order = sorted(range(len(dates)), key=lambda i: dates[i])
    return PriceSeries(
        tickers=tuple(tickers),
        opens=np.array(opens)[order],
        closes=np.array(closes)[order],
        dates=[dates[i] for i in order],
    )


def save_prices(series: PriceSeries, path) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["date"]
        for t in series.tickers:
            header += [f"{t}_open", f"{t}_close"]
        writer.writerow(header)
        for d, o, c in zip(series.dates, series.opens, series.closes):
            row = [d]
            for oi, ci in zip(o, c):
                row += [repr(float(oi)), repr(float(ci))]
            writer.writerow(row)


def relative_prices(series: PriceSeries, t: int) -> np.ndarray:
    if not 1 <= t < series.n_days:
        raise IndexError(f"t={t} outside [1, {series.n_days - 1}]")
    v = np.ones(series.n_stocks + 1)
    v[1:] = series.opens[t] / series.closes[t - 1]
    return v


def value_at_risk(state: MarketState, weights: np.ndarray, spec: ConstraintSpec) -> float:
    """Historical-simulation VaR in currency units over the state's own window.

    The empirical ``1 - confidence`` quantile of the hypothetical one-step
    returns uses the "lower" convention, so results are bit-reproducible.
    """
    if state.window.shape[0] < 2:
        raise ValueError("VaR needs a window of at least 2 rows")
    returns = state.window @ np.asarray(weights, dtype=np.float64) - 1.0
    q = np.quantile(returns, 1.0 - spec.var_confidence, method="lower")
    return max(0.0, -float(q)) * state.portfolio_value


def batch_value_at_risk(windows: np.ndarray, weights: np.ndarray, confidence: float) -> np.ndarray:
    """Per-unit-value VaR for a stack of windows ``(n, W, N+1)`` and weights ``(n, N+1)``."""
    returns = np.einsum("nwk,nk->nw", windows, weights) - 1.0
    q = np.quantile(returns, 1.0 - confidence, axis=1, method="lower")
    return np.maximum(0.0, -q)


def step(
    state: MarketState, weights: np.ndarray, v_next: np.ndarray, spec: ConstraintSpec
) -> Tuple[MarketState, float, float]:
    """Advance one period: returns ``(next_state, log_return, var_cost)``."""
    weights = np.asarray(weights, dtype=np.float64)
    v_next = np.asarray(v_next, dtype=np.float64)
    gross = float(v_next @ weights)
    assert gross > 0.0, "gross return must be positive"
    new_value = state.portfolio_value * gross
    window = np.vstack([state.window[1:], v_next])
    nxt = MarketState(window=window, portfolio_value=new_value, current_weights=weights, t=state.t + 1)
    log_return = math.log(new_value / state.portfolio_value)
    return nxt, log_return, value_at_risk(nxt, weights, spec)


@dataclass
class FeasibilityReport:
    feasible: bool
    violations: List[str] = field(default_factory=list)

    def __bool__(self):
        return self.feasible


def check_feasible(weights: np.ndarray, spec: ConstraintSpec) -> FeasibilityReport:
    """Closed-bound check of the box and cash constraints."""
    w = np.asarray(weights, dtype=np.float64)
    violations = []
    if w[0] < spec.cash_min:
        violations.append(f"cash weight {w[0]:.6g} below {spec.cash_min}")
    for i in range(1, w.size):
        if w[i] < spec.box_low:
            violations.append(f"stock {i} weight {w[i]:.6g} below {spec.box_low}")
        elif w[i] > spec.box_high:
            violations.append(f"stock {i} weight {w[i]:.6g} above {spec.box_high}")
    return FeasibilityReport(not violations, violations)


def initial_state(rel: np.ndarray, start: int, window: int, value: float = 1.0) -> MarketState:
    """State whose newest window row is ``rel[start]`` (rows of ``relative_price_matrix``)."""
    if start - window + 1 < 0:
        raise IndexError("not enough history for the window")
    return MarketState(window=rel[start - window + 1 : start + 1], portfolio_value=value, t=start)
