"""Two-player Lagrangian game: exponentiated-gradient multipliers vs. FQI best responses."""
from __future__ import annotations

import dataclasses
import io
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .approximator import ModelFormatError
from .data_gen import BatchDataset
from .fqi import FqiConfig, GreedyPolicy, run_fqi
from .market_sim import ConstraintSpec
from .ope import FqeConfig, estimate_policy

MIXED_MAGIC = b"CBPLMIX"
MIXED_VERSION = 1


class GameError(RuntimeError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class LagrangeMultipliers:
    """``m`` constraint multipliers plus a trailing slack coordinate, summing to ``bound``."""

    lam: np.ndarray
    bound: float

    def __post_init__(self):
        lam = np.array(self.lam, dtype=np.float64)
        lam.setflags(write=False)
        object.__setattr__(self, "lam", lam)
        if np.any(lam < 0):
            raise ValueError("multipliers must be nonnegative")
        if abs(lam.sum() - self.bound) > 1e-9 * max(1.0, self.bound):
            raise ValueError(f"multipliers sum to {lam.sum()}, expected {self.bound}")

    @classmethod
    def uniform(cls, m: int, bound: float) -> "LagrangeMultipliers":
        return cls(np.full(m + 1, bound / (m + 1)), bound)

    @property
    def constraint_part(self) -> np.ndarray:
        return self.lam[:-1]


def lagrangian_value(r_hat: float, g_hat, lm: LagrangeMultipliers, tau) -> float:
    """``R - sum_j lambda_j (G_j - tau_j)``; the slack coordinate contributes nothing."""
    g_hat = np.asarray(g_hat, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if g_hat.shape != tau.shape or lm.lam.shape[0] != g_hat.shape[0] + 1:
        raise ValueError("dimension mismatch between G_hat, tau and multipliers")
    return float(r_hat - lm.constraint_part @ (g_hat - tau))


def eg_update(lm: LagrangeMultipliers, g_hat, tau, eta: float, sign: float = 1.0) -> LagrangeMultipliers:
    """Multiplicative-weights step on the scaled simplex.

    ``grad_j = G_j - tau_j`` (0 for the slack).  With ``sign = +1`` violated
    constraints gain mass; ``sign = -1`` runs the opposite exponent.
    """
    grad = np.append(np.asarray(g_hat, dtype=np.float64) - np.asarray(tau, dtype=np.float64), 0.0)
    with np.errstate(divide="ignore"):
        logits = np.log(lm.lam) + sign * eta * grad
    logits -= logits.max()
    w = np.exp(logits)
    new = lm.bound * w / w.sum()
    return LagrangeMultipliers(new, lm.bound)


def min_over_lambda(r_hat: float, g_hat, tau, bound: float) -> float:
    """Closed-form minimum of the Lagrangian over the B-scaled simplex."""
    viol = np.asarray(g_hat, dtype=np.float64) - np.asarray(tau, dtype=np.float64)
    worst = float(viol.max()) if viol.size else 0.0
    return float(r_hat - bound * max(0.0, worst))


@dataclass(frozen=True)
class GameConfig:
    max_iterations: int = 20
    eta: float = 0.5
    bound: float = 10.0
    omega: Optional[float] = None
    tau: Tuple[float, ...] = (0.05,)
    ope_method: str = "FQE"
    bandwidth: float = 0.1
    eg_sign: float = 1.0
    per_step: bool = True
    fqi: FqiConfig = field(default_factory=FqiConfig)
    fqe: FqeConfig = field(default_factory=FqeConfig)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "tau", tuple(float(t) for t in self.tau))
        if self.omega is None:
            object.__setattr__(self, "omega", 0.05 * self.bound)
        if self.max_iterations < 1 or not self.eta > 0 or not self.bound > 0 or not self.omega > 0:
            raise ValueError("need max_iterations >= 1 and positive eta, bound, omega")


@dataclass
class TraceRecord:
    t: int
    lam: np.ndarray
    r_hat: float
    g_hat: np.ndarray
    r_avg: float
    g_avg: np.ndarray
    l_min: float
    l_max: float
    gap: float
    seconds: float


class GameTrace:
    def __init__(self, m: int, records: Optional[List[TraceRecord]] = None):
        self.m = m
        self.records = list(records or [])

    def __len__(self):
        return len(self.records)

    def header(self) -> List[str]:
        m = self.m
        return (["t"] + [f"lambda_{j + 1}" for j in range(m + 1)] + ["R_hat"]
                + [f"G_hat_{j + 1}" for j in range(m)] + ["R_avg"]
                + [f"G_avg_{j + 1}" for j in range(m)] + ["L_min", "L_max", "gap", "seconds"])

    def to_csv(self, include_time: bool = True) -> str:
        lines = [",".join(self.header())]
        for rec in self.records:
            vals = ([rec.t] + list(rec.lam) + [rec.r_hat] + list(rec.g_hat) + [rec.r_avg]
                    + list(rec.g_avg) + [rec.l_min, rec.l_max, rec.gap,
                                         rec.seconds if include_time else 0.0])
            lines.append(",".join(str(rec.t) if i == 0 else repr(float(v)) for i, v in enumerate(vals)))
        return "\n".join(lines) + "\n"

    def save(self, path, include_time: bool = True) -> None:
        Path(path).write_text(self.to_csv(include_time), encoding="utf-8", newline="\n")

    @classmethod
    def load(cls, path) -> "GameTrace":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines:
            raise ValueError(f"{path}: empty trace file")
        head = lines[0].split(",")
        m = sum(1 for h in head if h.startswith("G_hat_"))
        trace = cls(m)
        if head != trace.header():
            raise ValueError(f"{path}: line 1: unexpected trace header")
        for lineno, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != len(head):
                raise ValueError(f"{path}: line {lineno}: expected {len(head)} fields, got {len(parts)}")
            try:
                t = int(parts[0])
                v = [float(p) for p in parts[1:]]
            except ValueError:
                raise ValueError(f"{path}: line {lineno}: non-numeric field") from None
            c = 0
            lam = np.array(v[c : c + m + 1]); c += m + 1
            r_hat = v[c]; c += 1
            g_hat = np.array(v[c : c + m]); c += m
            r_avg = v[c]; c += 1
            g_avg = np.array(v[c : c + m]); c += m
            l_min, l_max, gap, secs = v[c : c + 4]
            trace.records.append(TraceRecord(t, lam, r_hat, g_hat, r_avg, g_avg, l_min, l_max, gap, secs))
        return trace


class MixedPolicy:
    """Distribution over greedy policies; acting samples one component then follows it."""

    def __init__(self, components: Sequence[GreedyPolicy], weights: Sequence[float]):
        weights = np.asarray(weights, dtype=np.float64)
        if len(components) == 0 or len(components) != len(weights):
            raise ValueError("need one weight per component and at least one component")
        if np.any(weights < 0) or abs(weights.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be nonnegative and sum to 1")
        self.components = list(components)
        self.weights = weights

    @classmethod
    def uniform(cls, components: Sequence[GreedyPolicy]) -> "MixedPolicy":
        return cls(components, np.full(len(components), 1.0 / len(components)))

    def sample_component(self, rng: np.random.Generator) -> int:
        return int(rng.choice(len(self.components), p=self.weights))

    def act(self, x, rng: np.random.Generator) -> np.ndarray:
        return mixed_action(self, x, rng)

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        buf.write(MIXED_MAGIC)
        buf.write(struct.pack("<II", MIXED_VERSION, len(self.components)))
        for pol, w in zip(self.components, self.weights):
            blob = pol.to_bytes()
            buf.write(struct.pack("<dQ", float(w), len(blob)))
            buf.write(blob)
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "MixedPolicy":
        raw = Path(path).read_bytes()
        if raw[: len(MIXED_MAGIC)] != MIXED_MAGIC:
            raise ModelFormatError(f"{path}: bad mixed-policy magic")
        try:
            version, n = struct.unpack_from("<II", raw, len(MIXED_MAGIC))
            if version != MIXED_VERSION:
                raise ModelFormatError(f"{path}: unsupported mixed-policy version {version}")
            pos = len(MIXED_MAGIC) + 8
            comps, weights = [], []
            for _ in range(n):
                w, blen = struct.unpack_from("<dQ", raw, pos)
                pos += 16
                pol, end = GreedyPolicy.from_bytes(raw, pos, str(path))
                if end != pos + blen:
                    raise ModelFormatError(f"{path}: component length mismatch")
                pos = end
                comps.append(pol)
                weights.append(w)
        except struct.error:
            raise ModelFormatError(f"{path}: truncated mixed-policy file") from None
        if pos != len(raw):
            raise ModelFormatError(f"{path}: trailing bytes after mixed policy")
        return cls(comps, weights)


def mixed_action(mp: MixedPolicy, x, rng: np.random.Generator) -> np.ndarray:
    return mp.components[mp.sample_component(rng)].act(x)


def load_policy(path):
    """Load either a single greedy policy or a mixed policy file."""
    head = Path(path).read_bytes()[:8]
    if head.startswith(MIXED_MAGIC):
        return MixedPolicy.load(path)
    return MixedPolicy([GreedyPolicy.load(path)], [1.0])


def _fqi_config(config: GameConfig, tag: int, t: int) -> FqiConfig:
    seed = int(np.random.SeedSequence([config.seed, tag, t]).generate_state(1)[0])
    return dataclasses.replace(config.fqi, seed=seed)


def run_game(dataset: BatchDataset, spec: ConstraintSpec, config: GameConfig,
             log: Optional[Callable[[str], None]] = None) -> Tuple[MixedPolicy, GameTrace]:
    """Play exponentiated-gradient multipliers against FQI best responses.

    Each round: best response to ``lambda_t``, OPE of reward and constraints,
    uniform mixture of all best responses so far, ``L_min`` from the averaged
    estimates, ``L_max`` from a fresh best response to the averaged
    multipliers.  Stops once ``L_max - L_min < omega``.
    """
    m = dataset.n_constraints
    tau = np.asarray(config.tau, dtype=np.float64)
    if tau.shape != (m,):
        raise ValueError(f"dataset carries {m} constraint signals but tau has {tau.size}")
    spec.validate_for(dataset.n_stocks)
    gamma = config.fqe.gamma

    def evaluate(policy):
        r, g = estimate_policy(policy, dataset, config.ope_method, gamma, config.fqe,
                               config.bandwidth, per_step=config.per_step)
        return r, np.asarray(g)

    lm = LagrangeMultipliers.uniform(m, config.bound)
    trace = GameTrace(m)
    policies: List[GreedyPolicy] = []
    r_hist, g_hist, lam_hist = [], [], []
    for t in range(1, config.max_iterations + 1):
        start = time.perf_counter()
        policy = run_fqi(dataset, lm.constraint_part, _fqi_config(config, 0, t), spec)
        r_hat, g_hat = evaluate(policy)
        policies.append(policy)
        r_hist.append(r_hat)
        g_hist.append(g_hat)
        lam_hist.append(lm.lam)
        r_avg = float(np.mean(r_hist))
        g_avg = np.mean(g_hist, axis=0)
        lam_avg = LagrangeMultipliers(np.mean(lam_hist, axis=0), config.bound)
        l_min = min_over_lambda(r_avg, g_avg, tau, config.bound)
        best = run_fqi(dataset, lam_avg.constraint_part, _fqi_config(config, 1, t), spec)
        r_best, g_best = evaluate(best)
        l_max = lagrangian_value(r_best, g_best, lam_avg, tau)
        gap = l_max - l_min
        rec = TraceRecord(t, lm.lam.copy(), r_hat, g_hat, r_avg, g_avg, l_min, l_max, gap,
                          time.perf_counter() - start)
        trace.records.append(rec)
        if log is not None:
            log(f"t={t} lambda={np.round(lm.lam, 4).tolist()} R={r_hat:.4g} G={np.round(g_hat, 5).tolist()} "
                f"L_min={l_min:.4g} L_max={l_max:.4g} gap={gap:.4g}")
        if not all(np.isfinite(v) for v in (r_hat, l_min, l_max)) or not np.all(np.isfinite(g_hat)):
            raise GameError(f"non-finite estimate at iteration {t}", trace)
        if gap < config.omega:
            break
        lm = eg_update(lm, g_hat, tau, config.eta, config.eg_sign)
    return MixedPolicy.uniform(policies), trace
