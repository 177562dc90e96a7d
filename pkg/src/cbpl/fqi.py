"""Fitted Q Iteration best response for a fixed multiplier vector."""
from __future__ import annotations

import dataclasses
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .approximator import (
    ActionSearchConfig,
    ModelFormatError,
    QFunction,
    RegressorConfig,
    argmax_action,
    fit,
    init_q,
)
from .data_gen import BatchDataset
from .market_sim import ConstraintSpec

POLICY_MAGIC = b"CBPLPOL"
POLICY_VERSION = 1

# -1 penalizes constraint costs (maximize r - lambda.g); +1 is the literal "+lambda.g" form
PENALIZE = -1.0


@dataclass(frozen=True)
class FqiConfig:
    iterations: int = 30
    gamma: float = 0.99
    regressor: RegressorConfig = field(default_factory=RegressorConfig)
    search: ActionSearchConfig = field(default_factory=ActionSearchConfig)
    argmax_subsample: int = 0
    warm_start: bool = True
    cost_sign: float = PENALIZE
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("FQI needs at least one iteration")
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if self.cost_sign not in (-1.0, 1.0):
            raise ValueError("cost_sign must be -1 or +1")


def scalarize(r, g, lam, sign: float = PENALIZE):
    """``r + sign * lam . g``; with the default sign constraint costs are penalized."""
    lam = np.asarray(lam, dtype=np.float64)
    if np.any(lam < 0):
        raise ValueError("multipliers must be nonnegative")
    g = np.asarray(g, dtype=np.float64)
    if g.shape[-1] != lam.shape[-1]:
        raise ValueError(f"{g.shape[-1]} constraint costs but {lam.shape[-1]} multipliers")
    return np.asarray(r, dtype=np.float64) + sign * (g @ lam)


class GreedyPolicy:
    """Deterministic policy ``x -> argmax_a Q(x, a)`` over the feasible set."""

    def __init__(self, q: QFunction, spec: ConstraintSpec, search: ActionSearchConfig):
        self.q = q
        self.spec = spec
        self.search = search

    def act(self, x) -> np.ndarray:
        return argmax_action(self.q, x, self.spec, self.search)

    def __call__(self, x):
        return self.act(x)

    def to_bytes(self) -> bytes:
        spec = json.dumps(dataclasses.asdict(self.spec), sort_keys=True).encode("utf-8")
        search = json.dumps(dataclasses.asdict(self.search), sort_keys=True).encode("utf-8")
        qb = self.q.to_bytes()
        return b"".join([
            POLICY_MAGIC, struct.pack("<IQ", POLICY_VERSION, len(qb)), qb,
            struct.pack("<I", len(spec)), spec, struct.pack("<I", len(search)), search,
        ])

    @classmethod
    def from_bytes(cls, raw: bytes, offset: int = 0, source: str = "<bytes>"):
        if raw[offset : offset + len(POLICY_MAGIC)] != POLICY_MAGIC:
            raise ModelFormatError(f"{source}: bad policy magic")
        pos = offset + len(POLICY_MAGIC)
        try:
            version, qlen = struct.unpack_from("<IQ", raw, pos)
            if version != POLICY_VERSION:
                raise ModelFormatError(f"{source}: unsupported policy version {version}")
            pos += struct.calcsize("<IQ")
            q, end = QFunction.from_bytes(raw, pos, source)
            if end != pos + qlen:
                raise ModelFormatError(f"{source}: Q-function length mismatch")
            pos = end
            records = []
            for _ in range(2):
                (n,) = struct.unpack_from("<I", raw, pos)
                pos += 4
                if pos + n > len(raw):
                    raise ModelFormatError(f"{source}: truncated policy record")
                records.append(json.loads(raw[pos : pos + n].decode("utf-8")))
                pos += n
        except (struct.error, ValueError) as exc:
            if isinstance(exc, ModelFormatError):
                raise
            raise ModelFormatError(f"{source}: corrupted policy file ({exc})") from None
        policy = cls(q, ConstraintSpec(**records[0]), ActionSearchConfig(**records[1]))
        return policy, pos

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "GreedyPolicy":
        raw = Path(path).read_bytes()
        policy, end = cls.from_bytes(raw, source=str(path))
        if end != len(raw):
            raise ModelFormatError(f"{path}: trailing bytes after policy")
        return policy


def target_bound(r, g, lam, gamma: float) -> float:
    """Bound on |Bellman targets| when rewards/costs are bounded by their sample maxima."""
    r_max = float(np.max(np.abs(r))) if len(r) else 0.0
    g_max = float(np.max(np.abs(g))) if np.size(g) else 0.0
    return (r_max + float(np.sum(np.abs(lam))) * g_max) / (1.0 - gamma)


def initial_q(dataset: BatchDataset, scale: float, config: RegressorConfig, seed: int) -> QFunction:
    """Random Q_0 on the dataset's input normalization, output scaled to ``scale``."""
    inputs = np.hstack([dataset.x, dataset.a])
    mean = inputs.mean(axis=0)
    std = inputs.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    rng = np.random.default_rng(seed)
    return init_q(dataset.state_dim, dataset.n_stocks + 1, config, rng, mean, std, 0.0,
                  0.1 * scale if scale > 0 else 1e-3)


def run_fqi(dataset: BatchDataset, lam, config: FqiConfig, spec: ConstraintSpec,
            log=None) -> GreedyPolicy:
    """K rounds of regression on ``scalarize(r, g, lam) + gamma * max_a Q_{k-1}(x', a)``.

    Next-state greedy actions are recomputed once per round for every
    transition (or, with ``argmax_subsample > 0``, for a random subset while
    the rest reuse the previous round's actions).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    lam = np.asarray(lam, dtype=np.float64)
    c = scalarize(dataset.r, dataset.g, lam, config.cost_sign)
    bound = target_bound(dataset.r, dataset.g, lam, config.gamma)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    q = initial_q(dataset, float(np.std(c)), config.regressor, config.seed)
    cached = None
    n = len(dataset)
    for k in range(1, config.iterations + 1):
        if cached is None or config.argmax_subsample <= 0 or config.argmax_subsample >= n:
            cached = argmax_action(q, dataset.x_next, spec, config.search)
        else:
            idx = np.sort(rng.choice(n, size=config.argmax_subsample, replace=False))
            cached[idx] = argmax_action(q, dataset.x_next[idx], spec, config.search)
        boot = np.clip(q.predict(dataset.x_next, cached), -bound, bound)
        y = c + config.gamma * boot
        assert np.all(np.abs(y) <= bound * (1 + 1e-12) + 1e-300), "Bellman target out of bound"
        reg = dataclasses.replace(config.regressor, seed=config.regressor.seed + k)
        warm = q if (config.warm_start and k > 1) else None
        q = fit(dataset.x, dataset.a, y, reg, init=warm)
        if log is not None:
            log(f"fqi k={k} mse={q.train_mse:.3e}")
    return GreedyPolicy(q, spec, config.search)
