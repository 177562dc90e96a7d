"""Dense float64 regressor for Q(x, a) and the constrained continuous-action argmax."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .market_sim import ConstraintSpec

Q_MAGIC = b"CBPLQFN"
Q_VERSION = 1


class ModelFormatError(ValueError):
    pass


@dataclass(frozen=True)
class RegressorConfig:
    hidden_sizes: Tuple[int, ...] = (64, 64)
    activation: str = "tanh"
    learning_rate: float = 1e-3
    batch_size: int = 64
    epochs: int = 50
    seed: int = 0
    weight_init_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "hidden_sizes", tuple(int(h) for h in self.hidden_sizes))
        if any(h < 1 for h in self.hidden_sizes):
            raise ValueError("hidden layer sizes must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; choose from {sorted(_ACTIVATIONS)}")


@dataclass(frozen=True)
class ActionSearchConfig:
    restarts: int = 8
    steps: int = 100
    step_size: float = 0.05
    tolerance: float = 1e-6
    seed: int = 0

    def __post_init__(self):
        if self.restarts < 1 or self.steps < 1:
            raise ValueError("restarts and steps must be >= 1")


def _tanh_grad(h):
    return 1.0 - h * h


def _relu(a):
    return np.maximum(a, 0.0)


def _relu_grad(h):
    return (h > 0).astype(np.float64)


def _softplus(a):
    return np.logaddexp(0.0, a)


def _softplus_grad(h):
    # h = softplus(a) -> sigmoid(a) = 1 - exp(-h)
    return -np.expm1(-h)


# activation(a) and its derivative expressed through the activation output
_ACTIVATIONS = {
    "tanh": (np.tanh, _tanh_grad),
    "relu": (_relu, _relu_grad),
    "softplus": (_softplus, _softplus_grad),
}


class QFunction:
    """Feed-forward network over standardized ``[state, action]`` inputs.

    The scalar network output ``z`` is mapped to value units by
    ``y_mean + y_std * z``.
    """

    def __init__(self, weights, biases, x_mean, x_std, y_mean, y_std, state_dim, action_dim,
                 activation="tanh", train_mse=float("nan"), initial_mse=float("nan")):
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.asarray(b, dtype=np.float64) for b in biases]
        self.x_mean = np.asarray(x_mean, dtype=np.float64)
        self.x_std = np.asarray(x_std, dtype=np.float64)
        self.y_mean = float(y_mean)
        self.y_std = float(y_std)
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.activation = activation
        self.train_mse = float(train_mse)
        self.initial_mse = float(initial_mse)
        if self.x_mean.shape != (self.state_dim + self.action_dim,):
            raise ValueError("normalization vectors do not match the input layout")
        if np.any(self.x_std <= 0):
            raise ValueError("normalization stds must be positive")

    @property
    def hidden_sizes(self) -> Tuple[int, ...]:
        return tuple(w.shape[1] for w in self.weights[:-1])

    def _inputs(self, x, a) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        if x.shape[1] != self.state_dim or a.shape[1] != self.action_dim:
            raise ValueError(
                f"expected state dim {self.state_dim} and action dim {self.action_dim}, "
                f"got {x.shape[1]} and {a.shape[1]}"
            )
        if x.shape[0] != a.shape[0]:
            if x.shape[0] == 1:
                x = np.broadcast_to(x, (a.shape[0], x.shape[1]))
            elif a.shape[0] == 1:
                a = np.broadcast_to(a, (x.shape[0], a.shape[1]))
            else:
                raise ValueError("state and action batch sizes differ")
        return (np.hstack([x, a]) - self.x_mean) / self.x_std

    def _forward(self, h):
        act = _ACTIVATIONS[self.activation][0]
        hs = [h]
        for w, b in zip(self.weights[:-1], self.biases[:-1]):
            h = act(h @ w + b)
            hs.append(h)
        z = (h @ self.weights[-1] + self.biases[-1])[:, 0]
        return z, hs

    def _backward_input(self, hs, dz):
        dact = _ACTIVATIONS[self.activation][1]
        d = dz[:, None] * self.weights[-1][:, 0][None, :]
        for layer in range(len(self.weights) - 2, -1, -1):
            d = d * dact(hs[layer + 1])
            d = d @ self.weights[layer].T
        return d

    def predict_standardized(self, x, a) -> np.ndarray:
        return self._forward(self._inputs(x, a))[0]

    def predict(self, x, a):
        """Q-values for a batch (or a single float for one state/action pair)."""
        single = np.ndim(x) == 1 and np.ndim(a) == 1
        out = self.y_mean + self.y_std * self.predict_standardized(x, a)
        return float(out[0]) if single else out

    def _grad_action_z(self, x, a) -> Tuple[np.ndarray, np.ndarray]:
        z, hs = self._forward(self._inputs(x, a))
        d = self._backward_input(hs, np.ones_like(z))
        return z, d[:, self.state_dim:] / self.x_std[self.state_dim:]

    def grad_action(self, x, a) -> np.ndarray:
        """Exact gradient of ``predict`` with respect to the action coordinates."""
        single = np.ndim(x) == 1 and np.ndim(a) == 1
        g = self.y_std * self._grad_action_z(x, a)[1]
        return g[0] if single else g

    def grad_input(self, x, a) -> np.ndarray:
        z, hs = self._forward(self._inputs(x, a))
        return self.y_std * self._backward_input(hs, np.ones_like(z)) / self.x_std

    # -- serialization -------------------------------------------------
    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        act = self.activation.encode("utf-8")
        buf.write(Q_MAGIC)
        buf.write(struct.pack("<IIIH", Q_VERSION, self.state_dim, self.action_dim, len(act)))
        buf.write(act)
        buf.write(struct.pack("<I", len(self.weights)))
        for w in self.weights:
            buf.write(struct.pack("<II", *w.shape))
        for w, b in zip(self.weights, self.biases):
            buf.write(np.ascontiguousarray(w, dtype="<f8").tobytes())
            buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(self.x_mean, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(self.x_std, dtype="<f8").tobytes())
        buf.write(struct.pack("<dddd", self.y_mean, self.y_std, self.train_mse, self.initial_mse))
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, raw: bytes, offset: int = 0, source: str = "<bytes>") -> Tuple["QFunction", int]:
        """Parse a serialized QFunction; returns it with the offset just past its end."""
        try:
            if raw[offset : offset + len(Q_MAGIC)] != Q_MAGIC:
                raise ModelFormatError(f"{source}: bad Q-function magic")
            pos = offset + len(Q_MAGIC)
            version, sdim, adim, alen = struct.unpack_from("<IIIH", raw, pos)
            pos += struct.calcsize("<IIIH")
            if version != Q_VERSION:
                raise ModelFormatError(f"{source}: unsupported Q-function version {version}")
            activation = raw[pos : pos + alen].decode("utf-8")
            pos += alen
            (n_layers,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            shapes = []
            for _ in range(n_layers):
                shapes.append(struct.unpack_from("<II", raw, pos))
                pos += 8
            if not shapes or shapes[0][0] != sdim + adim or shapes[-1][1] != 1:
                raise ModelFormatError(f"{source}: layer-shape table inconsistent with input layout")
            for (_, o), (i, _) in zip(shapes[:-1], shapes[1:]):
                if o != i:
                    raise ModelFormatError(f"{source}: layer shapes do not chain")

            def take(n):
                nonlocal pos
                if pos + 8 * n > len(raw):
                    raise ModelFormatError(f"{source}: truncated Q-function data")
                out = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64)
                pos += 8 * n
                return out

            weights, biases = [], []
            for i, o in shapes:
                weights.append(take(i * o).reshape(i, o))
                biases.append(take(o))
            x_mean = take(sdim + adim)
            x_std = take(sdim + adim)
            y_mean, y_std, train_mse, initial_mse = take(4)
        except struct.error as exc:
            raise ModelFormatError(f"{source}: truncated Q-function data ({exc})") from None
        except UnicodeDecodeError:
            raise ModelFormatError(f"{source}: corrupted activation name") from None
        if activation not in _ACTIVATIONS:
            raise ModelFormatError(f"{source}: unknown activation {activation!r}")
        q = cls(weights, biases, x_mean, x_std, y_mean, y_std, sdim, adim, activation,
                train_mse, initial_mse)
        return q, pos


def save_q(q: QFunction, path) -> None:
    Path(path).write_bytes(q.to_bytes())


def load_q(path) -> QFunction:
    raw = Path(path).read_bytes()
    q, end = QFunction.from_bytes(raw, source=str(path))
    if end != len(raw):
        raise ModelFormatError(f"{path}: trailing bytes after Q-function")
    return q


# -- construction and training ---------------------------------------------

def init_q(state_dim: int, action_dim: int, config: RegressorConfig, rng=None,
           x_mean=None, x_std=None, y_mean=0.0, y_std=1.0) -> QFunction:
    """Randomly initialized network (Glorot-uniform scaled by ``weight_init_scale``)."""
    rng = np.random.default_rng(config.seed) if rng is None else rng
    sizes = [state_dim + action_dim, *config.hidden_sizes, 1]
    weights, biases = [], []
    for i, o in zip(sizes[:-1], sizes[1:]):
        limit = config.weight_init_scale * np.sqrt(6.0 / (i + o))
        weights.append(rng.uniform(-limit, limit, size=(i, o)))
        biases.append(np.zeros(o))
    d = state_dim + action_dim
    x_mean = np.zeros(d) if x_mean is None else x_mean
    x_std = np.ones(d) if x_std is None else x_std
    return QFunction(weights, biases, x_mean, x_std, y_mean, y_std, state_dim, action_dim,
                     config.activation)


def _standardize(values: np.ndarray):
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return mean, std


def _param_grads(q: QFunction, h0: np.ndarray, target: np.ndarray):
    """Gradients of ``mean((z - target)^2)`` w.r.t. weights and biases."""
    z, hs = q._forward(h0)
    err = z - target
    dact = _ACTIVATIONS[q.activation][1]
    n = h0.shape[0]
    d = (2.0 / n) * err[:, None]
    gw = [None] * len(q.weights)
    gb = [None] * len(q.biases)
    for layer in range(len(q.weights) - 1, -1, -1):
        gw[layer] = hs[layer].T @ d
        gb[layer] = d.sum(axis=0)
        if layer > 0:
            d = (d @ q.weights[layer].T) * dact(hs[layer])
    return gw, gb


def fit(x, a, y, config: RegressorConfig, init: Optional[QFunction] = None) -> QFunction:
    """Minibatch SGD on mean squared error; keeps the best full-batch epoch.

    With ``init`` the network is warm-started from its weights (and input
    normalization); the output layer is rescaled so the warm start predicts
    exactly what ``init`` predicted.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if not (len(x) == len(a) == len(y)) or len(y) == 0:
        raise ValueError("fit needs >= 1 sample with matching state/action/target counts")
    if not np.all(np.isfinite(y)):
        raise ValueError("fit targets must be finite")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(a))):
        raise ValueError("fit inputs must be finite")
    rng = np.random.default_rng(config.seed)
    inputs = np.hstack([x, a])
    y_mean, y_std = _standardize(y[:, None])
    y_mean, y_std = float(y_mean[0]), float(y_std[0])

    if init is not None:
        if (init.state_dim, init.action_dim) != (x.shape[1], a.shape[1]):
            raise ValueError("warm-start network has a different input layout")
        x_mean, x_std = init.x_mean, init.x_std
        weights = [w.copy() for w in init.weights]
        biases = [b.copy() for b in init.biases]
        ratio = init.y_std / y_std
        weights[-1] = weights[-1] * ratio
        biases[-1] = (biases[-1] * init.y_std + init.y_mean - y_mean) / y_std
        q = QFunction(weights, biases, x_mean, x_std, y_mean, y_std, x.shape[1], a.shape[1],
                      init.activation)
    else:
        x_mean, x_std = _standardize(inputs)
        q = init_q(x.shape[1], a.shape[1], config, rng, x_mean, x_std, y_mean, y_std)
        if np.all(y == y[0]):
            # constant targets: a zero output layer is already the exact minimizer
            q.weights[-1][:] = 0.0
            q.biases[-1][:] = 0.0

    h0 = (inputs - q.x_mean) / q.x_std
    zt = (y - y_mean) / y_std

    def mse_z():
        return float(np.mean((q._forward(h0)[0] - zt) ** 2))

    initial = mse_z()
    best = initial
    best_params = ([w.copy() for w in q.weights], [b.copy() for b in q.biases])
    n = len(y)
    bs = min(config.batch_size, n)
    lr = config.learning_rate
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, bs):
            idx = perm[start : start + bs]
            gw, gb = _param_grads(q, h0[idx], zt[idx])
            for layer in range(len(q.weights)):
                q.weights[layer] -= lr * gw[layer]
                q.biases[layer] -= lr * gb[layer]
        cur = mse_z()
        if not np.isfinite(cur):
            break
        if cur < best:
            best = cur
            best_params = ([w.copy() for w in q.weights], [b.copy() for b in q.biases])
    q.weights, q.biases = best_params
    q.train_mse = best * y_std**2
    q.initial_mse = initial * y_std**2
    return q


# -- feasible-set projection and action search -------------------------------

def project_feasible(raw, spec: ConstraintSpec) -> np.ndarray:
    """Euclidean projection onto the box-constrained simplex (row-wise for 2-D input).

    ``s(theta) = sum(clip(raw - theta, lo, hi))`` is nonincreasing and
    piecewise linear with breakpoints ``raw - lo`` and ``raw - hi``.  The
    bracket containing ``s = 1`` is located among the sorted breakpoints,
    ``theta`` is interpolated inside it and then re-solved exactly on the
    resulting free set.
    """
    raw = np.asarray(raw, dtype=np.float64)
    single = raw.ndim == 1
    v = np.atleast_2d(raw)
    n_stocks = v.shape[1] - 1
    spec.validate_for(n_stocks)
    lo = spec.lower_bounds(n_stocks)
    hi = spec.upper_bounds(n_stocks)
    bp = np.sort(np.hstack([v - lo, v - hi]), axis=1)
    s = np.clip(v[:, None, :] - bp[:, :, None], lo, hi).sum(axis=2)
    # last breakpoint where the sum is still >= 1; s[:, 0] == sum(hi) >= 1 up to rounding
    j = np.clip((s >= 1.0).sum(axis=1) - 1, 0, bp.shape[1] - 2)
    rows = np.arange(v.shape[0])
    b0, b1 = bp[rows, j], bp[rows, j + 1]
    s0, s1 = s[rows, j], s[rows, j + 1]
    drop = s0 - s1
    frac = np.where(drop > 0, (s0 - 1.0) / np.where(drop > 0, drop, 1.0), 0.0)
    theta = b0 + np.clip(frac, 0.0, 1.0) * (b1 - b0)
    shifted = v - theta[:, None]
    at_lo = shifted <= lo
    at_hi = shifted >= hi
    free = ~(at_lo | at_hi)
    n_free = free.sum(axis=1)
    fixed_mass = np.where(at_lo, lo, np.where(at_hi, hi, 0.0)).sum(axis=1)
    exact = (np.where(free, v, 0.0).sum(axis=1) - (1.0 - fixed_mass)) / np.maximum(n_free, 1)
    theta = np.where(n_free > 0, exact, theta)
    out = np.clip(v - theta[:, None], lo, hi)
    return out[0] if single else out


def _start_points(action_dim: int, spec: ConstraintSpec, search: ActionSearchConfig) -> np.ndarray:
    rng = np.random.default_rng(search.seed)
    starts = [np.full(action_dim, 1.0 / action_dim)]
    if search.restarts > 1:
        starts.extend(rng.dirichlet(np.ones(action_dim), size=search.restarts - 1))
    return project_feasible(np.array(starts), spec)


def argmax_action(q: QFunction, x, spec: ConstraintSpec, search: ActionSearchConfig) -> np.ndarray:
    """Multi-restart projected gradient ascent on ``a -> Q(x, a)`` over the feasible set.

    Ascent runs on the standardized network output (a positive affine map of
    Q), so the step size is independent of the value scale.  The restart
    start points depend only on ``search.seed``, which makes the action for a
    state independent of the other states in the batch; repeated states are
    searched once.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    uniq, inverse = np.unique(x, axis=0, return_inverse=True)
    if uniq.shape[0] < x.shape[0]:
        out = _argmax_rows(q, uniq, spec, search)[inverse.reshape(-1)]
    else:
        out = _argmax_rows(q, x, spec, search)
    return out[0] if single else out


def _argmax_rows(q: QFunction, x: np.ndarray, spec: ConstraintSpec,
                 search: ActionSearchConfig) -> np.ndarray:
    n, k, r = x.shape[0], q.action_dim, search.restarts
    starts = _start_points(k, spec, search)
    xs = np.repeat(x, r, axis=0)
    acts = np.tile(starts, (n, 1))
    val, grad = q._grad_action_z(xs, acts)
    best_val = val.copy()
    best_act = acts.copy()
    active = np.ones(n * r, dtype=bool)
    for _ in range(search.steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        new = project_feasible(acts[idx] + search.step_size * grad[idx], spec)
        moved = np.abs(new - acts[idx]).max(axis=1)
        acts[idx] = new
        v_new, g_new = q._grad_action_z(xs[idx], new)
        grad[idx] = g_new
        better = v_new > best_val[idx]
        best_val[idx[better]] = v_new[better]
        best_act[idx[better]] = new[better]
        active[idx[moved < search.tolerance]] = False
    best_val = best_val.reshape(n, r)
    choice = np.argmax(best_val, axis=1)  # first index wins ties
    return best_act.reshape(n, r, k)[np.arange(n), choice]
