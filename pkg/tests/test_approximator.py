import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays
from scipy.optimize import linprog

from cbpl.approximator import (
    ActionSearchConfig,
    ModelFormatError,
    QFunction,
    RegressorConfig,
    argmax_action,
    fit,
    init_q,
    load_q,
    project_feasible,
    save_q,
)
from cbpl.market_sim import ConstraintSpec, check_feasible

SPEC = ConstraintSpec(box_low=0.05, box_high=0.6, cash_min=0.0)


def random_net(hidden, seed=0, state_dim=4, action_dim=3, activation="tanh"):
    rng = np.random.default_rng(seed)
    cfg = RegressorConfig(hidden_sizes=hidden, activation=activation, seed=seed)
    d = state_dim + action_dim
    return init_q(state_dim, action_dim, cfg, rng, rng.normal(size=d), rng.uniform(0.5, 2.0, d),
                  0.3, 1.7)


def linear_q(coef, state_dim=2):
    """Zero-hidden-layer net computing ``coef . a`` exactly."""
    coef = np.asarray(coef, dtype=float)
    d = state_dim + coef.size
    w = np.zeros((d, 1))
    w[state_dim:, 0] = coef
    return QFunction([w], [np.zeros(1)], np.zeros(d), np.ones(d), 0.0, 1.0, state_dim, coef.size, "tanh")


def central_diff(f, a, h=1e-6):
    g = np.zeros_like(a)
    for i in range(a.size):
        e = np.zeros_like(a)
        e[i] = h
        g[i] = (f(a + e) - f(a - e)) / (2 * h)
    return g


# -- fit -----------------------------------------------------------------

def test_fit_constant_targets():
    rng = np.random.default_rng(0)
    x, a = rng.normal(size=(200, 3)), rng.dirichlet(np.ones(3), 200)
    q = fit(x, a, np.full(200, 2.5), RegressorConfig(hidden_sizes=(8,), learning_rate=0.05, epochs=100))
    assert np.max(np.abs(q.predict(x, a) - 2.5)) < 1e-3


def test_fit_linear_matches_ols():
    rng = np.random.default_rng(1)
    x, a = rng.normal(size=(400, 3)), rng.normal(size=(400, 2))
    coef = np.array([0.5, -1.0, 2.0, 0.3, -0.7])
    inputs = np.hstack([x, a])
    y = inputs @ coef + 0.4 + 0.05 * rng.normal(size=400)
    ols, *_ = np.linalg.lstsq(np.hstack([inputs, np.ones((400, 1))]), y, rcond=None)
    q = fit(x, a, y, RegressorConfig(hidden_sizes=(), learning_rate=0.05, epochs=200, batch_size=32))
    np.testing.assert_allclose(q.grad_input(x[:1], a[:1])[0], ols[:5], atol=1e-2)
    assert q.predict(np.zeros(3), np.zeros(2)) == pytest.approx(ols[5], abs=1e-2)


def test_fit_smooth_function():
    rng = np.random.default_rng(2)
    x, a = rng.uniform(-1, 1, (500, 1)), rng.uniform(-1, 1, (500, 1))
    y = np.sin(2 * x[:, 0]) * np.cos(a[:, 0]) + 0.5 * a[:, 0] ** 2
    q = fit(x, a, y, RegressorConfig(hidden_sizes=(32, 32), learning_rate=0.02, epochs=100))
    assert q.train_mse < 0.1 * y.var()


def test_fit_reports_consistent_mse_and_improves():
    rng = np.random.default_rng(3)
    x, a = rng.normal(size=(300, 4)), rng.dirichlet(np.ones(3), 300)
    y = x[:, 0] * a[:, 1] + rng.normal(scale=0.1, size=300)
    q = fit(x, a, y, RegressorConfig(hidden_sizes=(16,), learning_rate=0.01, epochs=10))
    assert q.train_mse == pytest.approx(np.mean((q.predict(x, a) - y) ** 2), rel=1e-9)
    assert q.train_mse <= q.initial_mse


def test_fit_deterministic_bytes():
    rng = np.random.default_rng(4)
    x, a, y = rng.normal(size=(100, 2)), rng.dirichlet(np.ones(3), 100), rng.normal(size=100)
    cfg = RegressorConfig(hidden_sizes=(8, 8), epochs=5, seed=7)
    assert fit(x, a, y, cfg).to_bytes() == fit(x, a, y, cfg).to_bytes()
    other = RegressorConfig(hidden_sizes=(8, 8), epochs=5, seed=8)
    assert fit(x, a, y, cfg).to_bytes() != fit(x, a, y, other).to_bytes()


def test_fit_rejects_bad_targets():
    x, a = np.zeros((3, 2)), np.zeros((3, 2))
    with pytest.raises(ValueError, match="finite"):
        fit(x, a, [1.0, np.nan, 0.0], RegressorConfig())
    with pytest.raises(ValueError):
        fit(x, a, [1.0, 2.0], RegressorConfig())


def test_warm_start_preserves_predictions():
    rng = np.random.default_rng(5)
    x, a = rng.normal(size=(50, 2)), rng.dirichlet(np.ones(3), 50)
    first = fit(x, a, rng.normal(size=50), RegressorConfig(hidden_sizes=(8,), epochs=3))
    warm = fit(x, a, 10 + 3 * rng.normal(size=50), RegressorConfig(hidden_sizes=(8,), epochs=0), init=first)
    np.testing.assert_allclose(warm.predict(x, a), first.predict(x, a), atol=1e-10)


@pytest.mark.parametrize("activation", ["tanh", "relu", "softplus"])
def test_activations_train(activation):
    rng = np.random.default_rng(6)
    x, a = rng.normal(size=(200, 2)), rng.dirichlet(np.ones(2), 200)
    y = x[:, 0] + a[:, 0]
    q = fit(x, a, y, RegressorConfig(hidden_sizes=(16,), activation=activation, learning_rate=0.02, epochs=30))
    assert q.train_mse < 0.2 * y.var()


def test_regressor_config_validation():
    with pytest.raises(ValueError):
        RegressorConfig(hidden_sizes=(0,))
    with pytest.raises(ValueError):
        RegressorConfig(learning_rate=0.0)
    with pytest.raises(ValueError, match="activation"):
        RegressorConfig(activation="sigmoid")
    with pytest.raises(ValueError):
        ActionSearchConfig(restarts=0)


# -- predict / gradients -------------------------------------------------

def test_predict_dimension_mismatch():
    q = random_net((4,))
    with pytest.raises(ValueError):
        q.predict(np.zeros(3), np.zeros(3))


@pytest.mark.parametrize("hidden", [(), (32,), (64, 64)])
def test_grad_action_finite_differences(hidden):
    q = random_net(hidden, seed=len(hidden))
    rng = np.random.default_rng(10)
    for _ in range(20):
        x, a = rng.normal(size=4), rng.dirichlet(np.ones(3))
        g = q.grad_action(x, a)
        fd = central_diff(lambda v: q.predict(x, v), a)
        assert np.max(np.abs(g - fd)) <= 1e-4 * max(1.0, np.max(np.abs(fd)))


@pytest.mark.parametrize("activation", ["tanh", "softplus"])
def test_grad_input_finite_differences(activation):
    q = random_net((16, 8), seed=3, activation=activation)
    rng = np.random.default_rng(11)
    for _ in range(20):
        x, a = rng.normal(size=4), rng.dirichlet(np.ones(3))
        g = q.grad_input(x, a)[0]
        fd = central_diff(lambda v: q.predict(v[:4], v[4:]), np.concatenate([x, a]))
        assert np.max(np.abs(g - fd)) <= 1e-4 * max(1.0, np.max(np.abs(fd)))


def test_grad_action_linear():
    coef = np.array([0.3, -1.2, 0.8])
    q = linear_q(coef)
    np.testing.assert_allclose(q.grad_action(np.ones(2), np.array([0.2, 0.3, 0.5])), coef, atol=1e-15)


def test_grad_action_varies_for_nonlinear_net():
    q = random_net((16,), seed=1)
    x = np.zeros(4)
    g1 = q.grad_action(x, np.array([0.8, 0.1, 0.1]))
    g2 = q.grad_action(x, np.array([0.1, 0.1, 0.8]))
    assert not np.allclose(g1, g2)


# -- serialization -------------------------------------------------------

def test_save_load_round_trip(tmp_path):
    q = random_net((8, 4), seed=2)
    save_q(q, tmp_path / "q.bin")
    a, b = load_q(tmp_path / "q.bin"), load_q(tmp_path / "q.bin")
    rng = np.random.default_rng(0)
    x, acts = rng.normal(size=(100, 4)), rng.dirichlet(np.ones(3), 100)
    np.testing.assert_array_equal(a.predict(x, acts), q.predict(x, acts))
    np.testing.assert_array_equal(a.predict(x, acts), b.predict(x, acts))
    assert a.to_bytes() == q.to_bytes()


def test_load_rejects_corruption(tmp_path):
    q = random_net((4,))
    raw = q.to_bytes()
    (tmp_path / "bad.bin").write_bytes(b"XXXXXXX" + raw[7:])
    with pytest.raises(ModelFormatError, match="bad.bin"):
        load_q(tmp_path / "bad.bin")
    (tmp_path / "short.bin").write_bytes(raw[:-5])
    with pytest.raises(ModelFormatError):
        load_q(tmp_path / "short.bin")


# -- projection ----------------------------------------------------------

def test_projection_hand_case():
    spec = ConstraintSpec(box_low=0.2, box_high=0.6)
    np.testing.assert_allclose(project_feasible([0.0, 2.0], spec), [0.4, 0.6], atol=1e-12)


def test_projection_keeps_feasible_points():
    spec = ConstraintSpec(box_low=0.2, box_high=0.6)
    w = np.array([0, 0.2, 0.2, 0.2, 0.2, 0.2])
    np.testing.assert_allclose(project_feasible(w, spec), w, atol=1e-10)
    w = np.array([0.3, 0.1, 0.2, 0.4])
    np.testing.assert_allclose(project_feasible(w, SPEC), w, atol=1e-10)


def _grid_best(v, lo, hi, step=1e-3):
    """Brute force over a grid on coordinates 1, 2; coordinate 3 solved exactly, 0 takes the rest."""
    g1 = np.arange(lo[1], hi[1] + step / 2, step)
    best = np.inf
    for w1 in g1:
        w2 = np.arange(lo[2], hi[2] + step / 2, step)
        rest = 1.0 - w1 - w2
        # minimize (w0 - v0)^2 + (w3 - v3)^2 subject to w0 + w3 = rest and bounds
        w3 = np.clip((rest - v[0] + v[3]) / 2, np.maximum(lo[3], rest - hi[0]), np.minimum(hi[3], rest - lo[0]))
        ok = (w3 >= lo[3] - 1e-12) & (w3 <= hi[3] + 1e-12) & (rest - w3 >= lo[0] - 1e-12)
        d = (w1 - v[1]) ** 2 + (w2 - v[2]) ** 2 + (w3 - v[3]) ** 2 + (rest - w3 - v[0]) ** 2
        d = np.where(ok, d, np.inf)
        best = min(best, float(np.sqrt(d.min())))
    return best


def test_projection_grid_oracle_sample():
    rng = np.random.default_rng(0)
    lo, hi = SPEC.lower_bounds(3), SPEC.upper_bounds(3)
    for _ in range(25):
        v = rng.normal(0.25, 0.5, 4)
        p = project_feasible(v, SPEC)
        assert abs(np.linalg.norm(p - v) - _grid_best(v, lo, hi)) < 2e-3
        assert np.linalg.norm(p - v) <= _grid_best(v, lo, hi) + 1e-9


def test_projection_matches_kkt_solution():
    # closed form when only the simplex binds: shift all coordinates equally
    v = np.array([0.3, 0.3, 0.3, 0.3])
    np.testing.assert_allclose(project_feasible(v, SPEC), [0.25] * 4, atol=1e-14)


raw_vectors = arrays(np.float64, 5, elements=st.floats(-3, 3))


@settings(max_examples=200, deadline=None)
@given(v=raw_vectors, low=st.floats(0.0, 0.2), width=st.floats(0.0, 0.8), cash=st.floats(0.0, 0.2))
def test_projection_properties(v, low, width, cash):
    spec = ConstraintSpec(box_low=low, box_high=min(1.0, low + width), cash_min=cash)
    try:
        spec.validate_for(4)
    except ValueError:
        return
    if spec.box_high * 4 + 1.0 < 1.0:
        return
    p = project_feasible(v, spec)
    assert abs(p.sum() - 1.0) < 1e-9
    assert p[0] >= cash - 1e-12 and np.all(p[1:] >= low - 1e-12) and np.all(p[1:] <= spec.box_high + 1e-12)
    np.testing.assert_allclose(project_feasible(p, spec), p, atol=1e-10)
    # variational inequality: (v - p) . (w - p) <= 0 for feasible w (probe a few)
    rng = np.random.default_rng(0)
    for w in project_feasible(rng.normal(0.2, 0.5, (10, 5)), spec):
        assert (v - p) @ (w - p) <= 1e-8


def test_projection_rows_match_vectors():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(30, 4))
    rows = project_feasible(v, SPEC)
    for i in range(30):
        np.testing.assert_array_equal(rows[i], project_feasible(v[i], SPEC))


def test_projection_rejects_infeasible_spec():
    with pytest.raises(ValueError, match="infeasible"):
        project_feasible(np.zeros(6), ConstraintSpec(box_low=0.3))


# -- argmax --------------------------------------------------------------

SEARCH = ActionSearchConfig(restarts=8, steps=400, step_size=0.05, tolerance=1e-10)


def test_argmax_linear_matches_lp():
    rng = np.random.default_rng(0)
    lo, hi = SPEC.lower_bounds(3), SPEC.upper_bounds(3)
    for _ in range(10):
        c = rng.normal(size=4)
        a = argmax_action(linear_q(c), np.zeros(2), SPEC, SEARCH)
        res = linprog(-c, A_eq=np.ones((1, 4)), b_eq=[1.0], bounds=list(zip(lo, hi)))
        assert c @ a == pytest.approx(-res.fun, abs=1e-3)
        assert check_feasible(a, SPEC)


def test_argmax_constant_q_is_feasible():
    a = argmax_action(linear_q(np.zeros(4)), np.zeros(2), SPEC, SEARCH)
    assert check_feasible(a, SPEC) and abs(a.sum() - 1) < 1e-9


def test_argmax_concave_quadratic():
    # Q(a) = -|a - target|^2 built from a one-unit "square" network is awkward; use a
    # softplus-free construction instead: fit a quadratic exactly with a tiny net is
    # unnecessary, so wrap a callable with the QFunction interface.
    target = np.array([0.3, 0.2, 0.35, 0.15])

    class Quadratic:
        state_dim, action_dim, y_std = 1, 4, 1.0

        def _grad_action_z(self, x, a):
            return -np.sum((a - target) ** 2, axis=1), -2 * (a - target)

    a = argmax_action(Quadratic(), np.zeros(1), SPEC, SEARCH)
    np.testing.assert_allclose(a, target, atol=1e-3)


def test_argmax_not_worse_than_uniform_start():
    q = random_net((16,), seed=5, state_dim=2, action_dim=4)
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 2))
    a = argmax_action(q, x, SPEC, ActionSearchConfig(restarts=3, steps=30))
    start = project_feasible(np.full(4, 0.25), SPEC)
    assert np.all(q.predict(x, a) >= q.predict(x, np.tile(start, (40, 1))) - 1e-12)
    for row in a:
        assert check_feasible(row, SPEC)


def test_argmax_batch_independent_and_deterministic():
    q = random_net((8,), seed=6, state_dim=2, action_dim=4)
    rng = np.random.default_rng(2)
    x = rng.normal(size=(10, 2))
    search = ActionSearchConfig(restarts=4, steps=40, seed=3)
    batch = argmax_action(q, x, SPEC, search)
    for i in range(10):
        np.testing.assert_array_equal(argmax_action(q, x[i], SPEC, search), batch[i])
    np.testing.assert_array_equal(argmax_action(q, np.vstack([x, x]), SPEC, search), np.vstack([batch, batch]))
