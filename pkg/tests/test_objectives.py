import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from helpers import grid_argmax, logistic_toy, tiny_mlp

from meada import autodiff as ad
from meada import gradcheck as gc
from meada.models import BayesianModel, Model, ModelSpec, forward, prediction_entropy_rows, sample_parameters
from meada.objectives import (ObjectiveConfig, adversarial_objective, bnn_adversarial_objective, bnn_free_energy,
                              bnn_free_energy_graph, cross_entropy, ib_loss, ib_loss_graph, log_prior,
                              prediction_entropy, transport_cost)
from meada.trainer import AdvConfig, maximize_batch


def simplex(seed, k):
    return np.random.default_rng(seed).dirichlet(np.ones(k))


# ---------------------------------------------------------------- cross entropy

def test_ce_uniform_ten_classes():
    assert cross_entropy(np.full(10, 0.1), 7) == pytest.approx(2.302585, abs=1e-6)


def test_ce_one_hot_is_zero():
    assert cross_entropy(np.eye(4)[2], 2) == 0.0


def test_ce_direct_arithmetic():
    # second class (0-based index 1)
    assert cross_entropy(np.array([0.7, 0.3]), 1) == pytest.approx(1.203973, abs=1e-6)


def test_ce_clamps_zero_probability_and_counts():
    stats = {}
    v = cross_entropy(np.array([1.0, 0.0]), 1, stats)
    assert v == pytest.approx(-math.log(1e-12))
    assert stats["ce_clamped"] == 1


def test_ce_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(np.array([0.5, 0.5]), 2)


@given(st.integers(0, 10**6), st.integers(2, 12))
def test_ce_nonnegative_and_zero_only_on_one_hot(seed, k):
    p = simplex(seed, k)
    y = seed % k
    assert cross_entropy(p, y) >= 0
    assert cross_entropy(np.eye(k)[y], y) == 0


# ---------------------------------------------------------------- entropy

@pytest.mark.parametrize("p, h", [(np.full(10, 0.1), 2.302585), (np.eye(3)[0], 0.0), ([0.5, 0.5], 0.693147)])
def test_entropy_examples(p, h):
    assert prediction_entropy(np.asarray(p)) == pytest.approx(h, abs=1e-6)


def test_entropy_range_on_random_simplex_points():
    rng = np.random.default_rng(0)
    for k in (2, 5, 10):
        p = rng.dirichlet(np.ones(k), size=10_000)
        h = prediction_entropy(p)
        assert np.all(h >= 0) and np.all(h <= math.log(k) + 1e-12)
        assert np.all(h < math.log(k) - 1e-9)  # random points are never exactly uniform
    assert prediction_entropy(np.full(7, 1 / 7)) == pytest.approx(math.log(7), abs=1e-14)


# ---------------------------------------------------------------- transport

def test_transport_examples():
    assert transport_cost([1.0, 2.0], 3, [1.0, 2.0], 3) == 0.0
    assert transport_cost([0.0, 0.0], 1, [1.0, 2.0], 1) == 5.0
    assert transport_cost([0.0, 0.0], 1, [0.0, 0.0], 2) == math.inf


def test_transport_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        transport_cost([0.0, 0.0], 0, [0.0, 0.0, 0.0], 0)


@given(st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3), st.lists(st.floats(-1e3, 1e3), min_size=3, max_size=3))
def test_transport_symmetric_nonnegative(a, b):
    assert transport_cost(a, 0, b, 0) == transport_cost(b, 0, a, 0) >= 0


# ---------------------------------------------------------------- IB loss

def test_ib_loss_without_decay_is_mean_ce(rng):
    model = tiny_mlp()
    x, y = rng.normal(size=(5, 4)), rng.integers(3, size=5)
    p = forward(model, x)[2]
    expect = np.mean([cross_entropy(pi, yi) for pi, yi in zip(p, y)])
    assert ib_loss(model, x, y, ObjectiveConfig(weight_decay=0.0)) == expect


def test_ib_loss_zero_params_has_no_penalty(rng):
    model = tiny_mlp()
    model = Model(model.spec, {k: np.zeros_like(v) for k, v in model.params.items()})
    assert ib_loss(model, rng.normal(size=(2, 4)), [0, 1], ObjectiveConfig(weight_decay=1.0)) == pytest.approx(math.log(3))


def test_ib_loss_two_sample_batch_is_average(rng):
    model, cfg = tiny_mlp(), ObjectiveConfig(weight_decay=0.3)
    x, y = rng.normal(size=(2, 4)), np.array([0, 2])
    both = ib_loss(model, x, y, cfg)
    parts = [ib_loss(model, x[i:i + 1], y[i:i + 1], cfg) for i in range(2)]
    assert both == pytest.approx(np.mean(parts), abs=1e-14)


def test_ib_loss_graph_matches_array_form(rng):
    model, cfg = tiny_mlp(seed=3), ObjectiveConfig(weight_decay=0.01)
    x, y = rng.normal(size=(6, 4)), rng.integers(3, size=6)
    node, info = ib_loss_graph(model.spec, model.param_nodes(), x, y, cfg.weight_decay)
    assert float(node.value) == pytest.approx(ib_loss(model, x, y, cfg), abs=1e-12)


# ---------------------------------------------------------------- adversarial objective

def test_objective_at_anchor_is_ce_plus_entropy(rng):
    model, cfg = tiny_mlp(), ObjectiveConfig(beta=2.5, gamma=4.0)
    x = rng.normal(size=4)
    p = forward(model, x)[2][0]
    assert adversarial_objective(model, x, x, 1, cfg) == pytest.approx(cross_entropy(p, 1) + 2.5 * prediction_entropy(p))


def test_objective_without_entropy_or_cost_is_ce(rng):
    model, cfg = tiny_mlp(), ObjectiveConfig(beta=0.0, gamma=0.0)
    x, xa = rng.normal(size=4), rng.normal(size=4)
    assert adversarial_objective(model, x, xa, 2, cfg) == cross_entropy(forward(model, x)[2][0], 2)


def test_objective_batch_matches_rows(rng):
    model, cfg = tiny_mlp(), ObjectiveConfig()
    x, xa, y = rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), np.array([0, 1, 2])
    rows = adversarial_objective(model, x, xa, y, cfg)
    for i in range(3):
        assert rows[i] == pytest.approx(adversarial_objective(model, x[i], xa[i], y[i], cfg), abs=1e-14)


@pytest.mark.parametrize("case", sorted(gc.OBJECTIVE_CASES))
def test_objective_gradient_matches_finite_differences(case):
    assert gc.run_case(case, gc.OBJECTIVE_CASES[case], 10, seed=3)["max_rel_err"] < 1e-4


def test_grid_oracle_matches_ascent_on_logistic_toy():
    model, cfg = logistic_toy(), AdvConfig(beta=1.0, gamma=2.0, T_max=3000, eta=1e-3, ascent_reduction="sum")
    obj = ObjectiveConfig(beta=cfg.beta, gamma=cfg.gamma)
    x0 = 0.4
    xg, vg, cell = grid_argmax(model, x0, 1, obj)
    x_adv, info = maximize_batch(model, np.array([[x0]]), [1], cfg)
    assert abs(x_adv[0, 0] - xg) <= cell
    assert info["objective"][0] >= vg - 1e-6


def test_entropy_free_zero_gamma_ascent_is_ce_ascent(rng):
    model = tiny_mlp()
    cfg = AdvConfig(beta=0.0, gamma=0.0, T_max=5, eta=0.1, ascent_reduction="sum")
    x0, y = rng.normal(size=(3, 4)), np.array([0, 1, 2])
    _, info = maximize_batch(model, x0, y, cfg, track=True)
    # replay: plain CE gradient ascent with the graph primitives
    x = x0.copy()
    oh = np.eye(3)[y]
    for t in range(5):
        xn = ad.leaf(x)
        from meada.models import forward_graph
        lp = forward_graph(model.spec, model.param_nodes(), xn)[2]
        ce = -ad.sum(lp * oh, axis=1)
        np.testing.assert_allclose(info["history"][t], ce.value, atol=1e-12)
        ad.backward(ad.sum(ce))
        x = x + 0.1 * xn.grad


# ---------------------------------------------------------------- BNN objectives

TOY2 = ModelSpec(arch="mlp", input_shape=(3,), n_classes=10, hidden=(4,))


def test_uniform_likelihood_contributes_n_ln_k():
    params = {k: np.zeros(s) for k, s in TOY2.param_shapes().items()}
    # sigma ~ 2e-22: draws are zero to working precision, log q stays finite
    bnn = BayesianModel(TOY2, params, {k: np.full_like(v, -50.0) for k, v in params.items()})
    x, y = np.ones((7, 3)), np.arange(7) % 10
    _, _, _, info = bnn_free_energy_graph(bnn, x, y, T=2, seed=0)
    assert info["nll"] == pytest.approx(7 * math.log(10), abs=1e-12)


def test_free_energy_T_doubling_agrees_within_monte_carlo_noise():
    spec = ModelSpec(arch="mlp", input_shape=(3,), n_classes=3, hidden=(4,))
    bnn = BayesianModel.create(spec, seed=1, rho_init=-3.0)
    rng = np.random.default_rng(2)
    x, y = rng.normal(size=(8, 3)), rng.integers(3, size=8)
    a = np.array([bnn_free_energy(bnn, x, y, T=4, seed=2 * r) for r in range(50)])
    b = np.array([bnn_free_energy(bnn, x, y, T=8, seed=2 * r + 1) for r in range(50)])
    se = math.sqrt(a.var(ddof=1) / 50 + b.var(ddof=1) / 50)
    assert abs(a.mean() - b.mean()) <= 3 * se


def test_free_energy_mu_gradient_with_common_random_numbers():
    spec = ModelSpec(arch="mlp", input_shape=(2,), n_classes=2, hidden=(3,))
    bnn = BayesianModel.create(spec, seed=0, rho_init=-2.0)
    x, y = np.array([[0.3, -1.0], [1.2, 0.4]]), np.array([0, 1])
    names = list(bnn.mu)

    def fn(*mus):
        return _free_energy_with_mu(bnn, dict(zip(names, mus)), x, y)

    err = gc.check(fn, [bnn.mu[k] for k in names])
    assert err < 1e-4


def _free_energy_with_mu(bnn, mu_nodes, x, y):
    """Same construction as bnn_free_energy_graph but with caller-provided mu nodes."""
    from meada.models import draw_noise, forward_graph, sample_seed
    from meada.objectives import _HALF_LOG_2PI, _ce_rows, _onehot, log_prior_graph
    values = {k: n.value for k, n in mu_nodes.items()}
    b = BayesianModel(bnn.spec, values, bnn.rho)
    eps = draw_noise(b, sample_seed(5, 0))
    theta, lq, lp = {}, 0.0, 0.0
    for k in values:
        sigma = ad.softplus(ad.constant(bnn.rho[k]))
        theta[k] = mu_nodes[k] + sigma * eps[k]
        lq = lq + (ad.sum(-ad.log(sigma)) - (_HALF_LOG_2PI * eps[k].size + 0.5 * float(np.sum(eps[k] ** 2))))
        lp = lp + log_prior_graph(theta[k], 0.25, 0.0, -6.0)
    nll = ad.sum(_ce_rows(forward_graph(b.spec, theta, ad.constant(x))[2], _onehot(y, 2)))
    ref = bnn_free_energy(b, x, y, T=1, seed=5)
    node = (lq - lp) + nll
    assert float(node.value) == pytest.approx(ref, abs=1e-9)
    return node


def test_log_prior_is_scale_mixture():
    theta = np.array([0.0, 0.01, 0.5, 3.0])
    s1, s2 = 1.0, math.exp(-6)

    def npdf(t, s):
        return np.exp(-t * t / (2 * s * s)) / (s * math.sqrt(2 * math.pi))

    expect = np.sum(np.log(0.25 * npdf(theta, s1) + 0.75 * npdf(theta, s2)))
    assert log_prior(theta) == pytest.approx(expect, rel=1e-12)


def test_log_prior_finite_far_in_the_tails():
    assert np.isfinite(log_prior(np.array([50.0, -80.0])))


def test_bnn_zero_sigma_objective_equals_deterministic(rng):
    model = tiny_mlp(seed=4)
    bnn = BayesianModel.from_model(model)
    cfg = ObjectiveConfig(beta=3.0, gamma=0.5)
    x, xa, y = rng.normal(size=(4, 4)), rng.normal(size=(4, 4)), np.array([0, 1, 2, 0])
    det = adversarial_objective(model, x, xa, y, cfg)
    assert np.max(np.abs(bnn_adversarial_objective(bnn, x, xa, y, cfg, T=3) - det)) < 1e-10


def test_bnn_objective_T1_uses_one_draw_for_entropy(rng):
    bnn = BayesianModel.create(tiny_mlp().spec, seed=2, rho_init=-1.5)
    cfg = ObjectiveConfig(beta=3.0, gamma=0.5)
    x, xa = rng.normal(size=4), rng.normal(size=4)
    from meada.models import sample_seed
    theta1 = sample_parameters(bnn, sample_seed(9, 0))
    mean = bnn.mean_model()
    p_mu = forward(mean, x)[2][0]
    h1 = prediction_entropy_rows(forward(theta1, x)[2])[0]
    c = transport_cost(forward(mean, xa)[0][0], 1, forward(mean, x)[0][0], 1)
    expect = cross_entropy(p_mu, 1) + 3.0 * h1 - 0.5 * c
    assert bnn_adversarial_objective(bnn, x, xa, 1, cfg, T=1, seed=9) == pytest.approx(expect, abs=1e-12)


def test_bnn_grid_oracle_matches_ascent():
    spec = logistic_toy().spec
    base = logistic_toy()
    rho = {k: np.full_like(v, -2.0) for k, v in base.params.items()}
    bnn = BayesianModel(spec, base.params, rho)
    cfg = AdvConfig(beta=1.0, gamma=2.0, T_max=3000, eta=1e-3, ascent_reduction="sum")
    obj = ObjectiveConfig(beta=1.0, gamma=2.0)
    x0, T, seed = 0.4, 8, 3
    grid = np.linspace(x0 - 3, x0 + 3, 1001)
    vals = bnn_adversarial_objective(bnn, grid[:, None], np.full((1001, 1), x0), np.ones(1001, int), obj, T, seed)
    from meada.objectives import bnn_entropy_models
    x_adv, _ = maximize_batch(bnn.mean_model(), np.array([[x0]]), [1], cfg, bnn_entropy_models(bnn, T, seed))
    assert abs(x_adv[0, 0] - grid[np.argmax(vals)]) <= grid[1] - grid[0]


def test_objective_config_rejects_negative():
    with pytest.raises(ValueError):
        ObjectiveConfig(gamma=-1.0)
