"""Scalar objectives: cross-entropy, prediction entropy, latent transport cost,
the weight-decay training loss, the entropy-regularized ascent objective and
the Bayes-by-backprop free energy.

All logarithms are natural, so every entropy is in nats.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .models import (BayesianModel, Model, ModelSpec, draw_noise, forward, forward_graph,
                     prediction_entropy_rows, sample_parameters, sample_seed)

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = math.log(PROB_FLOOR)
INF_COST = math.inf


@dataclass(frozen=True)
class ObjectiveConfig:
    beta: float = 10.0
    gamma: float = 1.0
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.beta < 0 or self.gamma < 0 or self.weight_decay < 0:
            raise ValueError("beta, gamma and weight_decay must be >= 0")


# ------------------------------------------------------------ array helpers

def cross_entropy(probs, label: int, stats: dict | None = None) -> float:
    """-log p[label]; probabilities below 1e-12 are clamped and counted in ``stats``."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < p.shape[-1]:
        raise IndexError(f"label {label} out of range for {p.shape[-1]} classes")
    py = p[label]
    if py < PROB_FLOOR:
        py = PROB_FLOOR
        if stats is not None:
            stats["ce_clamped"] = stats.get("ce_clamped", 0) + 1
    return float(-math.log(py))


def prediction_entropy(probs):
    """Shannon entropy of a probability row (0 log 0 = 0); vectorized over leading axes."""
    h = prediction_entropy_rows(probs)
    return float(h) if np.ndim(h) == 0 else h


def transport_cost(z0, y0: int, z, y: int) -> float:
    """Squared latent distance, or infinity when the labels differ."""
    z0 = np.asarray(z0, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    if z0.shape != z.shape:
        raise ad.ShapeError("transport_cost", z0.shape, z.shape)
    if y0 != y:
        return INF_COST
    return float(np.sum((z0 - z) ** 2))


def l2_norm_sq(params: dict[str, np.ndarray]) -> float:
    return float(sum(np.sum(v * v) for v in params.values()))


def ib_loss(model: Model, x, y, cfg) -> float:
    """Mean cross-entropy plus weight_decay times the squared parameter norm."""
    _, _, probs = forward(model, x)
    y = np.atleast_1d(np.asarray(y))
    ce = np.mean([cross_entropy(p, int(t)) for p, t in zip(probs, y)])
    return float(ce + cfg.weight_decay * l2_norm_sq(model.params))


def adversarial_objective(model: Model, x, x_anchor, y, cfg):
    """CE + beta * entropy - gamma * latent transport cost to the anchor.

    A single input gives a float; a batch gives one value per row.
    """
    single = np.shape(x) == model.spec.input_shape
    x = np.asarray(x, dtype=np.float64).reshape((-1,) + model.spec.input_shape)
    xa = np.asarray(x_anchor, dtype=np.float64).reshape((-1,) + model.spec.input_shape)
    y = np.atleast_1d(np.asarray(y))
    z, _, probs = forward(model, x)
    z0, _, _ = forward(model, xa)
    h = prediction_entropy_rows(probs)
    vals = np.array([cross_entropy(p, int(t)) + cfg.beta * hi - cfg.gamma * transport_cost(a, int(t), b, int(t))
                     for p, t, hi, a, b in zip(probs, y, h, z0, z)])
    return float(vals[0]) if single else vals


# --------------------------------------------------------------- graph forms

def _onehot(y, k: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= k):
        raise IndexError(f"labels out of range for {k} classes")
    out = np.zeros((len(y), k))
    out[np.arange(len(y)), y] = 1.0
    return out


def _ce_rows(log_probs: ad.Node, onehot: np.ndarray) -> ad.Node:
    return -ad.sum(log_probs * onehot, axis=1)


def _entropy_rows(log_probs: ad.Node) -> ad.Node:
    return -ad.sum(ad.exp(log_probs) * log_probs, axis=1)


def ib_loss_graph(spec: ModelSpec, params: dict[str, ad.Node], x, y, weight_decay: float):
    """Training loss node plus diagnostics (mean CE, mean entropy, clamp count)."""
    _, _, lp = forward_graph(spec, params, ad.constant(x))
    oh = _onehot(y, spec.n_classes)
    ce_rows = _ce_rows(lp, oh)
    loss = ad.mean(ce_rows)
    if weight_decay:
        penalty = None
        for p in params.values():
            s = ad.sum(ad.square(p))
            penalty = s if penalty is None else penalty + s
        loss = loss + weight_decay * penalty
    lpv = lp.value
    info = {
        "ce": float(ce_rows.value.mean()),
        "entropy_mean": float(prediction_entropy_rows(np.exp(lpv)).mean()),
        "ce_clamped": int(np.sum((lpv * oh).sum(axis=1) < LOG_PROB_FLOOR)),
    }
    return loss, info


def adversarial_graph(spec: ModelSpec, params: dict[str, ad.Node], x: ad.Node, z_anchor: np.ndarray,
                      y, beta: float, gamma: float, entropy_params: list | None = None):
    """Sum over rows of CE + beta*h - gamma*||z - z_anchor||^2.

    ``entropy_params`` (a list of parameter dicts) replaces h by its mean over
    those parameter draws; CE and latent use ``params``. Returns the total node
    and the per-row (objective, entropy) arrays.
    """
    z, _, lp = forward_graph(spec, params, x)
    oh = _onehot(y, spec.n_classes)
    ce = _ce_rows(lp, oh)
    if entropy_params is None:
        h = _entropy_rows(lp)
    else:
        h = None
        for pj in entropy_params:
            _, _, lpj = forward_graph(spec, pj, x)
            hj = _entropy_rows(lpj)
            h = hj if h is None else h + hj
        h = h * (1.0 / len(entropy_params))
    cost = ad.sum(ad.square(z - ad.constant(z_anchor)), axis=1)
    rows = ce + beta * h - gamma * cost
    return ad.sum(rows), rows.value, h.value


def adversarial_value_and_grad(model: Model, x: np.ndarray, z_anchor: np.ndarray, y, cfg,
                               entropy_models: list[Model] | None = None):
    """Per-row objective values, gradient with respect to x, per-row entropy."""
    xn = ad.leaf(x)
    ent = None if entropy_models is None else [m.param_nodes() for m in entropy_models]
    total, rows, h = adversarial_graph(model.spec, model.param_nodes(), xn, z_anchor, y,
                                       cfg.beta, cfg.gamma, ent)
    ad.backward(total)
    return rows, xn.grad, h


# ------------------------------------------------------------------- Bayesian

_HALF_LOG_2PI = 0.5 * math.log(2 * math.pi)


def _log_normal0(theta: ad.Node, log_sigma: float) -> ad.Node:
    return -_HALF_LOG_2PI - log_sigma - ad.square(theta) * (0.5 * math.exp(-2 * log_sigma))


def log_prior_graph(theta: ad.Node, pi: float, log_s1: float, log_s2: float) -> ad.Node:
    """Elementwise log of pi*N(0, s1^2) + (1-pi)*N(0, s2^2), summed.

    Written relative to the wider component so the inner exponent is bounded
    above by log(s_wide / s_narrow).
    """
    if log_s1 >= log_s2:
        w_wide, ls_wide, w_nar, ls_nar = pi, log_s1, 1 - pi, log_s2
    else:
        w_wide, ls_wide, w_nar, ls_nar = 1 - pi, log_s2, pi, log_s1
    base = _log_normal0(theta, ls_wide)
    diff = _log_normal0(theta, ls_nar) - base
    if w_nar == 0:
        return ad.sum(base) + theta.value.size * math.log(w_wide)
    mix = ad.log(1.0 + (w_nar / w_wide) * ad.exp(diff))
    return ad.sum(base + mix) + theta.value.size * math.log(w_wide)


def log_prior(theta: np.ndarray, pi=0.25, log_s1=0.0, log_s2=-6.0) -> float:
    return float(log_prior_graph(ad.constant(theta), pi, log_s1, log_s2).value)


def bnn_free_energy_graph(bnn: BayesianModel, x, y, T: int, seed, kl_weight: float = 1.0):
    """Monte Carlo free energy (mean over T draws) as a graph over mu/rho leaves.

    Returns (node, mu_leaves, rho_leaves, info) where info holds the per-draw
    values and the mean negative log-likelihood.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    mu = {k: ad.leaf(v) for k, v in bnn.mu.items()}
    rho = {k: ad.leaf(v) for k, v in bnn.rho.items()}
    oh = _onehot(np.atleast_1d(y), bnn.spec.n_classes)
    xc = ad.constant(x)
    total, per_draw, nlls = None, [], []
    for j in range(T):
        eps = draw_noise(bnn, sample_seed(seed, j))
        theta, log_q, log_p = {}, None, None
        for k in bnn.mu:
            sigma = ad.softplus(rho[k])
            theta[k] = mu[k] + sigma * eps[k]
            lq = ad.sum(-ad.log(sigma)) - (_HALF_LOG_2PI * eps[k].size + 0.5 * float(np.sum(eps[k] ** 2)))
            lp = log_prior_graph(theta[k], bnn.prior_pi, bnn.prior_log_sigma1, bnn.prior_log_sigma2)
            log_q = lq if log_q is None else log_q + lq
            log_p = lp if log_p is None else log_p + lp
        _, _, lprob = forward_graph(bnn.spec, theta, xc)
        nll = ad.sum(_ce_rows(lprob, oh))
        fe = kl_weight * (log_q - log_p) + nll
        per_draw.append(float(fe.value))
        nlls.append(float(nll.value))
        total = fe if total is None else total + fe
    total = total * (1.0 / T)
    return total, mu, rho, {"per_draw": np.array(per_draw), "nll": float(np.mean(nlls))}


def bnn_free_energy(bnn: BayesianModel, x, y, T: int = 1, seed=0, kl_weight: float = 1.0) -> float:
    return float(bnn_free_energy_graph(bnn, x, y, T, seed, kl_weight)[0].value)


def bnn_entropy_models(bnn: BayesianModel, T: int, seed) -> list[Model]:
    return [sample_parameters(bnn, sample_seed(seed, j)) for j in range(T)]


def bnn_adversarial_objective(bnn: BayesianModel, x, x_anchor, y, cfg, T: int = 1, seed=0):
    """Ascent objective with the entropy averaged over T posterior draws.

    Cross-entropy and the latent embedding for the transport cost are taken at
    the posterior mean.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    spec = bnn.spec
    single = np.shape(x) == spec.input_shape
    x = np.asarray(x, dtype=np.float64).reshape((-1,) + spec.input_shape)
    xa = np.asarray(x_anchor, dtype=np.float64).reshape((-1,) + spec.input_shape)
    mean_model = bnn.mean_model()
    z0 = forward(mean_model, xa)[0]
    ents = bnn_entropy_models(bnn, T, seed)
    rows, _, _ = adversarial_value_and_grad(mean_model, x, z0, np.atleast_1d(y), cfg, ents)
    return float(rows[0]) if single else rows
