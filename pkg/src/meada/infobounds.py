"""Executable checks of the entropy bounds behind the maximum-entropy regularizer.

Everything here works on finite alphabets with exact plug-in quantities in
nats. The Monte Carlo check of the concentration bound mirrors its proof: the
input marginal is replaced by empirical frequencies, the known channel
``p(y|x)`` is kept, and the entropy of the pushed-forward label marginal is
compared with the true label entropy.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .models import Model, forward, prediction_entropy_rows


@dataclass
class BoundReport:
    name: str
    inputs: dict
    bound: float
    observed: float
    trials: int = 1
    violations: int = 0
    passed: bool = True
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


# JSON schema for serialized reports (validated by the CLI tests).
REPORT_SCHEMA = {
    "type": "object",
    "required": ["name", "inputs", "bound", "observed", "trials", "violations", "passed"],
    "properties": {
        "name": {"type": "string"},
        "inputs": {"type": "object"},
        "bound": {"type": "number"},
        "observed": {"type": "number"},
        "trials": {"type": "integer", "minimum": 1},
        "violations": {"type": "integer", "minimum": 0},
        "passed": {"type": "boolean"},
        "details": {"type": "object"},
    },
}


def entropy(p, axis=-1):
    """Shannon entropy in nats with 0 log 0 = 0."""
    h = prediction_entropy_rows(np.moveaxis(np.asarray(p, dtype=np.float64), axis, -1))
    return float(h) if np.ndim(h) == 0 else h


def _rows(pred_rows) -> np.ndarray:
    rows = np.asarray(pred_rows, dtype=np.float64)
    if rows.ndim == 1:
        rows = rows[None]
    if rows.size == 0 or len(rows) == 0:
        raise ValueError("need at least one prediction row")
    return rows


def entropy_of_mean(pred_rows) -> float:
    """Entropy of the averaged prediction (plug-in estimate of the label entropy)."""
    return entropy(_rows(pred_rows).mean(axis=0))


def mean_prediction_entropy(pred_rows) -> float:
    """Average of the per-row prediction entropies."""
    return float(entropy(_rows(pred_rows)).mean())


# ------------------------------------------------------------ joints

def validate_joint(joint, tol: float = 1e-12) -> np.ndarray:
    p = np.asarray(joint, dtype=np.float64)
    if p.ndim != 2:
        raise ValueError("joint must be a 2-D matrix p[x, y]")
    if (p < 0).any():
        raise ValueError("joint has negative entries")
    if abs(p.sum() - 1.0) > tol:
        raise ValueError(f"joint sums to {p.sum()!r}, expected 1")
    return p


def mutual_information_discrete(joint) -> float:
    """KL(p_xy || p_x p_y) in nats."""
    p = validate_joint(joint)
    px = np.broadcast_to(p.sum(axis=1, keepdims=True), p.shape)
    py = np.broadcast_to(p.sum(axis=0, keepdims=True), p.shape)
    nz = p > 0
    # separate logs: px * py can underflow for subnormal entries
    return float(np.sum(p[nz] * (np.log(p[nz]) - np.log(px[nz]) - np.log(py[nz]))))


def conditional_entropy(joint) -> float:
    """H(Y | X) for a joint p[x, y]."""
    p = validate_joint(joint)
    px = p.sum(axis=1)
    mask = px > 0
    cond = p[mask] / px[mask, None]
    return float(np.sum(px[mask] * entropy(cond)))


def random_joint(n_x: int, n_y: int, rng, concentration: float = 1.0) -> np.ndarray:
    return rng.dirichlet(np.full(n_x * n_y, concentration)).reshape(n_x, n_y)


def deterministic_joint(px, f, n_y: int) -> np.ndarray:
    px = np.asarray(px, dtype=np.float64)
    p = np.zeros((len(px), n_y))
    p[np.arange(len(px)), np.asarray(f)] = px
    return p


# ------------------------------------------------------------ deterministic predictors

def verify_prop1(inputs, model: Model, tol_mi: float = 1e-10, tol_cond: float = 1e-12) -> BoundReport:
    """For a fixed deterministic classifier on distinct inputs, I(X; Yhat) = H(Yhat).

    The joint is uniform over input indices with all mass of each row on the
    argmax prediction, so H(Yhat | X) = 0 exactly.
    """
    x = np.asarray(inputs, dtype=np.float64)
    flat = x.reshape(len(x), -1)
    if len(np.unique(flat, axis=0)) != len(flat):
        raise ValueError("verify_prop1: inputs must be distinct")
    probs = forward(model, x)[2]
    yhat = probs.argmax(axis=1)
    joint = deterministic_joint(np.full(len(x), 1.0 / len(x)), yhat, model.spec.n_classes)
    mi = mutual_information_discrete(joint)
    h_y = entropy(joint.sum(axis=0))
    h_cond = conditional_entropy(joint)
    gap = abs(mi - h_y)
    ok = gap <= tol_mi and h_cond <= tol_cond
    return BoundReport("prop1", {"n_inputs": len(x), "n_classes": model.spec.n_classes},
                       bound=tol_mi, observed=gap, passed=bool(ok), violations=int(not ok),
                       details={"mutual_information": mi, "label_entropy": h_y, "conditional_entropy": h_cond})


# ------------------------------------------------------------ concentration bound

def mcdiarmid_term(card_y: int, n: int, delta: float) -> float:
    """Deviation of the plug-in estimate from its mean, w.p. >= 1 - delta."""
    return card_y * math.log(n) * math.sqrt(math.log(2.0 / delta)) / math.sqrt(2.0 * n)


def paninski_bias(card_y: int, n: int, tight: bool = False) -> float:
    """Bound on |E[H - H_hat]|; ``tight`` gives log(1 + (|Y|-1)/n)."""
    return math.log1p((card_y - 1) / n) if tight else (card_y - 1) / n


def prop3_bound(card_y: int, n: int, delta: float) -> float:
    if card_y < 2:
        raise ValueError("card_y must be >= 2")
    if n < 1:
        raise ValueError("N must be >= 1")
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie in (0, 1)")
    return mcdiarmid_term(card_y, n, delta) + paninski_bias(card_y, n)


def skewed_joint(card_y: int, minority: float = 0.1, copies: int = 2) -> np.ndarray:
    """Deterministic channel over ``copies * card_y`` inputs with label 0 taking ``1 - minority``.

    The skew makes the plug-in estimate vary as much as a binary label can at
    small N, which is where an under-stated bound shows up first.
    """
    py = np.full(card_y, minority / (card_y - 1))
    py[0] = 1.0 - minority
    px = np.repeat(py / copies, copies)
    return deterministic_joint(px, np.repeat(np.arange(card_y), copies), card_y)


def plugin_label_entropy(counts, channel) -> float:
    """H(sum_x p(.|x) p_hat(x)) with p_hat the empirical input frequencies."""
    counts = np.asarray(counts, dtype=np.float64)
    p_hat = counts / counts.sum()
    return entropy(p_hat @ channel)


def verify_prop3_montecarlo(joint, n: int, delta: float, trials: int = 1000, seed: int = 0,
                            bound_fn=prop3_bound) -> BoundReport:
    """Fraction of size-n sample sets whose label-entropy estimate misses by more than the bound."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    p = validate_joint(joint, tol=1e-9)
    px = p.sum(axis=1)
    keep = px > 0
    px, channel = px[keep], p[keep] / px[keep, None]
    card_y = p.shape[1]
    h_true = entropy(px @ channel)
    bound = bound_fn(card_y, n, delta)
    rng = np.random.default_rng(seed)
    # multinomial counts of x are sufficient: H_hat depends on the sample only through p_hat(x)
    counts = rng.multinomial(n, px / px.sum(), size=trials)
    est = entropy((counts / n) @ channel)
    dev = np.abs(h_true - np.atleast_1d(est))
    violations = int(np.sum(dev > bound))
    frac = violations / trials
    return BoundReport("prop3", {"card_y": card_y, "N": n, "delta": delta, "card_x": int(len(px))},
                       bound=bound, observed=float(dev.max()), trials=trials, violations=violations,
                       passed=bool(frac <= delta),
                       details={"violation_fraction": frac, "mean_deviation": float(dev.mean()),
                                "true_entropy": h_true, "mean_bias": float(h_true - np.mean(est))})


# ------------------------------------------------------------ near-deterministic channels

def corollary1_bound(epsilon: float, card_y: int) -> float:
    if epsilon == 0:
        return 0.0
    return -epsilon * math.log(epsilon / card_y ** 3)


def perturb_deterministic(joint_det, epsilon: float, rng) -> np.ndarray:
    """Random joint with the same x-marginal and l1 distance <= epsilon.

    Mass is moved only within rows, away from each row's deterministic label,
    so the x-marginal is unchanged. Moving mass m costs 2m in l1.
    """
    p = np.asarray(joint_det, dtype=np.float64)
    px = p.sum(axis=1)
    labels = p.argmax(axis=1)
    n_x, n_y = p.shape
    # stay near the admissible edge, where the bound is tightest
    budget = epsilon / 2 * rng.uniform(0.5, 1.0)
    share = rng.dirichlet(np.ones(n_x))
    moved = np.minimum(budget * share, px)
    out = p.copy()
    for i in range(n_x):
        if moved[i] <= 0:
            continue
        others = [j for j in range(n_y) if j != labels[i]]
        w = rng.dirichlet(np.ones(len(others)))
        out[i, labels[i]] -= moved[i]
        out[i, others] += moved[i] * w
    return np.clip(out, 0.0, None)


def is_deterministic(joint) -> bool:
    p = np.asarray(joint)
    return bool(np.all((p > 0).sum(axis=1) <= 1))


def corollary1_check(joint_det, epsilon: float, seed: int = 0, n_perturb: int = 100,
                     perturbations=None) -> BoundReport:
    """Exact H(Y|X) of admissible perturbations against the near-determinism bound."""
    p = validate_joint(joint_det)
    if not is_deterministic(p):
        raise ValueError("corollary1_check: joint is not a deterministic function of x")
    if not 0.0 <= epsilon <= 0.5:
        raise ValueError("epsilon must lie in [0, 1/2]")
    card_y = p.shape[1]
    bound = corollary1_bound(epsilon, card_y)
    rng = np.random.default_rng(seed)
    if perturbations is None:
        perturbations = [perturb_deterministic(p, epsilon, rng) for _ in range(n_perturb)]
    worst, violations, l1_max = 0.0, 0, 0.0
    for q in perturbations:
        l1 = float(np.abs(q - p).sum())
        if l1 > epsilon + 1e-12 or not np.allclose(q.sum(axis=1), p.sum(axis=1), atol=1e-12):
            raise ValueError("perturbation is not admissible")
        h = conditional_entropy(q / q.sum())
        worst = max(worst, h)
        l1_max = max(l1_max, l1)
        violations += int(h > bound)
    return BoundReport("corollary1", {"epsilon": epsilon, "card_y": card_y, "card_x": p.shape[0]},
                       bound=bound, observed=worst, trials=len(perturbations), violations=violations,
                       passed=violations == 0, details={"max_l1": l1_max})
