"""Finite-difference checks for every primitive and for the ascent objective.

Each case draws a random instance, scalarizes the primitive's output with a
fixed random weighting, and compares the reverse-mode gradient of every input
with central differences (step 1e-5, float64). The error of one instance is
``max|g - g_fd| / max(max|g|, max|g_fd|, 1e-8)``.
"""
from __future__ import annotations

import time

import numpy as np

from . import autodiff as ad
from .models import Model, ModelSpec, forward_graph
from .objectives import ObjectiveConfig, adversarial_graph

STEP = 1e-5


def central_difference(f, arrays: list[np.ndarray], h: float = STEP, coords=None) -> list[np.ndarray]:
    """Central differences of scalar ``f``; ``coords[i]`` restricts input i to those flat indices."""
    out = []
    for i, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gflat = g.reshape(-1)
        for j in (range(flat.size) if coords is None else coords[i]):
            old = flat[j]
            flat[j] = old + h
            fp = f(arrays)
            flat[j] = old - h
            fm = f(arrays)
            flat[j] = old
            gflat[j] = (fp - fm) / (2 * h)
        out.append(g)
    return out


def relative_error(analytic: list[np.ndarray], numeric: list[np.ndarray]) -> float:
    diff = max((np.max(np.abs(a - n)) if a.size else 0.0) for a, n in zip(analytic, numeric))
    scale = max(max((np.max(np.abs(a)) if a.size else 0.0) for a in analytic),
                max((np.max(np.abs(n)) if n.size else 0.0) for n in numeric), 1e-8)
    return float(diff / scale)


def check(fn, arrays: list[np.ndarray], h: float = STEP, max_coords: int | None = None,
          rng: np.random.Generator | None = None) -> float:
    """Relative error between backward() and central differences for a scalar ``fn``.

    With ``max_coords``, inputs larger than that are checked on a random subset of coordinates.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    _, analytic = ad.grad(fn, *arrays)

    def f(arrs):
        return float(fn(*[ad.constant(a) for a in arrs]).value)

    coords = None
    if max_coords is not None:
        rng = rng or np.random.default_rng(0)
        coords = [np.arange(a.size) if a.size <= max_coords else rng.choice(a.size, max_coords, replace=False)
                  for a in arrays]
    numeric = central_difference(f, arrays, h, coords)
    if coords is not None:
        analytic = [g.reshape(-1)[c] for g, c in zip(analytic, coords)]
        numeric = [g.reshape(-1)[c] for g, c in zip(numeric, coords)]
    return relative_error(analytic, numeric)


def _away_from_zero(rng, shape, lo=0.05):
    v = rng.uniform(lo, 1.0, shape)
    return v * rng.choice([-1.0, 1.0], shape)


def _scalarize(rng, out_shape):
    w = rng.normal(size=out_shape)
    return lambda node: ad.sum(node * w) if node.value.ndim else node * float(w)


def _dims(rng, k, lo=1, hi=4):
    return tuple(int(d) for d in rng.integers(lo, hi + 1, size=k))


# Each case: rng -> (fn over nodes returning a scalar node, list of input arrays)
def _case_add(rng):
    kind = rng.integers(3)
    a = rng.normal(size=_dims(rng, 2))
    b = {0: rng.normal(size=a.shape), 1: rng.normal(size=a.shape[-1:]), 2: rng.normal(size=())}[kind]
    s = _scalarize(rng, a.shape)
    return (lambda x, y: s(ad.add(x, y))), [a, b]


def _case_sub(rng):
    a = rng.normal(size=_dims(rng, 2))
    b = rng.normal(size=a.shape[-1:]) if rng.integers(2) else rng.normal(size=a.shape)
    s = _scalarize(rng, a.shape)
    return (lambda x, y: s(ad.sub(x, y))), [a, b]


def _case_neg(rng):
    a = rng.normal(size=_dims(rng, 2))
    s = _scalarize(rng, a.shape)
    return (lambda x: s(ad.neg(x))), [a]


def _case_mul(rng):
    a = rng.normal(size=_dims(rng, 2))
    b = rng.normal(size=a.shape) if rng.integers(2) else rng.normal(size=())
    s = _scalarize(rng, a.shape)
    return (lambda x, y: s(ad.mul(x, y))), [a, b]


def _case_matmul(rng):
    n, k, m = _dims(rng, 3, 1, 5)
    a, b = rng.normal(size=(n, k)), rng.normal(size=(k, m))
    s = _scalarize(rng, (n, m))
    return (lambda x, y: s(ad.matmul(x, y))), [a, b]


def _case_transpose(rng):
    a = rng.normal(size=_dims(rng, 2))
    s = _scalarize(rng, a.shape[::-1])
    return (lambda x: s(ad.transpose(x))), [a]


def _case_conv2d(rng):
    k = int(rng.integers(1, 4))
    n, c, f = _dims(rng, 3, 1, 3)
    h, w = _dims(rng, 2, k, k + 3)
    padding = "same" if rng.integers(2) else "valid"
    x, wt = rng.normal(size=(n, h, w, c)), rng.normal(size=(k, k, c, f))
    out_shape = ad.conv2d(ad.constant(x), ad.constant(wt), padding).shape
    s = _scalarize(rng, out_shape)
    return (lambda a, b: s(ad.conv2d(a, b, padding))), [x, wt]


def _case_maxpool(rng):
    n, c = _dims(rng, 2, 1, 3)
    h, w = _dims(rng, 2, 2, 6)
    # distinct values spaced well beyond the FD step so no window has a near tie
    x = rng.permutation(n * h * w * c).reshape(n, h, w, c) * 0.01 + rng.uniform(0, 1e-3)
    s = _scalarize(rng, ad.maxpool2x2(ad.constant(x)).shape)
    return (lambda a: s(ad.maxpool2x2(a))), [x]


def _unary(op, sampler):
    def case(rng):
        a = sampler(rng, _dims(rng, 2))
        s = _scalarize(rng, a.shape)
        return (lambda x: s(op(x))), [a]
    return case


def _case_sum(rng):
    a = rng.normal(size=_dims(rng, 3))
    axis = [None, 0, 1, 2][rng.integers(4)]
    s = _scalarize(rng, a.sum(axis=axis).shape)
    return (lambda x: s(ad.sum(x, axis=axis))), [a]


def _case_mean(rng):
    a = rng.normal(size=_dims(rng, 3))
    axis = [None, 0, 1, 2][rng.integers(4)]
    s = _scalarize(rng, a.mean(axis=axis).shape)
    return (lambda x: s(ad.mean(x, axis=axis))), [a]


def _case_concat(rng):
    axis = int(rng.integers(2))
    base = _dims(rng, 2)
    parts = []
    for _ in range(int(rng.integers(2, 4))):
        shape = list(base)
        shape[axis] = int(rng.integers(1, 4))
        parts.append(rng.normal(size=shape))
    s = _scalarize(rng, np.concatenate(parts, axis=axis).shape)
    return (lambda *xs: s(ad.concat(xs, axis=axis))), parts


def _case_reshape(rng):
    a = rng.normal(size=_dims(rng, 2))
    s = _scalarize(rng, (a.size,))
    return (lambda x: s(ad.reshape(x, (-1,)))), [a]


def _case_log_softmax(rng):
    a = rng.normal(size=_dims(rng, 2, 1, 6)) * 2
    s = _scalarize(rng, a.shape)
    return (lambda x: s(ad.log_softmax(x))), [a]


def _case_softmax(rng):
    a = rng.normal(size=_dims(rng, 2, 1, 6)) * 2
    s = _scalarize(rng, a.shape)
    return (lambda x: s(ad.softmax(x))), [a]


PRIMITIVE_CASES = {
    "add": _case_add,
    "sub": _case_sub,
    "neg": _case_neg,
    "mul": _case_mul,
    "matmul": _case_matmul,
    "transpose": _case_transpose,
    "conv2d": _case_conv2d,
    "maxpool2x2": _case_maxpool,
    "relu": _unary(lambda x: ad.relu(x), _away_from_zero),
    "log": _unary(lambda x: ad.log(x), lambda r, s: r.uniform(0.5, 2.0, s)),
    "exp": _unary(lambda x: ad.exp(x), lambda r, s: r.uniform(-1.0, 1.0, s)),
    "softplus": _unary(lambda x: ad.softplus(x), lambda r, s: r.normal(size=s) * 3),
    "square": _unary(lambda x: ad.square(x), lambda r, s: r.normal(size=s)),
    "sum": _case_sum,
    "mean": _case_mean,
    "concat": _case_concat,
    "reshape": _case_reshape,
    "log_softmax": _case_log_softmax,
    "softmax": _case_softmax,
}


def _objective_case(spec: ModelSpec, batch: int):
    def case(rng):
        model = Model.create(spec, seed=int(rng.integers(2**31)))
        x0 = rng.uniform(0, 1, (batch,) + spec.input_shape)
        x = x0 + rng.normal(scale=0.1, size=x0.shape)
        y = rng.integers(spec.n_classes, size=batch)
        cfg = ObjectiveConfig(beta=float(rng.uniform(0, 10)), gamma=float(rng.uniform(0, 2)))
        pn = model.param_nodes()
        z0 = forward_graph(spec, pn, ad.constant(x0))[0].value

        def fn(xn):
            return adversarial_graph(spec, pn, xn, z0, y, cfg.beta, cfg.gamma)[0]

        return fn, [x]
    return case


# inputs above this size are checked on a random coordinate subset
OBJECTIVE_MAX_COORDS = 48

OBJECTIVE_CASES = {
    "objective/mlp": _objective_case(ModelSpec(arch="mlp", input_shape=(6,), n_classes=3, hidden=(5, 4)), 3),
    "objective/lenet-small": _objective_case(
        ModelSpec(arch="lenet-small", input_shape=(16, 16, 1), n_classes=4, hidden=(8, 6), conv_channels=(3, 4)), 2),
}


def run_case(name: str, case, n_instances: int, seed: int) -> dict:
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    max_coords = OBJECTIVE_MAX_COORDS if name.startswith("objective/") else None
    errs = []
    for _ in range(n_instances):
        fn, arrays = case(rng)
        errs.append(check(fn, arrays, max_coords=max_coords, rng=rng))
    return {"max_rel_err": float(max(errs)), "instances": n_instances}


def run_suite(seed: int = 0, n_instances: int = 100, tol: float = 1e-4, include_objective: bool = True,
              names=None) -> dict:
    """Run all cases and name the worst offender.

    A broken primitive also breaks every objective built on it, so failing
    primitives rank ahead of failing objective cases in ``failing``.
    """
    cases = dict(PRIMITIVE_CASES)
    if include_objective:
        cases.update(OBJECTIVE_CASES)
    if names is not None:
        cases = {k: v for k, v in cases.items() if k in names}
    t0 = time.perf_counter()
    per = {name: run_case(name, case, n_instances, seed) for name, case in cases.items()}
    failing = sorted((k for k, v in per.items() if not v["max_rel_err"] < tol),
                     key=lambda k: (k in OBJECTIVE_CASES, -per[k]["max_rel_err"]))
    worst = failing[0] if failing else max(per, key=lambda k: per[k]["max_rel_err"])
    return {
        "tolerance": tol,
        "per_case": per,
        "worst": worst,
        "worst_rel_err": per[worst]["max_rel_err"],
        "failing": failing,
        "passed": not failing,
        "seconds": time.perf_counter() - t0,
    }
