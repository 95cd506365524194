"""Classifiers exposing (latent, logits, probabilities).

Parameters live in plain ``dict[str, np.ndarray]`` so the same forward graph
serves deterministic models, sampled Bayesian models and finite-difference
checks. Dense weights are stored ``(out, in)``, so the final layer ``fc_out.w``
has one row per class.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad

ARCHITECTURES = ("mlp", "lenet-small")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description.

    ``hidden`` are the dense widths before the classifier. For ``lenet-small``
    the conv stack is fixed (5x5x6, 5x5x16, each followed by relu and 2x2
    max-pool) and ``hidden`` defaults to ``(120, 84)``.
    """

    arch: str = "lenet-small"
    input_shape: tuple = (32, 32, 3)
    n_classes: int = 10
    hidden: tuple = (120, 84)
    conv_channels: tuple = (6, 16)
    kernel: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(s) for s in self.hidden))
        object.__setattr__(self, "conv_channels", tuple(int(s) for s in self.conv_channels))

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})

    @property
    def latent_dim(self) -> int:
        if self.hidden:
            return self.hidden[-1]
        return int(np.prod(self._feature_shape()))

    def _feature_shape(self) -> tuple:
        if self.arch == "mlp":
            return (int(np.prod(self.input_shape)),)
        h, w, _ = self.input_shape
        for _ in self.conv_channels:
            h, w = (h - self.kernel + 1) // 2, (w - self.kernel + 1) // 2
            if h < 1 or w < 1:
                raise ValueError(f"input {self.input_shape} too small for lenet-small")
        return (h * w * self.conv_channels[-1],)

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        if self.arch == "lenet-small":
            if len(self.input_shape) != 3:
                raise ValueError("lenet-small needs an (H, W, C) input shape")
            cin = self.input_shape[2]
            for i, cout in enumerate(self.conv_channels, 1):
                shapes[f"conv{i}.w"] = (self.kernel, self.kernel, cin, cout)
                shapes[f"conv{i}.b"] = (cout,)
                cin = cout
        width = self._feature_shape()[0]
        for i, h in enumerate(self.hidden, 1):
            shapes[f"fc{i}.w"] = (h, width)
            shapes[f"fc{i}.b"] = (h,)
            width = h
        shapes["fc_out.w"] = (self.n_classes, width)
        shapes["fc_out.b"] = (self.n_classes,)
        return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if name.startswith("conv"):
        return shape[0] * shape[1] * shape[2]
    return shape[1]


def init_params(spec: ModelSpec, seed: int | None = None) -> dict[str, np.ndarray]:
    """Kaiming-uniform (fan-in, relu gain) weights, zero biases."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith(".b"):
            params[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / _fan_in(name, shape))
            params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def forward_graph(spec: ModelSpec, params: dict[str, ad.Node], x: ad.Node):
    """Build the forward graph; returns (z, logits, log_probs) nodes."""
    n = x.shape[0]
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ad.ShapeError("forward", x.shape, (n,) + spec.input_shape)
    h = x
    if spec.arch == "lenet-small":
        for i in range(1, len(spec.conv_channels) + 1):
            h = ad.conv2d(h, params[f"conv{i}.w"]) + params[f"conv{i}.b"]
            h = ad.maxpool2x2(ad.relu(h))
    h = ad.reshape(h, (n, -1))
    for i in range(1, len(spec.hidden) + 1):
        h = ad.relu(h @ ad.transpose(params[f"fc{i}.w"]) + params[f"fc{i}.b"])
    z = h
    logits = z @ ad.transpose(params["fc_out.w"]) + params["fc_out.b"]
    return z, logits, ad.log_softmax(logits)


def _check_batch(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape == spec.input_shape:
        x = x[None]
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ad.ShapeError("forward", x.shape, ("N",) + spec.input_shape)
    return x


@dataclass
class Model:
    spec: ModelSpec
    params: dict[str, np.ndarray]

    @classmethod
    def create(cls, spec: ModelSpec, seed: int | None = None) -> "Model":
        return cls(spec, init_params(spec, seed))

    def copy(self) -> "Model":
        return Model(self.spec, {k: v.copy() for k, v in self.params.items()})

    def param_nodes(self, requires_grad=False) -> dict[str, ad.Node]:
        make = ad.leaf if requires_grad else ad.constant
        return {k: make(v) for k, v in self.params.items()}


def forward(model: Model, x: np.ndarray, chunk: int = 512):
    """Evaluate the model on a batch; returns (z, logits, probs) as arrays."""
    x = _check_batch(model.spec, x)
    pn = model.param_nodes()
    zs, ls = [], []
    for s in range(0, len(x), chunk):
        z, logits, _ = forward_graph(model.spec, pn, ad.constant(x[s:s + chunk]))
        zs.append(z.value)
        ls.append(logits.value)
    z = np.concatenate(zs) if zs else np.zeros((0, model.spec.latent_dim))
    logits = np.concatenate(ls) if ls else np.zeros((0, model.spec.n_classes))
    return z, logits, softmax_rows(logits)


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(model: Model, x: np.ndarray) -> np.ndarray:
    return forward(model, x)[2]


# ---------------------------------------------------------------- Bayesian

# Scale-mixture prior: -log(sigma1) = 0, -log(sigma2) = 6, weight 0.25 on sigma1.
PRIOR_PI = 0.25
PRIOR_LOG_SIGMA1 = 0.0
PRIOR_LOG_SIGMA2 = -6.0


@dataclass
class BayesianModel:
    """Mean-field Gaussian posterior over every parameter, sigma = softplus(rho).

    Setting ``rho`` to ``-inf`` makes sigma exactly zero (deterministic limit).
    """

    spec: ModelSpec
    mu: dict[str, np.ndarray]
    rho: dict[str, np.ndarray]
    prior_pi: float = PRIOR_PI
    prior_log_sigma1: float = PRIOR_LOG_SIGMA1
    prior_log_sigma2: float = PRIOR_LOG_SIGMA2
    n_samples: int = 1
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, spec: ModelSpec, seed: int | None = None, rho_init: float = -5.0, **kw) -> "BayesianModel":
        mu = init_params(spec, seed)
        rho = {k: np.full_like(v, rho_init) for k, v in mu.items()}
        return cls(spec, mu, rho, **kw)

    @classmethod
    def from_model(cls, model: Model, rho_init: float = -np.inf, **kw) -> "BayesianModel":
        mu = {k: v.copy() for k, v in model.params.items()}
        return cls(model.spec, mu, {k: np.full_like(v, rho_init) for k, v in mu.items()}, **kw)

    @property
    def sigma(self) -> dict[str, np.ndarray]:
        return {k: np.logaddexp(0.0, r) for k, r in self.rho.items()}

    def mean_model(self) -> Model:
        return Model(self.spec, {k: v.copy() for k, v in self.mu.items()})

    def copy(self) -> "BayesianModel":
        return dataclasses.replace(self, mu={k: v.copy() for k, v in self.mu.items()},
                                   rho={k: v.copy() for k, v in self.rho.items()})


def draw_noise(bnn: BayesianModel, seed) -> dict[str, np.ndarray]:
    """Standard-normal noise for every parameter, in spec order, from one seeded stream."""
    rng = np.random.default_rng(seed)
    return {k: rng.standard_normal(v.shape) for k, v in bnn.mu.items()}


def sample_parameters(bnn: BayesianModel, seed) -> Model:
    """Reparameterized draw theta = mu + sigma * eps."""
    eps = draw_noise(bnn, seed)
    sigma = bnn.sigma
    return Model(bnn.spec, {k: bnn.mu[k] + sigma[k] * eps[k] for k in bnn.mu})


def sample_seed(seed: int, j: int) -> list[int]:
    """Seed for the j-th Monte Carlo parameter draw derived from a base seed."""
    return [int(seed), int(j)]


def prediction_entropy_rows(probs: np.ndarray) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def predictive_entropy_mc(bnn: BayesianModel, x: np.ndarray, T: int | None = None, seed: int = 0,
                          return_draws: bool = False):
    """Mean prediction entropy over T posterior draws, one value per input row.

    With ``return_draws`` the (T, N) matrix of per-draw entropies is returned as well.
    """
    T = bnn.n_samples if T is None else T
    if T < 1:
        raise ValueError("T must be >= 1")
    x = _check_batch(bnn.spec, x)
    draws = np.empty((T, len(x)))
    for j in range(T):
        model = sample_parameters(bnn, sample_seed(seed, j))
        draws[j] = prediction_entropy_rows(forward(model, x)[2])
    est = draws.mean(axis=0)
    return (est, draws) if return_draws else est
