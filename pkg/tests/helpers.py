"""Small fixtures shared by the unit and acceptance tests."""
import numpy as np

from meada import autodiff as ad
from meada.models import Model, ModelSpec
from meada.objectives import ObjectiveConfig, adversarial_objective

TOY_SPEC = ModelSpec(arch="mlp", input_shape=(1,), n_classes=2, hidden=())


def logistic_toy(w: float = 3.0, b: float = -1.0) -> Model:
    """p(y=1 | x) = sigmoid(w x + b); the latent z is x itself."""
    params = {"fc_out.w": np.array([[0.0], [w]]), "fc_out.b": np.array([0.0, b])}
    return Model(TOY_SPEC, params)


def grid_argmax(model, x0: float, y: int, cfg: ObjectiveConfig, half_width: float = 3.0, n: int = 1001):
    grid = np.linspace(x0 - half_width, x0 + half_width, n)
    vals = adversarial_objective(model, grid[:, None], np.full((n, 1), x0), np.full(n, y), cfg)
    i = int(np.argmax(vals))
    return grid[i], vals[i], grid[1] - grid[0]


def tiny_mlp(seed: int = 0, n_in: int = 4, n_classes: int = 3, hidden=(6,)) -> Model:
    return Model.create(ModelSpec(arch="mlp", input_shape=(n_in,), n_classes=n_classes, hidden=hidden), seed=seed)


def broken_relu(a):
    """relu whose backward passes the gradient through unmasked."""
    a = ad._as_node(a)
    return ad._make(np.maximum(a.value, 0.0), (a,), "relu", lambda g: (g,))
