"""Adversarial data augmentation with an entropy bonus, on a small reverse-mode autodiff engine."""
from .models import BayesianModel, Model, ModelSpec, forward
from .objectives import ObjectiveConfig, adversarial_objective, ib_loss
from .trainer import AdvConfig, AugmentedDataset, NumericAbort, Trainer, maximize_batch, run_me_ada

__all__ = [
    "AdvConfig", "AugmentedDataset", "BayesianModel", "Model", "ModelSpec", "NumericAbort",
    "ObjectiveConfig", "Trainer", "adversarial_objective", "forward", "ib_loss", "maximize_batch",
    "run_me_ada",
]
__version__ = "0.1.0"
