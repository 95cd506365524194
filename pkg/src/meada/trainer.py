"""Alternating minimax training with entropy-regularized adversarial augmentation.

The schedule is a pure function of the config: ``K * T_min + final_steps``
minimization steps in total, with one augmentation round after each of the
first ``K`` blocks of ``T_min`` steps. The trainer state is therefore just
(step, rounds_done, parameters, optimizer moments, sampler RNG, dataset), which
is exactly what a checkpoint stores, so a resumed run continues bit-for-bit.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .models import BayesianModel, Model, ModelSpec, forward, prediction_entropy_rows
from .objectives import (adversarial_value_and_grad, bnn_entropy_models, bnn_free_energy_graph,
                         ib_loss_graph)

log = logging.getLogger(__name__)


class NumericAbort(RuntimeError):
    """Raised when the training loss stops being finite."""

    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class AdvConfig:
    K: int = 3
    T_min: int = 100
    T_max: int = 15
    alpha: float = 1e-4
    eta: float = 1.0
    gamma: float = 1.0
    beta: float = 10.0
    weight_decay: float = 5e-4
    batch_size: int = 32
    final_steps: int | None = None
    seed: int = 0
    optimizer: str = "adam"
    lr_schedule: str = "constant"
    clip_pixels: bool = False
    perturb_source_only: bool = False
    ascent_chunk: int = 256
    workers: int = 1
    bnn_samples: int = 5
    # "mean": eta steps the batch-mean objective over batch_size samples (per-sample step
    # eta / batch_size, the usual framework convention); "sum": per-sample step eta
    ascent_reduction: str = "mean"

    def __post_init__(self):
        if self.final_steps is None:
            self.final_steps = 10 * self.T_min
        if self.K < 0 or self.T_min < 1 or self.T_max < 1 or self.batch_size < 1:
            raise ValueError("need K >= 0, T_min >= 1, T_max >= 1, batch_size >= 1")
        if self.alpha < 0 or self.eta < 0 or self.gamma < 0 or self.beta < 0 or self.weight_decay < 0:
            raise ValueError("alpha, eta, gamma, beta, weight_decay must be non-negative")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.ascent_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown ascent_reduction {self.ascent_reduction!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr_schedule {self.lr_schedule!r}")
        if self.final_steps < 0 or self.bnn_samples < 1 or self.ascent_chunk < 1 or self.workers < 1:
            raise ValueError("final_steps >= 0, bnn_samples, ascent_chunk, workers >= 1")

    @property
    def ascent_step(self) -> float:
        """Step applied to each sample's own gradient."""
        return self.eta / self.batch_size if self.ascent_reduction == "mean" else self.eta

    @property
    def total_steps(self) -> int:
        return self.K * self.T_min + self.final_steps

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdvConfig":
        return cls(**d)

    def replace(self, **kw) -> "AdvConfig":
        return dataclasses.replace(self, **kw)


def derive_seed(seed: int, *keys: int) -> int:
    """Sub-seed from the run seed and integer keys (SeedSequence hashing)."""
    return int(np.random.SeedSequence([int(seed), *map(int, keys)]).generate_state(1)[0])


# ---------------------------------------------------------------- dataset

class AugmentedDataset:
    """Source records plus adversarial copies with (origin index, round) provenance."""

    def __init__(self, images, labels, origin=None, rounds=None):
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        n = len(self.labels)
        if len(self.images) != n:
            raise ValueError("images and labels differ in length")
        self.origin = np.arange(n) if origin is None else np.asarray(origin, dtype=np.int64)
        self.rounds = np.zeros(n, dtype=np.int64) if rounds is None else np.asarray(rounds, dtype=np.int64)

    @classmethod
    def from_source(cls, source) -> "AugmentedDataset":
        if isinstance(source, AugmentedDataset):
            return source.copy()
        if hasattr(source, "images"):
            return cls(source.images, source.labels)
        images, labels = source
        return cls(images, labels)

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def n_source(self) -> int:
        return int(np.sum(self.rounds == 0))

    def append(self, images, labels, origin, k: int) -> None:
        self.images = np.concatenate([self.images, images])
        self.labels = np.concatenate([self.labels, labels])
        self.origin = np.concatenate([self.origin, origin])
        self.rounds = np.concatenate([self.rounds, np.full(len(labels), k, dtype=np.int64)])

    def copy(self) -> "AugmentedDataset":
        return AugmentedDataset(self.images.copy(), self.labels.copy(), self.origin.copy(), self.rounds.copy())


# -------------------------------------------------------------- optimizers

class Optimizer:
    """Plain SGD or Adam over a name -> array dict; state is a dict of arrays."""

    def __init__(self, kind: str = "adam", b1=0.9, b2=0.999, eps=1e-8):
        self.kind = kind
        self.b1, self.b2, self.eps = b1, b2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        for k, g in grads.items():
            if self.kind == "sgd":
                params[k] = params[k] - lr * g
                continue
            m = self.m.get(k, 0.0) * self.b1 + (1 - self.b1) * g
            v = self.v.get(k, 0.0) * self.b2 + (1 - self.b2) * g * g
            self.m[k], self.v[k] = m, v
            mhat = m / (1 - self.b1 ** self.t)
            vhat = v / (1 - self.b2 ** self.t)
            params[k] = params[k] - lr * mhat / (np.sqrt(vhat) + self.eps)

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {"opt/t": np.array(float(self.t))}
        out.update({f"opt/m/{k}": v for k, v in self.m.items()})
        out.update({f"opt/v/{k}": v for k, v in self.v.items()})
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        self.t = int(tensors.get("opt/t", 0))
        self.m = {k[6:]: v.copy() for k, v in tensors.items() if k.startswith("opt/m/")}
        self.v = {k[6:]: v.copy() for k, v in tensors.items() if k.startswith("opt/v/")}


# --------------------------------------------------------------- ascent

def maximize_batch(model: Model, x0: np.ndarray, y, cfg, entropy_models=None, track: bool = False):
    """Fixed-step gradient ascent on every row of ``x0`` for ``cfg.T_max`` steps.

    The anchor latent is computed once from ``x0`` for the fixed model. Rows
    whose objective or gradient stops being finite are frozen at their last
    finite iterate. Returns (x_adv, info); ``info["history"]`` holds the
    objective before each step and at the returned iterate when ``track``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    y = np.atleast_1d(np.asarray(y))
    z_anchor = forward(model, x0)[0]
    x = x0.copy()
    prev = x0
    active = np.ones(len(x), dtype=bool)
    history = []
    step = cfg.ascent_step
    for _ in range(cfg.T_max):
        rows, g, _ = adversarial_value_and_grad(model, x, z_anchor, y, cfg, entropy_models)
        flat = g.reshape(len(x), -1)
        bad = active & ~(np.isfinite(rows) & np.isfinite(flat).all(axis=1))
        x[bad] = prev[bad]
        active &= ~bad
        if track:
            history.append(rows)
        prev = x.copy()
        if step:
            x[active] = x[active] + step * g[active]
    finite = np.isfinite(x.reshape(len(x), -1)).all(axis=1)
    x[~finite] = prev[~finite]
    if cfg.clip_pixels:
        x = np.clip(x, 0.0, 1.0)
    rows, _, h = adversarial_value_and_grad(model, x, z_anchor, y, cfg, entropy_models)
    if track:
        history.append(rows)
    info = {"objective": rows, "entropy": h, "nonfinite": int(np.sum(~active | ~finite))}
    if track:
        info["history"] = np.array(history)
    return x, info


def maximize_sample(model: Model, x0: np.ndarray, y: int, cfg, entropy_models=None) -> np.ndarray:
    """Ascent on a single input; the label is carried unchanged."""
    x_adv, _ = maximize_batch(model, np.asarray(x0)[None], [y], cfg, entropy_models)
    return x_adv[0]


# ----------------------------------------------------------------- trainer

class Trainer:
    """Owns the parameters, optimizer, sampler RNG and growing dataset of one run."""

    def __init__(self, model, cfg: AdvConfig, dataset: AugmentedDataset):
        self.model = model
        self.cfg = cfg
        self.dataset = dataset
        self.rng = np.random.default_rng(cfg.seed)
        self.opt = Optimizer(cfg.optimizer)
        self.step = 0
        self.rounds_done = 0
        self.metrics: list[dict] = []
        self.flags = {"ce_clamped": 0, "ascent_nonfinite": 0}
        self._t0 = time.perf_counter()

    @property
    def is_bayesian(self) -> bool:
        return isinstance(self.model, BayesianModel)

    @property
    def spec(self) -> ModelSpec:
        return self.model.spec

    # parameters as one flat name -> array dict
    def param_tensors(self) -> dict[str, np.ndarray]:
        if self.is_bayesian:
            out = {f"mu/{k}": v for k, v in self.model.mu.items()}
            out.update({f"rho/{k}": v for k, v in self.model.rho.items()})
            return out
        return {f"param/{k}": v for k, v in self.model.params.items()}

    def _set_params(self, flat: dict[str, np.ndarray]) -> None:
        for name, v in flat.items():
            kind, key = name.split("/", 1)
            target = {"param": getattr(self.model, "params", None), "mu": getattr(self.model, "mu", None),
                      "rho": getattr(self.model, "rho", None)}[kind]
            target[key] = v

    def lr(self) -> float:
        if self.cfg.lr_schedule == "cosine":
            return self.cfg.alpha * 0.5 * (1 + math.cos(math.pi * self.step / max(self.cfg.total_steps, 1)))
        return self.cfg.alpha

    def _loss_and_grads(self, idx: np.ndarray):
        x, y = self.dataset.images[idx], self.dataset.labels[idx]
        if self.is_bayesian:
            b = len(idx)
            seed = derive_seed(self.cfg.seed, 1, self.step)
            node, mu, rho, info = bnn_free_energy_graph(self.model, x, y, self.cfg.bnn_samples, seed,
                                                        kl_weight=b / len(self.dataset))
            loss = node * (1.0 / b)
            ad.backward(loss)
            grads = {f"mu/{k}": n.grad for k, n in mu.items()}
            grads.update({f"rho/{k}": n.grad for k, n in rho.items()})
            return float(loss.value), {"ce": info["nll"] / b, "entropy_mean": float("nan"), "ce_clamped": 0}, grads
        pn = self.model.param_nodes(requires_grad=True)
        loss, info = ib_loss_graph(self.spec, pn, x, y, self.cfg.weight_decay)
        ad.backward(loss)
        return float(loss.value), info, {f"param/{k}": n.grad for k, n in pn.items()}

    def minimize_phase(self, n_steps: int, phase: str = "min", round_k: int = 0) -> dict:
        """``n_steps`` optimizer steps on uniformly sampled batches of the current dataset."""
        if len(self.dataset) == 0:
            raise ValueError("minimize_phase: empty dataset")
        losses, ces, ents = [], [], []
        n = len(self.dataset)
        b = min(self.cfg.batch_size, n)
        for _ in range(n_steps):
            idx = np.sort(self.rng.choice(n, size=b, replace=False))
            loss, info, grads = self._loss_and_grads(idx)
            if not math.isfinite(loss):
                raise NumericAbort(f"non-finite loss at step {self.step}", {
                    "step": self.step, "loss": loss, "phase": phase, "round": round_k,
                    "param_norms": {k: float(np.linalg.norm(v)) for k, v in self.param_tensors().items()},
                })
            params = self.param_tensors()
            self.opt.step(params, grads, self.lr())
            self._set_params(params)
            self.step += 1
            self.flags["ce_clamped"] += info["ce_clamped"]
            losses.append(loss)
            ces.append(info["ce"])
            ents.append(info["entropy_mean"])
        rec = self._record(phase, round_k, float(np.mean(losses)) if losses else float("nan"),
                           float(np.mean(ces)) if ces else float("nan"),
                           float(np.mean(ents)) if ents else float("nan"))
        return rec

    def _record(self, phase, round_k, loss, ce, entropy, **extra) -> dict:
        rec = {"phase": phase, "round": int(round_k), "step": int(self.step), "loss": loss, "ce": ce,
               "entropy_mean": entropy, "dataset_size": len(self.dataset),
               "wallclock_s": time.perf_counter() - self._t0}
        rec.update(extra)
        self.metrics.append(rec)
        log.info("%s", rec)
        return rec

    def _ascent_models(self, k: int):
        if not self.is_bayesian:
            return self.model, None
        ents = bnn_entropy_models(self.model, self.cfg.bnn_samples, derive_seed(self.cfg.seed, 2, k))
        return self.model.mean_model(), ents

    def augment_round(self, k: int) -> dict:
        """Perturb every record (or only the source records) and append the results as round ``k``."""
        ds = self.dataset
        sel = np.flatnonzero(ds.rounds == 0) if self.cfg.perturb_source_only else np.arange(len(ds))
        model, ents = self._ascent_models(k)
        chunk = self.cfg.ascent_chunk
        starts = list(range(0, len(sel), chunk))

        def work(s):
            idx = sel[s:s + chunk]
            x_adv, info = maximize_batch(model, ds.images[idx], ds.labels[idx], self.cfg, ents)
            p = forward(model, ds.images[idx])[2]
            h0 = prediction_entropy_rows(p) if ents is None else _mean_entropy(ents, ds.images[idx])
            return x_adv, info, h0

        if self.cfg.workers > 1:
            with ThreadPoolExecutor(self.cfg.workers) as pool:
                results = list(pool.map(work, starts))
        else:
            results = [work(s) for s in starts]
        if results:
            x_new = np.concatenate([r[0] for r in results])
            obj = np.concatenate([r[1]["objective"] for r in results])
            h_adv = np.concatenate([r[1]["entropy"] for r in results])
            h_org = np.concatenate([r[2] for r in results])
            self.flags["ascent_nonfinite"] += int(sum(r[1]["nonfinite"] for r in results))
        else:
            x_new = ds.images[:0]
            obj = h_adv = h_org = np.zeros(0)
        _, _, p_adv = forward(model, x_new)
        ce = -np.log(np.maximum(p_adv[np.arange(len(sel)), ds.labels[sel]], 1e-12))
        ds.append(x_new, ds.labels[sel].copy(), ds.origin[sel].copy(), k)
        self.rounds_done = k
        return self._record("max", k, float(np.mean(obj)) if len(obj) else float("nan"),
                            float(np.mean(ce)) if len(ce) else float("nan"),
                            float(np.mean(h_adv)) if len(h_adv) else float("nan"),
                            entropy_origin=float(np.mean(h_org)) if len(h_org) else float("nan"))

    def run(self, max_steps: int | None = None) -> "Trainer":
        """Advance the schedule; stops early after ``max_steps`` total minimization steps."""
        cfg = self.cfg
        stop = cfg.total_steps if max_steps is None else min(max_steps, cfg.total_steps)
        while True:
            due = min(self.step // cfg.T_min, cfg.K)
            if self.rounds_done < due:
                self.augment_round(self.rounds_done + 1)
                continue
            if self.step >= stop:
                break
            if self.rounds_done < cfg.K:
                end, phase, rk = (self.rounds_done + 1) * cfg.T_min, "min", self.rounds_done + 1
            else:
                end, phase, rk = cfg.total_steps, "final", cfg.K
            self.minimize_phase(min(end, stop) - self.step, phase, rk)
        return self

    @property
    def finished(self) -> bool:
        return self.step >= self.cfg.total_steps and self.rounds_done >= self.cfg.K


def _mean_entropy(models, x) -> np.ndarray:
    return np.mean([prediction_entropy_rows(forward(m, x)[2]) for m in models], axis=0)


def run_me_ada(source, spec: ModelSpec, cfg: AdvConfig, model=None, bayesian: bool = False):
    """Full procedure from a fresh (or given) model; returns (model, dataset, metrics)."""
    if model is None:
        model = BayesianModel.create(spec, seed=spec.seed) if bayesian else Model.create(spec)
    trainer = Trainer(model, cfg, AugmentedDataset.from_source(source))
    trainer.run()
    return trainer.model, trainer.dataset, trainer.metrics


def write_metrics(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_metrics(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
