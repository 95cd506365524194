"""Binary checkpoint files.

Layout::

    b"MEADA" | version byte (0x01) | uint64 LE header length | UTF-8 JSON header
    | float64 LE tensor data, concatenated in manifest order

The header carries the model spec, the run config, the step counter, the
sampler RNG state and a manifest of ``{"name", "shape"}`` entries. Parameters,
optimizer moments and the augmented dataset are all stored as tensors, so a
checkpoint is enough to resume a run exactly.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .models import BayesianModel, Model, ModelSpec
from .trainer import AdvConfig, AugmentedDataset, Trainer

MAGIC = b"MEADA"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: ModelSpec
    config: AdvConfig | None
    tensors: dict[str, np.ndarray]
    step: int = 0
    rng_state: dict | None = None
    meta: dict = field(default_factory=dict)
    version: int = VERSION

    @property
    def kind(self) -> str:
        return "bnn" if any(k.startswith("mu/") for k in self.tensors) else "model"

    @property
    def params(self) -> dict[str, np.ndarray]:
        prefix = "mu/" if self.kind == "bnn" else "param/"
        return {k[len(prefix):]: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def model(self):
        if self.kind == "bnn":
            rho = {k[4:]: v for k, v in self.tensors.items() if k.startswith("rho/")}
            return BayesianModel(self.spec, self.params, rho)
        return Model(self.spec, self.params)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    manifest = [{"name": k, "shape": list(np.shape(v))} for k, v in ckpt.tensors.items()]
    header = {
        "format_version": ckpt.version,
        "spec": ckpt.spec.to_dict(),
        "config": ckpt.config.to_dict() if ckpt.config is not None else None,
        "step": int(ckpt.step),
        "rng_state": ckpt.rng_state,
        "meta": ckpt.meta,
        "manifest": manifest,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(bytes([ckpt.version]))
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for v in ckpt.tensors.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 9:
        raise CheckpointError("truncated checkpoint")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic")
    version = blob[len(MAGIC)]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    off = len(MAGIC) + 1
    (hlen,) = struct.unpack("<Q", blob[off:off + 8])
    off += 8
    if off + hlen > len(blob):
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    off += hlen
    tensors = {}
    for entry in header["manifest"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(blob):
            raise CheckpointError(f"truncated tensor data at {entry['name']}")
        tensors[entry["name"]] = np.frombuffer(blob, dtype="<f8", count=nbytes // 8, offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(blob):
        raise CheckpointError("trailing bytes after tensor data")
    cfg = header.get("config")
    return Checkpoint(
        spec=ModelSpec.from_dict(header["spec"]),
        config=AdvConfig.from_dict(cfg) if cfg is not None else None,
        tensors=tensors,
        step=header["step"],
        rng_state=header.get("rng_state"),
        meta=header.get("meta", {}),
        version=version,
    )


def model_checkpoint(model, cfg: AdvConfig | None = None, step: int = 0) -> Checkpoint:
    if isinstance(model, BayesianModel):
        tensors = {f"mu/{k}": v for k, v in model.mu.items()}
        tensors.update({f"rho/{k}": v for k, v in model.rho.items()})
    else:
        tensors = {f"param/{k}": v for k, v in model.params.items()}
    return Checkpoint(model.spec, cfg, tensors, step)


def trainer_checkpoint(trainer: Trainer) -> Checkpoint:
    tensors = dict(trainer.param_tensors())
    tensors.update(trainer.opt.state_tensors())
    ds = trainer.dataset
    tensors["data/images"] = ds.images
    tensors["data/labels"] = ds.labels.astype(np.float64)
    tensors["data/origin"] = ds.origin.astype(np.float64)
    tensors["data/round"] = ds.rounds.astype(np.float64)
    meta = {"rounds_done": trainer.rounds_done, "flags": trainer.flags}
    return Checkpoint(trainer.spec, trainer.cfg, tensors, trainer.step,
                      trainer.rng.bit_generator.state, meta)


def resume_trainer(ckpt: Checkpoint) -> Trainer:
    """Rebuild a trainer in the exact state captured by :func:`trainer_checkpoint`."""
    if ckpt.config is None or "data/images" not in ckpt.tensors:
        raise CheckpointError("checkpoint does not hold a resumable training state")
    t = ckpt.tensors
    ds = AugmentedDataset(t["data/images"], t["data/labels"].astype(np.int64),
                          t["data/origin"].astype(np.int64), t["data/round"].astype(np.int64))
    trainer = Trainer(ckpt.model(), ckpt.config, ds)
    trainer.opt.load_tensors(t)
    trainer.step = ckpt.step
    trainer.rounds_done = int(ckpt.meta.get("rounds_done", 0))
    trainer.flags = dict(ckpt.meta.get("flags", trainer.flags))
    if ckpt.rng_state is not None:
        trainer.rng.bit_generator.state = ckpt.rng_state
    return trainer
