"""Command-line entry point: ``meada {train,eval,augment,verify-bounds,gradcheck}``.

A run is described by one JSON document (``--config``) plus ``--set KEY=VALUE``
overrides on dotted paths, e.g. ``--set adv.K=0 --set data.train.limit=500``.
The single top-level ``seed`` feeds the model initialization, the trainer and
the shift generators. Exit codes: 0 success, 1 verification failure, 2 usage
or config error, 3 numeric abort.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import sys
from pathlib import Path

import jsonschema
import numpy as np

from . import gradcheck as gc
from . import infobounds as ib
from .checkpoint import CheckpointError, load_checkpoint, model_checkpoint, save_checkpoint
from .data import (CORRUPTION_KINDS, SHIFT_KINDS, IDXError, ImageDataset, ShiftSpec, apply_corruption,
                   apply_shift, load_idx, save_idx, split, to_rgb32)
from .experiments import evaluate
from .models import BayesianModel, Model, ModelSpec
from .objectives import bnn_entropy_models
from .trainer import AdvConfig, AugmentedDataset, NumericAbort, Trainer, derive_seed, maximize_batch, write_metrics

log = logging.getLogger("meada")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3


class ConfigError(Exception):
    pass


_RESIZE = {"enum": ["none", "bilinear32", "pad32"]}
_SOURCE_KINDS = {
    "idx": {
        "required": ["kind", "images", "labels"],
        "properties": {
            "kind": {}, "images": {"type": "string"}, "labels": {"type": "string"}, "name": {"type": "string"},
            "resize": _RESIZE, "limit": {"type": "integer", "minimum": 1},
        },
    },
    "mnist-sample": {
        "required": ["kind"],
        "properties": {
            "kind": {}, "split": {"enum": ["train", "test"]}, "n_train": {"type": "integer", "minimum": 1},
            "n_test": {"type": "integer", "minimum": 1}, "split_seed": {"type": "integer"}, "resize": _RESIZE,
        },
    },
}
_SOURCE = {
    "type": "object",
    "required": ["kind"],
    "properties": {"kind": {"enum": list(_SOURCE_KINDS)}},
    "allOf": [
        {"if": {"properties": {"kind": {"const": k}}},
         "then": {"additionalProperties": False, **v}}
        for k, v in _SOURCE_KINDS.items()
    ],
}
_SEVERITY = {"type": "integer", "minimum": 1, "maximum": 5}
_INT_LIST = {"type": "array", "items": {"type": "integer", "minimum": 1}, "minItems": 1}
_NUM_LIST = {"type": "array", "items": {"type": "number"}, "minItems": 1}


def _closed(props: dict, required=()) -> dict:
    return {"type": "object", "additionalProperties": False, "properties": props, "required": list(required)}


RUN_CONFIG_SCHEMA = _closed({
    "seed": {"type": "integer", "minimum": 0},
    "out": {"type": "string"},
    "bayesian": {"type": "boolean"},
    "model": _closed({
        "arch": {"enum": ["mlp", "lenet-small"]},
        "input_shape": _INT_LIST,
        "n_classes": {"type": "integer", "minimum": 2},
        "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "conv_channels": _INT_LIST,
        "kernel": {"type": "integer", "minimum": 1},
    }),
    "adv": _closed({
        "K": {"type": "integer", "minimum": 0},
        "T_min": {"type": "integer", "minimum": 1},
        "T_max": {"type": "integer", "minimum": 1},
        "alpha": {"type": "number", "minimum": 0},
        "eta": {"type": "number", "minimum": 0},
        "gamma": {"type": "number", "minimum": 0},
        "beta": {"type": "number", "minimum": 0},
        "weight_decay": {"type": "number", "minimum": 0},
        "batch_size": {"type": "integer", "minimum": 1},
        "final_steps": {"type": ["integer", "null"], "minimum": 0},
        "optimizer": {"enum": ["adam", "sgd"]},
        "lr_schedule": {"enum": ["constant", "cosine"]},
        "clip_pixels": {"type": "boolean"},
        "perturb_source_only": {"type": "boolean"},
        "ascent_chunk": {"type": "integer", "minimum": 1},
        "workers": {"type": "integer", "minimum": 1},
        "bnn_samples": {"type": "integer", "minimum": 1},
        "ascent_reduction": {"enum": ["mean", "sum"]},
    }),
    "data": _closed({
        "train": _SOURCE,
        "eval": {"type": "array", "items": _SOURCE},
    }),
    "shifts": {"type": "array", "items": _closed(
        {"kind": {"enum": list(SHIFT_KINDS)}, "severity": _SEVERITY}, ["kind", "severity"])},
    "corruptions": {"type": "array", "items": _closed(
        {"kind": {"enum": list(CORRUPTION_KINDS)}, "severity": _SEVERITY}, ["kind", "severity"])},
    "bounds": _closed({
        "prop1": _closed({"models": {"type": "integer", "minimum": 1},
                          "n_inputs": {"type": "integer", "minimum": 1}}),
        "prop3": _closed({"card_y": _INT_LIST, "N": _INT_LIST, "delta": _NUM_LIST,
                          "trials": {"type": "integer", "minimum": 1},
                          "minority": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1}}),
        "corollary1": _closed({"epsilon": _NUM_LIST, "card_y": _INT_LIST,
                               "n_perturb": {"type": "integer", "minimum": 1}}),
    }),
    "gradcheck": _closed({
        "n_instances": {"type": "integer", "minimum": 1},
        "tolerance": {"type": "number", "exclusiveMinimum": 0},
        "include_objective": {"type": "boolean"},
    }),
})

DEFAULTS = {
    "seed": 0,
    "out": "runs",
    "bayesian": False,
    "model": {"arch": "lenet-small"},
    "adv": {},
    "data": {},
    "shifts": [{"kind": k, "severity": 3} for k in ("tint", "invert", "noise-background")],
    "corruptions": [],
    "bounds": {
        "prop1": {"models": 3, "n_inputs": 64},
        "prop3": {"card_y": [2, 5, 10], "N": [100, 1000, 10000], "delta": [0.05, 0.2], "trials": 1000,
                  "minority": 0.1},
        "corollary1": {"epsilon": [0.01, 0.1, 0.5], "card_y": [2, 4, 10], "n_perturb": 100},
    },
    "gradcheck": {"n_instances": 100, "tolerance": 1e-4, "include_objective": True},
}


# ------------------------------------------------------------------ config

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects KEY=VALUE, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.split(".")
    node = cfg
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p} is not an object")
    node[parts[-1]] = _parse_value(value)


def _field_path(err: jsonschema.ValidationError) -> str:
    path = ".".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        missing = err.message.split("'")[1]
        return f"{path}.{missing}" if path else missing
    return path or "<root>"


def validate_config(cfg: dict) -> None:
    errors = sorted(jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA).iter_errors(cfg),
                    key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        raise ConfigError(f"config field {_field_path(errors[0])}: {errors[0].message}")


def load_run_config(path: str | None, sets=(), seed: int | None = None, out: str | None = None) -> dict:
    user = {}
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from None
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
    for s in sets:
        apply_override(user, s)
    if seed is not None:
        user["seed"] = seed
    if out is not None:
        user["out"] = out
    validate_config(user)
    return _merge(DEFAULTS, user)


def _require(cfg: dict, dotted: str):
    node = cfg
    for p in dotted.split("."):
        if not isinstance(node, dict) or p not in node:
            raise ConfigError(f"config field {dotted} is required for this command")
        node = node[p]
    return node


# ------------------------------------------------------------------ data

def load_source(src: dict) -> ImageDataset:
    if src["kind"] == "idx":
        for key in ("images", "labels"):
            if not Path(src[key]).is_file():
                raise ConfigError(f"data source {key} file not found: {src[key]}")
        ds = load_idx(src["images"], src["labels"], src.get("name", Path(src["images"]).stem))
        if "limit" in src:
            ds = ds.subset(np.arange(min(src["limit"], len(ds))))
        resize = src.get("resize", "none")
    else:
        from .data import mnist_sample
        full = mnist_sample()
        n = len(full)
        n_train, n_test = src.get("n_train", 2000), src.get("n_test", 1000)
        if n_train + n_test > n:
            raise ConfigError(f"n_train + n_test must not exceed {n}")
        parts = split(full, (n_train / n, 1 - (n_train + n_test) / n, n_test / n), seed=src.get("split_seed", 0))
        ds = parts[0] if src.get("split", "train") == "train" else parts[2]
        resize = src.get("resize", "bilinear32")
    if resize != "none":
        ds = to_rgb32(ds, mode=resize[:-2])
    return ds


def resolve_spec(cfg: dict, ds: ImageDataset) -> ModelSpec:
    m = dict(cfg["model"])
    m.setdefault("input_shape", list(ds.shape))
    m.setdefault("n_classes", max(int(ds.labels.max()) + 1, 2))
    m["seed"] = cfg["seed"]
    try:
        spec = ModelSpec.from_dict(m)
        spec.param_shapes()
    except ValueError as e:
        raise ConfigError(f"model: {e}") from None
    if tuple(ds.shape) != spec.input_shape:
        raise ConfigError(f"model.input_shape {list(spec.input_shape)} does not match data shape {list(ds.shape)}")
    return spec


def resolve_adv(cfg: dict) -> AdvConfig:
    try:
        return AdvConfig(**{**cfg["adv"], "seed": cfg["seed"]})
    except (TypeError, ValueError) as e:
        raise ConfigError(f"adv: {e}") from None


def eval_domains(cfg: dict, base: ImageDataset) -> list[ImageDataset]:
    out = [base]
    out += [apply_shift(base, ShiftSpec(s["kind"], s["severity"], cfg["seed"])) for s in cfg["shifts"]]
    out += [apply_corruption(base, c["kind"], c["severity"], seed=cfg["seed"]) for c in cfg["corruptions"]]
    return out


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_model(path: str):
    try:
        ckpt = load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except CheckpointError as e:
        raise ConfigError(f"checkpoint {path}: {e}") from None
    return ckpt, ckpt.model()


# ------------------------------------------------------------------ commands

def cmd_train(cfg: dict, args) -> int:
    src = _require(cfg, "data.train")
    ds = load_source(src)
    spec = resolve_spec(cfg, ds)
    adv = resolve_adv(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg)
    model = BayesianModel.create(spec, seed=spec.seed) if cfg["bayesian"] else Model.create(spec)
    trainer = Trainer(model, adv, AugmentedDataset.from_source(ds))
    try:
        trainer.run()
    except NumericAbort as e:
        write_metrics(out / "metrics.jsonl", trainer.metrics)
        _write_json(out / "abort.json", e.snapshot)
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    write_metrics(out / "metrics.jsonl", trainer.metrics)
    save_checkpoint(out / "model.ckpt", model_checkpoint(trainer.model, adv, trainer.step))
    print(json.dumps({"checkpoint": str(out / "model.ckpt"), "steps": trainer.step,
                      "dataset_size": len(trainer.dataset), "flags": trainer.flags}))
    return EXIT_OK


def cmd_eval(cfg: dict, args) -> int:
    _, model = _load_model(args.checkpoint)
    sources = cfg["data"].get("eval") or [_require(cfg, "data.train")]
    reports = []
    for src in sources:
        base = load_source(src)
        if tuple(base.shape) != model.spec.input_shape:
            raise ConfigError(f"data shape {list(base.shape)} does not match checkpoint input shape "
                              f"{list(model.spec.input_shape)}")
        reports += [evaluate(model, d) for d in eval_domains(cfg, base)]
    _write_json(Path(cfg["out"]) / "eval.json", reports)
    print(json.dumps(reports, sort_keys=True))
    return EXIT_OK


def cmd_augment(cfg: dict, args) -> int:
    ckpt, model = _load_model(args.checkpoint)
    ds = load_source(_require(cfg, "data.train"))
    if tuple(ds.shape) != model.spec.input_shape:
        raise ConfigError(f"data shape {list(ds.shape)} does not match checkpoint input shape "
                          f"{list(model.spec.input_shape)}")
    adv = resolve_adv(cfg)
    ents = None
    if isinstance(model, BayesianModel):
        ents = bnn_entropy_models(model, adv.bnn_samples, derive_seed(adv.seed, 2, 1))
        model = model.mean_model()
    chunks = []
    for s in range(0, len(ds), adv.ascent_chunk):
        x_adv, _ = maximize_batch(model, ds.images[s:s + adv.ascent_chunk], ds.labels[s:s + adv.ascent_chunk],
                                  adv, ents)
        chunks.append(x_adv)
    x = np.concatenate(chunks) if chunks else ds.images[:0]
    clipped = float(np.mean((x < 0) | (x > 1))) if x.size else 0.0
    adv_ds = ImageDataset(np.clip(x, 0.0, 1.0), ds.labels.copy(), f"{ds.name}+adv", dict(ds.provenance))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_idx(adv_ds, out / "adv-images.idx", out / "adv-labels.idx")
    prov = {
        "source": ds.name,
        "source_provenance": ds.provenance,
        "checkpoint": str(args.checkpoint),
        "checkpoint_step": ckpt.step,
        "ascent": {k: getattr(adv, k) for k in ("T_max", "eta", "ascent_reduction", "gamma", "beta",
                                                      "clip_pixels")},
        "seed": cfg["seed"],
        "N": len(adv_ds),
        "fraction_clipped_on_export": clipped,
    }
    _write_json(out / "adv-provenance.json", prov)
    print(json.dumps({"images": str(out / "adv-images.idx"), "labels": str(out / "adv-labels.idx"), "N": len(adv_ds)}))
    return EXIT_OK


def _bound_reports(cfg: dict) -> list[ib.BoundReport]:
    b, seed = cfg["bounds"], cfg["seed"]
    reports = []
    p1 = b["prop1"]
    spec = ModelSpec(arch="mlp", input_shape=(8,), n_classes=5, hidden=(16,))
    for j in range(p1["models"]):
        rng = np.random.default_rng(derive_seed(seed, 10, j))
        x = rng.normal(size=(p1["n_inputs"], 8))
        reports.append(ib.verify_prop1(x, Model.create(spec, seed=derive_seed(seed, 11, j))))
    p3 = b["prop3"]
    for cy in p3["card_y"]:
        joint = ib.skewed_joint(cy, p3["minority"])
        for n in p3["N"]:
            for d in p3["delta"]:
                reports.append(ib.verify_prop3_montecarlo(joint, n, d, p3["trials"], derive_seed(seed, 12, cy, n),
                                                          bound_fn=ib.prop3_bound))
    c1 = b["corollary1"]
    for cy in c1["card_y"]:
        rng = np.random.default_rng(derive_seed(seed, 13, cy))
        n_x = 3 * cy
        joint = ib.deterministic_joint(rng.dirichlet(np.ones(n_x)), rng.integers(cy, size=n_x), cy)
        for eps in c1["epsilon"]:
            reports.append(ib.corollary1_check(joint, eps, seed=derive_seed(seed, 14, cy, int(eps * 1e6)),
                                               n_perturb=c1["n_perturb"]))
    return reports


def cmd_verify_bounds(cfg: dict, args) -> int:
    try:
        reports = _bound_reports(cfg)
    except ValueError as e:
        raise ConfigError(f"bounds: {e}") from None
    _write_json(Path(cfg["out"]) / "bounds.json", [r.to_dict() for r in reports])
    failed = [r for r in reports if not r.passed]
    print(json.dumps({"reports": len(reports), "failed": len(failed)}))
    for r in failed:
        print(f"FAILED {r.name} {json.dumps(r.inputs, sort_keys=True)}: {r.violations} violation(s) "
              f"of {r.trials}, bound {r.bound:.6g}, observed {r.observed:.6g}", file=sys.stderr)
    return EXIT_VERIFY if failed else EXIT_OK


def cmd_gradcheck(cfg: dict, args) -> int:
    g = cfg["gradcheck"]
    report = gc.run_suite(seed=cfg["seed"], n_instances=g["n_instances"], tol=g["tolerance"],
                          include_objective=g["include_objective"])
    _write_json(Path(cfg["out"]) / "gradcheck.json", report)
    for name, r in report["per_case"].items():
        print(f"{name:24s} max_rel_err={r['max_rel_err']:.3e}")
    if not report["passed"]:
        print(f"worst offender: {report['worst']} (max_rel_err={report['worst_rel_err']:.3e}); failing: "
              + ", ".join(report["failing"]), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "augment": cmd_augment,
    "verify-bounds": cmd_verify_bounds,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="meada", description="Entropy-regularized adversarial data augmentation.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="run configuration JSON")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a dotted config key (value parsed as JSON when possible)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="run seed")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("eval", "augment"):
            p.add_argument("checkpoint", help="model checkpoint written by train")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = load_run_config(args.config, args.set, args.seed, args.out)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except IDXError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
