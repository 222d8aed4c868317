"""Command-line entry point.

Subcommands: gen-synthetic, train, eval, maps, inspect.  Runs are driven
by a JSON config file (``config-version`` 1) with dot-path ``--set``
overrides; machine-readable results go to stdout, diagnostics to stderr.

Exit codes: 0 success, 2 configuration/spec error, 3 I/O failure,
4 shape/transfer/format violation, 5 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from . import models as MODELS
from . import training as TR
from .errors import (
    CheckpointError,
    ConfigError,
    ContractError,
    DataError,
    MetricError,
    NumericError,
    ShapeError,
    TransferError,
)

CONFIG_VERSION = 1

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_FORMAT = 4
EXIT_NUMERIC = 5

_EXIT_BY_ERROR = (
    (NumericError, EXIT_NUMERIC),
    ((ShapeError, TransferError, CheckpointError, ContractError), EXIT_FORMAT),
    ((ConfigError, DataError, MetricError), EXIT_CONFIG),
    (OSError, EXIT_IO),
)


def _fail(code: int, message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _exit_code_for(exc: Exception) -> int:
    for types, code in _EXIT_BY_ERROR:
        if isinstance(exc, types):
            return code
    raise exc


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _apply_overrides(config: dict, overrides: list[str]) -> dict:
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects dot.path=value, got {item!r}")
        path, raw = item.split("=", 1)
        target = config
        keys = path.split(".")
        for key in keys[:-1]:
            target = target.setdefault(key, {})
            if not isinstance(target, dict):
                raise ConfigError(f"--set path {path!r} crosses a non-object value")
        target[keys[-1]] = _parse_value(raw)
    return config


def _load_config(path: str | None, overrides: list[str]) -> dict:
    if path is None:
        config = {"config-version": CONFIG_VERSION}
    else:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            config = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    config = _apply_overrides(config, overrides)
    version = config.get("config-version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config-version {version}")
    return config


def _require_manifest(config: dict) -> D.Manifest:
    path = config.get("data", {}).get("manifest")
    if path is None:
        raise ConfigError("config is missing data.manifest")
    if not Path(path).exists():
        raise ConfigError(f"dataset manifest not found: {path}")
    return D.Manifest.load(path)


def _model_from_config(config: dict, seed: int):
    model_cfg = config.get("model")
    if model_cfg is None:
        raise ConfigError("config is missing the model section")
    return MODELS.build_model(model_cfg, seed=seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_synthetic(args) -> int:
    try:
        spec_doc = json.loads(Path(args.spec).read_text())
        spec = D.SyntheticSpec(**spec_doc)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot read spec: {exc}")
    except (TypeError, json.JSONDecodeError, DataError) as exc:
        return _fail(EXIT_CONFIG, f"bad synthetic spec: {exc}")
    try:
        manifest = D.gen_synthetic(spec, args.out)
    except OSError as exc:
        return _fail(EXIT_IO, f"cannot write dataset: {exc}")
    labels = np.array([e.labels for e in manifest.entries])
    print(
        json.dumps(
            {
                "out": str(args.out),
                "samples": len(manifest.entries),
                "views_per_sample": spec.views,
                "positives_per_head": labels.sum(axis=0).tolist(),
            }
        )
    )
    return 0


def cmd_train(args) -> int:
    try:
        config = _load_config(args.config, args.set or [])
        train_section = dict(config.get("train", {}))
        train_section["stage"] = args.stage
        try:
            cfg = TR.TrainConfig(**train_section)
        except TypeError as exc:
            raise ConfigError(f"bad train section: {exc}") from exc
        manifest = _require_manifest(config)
        model = _model_from_config(config, seed=cfg.seed)
        if args.init:
            source_state, source_cfg = ckpt.load(args.init)
            copied = MODELS.transfer_weights(source_state, source_cfg, model)
            print(f"transferred {copied} tensors from {args.init}", file=sys.stderr)
        state, log = TR.train(cfg, manifest, model)
        result = TR.evaluate(model, manifest, cfg.stage, patch_cfg=cfg)
        log.final.update(result.to_json())
        ckpt.save(args.out, state, MODELS.model_config(model))
        if args.log:
            log.to_jsonl(args.log)
        print(json.dumps({"checkpoint": str(args.out), **log.final}))
        return 0
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        return _fail(_exit_code_for(exc), str(exc))


def cmd_eval(args) -> int:
    try:
        config = _load_config(args.config, args.set or [])
        state, model_cfg = ckpt.load(args.checkpoint)
        model = MODELS.build_model(model_cfg)
        model.load_state_dict(state)
        manifest = D.Manifest.load(args.manifest)
        stage = args.stage or config.get("train", {}).get("stage")
        if stage is None:
            stage = _default_stage(model_cfg, manifest)
        result = TR.evaluate(model, manifest, stage)
        print(json.dumps(result.to_json()))
        return 0
    except Exception as exc:  # noqa: BLE001
        return _fail(_exit_code_for(exc), str(exc))


def _default_stage(model_cfg: dict, manifest: D.Manifest) -> str:
    kind = model_cfg.get("kind")
    if kind in ("phybonet", "physenet"):
        return "four-view"
    if kind == "phunet":
        return "segmentation"
    if model_cfg.get("heads", 1) == 5:
        return "patch"
    return "two-view"


def cmd_maps(args) -> int:
    try:
        state, model_cfg = ckpt.load(args.checkpoint)
        model = MODELS.build_model(model_cfg)
        model.load_state_dict(state)
        manifest = D.Manifest.load(args.manifest)
        matches = [e for e in manifest.entries if e.id == args.sample]
        if not matches:
            raise ShapeError(f"sample id {args.sample!r} not present in manifest")
        views = manifest.load_views(matches[0])
        written = TR.export_maps(model, views, args.out)
        print(json.dumps({"written": written}))
        return 0
    except Exception as exc:  # noqa: BLE001
        return _fail(_exit_code_for(exc), str(exc))


def cmd_inspect(args) -> int:
    try:
        state, model_cfg = ckpt.load(args.checkpoint)
        model = MODELS.build_model(model_cfg)
        total = model.param_count()
        ratio = MODELS.hypercomplex_param_ratio(model)
        rows = [
            {"name": name, "dtype": str(arr.dtype), "shape": list(arr.shape)}
            for name, arr in sorted(state.items())
        ]
        print(
            json.dumps(
                {
                    "model": model_cfg,
                    "tensors": rows,
                    "trainable_params": total,
                    "ratio_vs_real": round(ratio, 6),
                }
            )
        )
        return 0
    except Exception as exc:  # noqa: BLE001
        return _fail(_exit_code_for(exc), str(exc))


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phcnet",
        description="Parameterized hypercomplex networks: synthetic data, "
        "staged training, evaluation, map export, checkpoint inspection.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synthetic", help="render a synthetic multi-view dataset")
    p.add_argument("--spec", required=True, help="JSON SyntheticSpec file")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_synthetic)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--stage", required=True,
                   choices=["patch", "two-view", "four-view", "segmentation"])
    p.add_argument("--init", help="checkpoint to transfer weights from")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--log", help="write the run log as line-delimited JSON")
    p.add_argument("--set", action="append", metavar="PATH=VALUE",
                   help="override a config value (dot path, JSON value)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--config", help="JSON run config (optional)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage",
                   choices=["patch", "two-view", "four-view", "segmentation"])
    p.add_argument("--set", action="append", metavar="PATH=VALUE")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("maps", help="export activation and saliency maps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--sample", required=True, help="entry id")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_maps)

    p = sub.add_parser("inspect", help="print checkpoint tensors and parameter ratio")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
