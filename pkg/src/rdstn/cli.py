"""Command-line entry points: split, train, eval, upscale, ablate.

Every command prints a one-line JSON summary of written artifacts on
success. Failures print a one-line JSON object on stderr and exit with 1
(bad input) or 2 (internal failure, including training divergence).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path
from typing import Callable, Sequence

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .checkpoint import CheckpointError, ConfigMismatchError
from .data import DatasetSplit, EmptyDatasetError, load_image, save_image, split_dataset
from .evaluation import (
    BenchmarkTable,
    Row,
    emit_report,
    eval_scale_sweep,
    generalization_eval,
    mean_psnr_over_scales,
)
from .model import upscale
from .training import AblationSetting, DivergenceError, TrainConfig, fit, load_model, load_split_images

log = logging.getLogger("rdstn")

DATA_ROOT_ENV = "RDSTN_DATA_ROOT"


class UserError(Exception):
    """Bad arguments or inputs; maps to exit code 1."""


USER_ERRORS = (UserError, ValueError, FileNotFoundError, NotADirectoryError, CheckpointError, tomllib.TOMLDecodeError)


# ---------------------------------------------------------------------------
# Parsing helpers


def parse_floats(text: str) -> list[float]:
    text = text.strip()
    if not text:
        return []
    try:
        return [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def parse_ints(text: str) -> list[int]:
    text = text.strip()
    if not text:
        return []
    try:
        return [int(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def parse_target(text: str, h: int, w: int) -> tuple[int, int]:
    """``"2.5"`` scales both sides; ``"HxW"`` gives the output size directly."""
    low = text.lower()
    if "x" in low:
        parts = low.split("x")
        if len(parts) != 2:
            raise UserError(f"bad size {text!r}; expected HxW")
        try:
            th, tw = int(parts[0]), int(parts[1])
        except ValueError:
            raise UserError(f"bad size {text!r}; expected HxW") from None
        if th < 1 or tw < 1:
            raise UserError(f"size must be positive, got {text!r}")
        return th, tw
    try:
        s = float(text)
    except ValueError:
        raise UserError(f"bad scale {text!r}; expected a factor or HxW") from None
    if not s > 0:
        raise UserError(f"scale must be positive, got {s}")
    return max(1, round(s * h)), max(1, round(s * w))


_FIELD_TYPES: dict[str, Callable[[str], object]] = {
    "str": str,
    "int": int,
    "float": float,
    "bool": parse_bool,
    "list[int]": parse_ints,
    "list[float]": parse_floats,
}


def add_config_flags(parser: argparse.ArgumentParser) -> None:
    """One ``--key value`` flag per :class:`TrainConfig` field."""
    group = parser.add_argument_group("config overrides")
    for f in dataclasses.fields(TrainConfig):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        group.add_argument(
            f"--{f.name}",
            type=_FIELD_TYPES[str(f.type)],
            default=argparse.SUPPRESS,
            metavar=str(f.type).upper().replace("LIST[", "").replace("]", "S"),
            help=f"(default: {default!r})",
        )


def read_config_file(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UserError(f"config file not found: {path}")
    if path.suffix == ".json":
        obj = json.loads(path.read_text())
    else:
        with open(path, "rb") as fh:
            obj = tomllib.load(fh)
    if not isinstance(obj, dict):
        raise UserError(f"{path}: config must be a table of keys")
    return obj


def resolve_config(args: argparse.Namespace) -> TrainConfig:
    values = read_config_file(args.config) if args.config else {}
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    values.update({k: v for k, v in vars(args).items() if k in names})
    return TrainConfig.from_dict(values)


def data_root(explicit: str | None) -> str | None:
    return os.environ.get(DATA_ROOT_ENV) or explicit or None


def resolve_split(config: TrainConfig) -> DatasetSplit:
    """Manifest if given (its root may be redirected by the env var), else a fresh split of ``data_dir``."""
    override = os.environ.get(DATA_ROOT_ENV)
    if config.manifest:
        path = Path(config.manifest)
        if not path.is_file():
            raise UserError(f"manifest not found: {path}")
        split = DatasetSplit.load(path)
        if override:
            split.root = override
        return split
    root = data_root(config.data_dir)
    if not root:
        raise UserError(f"no training data: set data_dir, manifest or ${DATA_ROOT_ENV}")
    if not Path(root).is_dir():
        raise UserError(f"data directory not found: {root}")
    return split_dataset(root, config.split_ratio, config.split_seed)


# ---------------------------------------------------------------------------
# Commands


def cmd_split(args) -> dict:
    root = data_root(args.data_dir)
    if not root or not Path(root).is_dir():
        raise UserError(f"data directory not found: {root}")
    split = split_dataset(root, args.ratio, args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    split.save(out)
    return {"manifest": str(out), "train": len(split.train_paths), "test": len(split.test_paths)}


def cmd_train(args) -> dict:
    config = resolve_config(args)
    split = resolve_split(config)
    result = fit(config, split, config.out_dir, resume=args.resume)
    return {
        "last": str(result.last),
        "best": str(result.best),
        "log": str(Path(config.out_dir) / "train_log.jsonl"),
        "checksum": result.checksum,
        "final_loss": result.losses[-1] if result.losses else None,
    }


def cmd_eval(args) -> dict:
    method = args.method or ("rdstn" if args.checkpoint else None)
    if method is None:
        raise UserError("pass --checkpoint or --method bicubic")
    model, ckpt_id = None, None
    if method == "rdstn":
        if not args.checkpoint:
            raise UserError("--method rdstn needs --checkpoint")
        model, ckpt = load_model(args.checkpoint)
        ckpt_id = ckpt.checksum
    if bool(args.manifest) == bool(args.data_dir):
        raise UserError("pass exactly one of --manifest or --data_dir")
    channels = model.config.encoder.in_channels if model else args.channels
    if args.manifest:
        split = DatasetSplit.load(args.manifest)
        if os.environ.get(DATA_ROOT_ENV):
            split.root = os.environ[DATA_ROOT_ENV]
        table = eval_scale_sweep(method, split, args.scales, model, args.sigma, args.seed, channels)
    else:
        directory = Path(args.data_dir)
        if not directory.is_dir():
            raise UserError(f"data directory not found: {directory}")
        table = generalization_eval(method, directory, args.scales, model, args.sigma, channels)
    table.metadata.update({"checkpoint": ckpt_id, "noise_sigma": float(args.sigma), "noise_seed": args.seed})
    csv_path, json_path = emit_report(table, args.out_dir, args.stem)
    return {"csv": str(csv_path), "json": str(json_path)}


def cmd_upscale(args) -> dict:
    model, _ = load_model(args.checkpoint)
    src = Path(args.input)
    if not src.is_file():
        raise UserError(f"input image not found: {src}")
    img = load_image(src, model.config.encoder.in_channels)
    th, tw = parse_target(args.scale, img.shape[1], img.shape[2])
    out = upscale(model, img, th, tw, use_ensemble=not args.no_ensemble)
    dst = Path(args.output)
    dst.parent.mkdir(parents=True, exist_ok=True)
    save_image(out, dst)
    return {"output": str(dst), "height": th, "width": tw}


def cmd_ablate(args) -> dict:
    base = resolve_config(args)
    split = resolve_split(base)
    out_root = Path(args.out_dir or base.out_dir)
    settings = [AblationSetting.parse(s) for s in args.settings]
    rows, checkpoints, failures = [], {}, {}
    for setting in settings:
        config = dataclasses.replace(base, ablation=setting.name, out_dir=str(out_root / setting.name))
        try:
            result = fit(config, split, config.out_dir)
            model, _ = load_model(result.best)
            images = load_split_images(split.resolve("test"), config.channels) or load_split_images(
                split.resolve("train"), config.channels
            )
            for scale in config.eval_scales:
                score = mean_psnr_over_scales(model, images, [scale])
                rows.append(Row(setting.name, float(scale), score, len(images)))
            checkpoints[setting.name] = str(result.best)
        except Exception as exc:  # isolate one setting's failure from the rest
            log.error("ablation %s failed: %s", setting.name, exc)
            failures[setting.name] = f"{type(exc).__name__}: {exc}"
    summary: dict = {"checkpoints": checkpoints, "failed": failures}
    if rows:
        meta = {"dataset": split.root, "split_seed": split.seed, "settings": [s.name for s in settings]}
        if failures:
            meta["failed"] = failures
        csv_path, json_path = emit_report(BenchmarkTable(rows, meta), out_root, "ablation")
        summary.update({"csv": str(csv_path), "json": str(json_path)})
    if failures:
        raise PartialFailure(summary)
    return summary


class PartialFailure(Exception):
    def __init__(self, summary: dict):
        self.summary = summary
        super().__init__(f"{len(summary['failed'])} ablation setting(s) failed: {sorted(summary['failed'])}")


# ---------------------------------------------------------------------------
# Parser


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(1, json.dumps({"error": "UsageError", "exit": 1, "message": f"{self.prog}: {message}"}) + "\n")


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="rdstn", description="Arbitrary-scale super-resolution toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("split", help="write a seeded train/test manifest")
    p.add_argument("data_dir", nargs="?", help=f"image directory (default: ${DATA_ROOT_ENV})")
    p.add_argument("--ratio", type=float, default=0.8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="split.json", help="manifest path")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="TOML or JSON file of config keys")
    p.add_argument("--resume", action="store_true", help="continue from <out_dir>/last.ckpt")
    add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="PSNR sweep over scales")
    p.add_argument("--checkpoint")
    p.add_argument("--method", choices=["bicubic", "rdstn"])
    p.add_argument("--manifest", help="evaluate on the manifest's test split")
    p.add_argument("--data_dir", help="evaluate on every image in a directory")
    p.add_argument("--scales", type=parse_floats, default=[2.0, 3.0, 4.0], help="comma-separated, e.g. 1.6,2,4")
    p.add_argument("--sigma", type=float, default=0.0, help="Gaussian noise std added to the LR input")
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.add_argument("--channels", type=int, default=1, help="channels for bicubic runs")
    p.add_argument("--out_dir", default=".")
    p.add_argument("--stem", default="report")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("upscale", help="super-resolve one image")
    p.add_argument("checkpoint")
    p.add_argument("input")
    p.add_argument("scale", help="factor (e.g. 2.5) or output size HxW")
    p.add_argument("output")
    p.add_argument("--no-ensemble", action="store_true", help="nearest-code decoding only")
    p.set_defaults(func=cmd_upscale)

    p = sub.add_parser("ablate", help="train and evaluate the S1-S4 fusion settings")
    p.add_argument("--config", help="TOML or JSON file of config keys")
    p.add_argument("--settings", nargs="+", default=[s.name for s in AblationSetting])
    add_config_flags(p)
    p.set_defaults(func=cmd_ablate)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    print(json.dumps({"error": type(exc).__name__, "exit": code, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        summary = args.func(args)
    except PartialFailure as exc:
        print(json.dumps(exc.summary, sort_keys=True))
        return _fail(2, exc)
    except DivergenceError as exc:
        return _fail(2, exc)
    except (EmptyDatasetError, ConfigMismatchError) + USER_ERRORS as exc:
        return _fail(1, exc)
    except Exception as exc:
        log.debug("internal error", exc_info=True)
        return _fail(2, exc)
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
