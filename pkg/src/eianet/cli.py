"""Command line: ``python -m eianet <command> ...``.

Commands print one JSON object to stdout. Training commands also write a
JSON-lines metrics file next to their checkpoint. Exit codes: 0 ok,
1 validation failed, 2 configuration error, 3 I/O or format error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path
from typing import IO, Any, Dict, List, Optional, Sequence

from . import data
from .checkpoint import load_checkpoint, save_checkpoint
from .config import DIV_SIGNS, RunConfig
from .errors import ConfigError, ContractError, DataError, DimensionError, FormatError
from .encoder import head_matrix
from .etf import EtfClassifier, build_etf, validate_etf
from .pipeline import adapt, evaluate, nc_report, train_source
from .tensor import Tensor

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

SOURCE_CKPT = "source.ckpt"
ADAPTED_CKPT = "adapted.ckpt"
METRICS_FILE = "metrics.jsonl"


def dumps(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, allow_nan=True)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _widths(text: str) -> List[int]:
    try:
        return [int(w) for w in text.split(",") if w.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"widths must be comma-separated ints, got {text!r}") from None


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with RunConfig fields")
    group = p.add_argument_group("config overrides")
    for f in dataclasses.fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        default = f.default
        if f.name == "widths":
            group.add_argument(flag, dest=f.name, type=_widths, default=None, metavar="W1,W2,...")
        elif f.name == "div_sign":
            group.add_argument(flag, dest=f.name, choices=DIV_SIGNS, default=None)
        elif isinstance(default, bool):
            group.add_argument(flag, dest=f.name, type=_bool, default=None, metavar="BOOL")
        elif isinstance(default, int):
            group.add_argument(flag, dest=f.name, type=int, default=None)
        else:
            group.add_argument(flag, dest=f.name, type=float, default=None)


def _read_config_file(path: Path) -> Dict[str, Any]:
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise OSError(f"{path}: not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return raw


def _config_from_args(args: argparse.Namespace, base: Optional[RunConfig] = None) -> RunConfig:
    """Layering: ``base`` (e.g. a checkpoint's config), then keys in ``--config``, then flags."""
    values: Dict[str, Any] = base.to_dict() if base is not None else {}
    for layer in (
        _read_config_file(args.config) if args.config is not None else {},
        {f.name: getattr(args, f.name) for f in dataclasses.fields(RunConfig) if getattr(args, f.name) is not None},
    ):
        if "M" in layer and "alpha" not in layer:
            values["alpha"] = None
        values.update(layer)
    return RunConfig.from_dict(values)


class _MetricsWriter:
    def __init__(self, path: Path):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh: IO[str] = open(path, "w", encoding="utf-8", newline="\n")

    def __call__(self, record: Dict[str, Any]) -> None:
        self.fh.write(dumps(record) + "\n")
        self.fh.flush()

    def close(self) -> None:
        self.fh.close()


# -- commands --------------------------------------------------------------------
def cmd_gen_data(args: argparse.Namespace, out: IO[str]) -> int:
    src, tgt = data.generate(
        args.K, args.per_class, args.shift, args.seed, mode=args.mode, image_size=args.image_size
    )
    root = Path(args.out)
    data.save(src, root / "source")
    data.save(tgt, root / "target")
    print(
        dumps(
            {
                "source": str(root / "source"),
                "target": str(root / "target"),
                "n_source": len(src),
                "n_target": len(tgt),
                "K": args.K,
                "shift": data.resolve_shift(args.shift),
            }
        ),
        file=out,
    )
    return EXIT_OK


def cmd_train_source(args: argparse.Namespace, out: IO[str]) -> int:
    cfg = _config_from_args(args)
    source = data.load(args.data)
    outdir = Path(args.out)
    writer = _MetricsWriter(outdir / METRICS_FILE)
    try:
        ckpt, records = train_source(cfg, source, sink=writer)
    finally:
        writer.close()
    path = save_checkpoint(ckpt, outdir / SOURCE_CKPT)
    final = records[-1]
    summary = {k: final[k] for k in ("epoch", "ce_loss", "source_train_acc", "source_test_acc")}
    print(dumps({"checkpoint": str(path), **summary}), file=out)
    return EXIT_OK


def cmd_adapt(args: argparse.Namespace, out: IO[str]) -> int:
    source_ckpt = load_checkpoint(args.checkpoint)
    cfg = _config_from_args(args, base=source_ckpt.config)
    target = data.load(args.data)
    outdir = Path(args.out)
    writer = _MetricsWriter(outdir / METRICS_FILE)
    try:
        ckpt, records = adapt(source_ckpt, target, cfg, sink=writer)
    finally:
        writer.close()
    path = save_checkpoint(ckpt, outdir / ADAPTED_CKPT)
    print(
        dumps(
            {
                "checkpoint": str(path),
                "source_only_target_acc": records[0]["target_acc"],
                "target_acc": records[-1]["target_acc"],
                "epochs": cfg.epochs_adapt,
            }
        ),
        file=out,
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, out: IO[str]) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    print(dumps(evaluate(ckpt, data.load(args.data), args.split)), file=out)
    return EXIT_OK


def cmd_etf_check(args: argparse.Namespace, out: IO[str]) -> int:
    if args.checkpoint is not None:
        ckpt = load_checkpoint(args.checkpoint)
        M = head_matrix(ckpt.head).data
        c = ckpt.head if isinstance(ckpt.head, EtfClassifier) else EtfClassifier(Tensor(M), M.shape[1], M.shape[0], -1)
    else:
        if args.K is None or args.d is None:
            raise ConfigError("etf-check needs --checkpoint or both --K and --d")
        c = build_etf(args.K, args.d, args.seed)
    report = validate_etf(c, args.tolerance)
    print(dumps(report.to_dict()), file=out)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_nc_report(args: argparse.Namespace, out: IO[str]) -> int:
    report = nc_report(load_checkpoint(args.checkpoint), data.load(args.data))
    print(dumps(report), file=out)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="python -m eianet", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="render a synthetic source/target pair")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--classes", "--K", dest="K", type=int, default=10)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--shift", default="default", help="preset name or JSON object")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mode", choices=("standard", "fine"), default="standard")
    p.add_argument("--image-size", type=int, default=data.IMAGE_SIZE)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-source", help="supervised training on a source dataset")
    p.add_argument("--data", required=True, type=Path, help="source dataset directory")
    p.add_argument("--out", required=True, type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_train_source)

    p = sub.add_parser("adapt", help="source-free adaptation on unlabelled target images")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path, help="target dataset directory")
    p.add_argument("--out", required=True, type=Path)
    _add_config_flags(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("eval", help="classification accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--split", choices=("all", "train", "test"), default="all")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("etf-check", help="validate a classifier matrix against the simplex ETF identities")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--K", type=int)
    p.add_argument("--d", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-9)
    p.set_defaults(func=cmd_etf_check)

    p = sub.add_parser("nc-report", help="neural-collapse metrics on a labelled dataset")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", required=True, type=Path)
    p.set_defaults(func=cmd_nc_report)
    return parser


def main(argv: Optional[Sequence[str]] = None, stdout: Optional[IO[str]] = None, stderr: Optional[IO[str]] = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        return args.func(args, stdout)
    except (ConfigError, DimensionError, DataError, ContractError) as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_CONFIG
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_IO


__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_CHECK_FAILED", "EXIT_CONFIG", "EXIT_IO"]
