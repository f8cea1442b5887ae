"""Command-line interface: train, eval, encode, decode, ablate, report.

Every command exits 0 on success; failures print a single machine-parsable
line ``error: <ExceptionType>: <message>`` to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .data import load_dataset, read_pgm, write_pgm
from .metrics import EVAL_CSV_HEADER
from .quantizer import quantize_batch
from .trainer import (
    NAMED_CONFIGS,
    TrainConfig,
    evaluate,
    load_checkpoint,
    load_config_file,
    make_config,
    report_ablation,
    train_run,
)


class _OneLineParser(argparse.ArgumentParser):
    """argparse parser whose usage errors stay on one stderr line."""

    def error(self, message: str):
        print(f"error: UsageError: {' '.join(message.split())}", file=sys.stderr)
        raise SystemExit(2)


def _resolve_config(spec: str, seed: int, args) -> TrainConfig:
    overrides = {}
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.codebook_size is not None:
        overrides["codebook_size"] = args.codebook_size
    if args.latent_dim is not None:
        overrides["latent_dim"] = args.latent_dim
    if spec in NAMED_CONFIGS or spec == "custom":
        return make_config(spec, seed=seed, **overrides)
    path = Path(spec)
    if not path.is_file():
        raise FileNotFoundError(
            f"config {spec!r} is neither a named configuration "
            f"({', '.join(sorted(NAMED_CONFIGS))}, custom) nor a file"
        )
    cfg = load_config_file(path)
    return dataclasses.replace(cfg, seed=seed, **overrides)


def _cmd_train(args) -> int:
    cfg = _resolve_config(args.config, args.seed, args)
    history = train_run(cfg, args.out, export_test_data=args.export_data)
    final = history[-1].report
    print(
        f"{cfg.run_id}: epoch {final.epoch} psnr {final.psnr:.3f} dB "
        f"mse {final.mse:.6f} utilization {final.utilization:.3f}"
    )
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(
        ckpt.model,
        ckpt.codebook,
        dataset.values,
        run_id=ckpt.config.run_id,
        config_name=ckpt.config.config_name,
        epoch=ckpt.epoch,
        batch_size=ckpt.config.batch_size,
    )
    Path(args.out).write_text(
        EVAL_CSV_HEADER + "\n" + report.to_csv_row() + "\n", encoding="utf-8"
    )
    print(report.to_csv_row())
    return 0


def _cmd_encode(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    image = read_pgm(args.image)
    expected = (ckpt.config.image_size, ckpt.config.image_size)
    if image.shape != expected:
        raise ValueError(f"image shape {image.shape} does not match model {expected}")
    posterior = ckpt.model.encode(image[None])
    qr = quantize_batch(posterior.mu, ckpt.codebook)
    Path(args.out).write_text(
        "".join(f"{int(i)}\n" for i in qr.indices), encoding="ascii"
    )
    return 0


def _cmd_decode(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    lines = [
        line.strip()
        for line in Path(args.tokens).read_text(encoding="ascii").splitlines()
        if line.strip()
    ]
    indices = np.array([int(line) for line in lines], dtype=np.int64)
    expected = ckpt.model.tokens_per_image
    if indices.shape[0] != expected:
        raise ValueError(f"expected {expected} token lines, got {indices.shape[0]}")
    if indices.size and (indices.min() < 0 or indices.max() >= ckpt.codebook.size):
        raise ValueError(
            f"token index out of range for codebook size {ckpt.codebook.size}"
        )
    z_q = ckpt.codebook.entries[indices].astype(np.float64)
    image = ckpt.model.decode(z_q)[0]
    write_pgm(args.out, image)
    return 0


def _cmd_ablate(args) -> int:
    names = [name for name in args.configs.split(",") if name]
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if not names or not seeds:
        raise ValueError("ablate needs at least one config and one seed")
    overrides = {}
    for key in ("epochs", "codebook_size", "latent_dim", "n_train", "n_test"):
        value = getattr(args, key)
        if value is not None:
            overrides[key] = value
    out = Path(args.out)
    run_dirs = []
    for name in names:
        for seed in seeds:
            cfg = make_config(name, seed=seed, **overrides)
            run_dir = out / cfg.run_id
            train_run(cfg, run_dir)
            run_dirs.append(run_dir)
            print(f"completed {cfg.run_id}")
    table = report_ablation(run_dirs, out / "ablation.csv")
    print(table, end="")
    return 0


def _cmd_report(args) -> int:
    table = report_ablation(args.runs, args.out)
    print(table, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _OneLineParser(
        prog="varvq",
        description="Variational vector-quantization training and evaluation",
    )
    sub = parser.add_subparsers(dest="command", parser_class=_OneLineParser)

    p_train = sub.add_parser("train", help="train one configuration")
    p_train.add_argument("--config", required=True, help="named config or config file")
    p_train.add_argument("--out", required=True, help="output directory")
    p_train.add_argument("--seed", required=True, type=int)
    p_train.add_argument("--epochs", type=int, default=None)
    p_train.add_argument("--codebook-size", dest="codebook_size", type=int, default=None)
    p_train.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    p_train.add_argument("--export-data", dest="export_data", action="store_true")
    p_train.set_defaults(func=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint on a PGM dataset")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--data", required=True, help="dataset manifest file")
    p_eval.add_argument("--out", required=True, help="output CSV path")
    p_eval.set_defaults(func=_cmd_eval)

    p_encode = sub.add_parser("encode", help="encode one PGM image to token indices")
    p_encode.add_argument("--checkpoint", required=True)
    p_encode.add_argument("--image", required=True)
    p_encode.add_argument("--out", required=True, help="token file, one index per line")
    p_encode.set_defaults(func=_cmd_encode)

    p_decode = sub.add_parser("decode", help="decode token indices to a PGM image")
    p_decode.add_argument("--checkpoint", required=True)
    p_decode.add_argument("--tokens", required=True)
    p_decode.add_argument("--out", required=True)
    p_decode.set_defaults(func=_cmd_decode)

    p_ablate = sub.add_parser("ablate", help="run several configs x seeds and tabulate")
    p_ablate.add_argument("--configs", required=True, help="comma-separated names")
    p_ablate.add_argument("--out", required=True)
    p_ablate.add_argument("--seeds", required=True, help="comma-separated integers")
    p_ablate.add_argument("--epochs", type=int, default=None)
    p_ablate.add_argument("--codebook-size", dest="codebook_size", type=int, default=None)
    p_ablate.add_argument("--latent-dim", dest="latent_dim", type=int, default=None)
    p_ablate.add_argument("--n-train", dest="n_train", type=int, default=None)
    p_ablate.add_argument("--n-test", dest="n_test", type=int, default=None)
    p_ablate.set_defaults(func=_cmd_ablate)

    p_report = sub.add_parser("report", help="tabulate completed run directories")
    p_report.add_argument("--runs", required=True, nargs="+")
    p_report.add_argument("--out", required=True)
    p_report.set_defaults(func=_cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not hasattr(args, "func"):
            parser.error("a subcommand is required")
        return args.func(args)
    except SystemExit as exc:  # argparse help/usage paths
        code = exc.code
        return code if isinstance(code, int) else 0
    except Exception as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
