"""Command-line surface for the package.

Subcommands: ``gen-data`` (synthetic pair corpus), ``train-langae``
(autoencoder pretraining), ``train-denoiser`` (supervised denoiser with
latent alignment), ``eval`` (JSON-lines metric report), ``bench-scan``
(scan wall-time CSV), ``export-tokens`` (token readout for one image).
The shared flags --config/--seed/--threads are accepted by every
subcommand. Exit codes: 0 success, 2 configuration or usage problem,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import glob
import os
import sys
from collections import Counter
from typing import List, Optional

import numpy as np

from langct import __version__
from langct.config import (
    Config,
    ConfigError,
    default_config,
    format_config,
    read_config,
)
from langct.denoiser import (
    ABLATION_ARMS,
    SeedDenoiser,
    denoise_hook,
    train_denoiser,
)
from langct.io import PhantomPair, load_checkpoint, load_pair
from langct.langae import DOWNSAMPLE, Encoder, LangAutoencoder, train_langae
from langct.metrics import bench_scan, bench_to_csv, evaluate
from langct.phantom import TRAIN_WINDOW, generate_dataset, hu_window
from langct.quantize import Codebook, PyramidLayout
from langct.tensor import Tensor

_SURROGATE_SEED_OFFSET = 104729  # keep in step with train_denoiser


def _seed_value(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must fit in u64, got {text}")
    return value


def _limit_threads(n: Optional[int]) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigError(f"--threads must be positive, got {n}")
    import threadpoolctl

    threadpoolctl.threadpool_limits(limits=n)


def _load_config(args: argparse.Namespace) -> Config:
    return read_config(args.config) if args.config else default_config()


def _load_pairs(data_dir: str, limit: Optional[int] = None) -> List[PhantomPair]:
    paths = sorted(glob.glob(os.path.join(data_dir, "*.lmpd")))
    if not paths:
        raise ConfigError(f"no pair files (*.lmpd) under {data_dir!r}")
    if limit is not None:
        paths = paths[:limit]
    return [load_pair(p) for p in paths]


def _build_autoencoder(cfg: Config, seed: int) -> LangAutoencoder:
    layout = PyramidLayout.default(cfg.grid(), cfg.codebook.thresholds)
    codebook = Codebook.default(
        cfg.codebook.vocab_size, cfg.codebook.dim, cfg.codebook.seed
    )
    widths = tuple(cfg.langae.widths)
    return LangAutoencoder(layout, codebook, np.random.default_rng(seed), widths)


def _load_autoencoder(path: str, cfg: Config) -> LangAutoencoder:
    model = _build_autoencoder(cfg, seed=0)
    try:
        model.load_state_dict(load_checkpoint(path))
    except (KeyError, ValueError) as exc:
        raise ConfigError(
            f"checkpoint {path!r} does not match the configured autoencoder: {exc}"
        ) from None
    return model.freeze()


def _load_denoiser(
    path: str, ae: LangAutoencoder, cfg: Config, seed: int, ablate: Optional[str]
) -> SeedDenoiser:
    encoder = ae.encoder
    if ablate == "resnet-encoder":
        surrogate = Encoder(
            np.random.default_rng(seed + _SURROGATE_SEED_OFFSET),
            ae.codebook.dim,
            encoder.widths,
        )
        encoder = surrogate.freeze()
    d = cfg.denoiser
    model = SeedDenoiser(
        encoder,
        np.random.default_rng(seed),
        state_size=d.state_size,
        step=d.step_size,
        expand=d.expand,
        reduction=d.reduction,
        use_ema=ablate != "no-ema",
        head_gain=d.head_gain,
    )
    try:
        model.load_state_dict(load_checkpoint(path))
    except (KeyError, ValueError) as exc:
        raise ConfigError(
            f"checkpoint {path!r} does not match the configured denoiser"
            f" (wrong --ablate or denoiser.* settings?): {exc}"
        ) from None
    return model


def _write_text(path: Optional[str], text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


# -- subcommands -------------------------------------------------------------

def cmd_gen_data(args: argparse.Namespace, cfg: Config) -> int:
    count = args.count if args.count is not None else cfg.data.count
    size = args.size if args.size is not None else cfg.data.size
    dose = args.dose if args.dose is not None else cfg.data.dose
    os.makedirs(args.out, exist_ok=True)
    generate_dataset(count, size=size, dose=dose, seed=args.seed, out_dir=args.out)
    print(f"wrote {count} pairs ({size}x{size}, dose {dose}) to {args.out}")
    return 0


def cmd_train_langae(args: argparse.Namespace, cfg: Config) -> int:
    pairs = _load_pairs(args.data)
    images = np.stack([hu_window(p.ndct, *TRAIN_WINDOW) for p in pairs])
    side = images.shape[1]
    if side != cfg.grid() * DOWNSAMPLE:
        raise ConfigError(
            f"data is {side}px but config implies {cfg.grid() * DOWNSAMPLE}px images"
        )
    layout = PyramidLayout.default(cfg.grid(), cfg.codebook.thresholds)
    codebook = Codebook.default(
        cfg.codebook.vocab_size, cfg.codebook.dim, cfg.codebook.seed
    )
    lc = cfg.langae
    steps = args.steps if args.steps is not None else lc.steps
    _, history = train_langae(
        images,
        steps=steps,
        batch_size=lc.batch_size,
        seed=args.seed,
        base_lr=lc.base_lr,
        floor_lr=lc.floor_lr,
        codebook=codebook,
        layout=layout,
        widths=tuple(lc.widths),
        checkpoint_path=args.out,
        semantic_weight=lc.semantic_weight,
        commit_weight=lc.commit_weight,
        adversarial_weight=lc.adversarial_weight,
        perceptual_weight=lc.perceptual_weight,
    )
    last = history[-1]
    print(
        f"trained {steps} steps on {len(pairs)} images;"
        f" final loss {last['total']:.6f} -> {args.out}"
    )
    return 0


def cmd_train_denoiser(args: argparse.Namespace, cfg: Config) -> int:
    pairs = _load_pairs(args.data)
    ae = _load_autoencoder(args.langae_ckpt, cfg)
    d = cfg.denoiser
    steps = args.steps if args.steps is not None else d.steps
    weight = args.langda_weight if args.langda_weight is not None else d.langda_weight
    _, history = train_denoiser(
        pairs,
        ae,
        steps=steps,
        batch_size=d.batch_size,
        seed=args.seed,
        base_lr=d.base_lr,
        floor_lr=d.floor_lr,
        warmup=d.warmup,
        langda_weight=weight,
        ablate=args.ablate,
        holdout_fraction=d.holdout_fraction,
        eval_every=d.eval_every,
        eval_limit=d.eval_limit,
        state_size=d.state_size,
        step_size=d.step_size,
        expand=d.expand,
        reduction=d.reduction,
        head_gain=d.head_gain,
        checkpoint_path=args.out,
    )
    first, last = history["eval"][0], history["eval"][-1]
    print(
        f"trained {steps} steps; held-out PSNR {first['psnr']:.2f} ->"
        f" {last['psnr']:.2f} dB (input {last['input_psnr']:.2f}) -> {args.out}"
    )
    return 0


def cmd_eval(args: argparse.Namespace, cfg: Config) -> int:
    pairs = _load_pairs(args.data, limit=args.limit)
    denoise = None
    if args.ckpt is not None:
        if args.langae_ckpt is None:
            raise ConfigError("eval --ckpt needs --langae-ckpt to rebuild the encoder")
        ae = _load_autoencoder(args.langae_ckpt, cfg)
        model = _load_denoiser(args.ckpt, ae, cfg, args.seed, args.ablate)
        denoise = denoise_hook(model)
    report = evaluate(
        pairs, denoise, window=(cfg.eval.window_lo, cfg.eval.window_hi)
    )
    _write_text(args.out, report.to_jsonl())
    return 0


def cmd_bench_scan(args: argparse.Namespace, cfg: Config) -> int:
    b = cfg.bench
    rows = bench_scan(
        b.sizes,
        step=b.step,
        channels=b.channels,
        state_size=b.state_size,
        trials=b.trials,
        seed=args.seed,
    )
    _write_text(args.out, bench_to_csv(rows))
    return 0


def cmd_export_tokens(args: argparse.Namespace, cfg: Config) -> int:
    ae = _load_autoencoder(args.langae_ckpt, cfg)
    pair = load_pair(args.image)
    image = pair.ndct if args.which == "ndct" else pair.ldct
    if image.shape[0] != ae.image_side:
        raise ConfigError(
            f"image is {image.shape[0]}px but the autoencoder expects {ae.image_side}px"
        )
    x = Tensor(hu_window(image, *TRAIN_WINDOW)[None, None])
    pyramid = ae.quantize(ae.encode(x))
    vocab = ae.codebook.vocab
    ids = pyramid.tokens[0].reshape(-1)
    side = pyramid.layout.sides[0]
    print(f"layer 1 ({side}x{side} grid):")
    width = max(len(vocab[i]) for i in ids)
    for r in range(side):
        row = ids[r * side : (r + 1) * side]
        print("  " + "  ".join(vocab[i].ljust(width) for i in row))
    for l in range(1, pyramid.layout.depth):
        counts = Counter(pyramid.tokens[l].reshape(-1).tolist())
        top = ", ".join(f"{vocab[i]} x{c}" for i, c in counts.most_common(args.top))
        print(f"layer {l + 1} (top {args.top} of {len(counts)} distinct): {top}")
    return 0


def cmd_show_config(args: argparse.Namespace, cfg: Config) -> int:
    _write_text(args.out, format_config(cfg))
    return 0


# -- parser ------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="key=value config file")
    common.add_argument(
        "--seed", type=_seed_value, default=0, help="run seed (default 0)"
    )
    common.add_argument(
        "--threads", type=int, metavar="N", help="cap BLAS/runtime thread pools"
    )

    parser = argparse.ArgumentParser(
        prog="langct",
        description="Language-token-guided low-dose CT denoising toolkit.",
    )
    parser.add_argument("--version", action="version", version=f"langct {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser(
        "gen-data", parents=[common], help="generate a synthetic pair corpus"
    )
    p.add_argument("--out", required=True, metavar="DIR")
    p.add_argument("--count", type=int, help="number of pairs (default from config)")
    p.add_argument("--size", type=int, help="image side in px (default from config)")
    p.add_argument("--dose", type=float, help="dose fraction (default from config)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser(
        "train-langae", parents=[common], help="pretrain and freeze the autoencoder"
    )
    p.add_argument("--data", required=True, metavar="DIR", help="pair corpus directory")
    p.add_argument("--out", required=True, metavar="CKPT", help="checkpoint path")
    p.add_argument("--steps", type=int, help="override config step count")
    p.set_defaults(func=cmd_train_langae)

    p = sub.add_parser(
        "train-denoiser", parents=[common], help="train the residual denoiser"
    )
    p.add_argument("--data", required=True, metavar="DIR", help="pair corpus directory")
    p.add_argument("--langae-ckpt", required=True, metavar="CKPT")
    p.add_argument("--out", required=True, metavar="CKPT", help="checkpoint path")
    p.add_argument("--steps", type=int, help="override config step count")
    p.add_argument(
        "--lambda",
        dest="langda_weight",
        type=float,
        metavar="W",
        help="latent alignment weight (default from config)",
    )
    p.add_argument("--ablate", choices=ABLATION_ARMS, help="comparison arm")
    p.set_defaults(func=cmd_train_denoiser)

    p = sub.add_parser(
        "eval", parents=[common], help="JSON-lines metric report over a corpus"
    )
    p.add_argument("--data", required=True, metavar="DIR", help="pair corpus directory")
    p.add_argument("--ckpt", metavar="CKPT", help="denoiser checkpoint; omit to score inputs")
    p.add_argument("--langae-ckpt", metavar="CKPT", help="autoencoder checkpoint")
    p.add_argument(
        "--ablate",
        choices=ABLATION_ARMS,
        help="arm the checkpoint was trained with (affects reconstruction)",
    )
    p.add_argument("--limit", type=int, help="score only the first N pairs")
    p.add_argument("--out", metavar="FILE", help="write report here instead of stdout")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser(
        "bench-scan", parents=[common], help="wall-time the four-direction scan"
    )
    p.add_argument("--out", metavar="FILE", help="write CSV here instead of stdout")
    p.set_defaults(func=cmd_bench_scan)

    p = sub.add_parser(
        "export-tokens", parents=[common], help="print the token pyramid of one image"
    )
    p.add_argument("--langae-ckpt", required=True, metavar="CKPT")
    p.add_argument("--image", required=True, metavar="PAIR", help="pair file (*.lmpd)")
    p.add_argument("--which", choices=("ndct", "ldct"), default="ndct")
    p.add_argument("--top", type=int, default=8, help="tokens listed per deep layer")
    p.set_defaults(func=cmd_export_tokens)

    p = sub.add_parser(
        "show-config", parents=[common], help="print the effective configuration"
    )
    p.add_argument("--out", metavar="FILE", help="write config here instead of stdout")
    p.set_defaults(func=cmd_show_config)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        _limit_threads(args.threads)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ArithmeticError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
