"""Command-line entry point.

Exit codes: 0 success, 1 other failure, 2 configuration error, 3 missing
prerequisite checkpoint, 4 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import plotting
from .codec import Bitstream, MiniCodec, StubCompressor, bpp_of, compressor_for, train_mini_codec
from .config import make_config
from .data import load_image, save_image, to_image, to_tensor
from .errors import (CodecError, ConfigError, DataError, DependencyError, DimensionError,
                     FormatError)
from .losses import FeatureExtractor
from .metrics import EvalSample, evaluate_corpus
from .vq import export_codebook, usage_stats

log = logging.getLogger("codeprior")

BITSTREAM_SUFFIX = ".crs"
EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_DATA = 2, 3, 4
SWEEP_BITS = (2, 4, 6, 8)


def _config(args):
    overrides = {}
    for item in args.set or ():
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError("override must look like section.key=value", [item])
        overrides[key.strip()] = val
    if getattr(args, "data", None):
        overrides["data.source"] = args.data
    if args.codec:
        overrides["codec.codec"] = args.codec
    if args.rate_index is not None:
        overrides["codec.rate_index"] = str(args.rate_index)
    return make_config(args.profile, args.config, overrides, args.seed)


def _images(paths):
    files = []
    for p in map(Path, paths):
        if p.is_dir():
            files.extend(sorted(q for q in p.iterdir() if q.suffix.lower() in (".png", ".bmp", ".tif", ".tiff", ".ppm")))
        else:
            files.append(p)
    if not files:
        raise DataError("no input images")
    return files


def _mini(run_dir, rate_index):
    from .training import codec_path

    path = codec_path(run_dir, rate_index)
    if not path.exists():
        raise DependencyError("codec", f"no trained mini codec at {path}; run train-codec first")
    return MiniCodec.from_state(torch.load(path, map_location="cpu", weights_only=True))


def _decode_input(path, run_dir):
    """Decoded image from a bitstream file or an already decoded image."""
    path = Path(path)
    if path.suffix == BITSTREAM_SUFFIX:
        b = Bitstream.load(path)
        mini = _mini(run_dir, b.rate_index) if b.codec_id == MiniCodec.codec_id else None
        return compressor_for(b, mini).decompress(b)
    return load_image(path)


# --------------------------------------------------------------------------
# commands


def cmd_train(args, stage):
    from .training import train_stage

    cfg = _config(args)
    cfg.stage = stage
    trainer = train_stage(cfg, args.out, stage, resume=not args.fresh, max_steps=args.max_steps)
    last = [h for h in trainer.history if "val_proxy" not in h]
    if last:
        print(json.dumps(last[-1], sort_keys=True))
    return 0


def cmd_train_codec(args):
    from .training import codec_path, load_images

    cfg = _config(args)
    train, _ = load_images(cfg)
    codec = train_mini_codec(train, cfg.codec.rate_index, steps=args.steps, seed=cfg.seed,
                             log=lambda s, loss, bpp: log.info("step %d loss %.4f bpp %.4f", s, loss, bpp))
    path = codec_path(args.out, cfg.codec.rate_index)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(codec.state(), path)
    print(path)
    return 0


def _compressor(args):
    if args.codec == "mini":
        return _mini(args.run, args.rate_index or 0)
    return StubCompressor(args.scale, args.bits)


def cmd_compress(args):
    c = _compressor(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in _images(args.inputs):
        b = c.compress(load_image(p))
        b.save(out / (p.stem + BITSTREAM_SUFFIX))
        print(f"{p.name}\t{len(b.payload)}\t{bpp_of(b, b.width, b.height):.6f}")
    return 0


def cmd_decompress(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in map(Path, args.inputs):
        save_image(out / (p.stem + ".png"), _decode_input(p, args.run))
    return 0


def cmd_enhance(args):
    from .fusion import hpin_decode
    from .training import load_pipeline

    cfg, vq, predictor, hpin = load_pipeline(args.run)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p in map(Path, args.inputs):
        x_lq = _decode_input(p, args.run)
        x_hat = hpin_decode(to_tensor(x_lq), predictor, vq, hpin, use_prior=cfg.stage3.use_prior)
        save_image(out / (p.stem + ".png"), to_image(x_hat))
    return 0


def _bpp_for(stem, bit_dir, h, w):
    if bit_dir is None:
        return 0.0
    path = Path(bit_dir) / (stem + BITSTREAM_SUFFIX)
    if not path.exists():
        raise DataError(f"no bitstream {path}")
    return bpp_of(Bitstream.load(path), w, h)


def cmd_evaluate(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fx = FeatureExtractor()
    if args.sweep:
        report = _sweep(args, fx)
    else:
        if not args.reference or not args.outputs:
            raise ConfigError("evaluate needs --reference and --outputs (or --sweep)",
                              ["reference", "outputs"])
        samples = []
        for ref in _images([args.reference]):
            cand = Path(args.outputs) / (ref.stem + ".png")
            if not cand.exists():
                raise DataError(f"no output image for {ref.name} in {args.outputs}")
            x = load_image(ref)
            samples.append(EvalSample(ref.stem, args.method, args.rate_param, x, load_image(cand),
                                      _bpp_for(ref.stem, args.bitstreams, *x.shape[:2])))
        report = evaluate_corpus(samples, fx)
        report.write_rows(out / "eval_rows.csv")
    report.write_table(out / "rd_table.csv")
    plotting.rd_figure(report, out / "rd_curves.png")
    with open(out / "rd_table.csv", encoding="utf-8") as fh:
        sys.stdout.write(fh.read())
    return 0


def _sweep(args, fx):
    """Stub codec at several bit depths, with and without enhancement."""
    from .fusion import hpin_decode
    from .training import load_images, load_pipeline

    if args.reference:
        refs = [(p.stem, load_image(p)) for p in _images([args.reference])]
    else:
        cfg = _config(args)
        _, test = load_images(cfg)
        refs = [(f"test{i:03d}", x) for i, x in enumerate(test)]
    pipeline = load_pipeline(args.run) if args.run else None
    samples = []
    for bits in SWEEP_BITS:
        c = StubCompressor(args.scale, bits, rate_param=float(bits))
        for name, x in refs:
            b = c.compress(x)
            bpp = bpp_of(b, b.width, b.height)
            x_lq = c.decompress(b)
            samples.append(EvalSample(name, "stub", c.rate_param, x, x_lq, bpp))
            if pipeline is not None:
                cfg, vq, predictor, hpin = pipeline
                x_hat = to_image(hpin_decode(to_tensor(x_lq), predictor, vq, hpin,
                                             use_prior=cfg.stage3.use_prior))
                samples.append(EvalSample(name, "stub+hpin", c.rate_param, x, x_hat, bpp))
    report = evaluate_corpus(samples, fx)
    report.write_rows(Path(args.out) / "eval_rows.csv")
    return report


def cmd_stats(args):
    from .training import load_images, load_vq

    cfg, vq = load_vq(args.run)
    if args.inputs:
        images = np.stack([load_image(p) for p in _images(args.inputs)])
    else:
        _, images = load_images(cfg)
    report = usage_stats(to_tensor(images), vq.eval())
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "usage.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh)
        fh.write("\n")
    plotting.usage_figure(report.counts, out / "usage.png")
    print(f"fraction_used {report.fraction_used:.4f}")
    return 0


def cmd_export_codebook(args):
    from .training import load_vq

    _, vq = load_vq(args.run)
    export_codebook(args.out, vq.codebook.weight)
    print(args.out)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="INI configuration file")
    common.add_argument("--profile", choices=("toy", "full"), default="toy")
    common.add_argument("--seed", type=int)
    common.add_argument("--codec", choices=("stub", "mini"))
    common.add_argument("--rate-index", type=int)
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                        help="override one configuration value (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="codeprior", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    for stage in (1, 2, 3):
        p = sub.add_parser(f"train-stage{stage}", parents=[common], help=f"train stage {stage}")
        p.add_argument("--out", required=True, type=Path, help="run directory")
        p.add_argument("--data", help="manifest CSV, image directory or 'procedural'")
        p.add_argument("--max-steps", type=int, help="stop (resumably) after this many steps")
        p.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
        p.set_defaults(func=lambda a, s=stage: cmd_train(a, s))

    p = sub.add_parser("train-codec", parents=[common], help="train the mini learned codec")
    p.add_argument("--out", required=True, type=Path, help="run directory")
    p.add_argument("--data")
    p.add_argument("--steps", type=int, default=2000)
    p.set_defaults(func=cmd_train_codec)

    def codec_args(p):
        p.add_argument("--scale", type=int, default=2, help="stub downsampling factor")
        p.add_argument("--bits", type=int, default=4, help="stub bits per sample")
        p.add_argument("--run", type=Path, default=Path("."), help="run directory with codec weights")

    p = sub.add_parser("compress", parents=[common], help="images -> bitstreams")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True, type=Path)
    codec_args(p)
    p.set_defaults(func=cmd_compress)

    p = sub.add_parser("decompress", parents=[common], help="bitstreams -> decoded images")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--run", type=Path, default=Path("."))
    p.set_defaults(func=cmd_decompress)

    p = sub.add_parser("enhance", parents=[common],
                       help="bitstreams or decoded images -> enhanced images")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--run", required=True, type=Path, help="run directory with stage 3")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", parents=[common], help="metrics table and RD figure")
    p.add_argument("--reference", help="directory of ground-truth images")
    p.add_argument("--outputs", help="directory of images to score (same file stems)")
    p.add_argument("--bitstreams", help="directory of bitstreams for bpp (same stems)")
    p.add_argument("--method", default="enhanced")
    p.add_argument("--rate-param", type=float, default=0.0)
    p.add_argument("--sweep", action="store_true", help="stub bit-depth sweep")
    p.add_argument("--scale", type=int, default=2)
    p.add_argument("--run", type=Path, help="stage 3 run for the enhanced curve")
    p.add_argument("--data")
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("stats", parents=[common], help="codebook usage report")
    p.add_argument("inputs", nargs="*")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("export-codebook", parents=[common], help="write the CBK1 codebook file")
    p.add_argument("--run", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_export_codebook)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (DataError, FormatError, CodecError, DimensionError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
