"""Command-line interface.

Every subcommand exits 0 on success; failures print one machine-readable
`error: {...}` JSON line on stderr and exit nonzero (2 for configuration
problems, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import core, metrics, plotting, report, simnoise, train, watermark

log = logging.getLogger("s2rmark")


def _load_cfg(args) -> core.RunConfig:
    cfg = core.load_config(args.config) if args.config else core.RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if cfg.noise_pipeline is None:
        cfg.noise_pipeline = simnoise.pipeline_config("pimog_like")
    return cfg


def _load_images(directory, resolution) -> tuple[list[str], list[torch.Tensor]]:
    directory = Path(directory)
    if not directory.is_dir():
        raise core.ConfigError(f"image directory does not exist: {directory}")
    paths = sorted(p for p in directory.iterdir()
                   if p.suffix.lower() in core.IMAGE_EXTENSIONS)
    if not paths:
        raise core.ConfigError(f"no images in {directory}")
    return [p.name for p in paths], [core.load_image(p, resolution) for p in paths]


def cmd_simulate(args) -> int:
    cfg = _load_cfg(args)
    names, images = _load_images(args.images, cfg.train_resolution)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (name, img) in enumerate(zip(names, images)):
        seed = core.substream_seed(cfg.seed, f"simulate/{name}")
        noised, params = simnoise.apply_pipeline(img, cfg.noise_pipeline, seed,
                                                 return_log=True)
        core.save_image(noised, out_dir / f"{Path(name).stem}_sim.png")
        flat = {"filename": name}
        for op_key, op_params in params.items():
            for pname, val in op_params.items():
                if isinstance(val, (list, tuple)):
                    flat[f"{op_key}.{pname}"] = json.dumps(
                        [round(float(v), 6) for v in np.asarray(val).flatten()])
                else:
                    flat[f"{op_key}.{pname}"] = round(float(val), 6)
        rows.append(flat)
    columns = list(rows[0].keys())
    with open(out_dir / "params.csv", "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=columns)
        writer.writeheader()
        writer.writerows(rows)
    print(f"simulated {len(rows)} images -> {out_dir}")
    return 0


def cmd_train_s2r(args) -> int:
    cfg = _load_cfg(args)
    data = core.load_unpaired_dataset(Path(args.data) / "sharp",
                                      Path(args.data) / "real_sc",
                                      cfg.train_resolution)
    ckpt = train.train_s2r(data, cfg, args.out, resume=args.resume)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_train_watermark(args) -> int:
    cfg = _load_cfg(args)
    chain_kind = args.chain or cfg.train.chain
    generator = None
    if chain_kind == "tg":
        gen_path = args.s2r_checkpoint or cfg.train.s2r_checkpoint
        if gen_path is None:
            raise core.ConfigError("chain 'tg' needs --s2r-checkpoint")
        generator = train.load_generator(gen_path)
    _, covers = _load_images(args.images, cfg.train_resolution)
    chain = train.make_noise_chain(cfg, chain_kind, generator)
    ckpt = train.train_watermark(covers, chain, cfg, args.out, resume=args.resume)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_train_s2r_supervised(args) -> int:
    cfg = _load_cfg(args)
    in_names, inputs = _load_images(Path(args.pairs) / "input", cfg.train_resolution)
    tgt_names, targets = _load_images(Path(args.pairs) / "target", cfg.train_resolution)
    if in_names != tgt_names:
        raise core.ConfigError("paired training needs matching filenames in input/ and target/")
    ckpt = train.train_s2r_supervised((inputs, targets), cfg, args.out)
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_embed(args) -> int:
    enc, _ = train.load_codec(args.checkpoint)
    if args.message_hex:
        msg = core.parse_message(args.message_hex, enc.message_length)
    elif args.message_bits:
        msg = core.message_from_bits(args.message_bits)
        if msg.shape[0] != enc.message_length:
            raise core.ConfigError(
                f"message has {msg.shape[0]} bits, codec expects {enc.message_length}")
    else:
        msg = core.random_message(enc.message_length,
                                  core.substream(args.seed or 0, "cli-message"))
    with Image.open(args.image) as im:
        arr = np.asarray(im.convert("RGB"))
    marked = watermark.resolution_scale_embed(arr, msg, enc)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(marked).save(out, format="PNG")
    print(f"message_hex={core.message_to_hex(msg)}")
    print(f"watermarked={out}")
    return 0


def cmd_extract(args) -> int:
    _, dec = train.load_codec(args.checkpoint)
    with Image.open(args.image) as im:
        img = core.normalize(np.asarray(im.convert("RGB")))
    scores, bits = watermark.decode(img, dec)
    print(f"message_hex={core.message_to_hex(bits)}")
    print(f"message_bits={core.message_to_bits(bits)}")
    print("scores=" + " ".join(f"{s:.4f}" for s in scores.tolist()))
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    _, covers = _load_images(args.images, cfg.train_resolution)
    checkpoints = {"identity": args.codec_identity, "t": args.codec_t, "tg": args.codec_tg}
    checkpoints = {k: v for k, v in checkpoints.items() if v is not None}
    if not checkpoints:
        raise core.ConfigError("evaluate needs at least one --codec-* checkpoint")
    rep = report.run_noise_layer_comparison(cfg, checkpoints, covers, out_dir=args.out)
    plotting.plot_report(rep, Path(args.out) / "fig_comparison.png")
    for chain, stats in rep.aggregates.items():
        print(f"{chain}: ber={stats['ber_percent']['mean']:.2f}% "
              f"psnr={stats['psnr_db']['mean']:.2f}dB ssim={stats['ssim']['mean']:.4f}")
    print(f"report: {Path(args.out) / 'report.json'}")
    return 0


def cmd_hist_compare(args) -> int:
    resolution = args.resolution
    _, set_a = _load_images(args.set_a, resolution)
    _, set_b = _load_images(args.set_b, resolution)
    distance, curves = metrics.hist_compare(set_a, set_b)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    plotting.write_hist_csv(curves, out_dir / "hist.csv")
    plotting.plot_hist_curves(curves, out_dir / "hist.png",
                              label_a=Path(args.set_a).name, label_b=Path(args.set_b).name)
    print(f"distance={distance:.8f}")
    print(f"curves: {out_dir / 'hist.csv'}")
    return 0


def cmd_plot(args) -> int:
    if args.kind == "loss":
        out = plotting.plot_loss_csv(args.input, args.out)
    elif args.kind == "hist":
        out = plotting.plot_hist_curves(args.input, args.out)
    elif args.kind == "report":
        out = plotting.plot_report(args.input, args.out)
    else:
        raise core.ConfigError(f"unknown plot kind {args.kind!r}")
    print(f"figure: {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="s2rmark",
        description="Screen-camera watermarking with a simulation-to-real noise layer")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.set_defaults(fn=fn)
        p.add_argument("--seed", type=int, help="override the config seed")
        return p

    p = add("simulate", cmd_simulate, help="distort an image directory with the pipeline")
    p.add_argument("--config")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)

    p = add("train-s2r", cmd_train_s2r, help="train the noise translator on unpaired data")
    p.add_argument("--config")
    p.add_argument("--data", required=True, help="directory holding sharp/ and real_sc/")
    p.add_argument("--out", required=True)
    p.add_argument("--resume")

    p = add("train-watermark", cmd_train_watermark, help="train the watermark codec")
    p.add_argument("--config")
    p.add_argument("--images", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--chain", choices=["identity", "t", "tg"])
    p.add_argument("--s2r-checkpoint")
    p.add_argument("--resume")

    p = add("train-s2r-supervised", cmd_train_s2r_supervised,
            help="ablation: train the translator on aligned pairs")
    p.add_argument("--config")
    p.add_argument("--pairs", required=True, help="directory holding input/ and target/")
    p.add_argument("--out", required=True)

    p = add("embed", cmd_embed, help="watermark one image at any resolution")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--message-hex")
    p.add_argument("--message-bits")

    p = add("extract", cmd_extract, help="extract the message from an image")
    p.add_argument("--image", required=True)
    p.add_argument("--checkpoint", required=True)

    p = add("evaluate", cmd_evaluate, help="compare codecs on the held-out capture channel")
    p.add_argument("--config")
    p.add_argument("--images", required=True)
    p.add_argument("--codec-identity")
    p.add_argument("--codec-t")
    p.add_argument("--codec-tg")
    p.add_argument("--out", required=True)

    p = add("hist-compare", cmd_hist_compare, help="compare intensity histograms of two sets")
    p.add_argument("--set-a", required=True)
    p.add_argument("--set-b", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resolution", type=int, default=128)

    p = add("plot", cmd_plot, help="render a figure from a CSV log or report")
    p.add_argument("--kind", choices=["loss", "hist", "report"], required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except core.ConfigError as exc:
        print("error: " + json.dumps({"kind": "config", "message": str(exc)}),
              file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        if args.verbose:
            raise
        print("error: " + json.dumps({"kind": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
