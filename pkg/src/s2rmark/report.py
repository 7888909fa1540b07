"""Evaluation reports: per-image metric rows, exact aggregates, file emission."""

from __future__ import annotations

import csv
import datetime
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .core import ConfigError, RunConfig, random_message, substream, substream_seed
from .metrics import psnr, ssim
from .simnoise import apply_pipeline, capture_standin_config
from .train import load_codec
from .watermark import ber, decode, encode


@dataclass
class EvalRow:
    image: str
    chain: str
    seed: int
    resolution: int
    psnr_db: float
    ssim: float
    ber_percent: float


@dataclass
class EvalReport:
    rows: list[EvalRow]
    aggregates: dict
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"rows": [asdict(r) for r in self.rows],
                "aggregates": self.aggregates, "metadata": self.metadata}

    def write(self, out_dir) -> dict[str, Path]:
        """Emit rows.csv, aggregates.csv and report.json; returns the paths."""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {"rows": out_dir / "rows.csv",
                 "aggregates": out_dir / "aggregates.csv",
                 "report": out_dir / "report.json"}
        with open(paths["rows"], "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["image", "chain", "seed", "resolution",
                             "psnr_db", "ssim", "ber_percent"])
            for r in self.rows:
                writer.writerow([r.image, r.chain, r.seed, r.resolution,
                                 f"{r.psnr_db:.6f}", f"{r.ssim:.6f}", f"{r.ber_percent:.6f}"])
        with open(paths["aggregates"], "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["chain", "metric", "mean", "std", "count"])
            for chain, metrics in self.aggregates.items():
                for metric, stats in metrics.items():
                    writer.writerow([chain, metric, f"{stats['mean']:.6f}",
                                     f"{stats['std']:.6f}", stats["count"]])
        with open(paths["report"], "w") as f:
            json.dump(self.to_dict(), f, indent=2)
        return paths


def aggregate_rows(rows: list[EvalRow]) -> dict:
    """Per-chain mean/std (population) of each metric, exactly recomputable."""
    chains: dict[str, list[EvalRow]] = {}
    for r in rows:
        chains.setdefault(r.chain, []).append(r)
    out = {}
    for chain, group in sorted(chains.items()):
        out[chain] = {}
        for metric in ("psnr_db", "ssim", "ber_percent"):
            vals = [getattr(r, metric) for r in group]
            mean = sum(vals) / len(vals)
            var = sum((v - mean) ** 2 for v in vals) / len(vals)
            out[chain][metric] = {"mean": mean, "std": math.sqrt(var), "count": len(vals)}
    return out


def _file_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:12]


def evaluate_codec(enc, dec, covers: list, chain_tag: str, cfg: RunConfig,
                   channel_cfg=None) -> list[EvalRow]:
    """Embed, push through the held-out capture channel, decode, measure.

    Message draws and channel parameters are keyed by image index only, so
    every codec faces the same messages and the same channel realizations.
    """
    channel_cfg = channel_cfg or capture_standin_config()
    rows = []
    with torch.no_grad():
        for i, cover in enumerate(covers):
            msg = random_message(cfg.message_length, substream(cfg.seed, f"eval-msg/{i}"))
            marked = encode(cover, msg, enc)
            noised = apply_pipeline(marked, channel_cfg,
                                    substream_seed(cfg.seed, f"eval-channel/{i}"))
            _, bits = decode(noised, dec)
            rows.append(EvalRow(
                image=f"img{i:04d}", chain=chain_tag, seed=cfg.seed,
                resolution=cover.shape[-1], psnr_db=psnr(cover, marked),
                ssim=ssim(cover, marked), ber_percent=ber(bits, msg)))
    return rows


def run_noise_layer_comparison(cfg: RunConfig, checkpoints: dict, covers: list,
                               out_dir=None, channel_cfg=None) -> EvalReport:
    """Compare codecs trained under different noise chains on one held-out channel.

    `checkpoints` maps a chain tag (identity, t, tg) to a codec checkpoint
    path. Produces one row group per chain with shared per-image conditions,
    plus exact aggregates and provenance metadata.
    """
    if not covers:
        raise ConfigError("evaluation needs a non-empty cover set")
    rows: list[EvalRow] = []
    ids = {}
    for chain, path in checkpoints.items():
        if path is None or not Path(path).exists():
            raise ConfigError(f"missing codec checkpoint for chain {chain!r}: {path}")
        enc, dec = load_codec(path)
        ids[chain] = _file_id(path)
        rows.extend(evaluate_codec(enc, dec, covers, chain, cfg, channel_cfg))
    report = EvalReport(
        rows=rows,
        aggregates=aggregate_rows(rows),
        metadata={
            "config_hash": cfg.config_hash(),
            "checkpoint_ids": ids,
            "channel": (channel_cfg or capture_standin_config()).variant_name,
            "created": datetime.datetime.now().isoformat(timespec="seconds"),
        })
    if out_dir is not None:
        report.write(out_dir)
    return report
