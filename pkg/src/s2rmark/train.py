"""Two-phase training: unpaired noise translation first, then the watermark codec.

Every random draw comes from a named substream keyed by (root seed, purpose,
step), so training is stateless between steps: a resumed run replays exactly
the stream an uninterrupted run would have produced, and checkpoints need no
RNG state beyond the seed itself.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path

import torch
import torch.nn.functional as F
from torch.optim import Adam

from .core import (
    ConfigError, RunConfig, UnpairedDataset, batch_indices, random_message,
    resize, save_config_snapshot, substream, substream_seed,
)
from .losses import (
    PerceptualExtractor, adv_loss, adv_objective, gradient_penalty,
    perceptual_multiscale, total_d, total_g,
)
from .simnoise import apply_pipeline_batch
from .translator import DiscriminatorNet, GeneratorNet, interpolate_samples, sample_latent
from .watermark import DecoderNet, EncoderNet

log = logging.getLogger("s2rmark")

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, value: float, last_checkpoint: Path | None):
        self.last_checkpoint = last_checkpoint
        super().__init__(
            f"training diverged at step {step} (loss {value}); "
            f"last good checkpoint: {last_checkpoint}")


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path: Path, kind: str, step: int, cfg: RunConfig,
                    nets: dict, optimizers: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "step": step,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "config_hash": cfg.config_hash(),
        "nets": {name: {"arch": net.arch_config(), "state": net.state_dict()}
                 for name, net in nets.items() if net is not None},
        "optimizers": {name: opt.state_dict() for name, opt in (optimizers or {}).items()},
    }
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint does not exist: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format_version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version in {path}")
    return payload


def load_generator(path) -> GeneratorNet:
    payload = load_checkpoint(path)
    if "generator" not in payload["nets"]:
        raise ConfigError(f"{path} holds no generator")
    entry = payload["nets"]["generator"]
    net = GeneratorNet(**entry["arch"])
    net.load_state_dict(entry["state"])
    net.eval()
    return net


def load_codec(path) -> tuple[EncoderNet, DecoderNet]:
    payload = load_checkpoint(path)
    if "encoder" not in payload["nets"] or "decoder" not in payload["nets"]:
        raise ConfigError(f"{path} holds no watermark codec")
    enc = EncoderNet(**payload["nets"]["encoder"]["arch"])
    enc.load_state_dict(payload["nets"]["encoder"]["state"])
    dec = DecoderNet(**payload["nets"]["decoder"]["arch"])
    dec.load_state_dict(payload["nets"]["decoder"]["state"])
    enc.eval()
    dec.eval()
    return enc, dec


class _LossLog:
    """Per-step CSV loss log; appends when resuming."""

    def __init__(self, path: Path, columns: list[str], resume: bool):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.columns = columns
        if not resume or not self.path.exists():
            with open(self.path, "w", newline="") as f:
                csv.writer(f).writerow(columns)

    def write(self, values: dict):
        with open(self.path, "a", newline="") as f:
            csv.writer(f).writerow([f"{values[c]:.6f}" if isinstance(values[c], float)
                                    else values[c] for c in self.columns])


def _guard(step: int, values: dict, threshold: float, last_ckpt: Path | None):
    for v in values.values():
        fv = float(v)
        if not torch.isfinite(torch.tensor(fv)) or abs(fv) > threshold:
            raise TrainingDiverged(step, fv, last_ckpt)


# ---------------------------------------------------------------------------
# Phase A: unpaired noise translation
# ---------------------------------------------------------------------------

def init_translation_nets(cfg: RunConfig) -> tuple[GeneratorNet, DiscriminatorNet]:
    """Fresh generator/critic, initialized from the dedicated init substream."""
    with torch.random.fork_rng():
        torch.manual_seed(substream_seed(cfg.seed, "init/translation"))
        g = GeneratorNet(scales_k=cfg.scales_k, base_channels=cfg.base_channels,
                         latent_dim=cfg.latent_dim)
        d = DiscriminatorNet(in_size=cfg.train_resolution)
    return g, d


def train_s2r(data: UnpairedDataset, cfg: RunConfig, out_dir,
              resume=None, perceptual: torch.nn.Module | None = None,
              steps: int | None = None) -> Path:
    """Adversarially train the translator on unpaired data; returns the final checkpoint.

    Per step: distort a sharp batch with the configured pipeline, translate it
    with a fresh latent code, update the critic on real-vs-translated (with
    gradient penalty on interpolates), then update the generator on the
    adversarial term plus the multi-scale perceptual anchor to its input.
    """
    if cfg.noise_pipeline is None:
        raise ConfigError("train_s2r needs cfg.noise_pipeline")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config_snapshot(cfg, out_dir / "config.yaml")
    total_steps = cfg.train.steps_s2r if steps is None else steps
    w = cfg.loss_weights
    res = cfg.train_resolution

    gen, critic = init_translation_nets(cfg)
    g_opt = Adam(gen.parameters(), lr=cfg.train.lr_g, betas=(cfg.train.adam_beta1, 0.999))
    d_opt = Adam(critic.parameters(), lr=cfg.train.lr_d, betas=(cfg.train.adam_beta1, 0.999))
    start = 0
    if resume is not None:
        payload = load_checkpoint(resume)
        gen.load_state_dict(payload["nets"]["generator"]["state"])
        critic.load_state_dict(payload["nets"]["discriminator"]["state"])
        g_opt.load_state_dict(payload["optimizers"]["generator"])
        d_opt.load_state_dict(payload["optimizers"]["discriminator"])
        start = payload["step"]

    phi = perceptual if perceptual is not None else PerceptualExtractor(
        seed=substream_seed(cfg.seed, "perceptual"), weights_path=cfg.perceptual_weights)
    log_csv = _LossLog(out_dir / "loss.csv",
                       ["step", "total_G", "adv_G", "perc", "total_D", "gp"],
                       resume=resume is not None)
    scale_sizes = [res >> (cfg.scales_k - 1 - i) for i in range(cfg.scales_k)]
    last_ckpt: Path | None = Path(resume) if resume is not None else None

    def checkpoint(step: int, name: str) -> Path:
        return save_checkpoint(
            out_dir / name, "s2r", step, cfg,
            {"generator": gen, "discriminator": critic},
            {"generator": g_opt, "discriminator": d_opt})

    for step in range(start, total_steps):
        idx_s = batch_indices(len(data.sharp), cfg.batch_size, step, cfg.seed, "data-order/sharp")
        idx_u = batch_indices(len(data.real_sc), cfg.batch_size, step, cfg.seed, "data-order/real")
        x_s = torch.stack([data.sharp[i] for i in idx_s])
        y_u = torch.stack([data.real_sc[i] for i in idx_u])

        y_c = apply_pipeline_batch(x_s, cfg.noise_pipeline,
                                   substream_seed(cfg.seed, f"noise-params/{step}"))
        z = sample_latent(cfg.batch_size, cfg.latent_dim,
                          substream(cfg.seed, f"latent-codes/{step}"),
                          mode=cfg.latent_mode, size=(res, res))
        outputs = gen(y_c, z)
        y_fake = outputs[-1]

        # critic update
        d_real = critic(y_u)
        d_fake = critic(y_fake.detach())
        eps = torch.rand(cfg.batch_size, generator=substream(cfg.seed, f"gp-eps/{step}"))
        y_tilde = interpolate_samples(y_u, y_fake.detach(), eps)
        gp = gradient_penalty(critic, y_tilde)
        d_total = total_d(adv_objective(d_real, d_fake), gp, w)
        d_opt.zero_grad()
        d_total.backward()
        d_opt.step()

        # generator update
        g_adv = adv_loss(None, critic(y_fake), side="generator")
        targets = [resize(y_c, (s, s)) for s in scale_sizes]
        perc = perceptual_multiscale(outputs, targets, phi, cfg.scales_k)
        g_total = total_g(g_adv, perc, w)
        g_opt.zero_grad()
        g_total.backward()
        g_opt.step()

        row = {"step": step, "total_G": g_total.item(), "adv_G": g_adv.item(),
               "perc": perc.item(), "total_D": d_total.item(), "gp": gp.item()}
        log_csv.write(row)
        _guard(step, {k: v for k, v in row.items() if k != "step"},
               cfg.train.divergence_threshold, last_ckpt)
        if (step + 1) % cfg.train.checkpoint_every == 0:
            last_ckpt = checkpoint(step + 1, f"checkpoint_{step + 1:06d}.pt")

    final = checkpoint(total_steps, "checkpoint_final.pt")
    log.info("translation training done: %s", final)
    return final


def train_s2r_supervised(pairs: tuple[list, list], cfg: RunConfig, out_dir,
                         steps: int | None = None,
                         perceptual: torch.nn.Module | None = None) -> Path:
    """Ablation path: fit the translator to aligned (input, target) pairs, no critic.

    Trains on the multi-scale perceptual loss plus an L1 reconstruction to the
    targets; the emitted checkpoint is format-compatible with the adversarial
    one, so it drops into the watermark phase unchanged.
    """
    inputs, targets = pairs
    if len(inputs) != len(targets):
        raise ConfigError(
            f"supervised training needs aligned pairs, got {len(inputs)} vs {len(targets)}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config_snapshot(cfg, out_dir / "config.yaml")
    total_steps = cfg.train.steps_s2r if steps is None else steps
    res = cfg.train_resolution

    gen, _ = init_translation_nets(cfg)
    opt = Adam(gen.parameters(), lr=cfg.train.lr_g, betas=(cfg.train.adam_beta1, 0.999))
    phi = perceptual if perceptual is not None else PerceptualExtractor(
        seed=substream_seed(cfg.seed, "perceptual"), weights_path=cfg.perceptual_weights)
    log_csv = _LossLog(out_dir / "loss.csv", ["step", "total", "perc", "l1"], resume=False)
    scale_sizes = [res >> (cfg.scales_k - 1 - i) for i in range(cfg.scales_k)]
    last_ckpt = None

    for step in range(total_steps):
        idx = batch_indices(len(inputs), cfg.batch_size, step, cfg.seed, "data-order/pairs")
        x = torch.stack([inputs[i] for i in idx])
        y = torch.stack([targets[i] for i in idx])
        z = sample_latent(cfg.batch_size, cfg.latent_dim,
                          substream(cfg.seed, f"latent-codes/{step}"),
                          mode=cfg.latent_mode, size=(res, res))
        outputs = gen(x, z)
        tgt_pyr = [resize(y, (s, s)) for s in scale_sizes]
        perc = perceptual_multiscale(outputs, tgt_pyr, phi, cfg.scales_k)
        l1 = sum((o - t).abs().mean() for o, t in zip(outputs, tgt_pyr)) / cfg.scales_k
        loss = perc + l1
        opt.zero_grad()
        loss.backward()
        opt.step()
        row = {"step": step, "total": loss.item(), "perc": perc.item(), "l1": l1.item()}
        log_csv.write(row)
        _guard(step, {"total": loss.item()}, cfg.train.divergence_threshold, last_ckpt)
        if (step + 1) % cfg.train.checkpoint_every == 0:
            last_ckpt = save_checkpoint(out_dir / f"checkpoint_{step + 1:06d}.pt", "s2r",
                                        step + 1, cfg, {"generator": gen},
                                        {"generator": opt})

    return save_checkpoint(out_dir / "checkpoint_final.pt", "s2r", total_steps, cfg,
                           {"generator": gen}, {"generator": opt})


# ---------------------------------------------------------------------------
# Phase B: watermark codec through a frozen noise chain
# ---------------------------------------------------------------------------

def make_noise_chain(cfg: RunConfig, kind: str, generator: GeneratorNet | None = None):
    """Build the distortion between encoder and decoder: identity, T, or T followed by G.

    The returned callable takes (batch, step) and draws fresh pipeline
    parameters and latent codes per step. The generator, when present, runs
    with frozen parameters but stays on the autograd path so codec gradients
    flow through it.
    """
    kind = kind.lower()
    if kind == "identity":
        return lambda x, step: x
    if cfg.noise_pipeline is None:
        raise ConfigError("noise chain needs cfg.noise_pipeline")
    if kind == "t":
        return lambda x, step: apply_pipeline_batch(
            x, cfg.noise_pipeline, substream_seed(cfg.seed, f"chain-noise/{step}"))
    if kind == "tg":
        if generator is None:
            raise ConfigError("chain 'tg' needs a trained translation generator")
        generator.eval()
        generator.requires_grad_(False)

        def chain(x, step):
            y = apply_pipeline_batch(
                x, cfg.noise_pipeline, substream_seed(cfg.seed, f"chain-noise/{step}"))
            z = sample_latent(x.shape[0], generator.latent_dim,
                              substream(cfg.seed, f"chain-latent/{step}"),
                              mode=cfg.latent_mode, size=x.shape[-2:])
            return generator(y, z)[-1]

        return chain
    raise ConfigError(f"unknown noise chain {kind!r} (expected identity, t, or tg)")


def init_codec_nets(cfg: RunConfig) -> tuple[EncoderNet, DecoderNet]:
    with torch.random.fork_rng():
        torch.manual_seed(substream_seed(cfg.seed, "init/codec"))
        enc = EncoderNet(message_length=cfg.message_length, resolution=cfg.train_resolution)
        dec = DecoderNet(message_length=cfg.message_length, resolution=cfg.train_resolution)
    return enc, dec


def train_watermark(data: list, noise_chain, cfg: RunConfig, out_dir,
                    resume=None, steps: int | None = None) -> Path:
    """Train the codec through a frozen noise chain; returns the final checkpoint.

    Per step: embed fresh random messages into a cover batch, push the
    watermarked batch through the chain (fresh distortion parameters and
    latent codes every step), decode, and update encoder+decoder on
    message BCE plus an image fidelity term.
    """
    if not data:
        raise ConfigError("train_watermark needs a non-empty cover set")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_config_snapshot(cfg, out_dir / "config.yaml")
    total_steps = cfg.train.steps_watermark if steps is None else steps
    w = cfg.loss_weights

    enc, dec = init_codec_nets(cfg)
    opt = Adam(list(enc.parameters()) + list(dec.parameters()), lr=cfg.train.lr_codec)
    start = 0
    if resume is not None:
        payload = load_checkpoint(resume)
        enc.load_state_dict(payload["nets"]["encoder"]["state"])
        dec.load_state_dict(payload["nets"]["decoder"]["state"])
        opt.load_state_dict(payload["optimizers"]["codec"])
        start = payload["step"]

    log_csv = _LossLog(out_dir / "loss.csv",
                       ["step", "total", "msg_bce", "img_l2", "ber_percent"],
                       resume=resume is not None)
    last_ckpt: Path | None = Path(resume) if resume is not None else None

    def checkpoint(step: int, name: str) -> Path:
        return save_checkpoint(out_dir / name, "codec", step, cfg,
                               {"encoder": enc, "decoder": dec}, {"codec": opt})

    for step in range(start, total_steps):
        idx = batch_indices(len(data), cfg.batch_size, step, cfg.seed, "data-order/covers")
        covers = torch.stack([data[i] for i in idx])
        msg_gen = substream(cfg.seed, f"messages/{step}")
        msgs = torch.stack([random_message(cfg.message_length, msg_gen)
                            for _ in range(cfg.batch_size)])

        watermarked = enc(covers, msgs)
        noised = noise_chain(watermarked, step)
        logits = dec(noised)
        msg_loss = F.binary_cross_entropy_with_logits(logits, msgs)
        img_loss = F.mse_loss(watermarked, covers)
        loss = w.message_weight * msg_loss + w.image_weight * img_loss
        opt.zero_grad()
        loss.backward()
        opt.step()

        with torch.no_grad():
            wrong = ((torch.sigmoid(logits) > 0.5) != (msgs > 0.5)).float().mean().item()
        row = {"step": step, "total": loss.item(), "msg_bce": msg_loss.item(),
               "img_l2": img_loss.item(), "ber_percent": 100.0 * wrong}
        log_csv.write(row)
        _guard(step, {"total": loss.item()}, cfg.train.divergence_threshold, last_ckpt)
        if (step + 1) % cfg.train.checkpoint_every == 0:
            last_ckpt = checkpoint(step + 1, f"checkpoint_{step + 1:06d}.pt")

    final = checkpoint(total_steps, "checkpoint_final.pt")
    log.info("watermark training done: %s", final)
    return final
