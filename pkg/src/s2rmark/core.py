"""Shared data model: seeded RNG substreams, image normalization, datasets, run config.

Images are carried as float32 torch tensors of shape (C, H, W) with values in
[-1, 1]. Unsigned 8-bit arrays (H, W, C) appear only at file boundaries.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
import yaml
from PIL import Image

log = logging.getLogger("s2rmark")

SEED_ENV_VAR = "S2RMARK_SEED"

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".webp"}


class ConfigError(ValueError):
    """Invalid configuration or unusable input data."""


# ---------------------------------------------------------------------------
# Seeding
#
# One root seed fans out into named substreams so that e.g. ablating the
# latent-code stream leaves the data-order stream untouched.
# ---------------------------------------------------------------------------

def substream_seed(root_seed: int, name: str) -> int:
    """Derive a child seed for a named substream of `root_seed`."""
    digest = hashlib.sha256(f"{root_seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & 0x7FFF_FFFF_FFFF_FFFF


def substream(root_seed: int, name: str) -> torch.Generator:
    """A torch.Generator seeded from the named substream of `root_seed`."""
    gen = torch.Generator()
    gen.manual_seed(substream_seed(root_seed, name))
    return gen


# ---------------------------------------------------------------------------
# Normalization and resizing
# ---------------------------------------------------------------------------

def normalize(image_u8) -> torch.Tensor:
    """Map an integer image (H, W, C) or (H, W) in 0..255 to a float tensor (C, H, W) in [-1, 1]."""
    arr = np.asarray(image_u8)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError(f"expected (H, W, C) or (H, W) array, got shape {arr.shape}")
    t = torch.from_numpy(arr.astype(np.float32)) / 127.5 - 1.0
    return t.permute(2, 0, 1).contiguous()


def denormalize(img: torch.Tensor) -> np.ndarray:
    """Map a (C, H, W) tensor in [-1, 1] back to a uint8 (H, W, C) array.

    Applies x * 127.5 + 127.5 with round-half-to-even and clamping to 0..255,
    so the operation is total for any finite input.
    """
    if img.dim() != 3:
        raise ValueError(f"expected (C, H, W) tensor, got shape {tuple(img.shape)}")
    arr = (img.detach().to(torch.float32) * 127.5 + 127.5).round().clamp(0, 255)
    return arr.to(torch.uint8).permute(1, 2, 0).contiguous().numpy()


def resize(img: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize to (H, W); the one interpolation operator used everywhere.

    Corner-aligned sampling is disabled (align_corners=False). Resizing to the
    current size is an exact no-op.
    """
    if img.dim() not in (3, 4):
        raise ValueError(f"expected (C, H, W) or (B, C, H, W), got shape {tuple(img.shape)}")
    if tuple(img.shape[-2:]) == tuple(size):
        return img
    squeeze = img.dim() == 3
    x = F.interpolate(img[None] if squeeze else img, size=tuple(size),
                      mode="bilinear", align_corners=False)
    return x[0] if squeeze else x


def validate_image(img: torch.Tensor, name: str = "image") -> None:
    """Check the normalized-image invariants: values in [-1, 1], min side 8."""
    if img.dim() != 3:
        raise ValueError(f"{name}: expected (C, H, W), got shape {tuple(img.shape)}")
    _, h, w = img.shape
    if h < 8 or w < 8:
        raise ValueError(f"{name}: spatial size {h}x{w} is below the 8x8 minimum")
    if not torch.isfinite(img).all():
        raise ValueError(f"{name}: contains non-finite values")
    if img.min() < -1.0 or img.max() > 1.0:
        raise ValueError(f"{name}: values outside [-1, 1]")


# ---------------------------------------------------------------------------
# Watermark messages
# ---------------------------------------------------------------------------

def random_message(length: int, gen: torch.Generator) -> torch.Tensor:
    """Random binary message of the given length as a float tensor of 0/1."""
    return (torch.rand(length, generator=gen) < 0.5).to(torch.float32)


def message_to_bits(msg: torch.Tensor) -> str:
    return "".join("1" if b > 0.5 else "0" for b in msg.flatten().tolist())


def message_to_hex(msg: torch.Tensor) -> str:
    """Big-endian hex of the bit sequence, zero-padded to ceil(len/4) digits."""
    bits = message_to_bits(msg)
    return format(int(bits, 2), f"0{(len(bits) + 3) // 4}x") if bits else ""


def message_from_bits(s: str) -> torch.Tensor:
    if not s or set(s) - {"0", "1"}:
        raise ValueError(f"not a bitstring: {s!r}")
    return torch.tensor([float(c) for c in s])


def message_from_hex(s: str, length: int) -> torch.Tensor:
    s = s.lower().removeprefix("0x")
    if len(s) != (length + 3) // 4:
        raise ValueError(f"hex message {s!r} does not encode {length} bits")
    bits = format(int(s, 16), f"0{len(s) * 4}b")[-length:]
    return message_from_bits(bits)


def parse_message(s: str, length: int) -> torch.Tensor:
    """Accept a message as either a bitstring of exactly `length` bits or as hex."""
    if len(s) == length and not set(s) - {"0", "1"}:
        return message_from_bits(s)
    return message_from_hex(s, length)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class UnpairedDataset:
    """Two independent image collections with no pairing index.

    `sharp` holds the clean source domain, `real_sc` the captured-noise
    domain. All items are (C, R, R) tensors at the configured resolution.
    """

    sharp: list[torch.Tensor]
    real_sc: list[torch.Tensor]
    resolution: int

    def __post_init__(self):
        if not self.sharp or not self.real_sc:
            raise ConfigError("both dataset halves must be non-empty")
        for name, items in (("sharp", self.sharp), ("real_sc", self.real_sc)):
            for i, t in enumerate(items):
                if tuple(t.shape[-2:]) != (self.resolution, self.resolution):
                    raise ConfigError(
                        f"{name}[{i}] has size {tuple(t.shape[-2:])}, expected "
                        f"{self.resolution}x{self.resolution}"
                    )


def load_image(path: Path, resolution: int) -> torch.Tensor:
    """Load one image: decode, center-crop square, normalize, resize."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    h, w = arr.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    img = normalize(arr[top:top + side, left:left + side])
    return resize(img, (resolution, resolution))


def _load_dir(directory: Path, resolution: int) -> list[torch.Tensor]:
    if not directory.is_dir():
        raise ConfigError(f"dataset directory does not exist: {directory}")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS)
    items = []
    for p in paths:
        try:
            items.append(load_image(p, resolution))
        except Exception as exc:  # undecodable file: skip with a warning
            log.warning("skipping undecodable image %s (%s)", p, exc)
    if not items:
        raise ConfigError(f"no decodable images in {directory}")
    return items


def load_unpaired_dataset(sharp_dir, real_dir, resolution: int) -> UnpairedDataset:
    """Load the two halves of an unpaired dataset from disk.

    File order is sorted by name, so iteration order is a pure function of the
    directory contents and the seed used for batching.
    """
    return UnpairedDataset(
        sharp=_load_dir(Path(sharp_dir), resolution),
        real_sc=_load_dir(Path(real_dir), resolution),
        resolution=resolution,
    )


def save_image(img: torch.Tensor, path: Path) -> None:
    """Write a normalized image tensor as lossless PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(denormalize(img)).save(path, format="PNG")


def batch_indices(count: int, batch_size: int, step: int, root_seed: int,
                  stream: str = "data-order") -> list[int]:
    """Indices served at a global step: shuffled epochs laid out as one flat stream.

    A pure function of (count, batch_size, step, seed), so a resumed run sees
    exactly the batches an uninterrupted run would have seen.
    """
    if count <= 0 or batch_size <= 0:
        raise ValueError("count and batch_size must be positive")
    start = step * batch_size
    epoch, offset = divmod(start, count)
    out: list[int] = []
    while len(out) < batch_size:
        perm = torch.randperm(count, generator=substream(root_seed, f"{stream}/epoch{epoch}"))
        out.extend(perm[offset:offset + batch_size - len(out)].tolist())
        epoch, offset = epoch + 1, 0
    return out


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    lambda_g: float = 1.0
    lambda_grad: float = 0.005
    message_weight: float = 1.0
    image_weight: float = 0.7

    def validate(self) -> None:
        for name, v in asdict(self).items():
            if v < 0:
                raise ConfigError(f"loss weight {name} must be >= 0, got {v}")


@dataclass
class NoiseOpConfig:
    """One distortion op plus its sampling ranges.

    Every value in `params` is a closed interval [lo, hi] (a bare number is a
    degenerate interval); sampled parameters are drawn uniformly from it.
    """

    kind: str
    params: dict = field(default_factory=dict)

    def range(self, name: str, default) -> tuple[float, float]:
        raw = self.params.get(name, default)
        lo, hi = (raw, raw) if isinstance(raw, (int, float)) else (raw[0], raw[1])
        if lo > hi:
            raise ConfigError(f"{self.kind}.{name}: range lo {lo} > hi {hi}")
        return float(lo), float(hi)


@dataclass
class NoisePipelineConfig:
    ops: list[NoiseOpConfig]
    variant_name: str = "custom"

    def __post_init__(self):
        self.ops = [NoiseOpConfig(**op) if isinstance(op, dict) else op for op in self.ops]
        if not self.ops:
            raise ConfigError("noise pipeline must contain at least one op")


@dataclass
class TrainParams:
    steps_s2r: int = 2000
    steps_watermark: int = 2500
    lr_g: float = 2e-4
    lr_d: float = 2e-4
    lr_codec: float = 1e-3
    adam_beta1: float = 0.5
    checkpoint_every: int = 500
    divergence_threshold: float = 1e4
    chain: str = "t"              # identity | t | tg
    s2r_checkpoint: str | None = None


@dataclass
class RunConfig:
    seed: int = 0
    train_resolution: int = 128
    message_length: int = 64
    batch_size: int = 8
    scales_k: int = 3
    base_channels: int = 16
    latent_dim: int = 8
    latent_mode: str = "broadcast"   # broadcast | pixel
    perceptual_weights: str | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    noise_pipeline: NoisePipelineConfig | None = None
    train: TrainParams = field(default_factory=TrainParams)

    def __post_init__(self):
        if isinstance(self.loss_weights, dict):
            self.loss_weights = LossWeights(**self.loss_weights)
        if isinstance(self.noise_pipeline, dict):
            self.noise_pipeline = NoisePipelineConfig(**self.noise_pipeline)
        if isinstance(self.train, dict):
            self.train = TrainParams(**self.train)
        self.validate()

    def validate(self) -> None:
        if self.train_resolution < 8:
            raise ConfigError("train_resolution must be at least 8")
        if self.train_resolution % 2 ** (self.scales_k - 1):
            raise ConfigError(
                f"train_resolution {self.train_resolution} must be divisible by "
                f"{2 ** (self.scales_k - 1)} for scales_k={self.scales_k}"
            )
        if self.message_length < 1:
            raise ConfigError("message_length must be positive")
        if self.latent_mode not in ("broadcast", "pixel"):
            raise ConfigError(f"unknown latent_mode {self.latent_mode!r}")
        self.loss_weights.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.noise_pipeline is None:
            d.pop("noise_pipeline")
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path) -> RunConfig:
    """Read a YAML config mirroring RunConfig; S2RMARK_SEED overrides the seed."""
    with open(path) as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config root must be a mapping, got {type(raw).__name__}")
    try:
        cfg = RunConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad config {path}: {exc}") from exc
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        cfg.seed = int(env_seed)
    return cfg


def save_config_snapshot(cfg: RunConfig, path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        yaml.safe_dump(cfg.to_dict(), f, sort_keys=False)
