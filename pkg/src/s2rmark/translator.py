"""Noise-translation networks: multi-scale generator and patch critic.

The generator is a multi-input/multi-output encoder-decoder: each scale gets
the downsampled input image with a latent code attached, shallow conv modules
(SCM) lift them to features, encoder blocks (EB) with feature attention (FAM)
merge them with the strided path, asymmetric feature fusion (AFF) mixes all
scales, and decoder blocks (DB) emit one bounded image per scale.

GELU is used throughout the generator so its input-gradient is smooth enough
to verify against finite differences.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import resize


class ResBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.gelu(self.conv1(x)))


class ShallowConvModule(nn.Module):
    """SCM: lifts a (image + latent) stack into the feature width of its scale."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 1)

    def forward(self, x):
        return self.conv2(F.gelu(self.conv1(x)))


class FeatureAttention(nn.Module):
    """FAM: gates strided encoder features with the scale's shallow features."""

    def __init__(self, channels: int):
        super().__init__()
        self.fuse = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, shallow, upstream):
        return self.fuse(shallow * upstream) + upstream


class FeatureFusion(nn.Module):
    """AFF: concatenates all encoder scales resampled to one size, then fuses."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.fuse = nn.Conv2d(in_channels, out_channels, 1)

    def forward(self, feats, size):
        resampled = [resize(f, size) for f in feats]
        return self.fuse(torch.cat(resampled, dim=1))


class GeneratorNet(nn.Module):
    """Multi-scale translator; returns `scales_k` images ordered coarse to fine.

    Output i has spatial size input / 2^(scales_k - 1 - i); the finest output
    matches the input size. Every head goes through tanh, so outputs always
    lie in [-1, 1].
    """

    def __init__(self, scales_k: int = 3, base_channels: int = 16, latent_dim: int = 8,
                 in_channels: int = 3):
        super().__init__()
        if scales_k < 1:
            raise ValueError("scales_k must be >= 1")
        self.scales_k = scales_k
        self.base_channels = base_channels
        self.latent_dim = latent_dim
        self.in_channels = in_channels
        widths = [base_channels * 2 ** i for i in range(scales_k)]  # fine -> coarse

        self.scm = nn.ModuleList(
            ShallowConvModule(in_channels + latent_dim, w) for w in widths)
        self.down = nn.ModuleList(
            nn.Conv2d(widths[i - 1], widths[i], 3, stride=2, padding=1)
            for i in range(1, scales_k))
        self.fam = nn.ModuleList(FeatureAttention(w) for w in widths[1:])
        self.eb = nn.ModuleList(
            nn.Sequential(ResBlock(w), ResBlock(w)) for w in widths)
        self.aff = nn.ModuleList(
            FeatureFusion(sum(widths), w) for w in widths)
        self.up = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], 4, stride=2, padding=1)
            for i in range(scales_k - 1))
        self.mix = nn.ModuleList(
            nn.Conv2d(2 * w, w, 1) for w in widths[:-1])
        self.db = nn.ModuleList(
            nn.Sequential(ResBlock(w), ResBlock(w)) for w in widths)
        self.head = nn.ModuleList(
            nn.Conv2d(w, in_channels, 3, padding=1) for w in widths)

    def arch_config(self) -> dict:
        return {"scales_k": self.scales_k, "base_channels": self.base_channels,
                "latent_dim": self.latent_dim, "in_channels": self.in_channels}

    def _latent_map(self, z: torch.Tensor, batch: int, size: tuple[int, int],
                    dtype) -> torch.Tensor:
        if z.dim() == 2:  # (B, d): spatial broadcast
            return z.to(dtype)[:, :, None, None].expand(batch, z.shape[1], *size)
        if z.dim() == 4:  # (B, d, H, W): per-pixel noise map, resampled per scale
            return resize(z.to(dtype), size)
        raise ValueError(f"latent code must be (B, d) or (B, d, H, W), got {tuple(z.shape)}")

    def forward(self, y_c: torch.Tensor, z: torch.Tensor) -> list[torch.Tensor]:
        squeeze = y_c.dim() == 3
        x = y_c[None] if squeeze else y_c
        b, _, h, w = x.shape
        k = self.scales_k
        factor = 2 ** (k - 1)
        if h % factor or w % factor:
            raise ValueError(
                f"input size {h}x{w} must be divisible by {factor} for scales_k={k}")
        if z.shape[0] != b or z.shape[1] != self.latent_dim:
            raise ValueError(
                f"latent code batch/dim {tuple(z.shape[:2])} does not match "
                f"({b}, {self.latent_dim})")

        pyramid = [x if i == 0 else resize(x, (h >> i, w >> i)) for i in range(k)]
        feats = []
        for i in range(k):
            zi = self._latent_map(z, b, pyramid[i].shape[-2:], x.dtype)
            shallow = self.scm[i](torch.cat([pyramid[i], zi], dim=1))
            if i == 0:
                feats.append(self.eb[0](shallow))
            else:
                strided = self.down[i - 1](feats[-1])
                feats.append(self.eb[i](self.fam[i - 1](shallow, strided)))

        fused = [self.aff[i](feats, pyramid[i].shape[-2:]) for i in range(k)]

        outputs = [None] * k
        d = self.db[k - 1](fused[k - 1])
        outputs[k - 1] = torch.tanh(pyramid[k - 1] + self.head[k - 1](d))
        for i in range(k - 2, -1, -1):
            d = self.db[i](self.mix[i](torch.cat([self.up[i](d), fused[i]], dim=1)))
            outputs[i] = torch.tanh(pyramid[i] + self.head[i](d))

        outs = list(reversed(outputs))  # coarse -> fine
        return [o[0] for o in outs] if squeeze else outs

    def finest(self, y_c: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        return self.forward(y_c, z)[-1]


def sample_latent(batch: int, latent_dim: int, gen: torch.Generator,
                  mode: str = "broadcast", size: tuple[int, int] | None = None) -> torch.Tensor:
    """Standard-normal latent code: a vector per sample, or a full noise map."""
    if mode == "broadcast":
        return torch.randn(batch, latent_dim, generator=gen)
    if mode == "pixel":
        if size is None:
            raise ValueError("pixel latent mode needs the target size")
        return torch.randn(batch, latent_dim, *size, generator=gen)
    raise ValueError(f"unknown latent mode {mode!r}")


class DiscriminatorNet(nn.Module):
    """4-layer strided patch critic; no normalization layers on the critic path.

    Emits a real-valued score map; the mean over the map is the scalar critic
    value used by the losses. The expected input resolution is fixed at
    construction and enforced.
    """

    def __init__(self, in_size: int, base_channels: int = 32, in_channels: int = 3):
        super().__init__()
        self.in_size = in_size
        self.base_channels = base_channels
        self.in_channels = in_channels
        c = base_channels
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 4 * c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(4 * c, 1, 3, padding=1),
        )

    def arch_config(self) -> dict:
        return {"in_size": self.in_size, "base_channels": self.base_channels,
                "in_channels": self.in_channels}

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        squeeze = img.dim() == 3
        x = img[None] if squeeze else img
        if tuple(x.shape[-2:]) != (self.in_size, self.in_size):
            raise ValueError(
                f"discriminator expects {self.in_size}x{self.in_size} input, "
                f"got {x.shape[-2]}x{x.shape[-1]}")
        out = self.body(x)
        return out[0] if squeeze else out


def interpolate_samples(y_real: torch.Tensor, y_fake: torch.Tensor,
                        eps: torch.Tensor | float) -> torch.Tensor:
    """eps * y_real + (1 - eps) * y_fake with one eps per batch element."""
    if y_real.shape != y_fake.shape:
        raise ValueError(
            f"shape mismatch: {tuple(y_real.shape)} vs {tuple(y_fake.shape)}")
    e = torch.as_tensor(eps, dtype=y_real.dtype)
    if e.dim() == 0:
        e = e.expand(y_real.shape[0])
    if e.shape != (y_real.shape[0],):
        raise ValueError(f"eps must be scalar or (batch,), got {tuple(e.shape)}")
    e = e.view(-1, *([1] * (y_real.dim() - 1)))
    return e * y_real + (1 - e) * y_fake
