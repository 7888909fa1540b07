"""Watermark encoder/decoder networks, message embedding, and resolution scaling.

The encoder replicates the message spatially, concatenates it with cover
features, runs residual blocks, and adds a zero-initialized residual head onto
the cover, so a fresh net is an exact identity. The decoder is a strided conv
stack with a global pool and a per-bit head.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import denormalize, normalize, resize


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class _MessageBlock(nn.Module):
    """Residual conv block with the message planes re-injected at its input."""

    def __init__(self, channels: int, message_length: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels + message_length, channels, 3, padding=1)
        self.norm = _gn(channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, f, m):
        return f + self.conv2(F.relu(self.norm(self.conv1(torch.cat([f, m], dim=1)))))


class EncoderNet(nn.Module):
    """Residual message embedder operating at a fixed native resolution.

    The message is spatially replicated and concatenated back in at every
    residual block. The watermark is an additive residual on the cover, so
    zeroing `head` turns the encoder into an exact identity.
    """

    def __init__(self, message_length: int = 64, resolution: int = 128,
                 base_channels: int = 32, in_channels: int = 3):
        super().__init__()
        self.message_length = message_length
        self.resolution = resolution
        self.base_channels = base_channels
        self.in_channels = in_channels
        c = base_channels
        self.stem = nn.Conv2d(in_channels, c, 3, padding=1)
        self.stem_norm = _gn(c)
        self.blocks = nn.ModuleList(
            _MessageBlock(c, message_length) for _ in range(4))
        self.head = nn.Conv2d(c, in_channels, 1)

    def zero_residual_(self) -> "EncoderNet":
        """Zero the output head in place, making encode the identity map."""
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)
        return self

    def arch_config(self) -> dict:
        return {"message_length": self.message_length, "resolution": self.resolution,
                "base_channels": self.base_channels, "in_channels": self.in_channels}

    def residual(self, cover: torch.Tensor, msg: torch.Tensor) -> torch.Tensor:
        b, _, h, w = cover.shape
        m = msg.to(cover.dtype)[:, :, None, None].expand(b, self.message_length, h, w)
        f = F.relu(self.stem_norm(self.stem(cover)))
        for block in self.blocks:
            f = block(f, m)
        return self.head(f)

    def forward(self, cover: torch.Tensor, msg: torch.Tensor) -> torch.Tensor:
        if tuple(cover.shape[-2:]) != (self.resolution, self.resolution):
            raise ValueError(
                f"cover is {cover.shape[-2]}x{cover.shape[-1]} but the encoder's native "
                f"resolution is {self.resolution}; use resolution_scale_embed instead")
        if msg.shape[-1] != self.message_length:
            raise ValueError(
                f"message length {msg.shape[-1]} != encoder length {self.message_length}")
        return (cover + self.residual(cover, msg)).clamp(-1, 1)


class DecoderNet(nn.Module):
    """Strided conv stack + global pool + per-bit logits."""

    def __init__(self, message_length: int = 64, resolution: int = 128,
                 base_channels: int = 32, in_channels: int = 3):
        super().__init__()
        self.message_length = message_length
        self.resolution = resolution
        self.base_channels = base_channels
        self.in_channels = in_channels
        c = base_channels
        self.body = nn.Sequential(
            nn.Conv2d(in_channels, c, 3, stride=2, padding=1),
            _gn(c), nn.ReLU(),
            nn.Conv2d(c, 2 * c, 3, stride=2, padding=1),
            _gn(2 * c), nn.ReLU(),
            nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1),
            _gn(4 * c), nn.ReLU(),
            nn.Conv2d(4 * c, 4 * c, 3, padding=1),
            _gn(4 * c), nn.ReLU(),
        )
        self.fc = nn.Linear(4 * c, message_length)

    def arch_config(self) -> dict:
        return {"message_length": self.message_length, "resolution": self.resolution,
                "base_channels": self.base_channels, "in_channels": self.in_channels}

    def forward(self, img: torch.Tensor) -> torch.Tensor:
        if tuple(img.shape[-2:]) != (self.resolution, self.resolution):
            raise ValueError(
                f"decoder expects {self.resolution}x{self.resolution} input, "
                f"got {img.shape[-2]}x{img.shape[-1]}")
        f = self.body(img)
        return self.fc(f.mean(dim=(2, 3)))


def encode(cover: torch.Tensor, msg: torch.Tensor, net: EncoderNet) -> torch.Tensor:
    """Embed a message: watermarked = clamp(cover + residual(cover, msg))."""
    squeeze = cover.dim() == 3
    c = cover[None] if squeeze else cover
    m = msg[None] if msg.dim() == 1 else msg
    out = net(c, m)
    return out[0] if squeeze else out


def decode(img: torch.Tensor, net: DecoderNet):
    """Extract (soft scores in [0,1], hard bits); score > 0.5 reads as 1, ties as 0.

    Inputs at a foreign resolution are resized to the decoder's native one.
    """
    squeeze = img.dim() == 3
    x = img[None] if squeeze else img
    if tuple(x.shape[-2:]) != (net.resolution, net.resolution):
        x = resize(x, (net.resolution, net.resolution))
    scores = torch.sigmoid(net(x))
    bits = (scores > 0.5).to(torch.float32)
    if squeeze:
        scores, bits = scores[0], bits[0]
    return scores, bits


def ber(a: torch.Tensor, b: torch.Tensor) -> float:
    """Bit error rate in percent: 100 * mismatches / length."""
    av, bv = a.flatten(), b.flatten()
    if av.shape != bv.shape:
        raise ValueError(f"message lengths differ: {av.shape[0]} vs {bv.shape[0]}")
    mismatches = ((av > 0.5) != (bv > 0.5)).sum().item()
    return 100.0 * mismatches / av.shape[0]


def scaling_residual(x_norm: torch.Tensor, msg: torch.Tensor, enc: EncoderNet) -> torch.Tensor:
    """The pre-clamp watermark residual at the input's own resolution.

    Runs the encoder at its native size and resamples the residual back, so it
    is linear in the encoder residual up to interpolation.
    """
    native = (enc.resolution, enc.resolution)
    x_native = resize(x_norm, native)
    r_native = encode(x_native, msg, enc) - x_native
    return resize(r_native, x_norm.shape[-2:])


def resolution_scale_embed(x_o, msg: torch.Tensor, enc: EncoderNet) -> np.ndarray:
    """Watermark an arbitrary-resolution integer image with a fixed-resolution encoder.

    normalize to [-1, 1]; resample to the native size; take the encoder
    residual; resample the residual back; add, clamp, and denormalize.
    Degenerates to plain encode when the image is already at native size.
    """
    x_norm = normalize(x_o) if not torch.is_tensor(x_o) else x_o
    with torch.no_grad():
        r = scaling_residual(x_norm, msg, enc)
        x_w = (x_norm + r).clamp(-1, 1)
    return denormalize(x_w)
