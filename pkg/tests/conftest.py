import math

import numpy as np
import pytest
import torch
from PIL import Image

from s2rmark.core import denormalize, substream

# small desk-scale tensors run faster and fully deterministically on one thread
torch.set_num_threads(1)


def synth_image(seed: int, resolution: int, channels: int = 3) -> torch.Tensor:
    """Smooth deterministic test image: colored base + gratings + one soft blob.

    Values stay inside [-0.85, 0.85] so clamp-sensitive tests start away from
    the rails.
    """
    gen = substream(seed, "synth")
    h = w = resolution
    ys = torch.linspace(0, 1, h).view(-1, 1)
    xs = torch.linspace(0, 1, w).view(1, -1)
    img = (torch.rand(channels, 1, 1, generator=gen) * 0.7 - 0.35).expand(channels, h, w).clone()
    for _ in range(3):
        amp = 0.1 + 0.2 * torch.rand((), generator=gen).item()
        f = 1.0 + 5.0 * torch.rand((), generator=gen).item()
        th = 2 * math.pi * torch.rand((), generator=gen).item()
        ph = 2 * math.pi * torch.rand((), generator=gen).item()
        wave = torch.sin(2 * math.pi * f * (xs * math.cos(th) + ys * math.sin(th)) + ph)
        weights = torch.rand(channels, 1, 1, generator=gen)
        img = img + amp * weights * wave
    cy, cx = torch.rand(2, generator=gen).tolist()
    r = 0.15 + 0.2 * torch.rand((), generator=gen).item()
    blob = torch.exp(-(((xs - cx) ** 2 + (ys - cy) ** 2) / (2 * r ** 2)))
    img = img + (torch.rand(channels, 1, 1, generator=gen) * 0.8 - 0.4) * blob
    return img.clamp(-0.85, 0.85)


def write_png(img: torch.Tensor, path) -> None:
    Image.fromarray(denormalize(img)).save(path, format="PNG")


def make_image_dir(path, seeds, resolution):
    path.mkdir(parents=True, exist_ok=True)
    for s in seeds:
        write_png(synth_image(s, resolution), path / f"img{s:04d}.png")
    return path


@pytest.fixture
def image_dir_factory(tmp_path):
    def factory(name, seeds, resolution=32):
        return make_image_dir(tmp_path / name, seeds, resolution)
    return factory
