"""Differentiable screen-camera distortion pipeline and affine noise-operator algebra.

Every op is shape-preserving, clamps its output to [-1, 1], and is
differentiable with respect to the input image (quantization-like effects use
smooth surrogates). `apply_pipeline` is a pure function of (image, config,
seed), so the same seed always reproduces the same distortion.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .core import ConfigError, NoiseOpConfig, NoisePipelineConfig, substream, substream_seed

KNOWN_OPS = (
    "perspective", "illumination", "moire", "gaussian",
    "grayscale_deviation", "blur", "color_shift", "jpeg_approx",
)


class DegenerateCornersError(ValueError):
    """Perspective target corners do not define an invertible homography."""


def _as_batch(img: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if img.dim() == 3:
        return img[None], True
    if img.dim() == 4:
        return img, False
    raise ValueError(f"expected (C, H, W) or (B, C, H, W), got {tuple(img.shape)}")


# ---------------------------------------------------------------------------
# Geometric: perspective warp
# ---------------------------------------------------------------------------

_UNIT_CORNERS = [(0.0, 0.0), (1.0, 0.0), (1.0, 1.0), (0.0, 1.0)]  # TL TR BR BL


def homography_from_offsets(corner_offsets) -> torch.Tensor:
    """Fit the 3x3 homography mapping unit-square corners to jittered corners."""
    off = torch.as_tensor(corner_offsets, dtype=torch.float64)
    if off.shape != (4, 2):
        raise ValueError(f"corner_offsets must be 4x2, got {tuple(off.shape)}")
    if off.abs().max() > 0.25:
        raise ValueError("corner offsets must satisfy |offset| <= 0.25")
    src = torch.tensor(_UNIT_CORNERS, dtype=torch.float64)
    dst = src + off

    # Three collinear targets make the fit rank-deficient; name the corners.
    for skip in range(4):
        tri = [dst[i] for i in range(4) if i != skip]
        cross = (tri[1][0] - tri[0][0]) * (tri[2][1] - tri[0][1]) \
            - (tri[1][1] - tri[0][1]) * (tri[2][0] - tri[0][0])
        if abs(cross) < 1e-9:
            names = [i for i in range(4) if i != skip]
            raise DegenerateCornersError(
                f"target corners {names[0]}, {names[1]}, {names[2]} are collinear"
            )

    a = torch.zeros(8, 8, dtype=torch.float64)
    b = torch.zeros(8, dtype=torch.float64)
    for i, ((x, y), (u, v)) in enumerate(zip(src.tolist(), dst.tolist())):
        a[2 * i] = torch.tensor([x, y, 1, 0, 0, 0, -u * x, -u * y])
        a[2 * i + 1] = torch.tensor([0, 0, 0, x, y, 1, -v * x, -v * y])
        b[2 * i], b[2 * i + 1] = u, v
    try:
        h = torch.linalg.solve(a, b)
    except torch.linalg.LinAlgError as exc:
        raise DegenerateCornersError(f"corner set is not invertible: {exc}") from exc
    return torch.cat([h, torch.ones(1, dtype=torch.float64)]).reshape(3, 3)


def offsets_from_homography(h: torch.Tensor) -> torch.Tensor:
    """Corner offsets realizing a homography: where the unit corners land, minus themselves."""
    src = torch.tensor(_UNIT_CORNERS, dtype=torch.float64)
    pts = torch.cat([src, torch.ones(4, 1, dtype=torch.float64)], dim=1)
    q = pts @ h.to(torch.float64).T
    return q[:, :2] / q[:, 2:3] - src


def perspective_warp(img: torch.Tensor, corner_offsets) -> torch.Tensor:
    """Warp by the homography sending unit-square corners to the jittered corners.

    Output pixel p samples the input at H(p); out-of-frame samples replicate
    the edge. Bilinear sampling keeps the op differentiable in the image.
    """
    x, squeeze = _as_batch(img)
    h_mat = homography_from_offsets(corner_offsets).to(x.dtype)
    _, _, hh, ww = x.shape
    ys = (torch.arange(hh, dtype=x.dtype) + 0.5) / hh
    xs = (torch.arange(ww, dtype=x.dtype) + 0.5) / ww
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    pts = torch.stack([gx, gy, torch.ones_like(gx)], dim=-1)  # (H, W, 3)
    q = pts @ h_mat.T
    uv = q[..., :2] / q[..., 2:3]
    grid = (2.0 * uv - 1.0)[None].expand(x.shape[0], -1, -1, -1)
    out = F.grid_sample(x, grid, mode="bilinear", padding_mode="border", align_corners=False)
    out = out.clamp(-1, 1)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Photometric ops
# ---------------------------------------------------------------------------

def illumination(img: torch.Tensor, gradient_direction: float, strength: float) -> torch.Tensor:
    """Add a zero-mean linear brightness ramp along `gradient_direction` (radians)."""
    x, squeeze = _as_batch(img)
    _, _, hh, ww = x.shape
    c, s = math.cos(gradient_direction), math.sin(gradient_direction)
    ys = (torch.arange(hh, dtype=x.dtype) + 0.5) / hh - 0.5
    xs = (torch.arange(ww, dtype=x.dtype) + 0.5) / ww - 0.5
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    denom = (abs(c) + abs(s)) / 2.0 or 1.0
    ramp = (gx * c + gy * s) / denom
    out = (x + strength * ramp).clamp(-1, 1)
    return out[0] if squeeze else out


def moire(img: torch.Tensor, freq: float, angle: float, amplitude: float,
          phases: tuple[float, float] = (0.0, math.pi / 3)) -> torch.Tensor:
    """Superimpose the product of two slightly detuned sinusoidal gratings.

    The second grating runs 2 cycles faster at a slightly rotated angle, so the
    beat pattern keeps at least 2 cycles across the image and its mean stays
    near zero. Grating frequencies are band-limited to a third of the sampling
    rate to keep the beat away from the alias at DC.
    """
    if not 0.0 <= amplitude <= 0.3:
        raise ValueError(f"moire amplitude must lie in [0, 0.3], got {amplitude}")
    x, squeeze = _as_batch(img)
    _, _, hh, ww = x.shape
    f1 = min(float(freq), min(hh, ww) / 3.0)
    f2, d_angle = f1 + 2.0, 0.05
    ys = (torch.arange(hh, dtype=x.dtype) + 0.5) / hh
    xs = (torch.arange(ww, dtype=x.dtype) + 0.5) / ww
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")

    def grating(f, th, ph):
        return torch.sin(2 * math.pi * f * (gx * math.cos(th) + gy * math.sin(th)) + ph)

    pattern = amplitude * grating(f1, angle, phases[0]) * grating(f2, angle + d_angle, phases[1])
    out = (x + pattern).clamp(-1, 1)
    return out[0] if squeeze else out


def gaussian_noise(img: torch.Tensor, sigma: float, seed: int) -> torch.Tensor:
    """Additive white Gaussian noise; the realization is fixed by `seed`."""
    x, squeeze = _as_batch(img)
    noise = torch.randn(x.shape, generator=substream(seed, "gaussian"), dtype=x.dtype)
    out = (x + sigma * noise).clamp(-1, 1)
    return out[0] if squeeze else out


def grayscale_deviation(img: torch.Tensor, delta: float) -> torch.Tensor:
    """Uniform gray-level offset applied to every channel."""
    x, squeeze = _as_batch(img)
    out = (x + delta).clamp(-1, 1)
    return out[0] if squeeze else out


def blur(img: torch.Tensor, kernel_sigma: float) -> torch.Tensor:
    """Separable Gaussian blur with circular boundary so the kernel stays normalized.

    Every output pixel is a convex combination of input pixels and every input
    pixel contributes total weight 1, so the image mean is preserved.
    """
    if kernel_sigma <= 1e-8:
        return img
    x, squeeze = _as_batch(img)
    radius = max(1, math.ceil(3.0 * kernel_sigma))
    radius = min(radius, x.shape[-1] - 1, x.shape[-2] - 1)
    t = torch.arange(-radius, radius + 1, dtype=x.dtype)
    k = torch.exp(-0.5 * (t / kernel_sigma) ** 2)
    k = k / k.sum()
    c = x.shape[1]
    padded = F.pad(x, (radius, radius, 0, 0), mode="circular")
    x = F.conv2d(padded, k.view(1, 1, 1, -1).expand(c, 1, 1, -1), groups=c)
    padded = F.pad(x, (0, 0, radius, radius), mode="circular")
    x = F.conv2d(padded, k.view(1, 1, -1, 1).expand(c, 1, -1, 1), groups=c)
    out = x.clamp(-1, 1)
    return out[0] if squeeze else out


def color_shift(img: torch.Tensor, gain, bias) -> torch.Tensor:
    """Per-channel affine transform: out = gain * img + bias."""
    x, squeeze = _as_batch(img)
    c = x.shape[1]
    g = torch.as_tensor(gain, dtype=x.dtype).flatten()
    b = torch.as_tensor(bias, dtype=x.dtype).flatten()
    if g.numel() == 1:
        g = g.expand(c)
    if b.numel() == 1:
        b = b.expand(c)
    if g.numel() != c or b.numel() != c:
        raise ValueError(f"gain/bias must be scalar or length-{c}")
    out = (x * g.view(1, c, 1, 1) + b.view(1, c, 1, 1)).clamp(-1, 1)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Compression surrogate
# ---------------------------------------------------------------------------

def _dct_matrix(n: int, dtype) -> torch.Tensor:
    i = torch.arange(n, dtype=dtype)
    u = i.view(-1, 1)
    m = torch.cos(math.pi * (2 * i + 1) * u / (2 * n)) * math.sqrt(2.0 / n)
    m[0] = math.sqrt(1.0 / n)
    return m


def jpeg_approx(img: torch.Tensor, quality_surrogate: float) -> torch.Tensor:
    """Smooth 8x8 block-transform coefficient attenuation (no hard quantization).

    Coefficient (u, v) is scaled by exp(-lambda * (u + v)) with
    lambda = 1.2 * (1 - quality); quality 1 is an exact identity. The whole op
    is linear in the image, hence differentiable.
    """
    q = float(quality_surrogate)
    if not 0.0 < q <= 1.0:
        raise ValueError(f"quality_surrogate must lie in (0, 1], got {q}")
    if q == 1.0:
        return img
    x, squeeze = _as_batch(img)
    b, c, hh, ww = x.shape
    ph, pw = (-hh) % 8, (-ww) % 8
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph), mode="replicate")
    hb, wb = x.shape[-2] // 8, x.shape[-1] // 8
    blocks = x.reshape(b, c, hb, 8, wb, 8)
    d = _dct_matrix(8, x.dtype)
    coeff = torch.einsum("ui,bchiwj,vj->bchuwv", d, blocks, d)
    lam = 1.2 * (1.0 - q)
    idx = torch.arange(8, dtype=x.dtype)
    mask = torch.exp(-lam * (idx.view(-1, 1) + idx.view(1, -1)))
    coeff = coeff * mask.view(1, 1, 1, 8, 1, 8)
    blocks = torch.einsum("ui,bchuwv,vj->bchiwj", d, coeff, d)
    x = blocks.reshape(b, c, hb * 8, wb * 8)[:, :, :hh, :ww]
    out = x.clamp(-1, 1)
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# Parameter sampling and pipeline application
# ---------------------------------------------------------------------------

def sample_op_params(op: NoiseOpConfig, gen: torch.Generator) -> dict:
    """Draw one concrete parameter set for an op from its configured ranges."""

    def u(name, default):
        lo, hi = op.range(name, default)
        return lo + (hi - lo) * torch.rand((), generator=gen).item()

    if op.kind == "perspective":
        jf = u("corner_jitter_frac", (0.0, 0.06))
        off = (torch.rand(4, 2, generator=gen) * 2 - 1) * jf
        return {"corner_offsets": off.tolist()}
    if op.kind == "illumination":
        return {"gradient_direction": u("direction", (0.0, 2 * math.pi)),
                "strength": u("strength", (0.0, 0.3))}
    if op.kind == "moire":
        return {"freq": u("freq", (8.0, 64.0)),
                "angle": u("angle", (0.0, 2 * math.pi)),
                "amplitude": u("amplitude", (0.0, 0.15)),
                "phases": (u("phase", (0.0, 2 * math.pi)), u("phase", (0.0, 2 * math.pi)))}
    if op.kind == "gaussian":
        return {"sigma": u("sigma", (0.0, 0.08)),
                "seed": int(torch.randint(2 ** 62, (1,), generator=gen).item())}
    if op.kind == "grayscale_deviation":
        return {"delta": u("delta", (-0.15, 0.15))}
    if op.kind == "blur":
        return {"kernel_sigma": u("sigma", (0.0, 1.5))}
    if op.kind == "color_shift":
        return {"gain": [u("gain", (0.85, 1.15)) for _ in range(3)],
                "bias": [u("bias", (-0.08, 0.08)) for _ in range(3)]}
    if op.kind == "jpeg_approx":
        return {"quality_surrogate": u("quality", (0.5, 1.0))}
    raise ConfigError(f"unknown noise op kind {op.kind!r}")


_OP_FN = {
    "perspective": perspective_warp,
    "illumination": illumination,
    "moire": moire,
    "gaussian": gaussian_noise,
    "grayscale_deviation": grayscale_deviation,
    "blur": blur,
    "color_shift": color_shift,
    "jpeg_approx": jpeg_approx,
}


def apply_op(img: torch.Tensor, kind: str, params: dict) -> torch.Tensor:
    if kind not in _OP_FN:
        raise ConfigError(f"unknown noise op kind {kind!r}")
    return _OP_FN[kind](img, **params)


def apply_pipeline(x_s: torch.Tensor, cfg: NoisePipelineConfig, seed: int,
                   return_log: bool = False):
    """Apply the full distortion pipeline T to one image.

    Each op samples its parameters from a substream derived from (seed, op
    position, op kind); the result is a deterministic function of
    (x_s, cfg, seed) and stays clamped to [-1, 1].
    """
    img = x_s
    param_log = {}
    for idx, op in enumerate(cfg.ops):
        if op.kind not in _OP_FN:
            raise ConfigError(f"unknown noise op kind {op.kind!r}")
        gen = substream(seed, f"op{idx}:{op.kind}")
        params = sample_op_params(op, gen)
        img = apply_op(img, op.kind, params)
        param_log[f"{idx}:{op.kind}"] = params
    img = img.clamp(-1, 1)
    return (img, param_log) if return_log else img


def apply_pipeline_batch(batch: torch.Tensor, cfg: NoisePipelineConfig, seed: int) -> torch.Tensor:
    """Apply T to a batch, one parameter draw per sample."""
    return torch.stack([
        apply_pipeline(batch[i], cfg, substream_seed(seed, f"sample{i}"))
        for i in range(batch.shape[0])
    ])


# ---------------------------------------------------------------------------
# Affine noise-operator pairs
# ---------------------------------------------------------------------------

@dataclass
class NoiseOperatorPair:
    """A (multiplicative k, additive n) operator acting as x -> k*x + n."""

    k: torch.Tensor | float
    n: torch.Tensor | float

    def __call__(self, x: torch.Tensor) -> torch.Tensor:
        return self.k * x + self.n


def compose_operator_pairs(p1: NoiseOperatorPair, p2: NoiseOperatorPair) -> NoiseOperatorPair:
    """Composition law of affine operators: applying p1 then p2 equals (k2*k1, k2*n1 + n2)."""
    for a, b in ((p1.k, p2.k), (p1.n, p2.n), (p1.k, p2.n)):
        ta, tb = torch.as_tensor(a), torch.as_tensor(b)
        try:
            torch.broadcast_shapes(ta.shape, tb.shape)
        except RuntimeError as exc:
            raise ValueError(f"operator fields are not broadcast-compatible: {exc}") from exc
    return NoiseOperatorPair(k=p2.k * p1.k, n=p2.k * p1.n + p2.n)


# ---------------------------------------------------------------------------
# Pipeline variants
# ---------------------------------------------------------------------------

def pipeline_config(variant: str = "pimog_like") -> NoisePipelineConfig:
    """Build one of the named distortion-set variants.

    pimog_like      perspective -> illumination -> moire -> gaussian
    stegastamp_like perspective -> blur -> color_shift -> gaussian -> jpeg_approx
    ssds_like       pimog_like plus a grayscale deviation stage
    """
    if variant == "pimog_like":
        ops = [
            NoiseOpConfig("perspective", {"corner_jitter_frac": [0.0, 0.06]}),
            NoiseOpConfig("illumination", {"strength": [0.0, 0.3]}),
            NoiseOpConfig("moire", {"amplitude": [0.0, 0.15], "freq": [8.0, 64.0]}),
            NoiseOpConfig("gaussian", {"sigma": [0.0, 0.08]}),
        ]
    elif variant == "stegastamp_like":
        ops = [
            NoiseOpConfig("perspective", {"corner_jitter_frac": [0.0, 0.06]}),
            NoiseOpConfig("blur", {"sigma": [0.0, 1.5]}),
            NoiseOpConfig("color_shift", {"gain": [0.85, 1.15], "bias": [-0.08, 0.08]}),
            NoiseOpConfig("gaussian", {"sigma": [0.0, 0.08]}),
            NoiseOpConfig("jpeg_approx", {"quality": [0.5, 1.0]}),
        ]
    elif variant == "ssds_like":
        ops = pipeline_config("pimog_like").ops + [
            NoiseOpConfig("grayscale_deviation", {"delta": [-0.15, 0.15]}),
        ]
    else:
        raise ConfigError(f"unknown pipeline variant {variant!r}")
    return NoisePipelineConfig(ops=ops, variant_name=variant)


def capture_standin_config() -> NoisePipelineConfig:
    """Held-out capture channel used only for evaluation and desk-scale tests.

    Its op set is disjoint from the training variants above and its photometry
    is shifted (darkening gain/bias), standing in for a real screen-camera
    capture that the training-time pipeline does not model.
    """
    ops = [
        NoiseOpConfig("blur", {"sigma": [0.4, 1.2]}),
        NoiseOpConfig("color_shift", {"gain": [0.62, 0.80], "bias": [-0.18, -0.06]}),
        NoiseOpConfig("grayscale_deviation", {"delta": [-0.22, -0.10]}),
        NoiseOpConfig("jpeg_approx", {"quality": [0.55, 0.85]}),
    ]
    return NoisePipelineConfig(ops=ops, variant_name="capture_standin")
