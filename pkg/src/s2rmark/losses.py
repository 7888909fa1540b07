"""Training objectives: adversarial loss, gradient penalty, multi-scale perceptual loss.

The adversarial objective uses the numerically stable softplus parameterization
of the sigmoid-GAN loss. With critic logits s and D = sigmoid(s),
log D(y) = -softplus(-s) and log(1 - D(y)) = -softplus(s); the saturating
generator term is replaced by the standard non-saturating surrogate
softplus(-s_fake), which shares its fixed points.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import LossWeights, substream


def _check_finite(*tensors):
    for t in tensors:
        if not torch.isfinite(torch.as_tensor(t)).all():
            raise FloatingPointError("non-finite score map passed to a loss")


def adv_objective(d_real_scores: torch.Tensor, d_fake_scores: torch.Tensor) -> torch.Tensor:
    """The shared minimax objective: E[log D(real)] + E[log(1 - D(fake))].

    The discriminator maximizes this value; the generator drives it down.
    """
    _check_finite(d_real_scores, d_fake_scores)
    return -(F.softplus(-d_real_scores).mean() + F.softplus(d_fake_scores).mean())


def adv_loss(d_real_scores, d_fake_scores, side: str) -> torch.Tensor:
    """The adversarial term each side minimizes.

    generator:     softplus(-s_fake), the non-saturating surrogate.
    discriminator: the negated shared objective,
                   softplus(-s_real) + softplus(s_fake).
    """
    if side == "generator":
        _check_finite(d_fake_scores)
        return F.softplus(-d_fake_scores).mean()
    if side == "discriminator":
        return -adv_objective(d_real_scores, d_fake_scores)
    raise ValueError(f"side must be 'generator' or 'discriminator', got {side!r}")


def gradient_penalty(d: nn.Module, y_tilde: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of (||grad of the critic value wrt y_tilde||_2 - 1)^2.

    The critic value per sample is the mean of the score map. Needs an active
    autograd graph; call it on interpolated samples from interpolate_samples.
    """
    if not torch.is_grad_enabled():
        raise RuntimeError("gradient_penalty needs autograd enabled (frozen graph)")
    y = y_tilde if y_tilde.requires_grad else y_tilde.detach().requires_grad_(True)
    scores = d(y)
    critic = scores.flatten(1).mean(dim=1)
    grads = torch.autograd.grad(critic.sum(), y, create_graph=True)[0]
    norms = grads.flatten(1).norm(2, dim=1)
    return ((norms - 1.0) ** 2).mean()


class PerceptualExtractor(nn.Module):
    """Frozen feature function used by the multi-scale perceptual loss.

    Defaults to a small random-weight conv stack (3 layers, GELU, seeded init)
    that stays fixed through all training phases; `weights_path` loads an
    externally supplied state dict of the same shape instead.
    """

    def __init__(self, in_channels: int = 3, channels: int = 16, seed: int = 0,
                 weights_path=None):
        super().__init__()
        gen = substream(seed, "perceptual-init")
        self.conv1 = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv3 = nn.Conv2d(channels, channels, 3, padding=1)
        for conv in (self.conv1, self.conv2, self.conv3):
            nn.init.kaiming_uniform_(conv.weight, a=1.0, generator=gen)
            nn.init.zeros_(conv.bias)
        if weights_path is not None:
            self.load_state_dict(torch.load(weights_path, map_location="cpu"))
        self.requires_grad_(False)
        self.eval()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        return self.conv3(x)


def perceptual_multiscale(outputs: list[torch.Tensor], targets: list[torch.Tensor],
                          ext: nn.Module, k: int | None = None) -> torch.Tensor:
    """Weighted multi-scale perceptual loss over coarse-to-fine pairs.

    Returns (1 / 2^(k-1)) * sum_i mean |phi(target_i) - phi(output_i)|, where
    the per-scale mean divides by the element count of that scale's feature
    map, making each term resolution-invariant.
    """
    if k is None:
        k = len(outputs)
    if len(outputs) != k or len(targets) != k:
        raise ValueError(
            f"expected {k} scales, got {len(outputs)} outputs / {len(targets)} targets")
    total = 0.0
    for out, tgt in zip(outputs, targets):
        if out.shape != tgt.shape:
            raise ValueError(
                f"scale shape mismatch: {tuple(out.shape)} vs {tuple(tgt.shape)}")
        total = total + (ext(tgt) - ext(out)).abs().mean()
    return total / 2 ** (k - 1)


def total_g(adv: torch.Tensor, perc: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Generator total: adv + lambda_g * perceptual."""
    return adv + w.lambda_g * perc


def total_d(adv: torch.Tensor, gp: torch.Tensor, w: LossWeights) -> torch.Tensor:
    """Discriminator total: -adv + lambda_grad * gp.

    `adv` is the shared minimax objective (adv_objective); negating it gives
    the term the discriminator's optimizer minimizes.
    """
    return -adv + w.lambda_grad * gp
