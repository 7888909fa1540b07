import pytest
import torch
from torch.optim import Adam

from s2rmark.core import LossWeights, substream
from s2rmark.losses import PerceptualExtractor, adv_loss, perceptual_multiscale, total_g
from s2rmark.translator import (
    DiscriminatorNet, GeneratorNet, interpolate_samples, sample_latent,
)

from conftest import synth_image


def make_gen(k=3, c=8, d=4):
    torch.manual_seed(0)
    return GeneratorNet(scales_k=k, base_channels=c, latent_dim=d)


class TestGeneratorShapes:
    def test_scale_schedule_32(self):
        g = make_gen()
        outs = g(torch.zeros(2, 3, 32, 32), torch.zeros(2, 4))
        assert [tuple(o.shape[-2:]) for o in outs] == [(8, 8), (16, 16), (32, 32)]

    def test_indivisible_size_names_multiple(self):
        g = make_gen()
        with pytest.raises(ValueError, match="divisible by 4"):
            g(torch.zeros(1, 3, 30, 30), torch.zeros(1, 4))

    def test_outputs_bounded(self):
        g = make_gen()
        x = torch.ones(1, 3, 16, 16)
        for out in g(x, torch.randn(1, 4) * 10):
            assert out.min() >= -1.0 and out.max() <= 1.0

    def test_random_valid_sizes_property(self):
        gen = substream(0, "sizes")
        for k in (2, 3):
            g = make_gen(k=k)
            for _ in range(4):
                f = 2 ** (k - 1)
                h = f * int(torch.randint(2, 9, (1,), generator=gen))
                w = f * int(torch.randint(2, 9, (1,), generator=gen))
                outs = g(torch.zeros(1, 3, h, w), torch.zeros(1, 4))
                assert len(outs) == k
                for i, o in enumerate(outs):
                    expect = (h >> (k - 1 - i), w >> (k - 1 - i))
                    assert tuple(o.shape[-2:]) == expect

    def test_unbatched_input_accepted(self):
        g = make_gen()
        outs = g(synth_image(0, 32), torch.zeros(1, 4))
        assert outs[-1].shape == (3, 32, 32)

    def test_latent_shape_validated(self):
        g = make_gen()
        with pytest.raises(ValueError, match="latent"):
            g(torch.zeros(1, 3, 32, 32), torch.zeros(1, 7))


class TestLatentInjection:
    def test_zeroing_z_changes_output(self):
        g = make_gen()
        x = synth_image(1, 32)[None]
        z = torch.randn(1, 4, generator=substream(0, "z"))
        a = g(x, z)[-1]
        b = g(x, torch.zeros(1, 4))[-1]
        assert (a - b).abs().mean() > 0

    def test_different_z_different_output(self):
        g = make_gen()
        x = synth_image(2, 32)[None]
        za = torch.randn(1, 4, generator=substream(1, "za"))
        zb = torch.randn(1, 4, generator=substream(1, "zb"))
        assert (g(x, za)[-1] - g(x, zb)[-1]).abs().mean() > 0

    def test_pixel_latent_mode(self):
        g = make_gen()
        z = sample_latent(2, 4, substream(0, "zmap"), mode="pixel", size=(32, 32))
        assert z.shape == (2, 4, 32, 32)
        outs = g(torch.zeros(2, 3, 32, 32), z)
        assert outs[-1].shape == (2, 3, 32, 32)


class TestGradientFlow:
    def test_every_submodule_updates_after_one_step(self):
        torch.manual_seed(7)
        g = make_gen()
        d = DiscriminatorNet(32, base_channels=8)
        phi = PerceptualExtractor(seed=0, channels=8)
        opt = Adam(g.parameters(), lr=1e-3)
        x = torch.stack([synth_image(s, 32) for s in range(4)])
        before = {n: p.detach().clone() for n, p in g.named_parameters()}

        outs = g(x, torch.randn(4, 4))
        targets = [torch.stack([synth_image(s + 10, 32 >> (2 - i)) for s in range(4)])
                   for i in range(3)]
        loss = total_g(adv_loss(None, d(outs[-1]), "generator"),
                       perceptual_multiscale(outs, targets, phi), LossWeights())
        opt.zero_grad()
        loss.backward()
        opt.step()

        stale = [n for n, p in g.named_parameters()
                 if torch.equal(before[n], p.detach())]
        assert not stale, f"parameters without updates: {stale}"


class TestDiscriminator:
    def test_forward_is_pure(self):
        torch.manual_seed(1)
        d = DiscriminatorNet(32, base_channels=8)
        x = synth_image(3, 32)[None]
        assert torch.equal(d(x), d(x))

    def test_wrong_resolution_rejected(self):
        d = DiscriminatorNet(32, base_channels=8)
        with pytest.raises(ValueError, match="32x32"):
            d(torch.zeros(1, 3, 64, 64))

    def test_fresh_net_scores_bounded(self):
        # standard small-gain init keeps raw critic scores modest
        for seed in range(3):
            torch.manual_seed(seed)
            d = DiscriminatorNet(32, base_channels=8)
            x = torch.rand(4, 3, 32, 32) * 2 - 1
            assert d(x).mean().abs().item() < 10

    def test_score_map_finite(self):
        torch.manual_seed(2)
        d = DiscriminatorNet(32, base_channels=8)
        x = torch.ones(2, 3, 32, 32)
        assert torch.isfinite(d(x)).all()


class TestInterpolateSamples:
    def test_endpoints_and_midpoint(self):
        real = torch.ones(2, 3, 8, 8)
        fake = -torch.ones(2, 3, 8, 8)
        assert torch.equal(interpolate_samples(real, fake, 1.0), real)
        assert torch.equal(interpolate_samples(real, fake, 0.0), fake)
        assert torch.all(interpolate_samples(real, fake, 0.5) == 0)

    def test_per_sample_eps(self):
        real = torch.ones(2, 1, 2, 2)
        fake = torch.zeros(2, 1, 2, 2)
        out = interpolate_samples(real, fake, torch.tensor([1.0, 0.25]))
        assert torch.all(out[0] == 1.0) and torch.all(out[1] == 0.25)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            interpolate_samples(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 4, 4), 0.5)
