import csv
import math

import pytest
import torch

from s2rmark.core import RunConfig, UnpairedDataset, random_message, substream
from s2rmark.metrics import hist_compare
from s2rmark.simnoise import apply_pipeline, capture_standin_config, pipeline_config
from s2rmark.train import (
    TrainingDiverged, load_codec, load_generator, make_noise_chain,
    train_s2r, train_s2r_supervised, train_watermark,
)
from s2rmark.translator import sample_latent
from s2rmark.watermark import ber, decode, encode

from conftest import synth_image


def desk_cfg(resolution=16, message_length=8, **kw):
    base = dict(seed=0, train_resolution=resolution, message_length=message_length,
                batch_size=8, scales_k=2, base_channels=8, latent_dim=4,
                noise_pipeline=pipeline_config("pimog_like"))
    base.update(kw)
    return RunConfig(**base)


def desk_dataset(resolution=16, n=24):
    sharp = [synth_image(s, resolution) for s in range(n)]
    standin = capture_standin_config()
    real = [apply_pipeline(synth_image(1000 + s, resolution), standin, seed=s)
            for s in range(n)]
    return UnpairedDataset(sharp=sharp, real_sc=real, resolution=resolution)


def read_loss_csv(path):
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


class TestTrainS2R:
    def test_smoke_losses_finite(self, tmp_path):
        cfg = desk_cfg()
        ckpt = train_s2r(desk_dataset(), cfg, tmp_path / "run", steps=200)
        rows = read_loss_csv(tmp_path / "run" / "loss.csv")
        assert len(rows) == 200
        for row in rows:
            for col in ("total_G", "adv_G", "perc", "total_D", "gp"):
                assert math.isfinite(float(row[col]))
        assert ckpt.exists()

    def test_resume_reproduces_loss_sequence(self, tmp_path):
        cfg = desk_cfg()
        cfg.train.checkpoint_every = 10
        train_s2r(desk_dataset(), cfg, tmp_path / "full", steps=20)
        mid = train_s2r(desk_dataset(), cfg, tmp_path / "half", steps=10)
        train_s2r(desk_dataset(), cfg, tmp_path / "half", resume=mid, steps=20)
        full = read_loss_csv(tmp_path / "full" / "loss.csv")
        resumed = read_loss_csv(tmp_path / "half" / "loss.csv")
        assert full == resumed

    def test_two_runs_identical_csv(self, tmp_path):
        cfg = desk_cfg()
        train_s2r(desk_dataset(), cfg, tmp_path / "a", steps=8)
        train_s2r(desk_dataset(), cfg, tmp_path / "b", steps=8)
        assert (tmp_path / "a" / "loss.csv").read_bytes() \
            == (tmp_path / "b" / "loss.csv").read_bytes()

    def test_divergence_guard_keeps_last_checkpoint(self, tmp_path):
        cfg = desk_cfg()
        cfg.train.divergence_threshold = 1e-9  # any real loss trips it
        cfg.train.checkpoint_every = 1
        with pytest.raises(TrainingDiverged):
            train_s2r(desk_dataset(), cfg, tmp_path / "div", steps=5)

    def test_checkpoint_loads_as_generator(self, tmp_path):
        cfg = desk_cfg()
        ckpt = train_s2r(desk_dataset(), cfg, tmp_path / "g", steps=4)
        gen = load_generator(ckpt)
        z = sample_latent(1, cfg.latent_dim, substream(0, "z"))
        outs = gen(torch.zeros(1, 3, 16, 16), z)
        assert len(outs) == cfg.scales_k


class TestTrainWatermark:
    def test_identity_chain_converges_to_low_ber(self, tmp_path):
        cfg = desk_cfg()
        covers = [synth_image(s, 16) for s in range(24)]
        ckpt = train_watermark(covers, make_noise_chain(cfg, "identity"), cfg,
                               tmp_path / "wm", steps=2200)
        rows = read_loss_csv(tmp_path / "wm" / "loss.csv")
        tail = [float(r["ber_percent"]) for r in rows[-50:]]
        assert sum(tail) / len(tail) < 1.0
        # decode round-trip on the train set with the saved codec
        enc, dec = load_codec(ckpt)
        wrong = 0
        with torch.no_grad():
            for i, cover in enumerate(covers):
                msg = random_message(8, substream(9, f"rt{i}"))
                _, bits = decode(encode(cover, msg, enc), dec)
                wrong += ber(bits, msg) > 0
        assert wrong <= 1

    def test_generator_frozen_through_phase_b(self, tmp_path):
        cfg = desk_cfg()
        g_ckpt = train_s2r(desk_dataset(), cfg, tmp_path / "g", steps=4)
        gen = load_generator(g_ckpt)
        before = {n: p.detach().clone() for n, p in gen.named_parameters()}
        chain = make_noise_chain(cfg, "tg", gen)
        covers = [synth_image(s, 16) for s in range(16)]
        train_watermark(covers, chain, cfg, tmp_path / "wm", steps=6)
        for n, p in gen.named_parameters():
            assert torch.equal(before[n], p.detach()), f"generator drifted: {n}"

    def test_optimizer_changes_codec_parameters(self, tmp_path):
        cfg = desk_cfg()
        covers = [synth_image(s, 16) for s in range(8)]
        ckpt = train_watermark(covers, make_noise_chain(cfg, "identity"), cfg,
                               tmp_path / "wm1", steps=1)
        enc, dec = load_codec(ckpt)
        from s2rmark.train import init_codec_nets
        enc0, dec0 = init_codec_nets(cfg)
        changed = any(not torch.equal(a, b) for (_, a), (_, b)
                      in zip(enc0.state_dict().items(), enc.state_dict().items()))
        assert changed

    def test_unknown_chain_rejected(self):
        cfg = desk_cfg()
        from s2rmark.core import ConfigError
        with pytest.raises(ConfigError):
            make_noise_chain(cfg, "warp")

    def test_tg_chain_needs_generator(self):
        from s2rmark.core import ConfigError
        with pytest.raises(ConfigError):
            make_noise_chain(desk_cfg(), "tg")


class TestTrainSupervised:
    def test_identity_pairs_learn_identity(self, tmp_path):
        cfg = desk_cfg()
        cfg.train.lr_g = 1e-3
        imgs = [synth_image(s, 16) for s in range(16)]
        ckpt = train_s2r_supervised((imgs, [i.clone() for i in imgs]), cfg,
                                    tmp_path / "sup", steps=600)
        gen = load_generator(ckpt)
        with torch.no_grad():
            residuals = []
            for i, img in enumerate(imgs):
                z = sample_latent(1, cfg.latent_dim, substream(3, f"z{i}"))
                out = gen(img[None], z)[-1][0]
                residuals.append((out - img).abs().mean().item())
        assert sum(residuals) / len(residuals) < 0.05

    def test_loss_nonincreasing_over_windows(self, tmp_path):
        cfg = desk_cfg()
        cfg.train.lr_g = 1e-3
        imgs = [synth_image(s, 16) for s in range(16)]
        train_s2r_supervised((imgs, [i.clone() for i in imgs]), cfg,
                             tmp_path / "sup2", steps=400)
        rows = read_loss_csv(tmp_path / "sup2" / "loss.csv")
        losses = [float(r["total"]) for r in rows]
        q = len(losses) // 4
        windows = [sum(losses[i * q:(i + 1) * q]) / q for i in range(4)]
        assert all(b <= a + 1e-6 for a, b in zip(windows, windows[1:]))

    def test_unpaired_lengths_rejected(self, tmp_path):
        from s2rmark.core import ConfigError
        imgs = [synth_image(s, 16) for s in range(4)]
        with pytest.raises(ConfigError):
            train_s2r_supervised((imgs, imgs[:3]), desk_cfg(), tmp_path / "bad")

    def test_checkpoint_interchangeable_in_phase_b(self, tmp_path):
        cfg = desk_cfg()
        imgs = [synth_image(s, 16) for s in range(8)]
        ckpt = train_s2r_supervised((imgs, imgs), cfg, tmp_path / "sup3", steps=3)
        gen = load_generator(ckpt)  # same checkpoint format as the adversarial path
        chain = make_noise_chain(cfg, "tg", gen)
        train_watermark(imgs, chain, cfg, tmp_path / "wm3", steps=2)
