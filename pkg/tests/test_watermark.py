import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from s2rmark.core import denormalize, normalize, random_message, resize, substream
from s2rmark.watermark import (
    DecoderNet, EncoderNet, ber, decode, encode, resolution_scale_embed,
    scaling_residual,
)

from conftest import synth_image


def fresh_codec(length=16, resolution=32, seed=0):
    torch.manual_seed(seed)
    return (EncoderNet(message_length=length, resolution=resolution, base_channels=16),
            DecoderNet(message_length=length, resolution=resolution, base_channels=16))


class TestEncoder:
    def test_zero_initialized_head_is_identity(self):
        enc, _ = fresh_codec()
        enc.zero_residual_()
        cover = synth_image(0, 32)
        msg = random_message(16, substream(0, "m"))
        assert (encode(cover, msg, enc) - cover).abs().max() < 1e-6

    def test_output_bounded_at_rails(self):
        enc, _ = fresh_codec(seed=1)
        with torch.no_grad():
            enc.head.weight.add_(0.5)  # exaggerate the residual
        cover = torch.ones(3, 32, 32)
        out = encode(cover, random_message(16, substream(1, "m")), enc)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_wrong_resolution_points_to_scaling(self):
        enc, _ = fresh_codec()
        with pytest.raises(ValueError, match="resolution_scale_embed"):
            encode(synth_image(0, 64), random_message(16, substream(0, "m")), enc)

    def test_wrong_message_length_rejected(self):
        enc, _ = fresh_codec()
        with pytest.raises(ValueError, match="length"):
            encode(synth_image(0, 32), torch.zeros(8), enc)


class TestDecoder:
    def test_tie_scores_read_as_zero(self):
        _, dec = fresh_codec()
        with torch.no_grad():
            for p in dec.parameters():
                p.zero_()  # logits 0 -> scores exactly 0.5
        scores, bits = decode(synth_image(0, 32), dec)
        assert torch.all(scores == 0.5)
        assert torch.all(bits == 0)

    def test_score_length_matches_message_length(self):
        _, dec = fresh_codec(length=24)
        scores, bits = decode(synth_image(1, 32), dec)
        assert scores.shape == (24,) and bits.shape == (24,)

    def test_foreign_resolution_resized(self):
        _, dec = fresh_codec()
        scores, _ = decode(synth_image(2, 128), dec)
        assert scores.shape == (16,)


class TestBer:
    def test_trivial_cases(self):
        a = random_message(64, substream(0, "a"))
        assert ber(a, a) == 0.0
        assert ber(a, 1 - a) == 100.0

    def test_two_flips_in_64(self):
        a = torch.zeros(64)
        b = a.clone()
        b[3] = b[40] = 1.0
        assert ber(a, b) == pytest.approx(3.125)

    def test_length_mismatch_rejected(self):
        with pytest.raises(ValueError):
            ber(torch.zeros(8), torch.zeros(9))

    def test_exhaustive_length8_against_popcount(self):
        # independent oracle: integer popcount over all 2^8 x 2^8 pairs
        msgs = [torch.tensor([float(b) for b in format(v, "08b")]) for v in range(256)]
        for va in range(256):
            for vb in range(256):
                expect = 100.0 * bin(va ^ vb).count("1") / 8
                assert ber(msgs[va], msgs[vb]) == pytest.approx(expect)

    @given(st.integers(0, 255), st.integers(0, 255), st.integers(0, 255))
    @settings(max_examples=200, deadline=None)
    def test_metric_properties_length8(self, va, vb, vc):
        def msg(v):
            return torch.tensor([float(b) for b in format(v, "08b")])

        dab, dba = ber(msg(va), msg(vb)), ber(msg(vb), msg(va))
        assert dab == dba
        assert ber(msg(va), msg(vc)) <= dab + ber(msg(vb), msg(vc))
        assert (dab == 0) == (va == vb)


class TestResolutionScaling:
    def test_native_resolution_equals_direct_encode(self):
        enc, _ = fresh_codec(seed=3)
        msg = random_message(16, substream(3, "m"))
        u8 = denormalize(synth_image(3, 32))
        via_scaling = resolution_scale_embed(u8, msg, enc)
        with torch.no_grad():
            direct = denormalize(encode(normalize(u8), msg, enc))
        assert (via_scaling.astype(int) - direct.astype(int) == 0).all()

    @pytest.mark.parametrize("resolution", [32, 48, 96])
    def test_zero_residual_encoder_changes_nothing(self, resolution):
        enc, _ = fresh_codec()
        enc.zero_residual_()  # E(x) == x exactly
        msg = random_message(16, substream(4, "m"))
        u8 = denormalize(synth_image(4, resolution))
        out = resolution_scale_embed(u8, msg, enc)
        assert np.abs(out.astype(int) - u8.astype(int)).max() <= 1

    def test_residual_linearity_under_interpolation(self):
        # scaling the encoder residual by alpha scales the upsampled residual
        enc, _ = fresh_codec(seed=5)
        msg = random_message(16, substream(5, "m"))
        x = synth_image(5, 80)
        with torch.no_grad():
            base = scaling_residual(x, msg, enc)
            x_native = resize(x, (32, 32))
            r_native = encode(x_native, msg, enc) - x_native
            scaled = resize(2.0 * r_native, (80, 80))
        assert (scaled - 2.0 * base).abs().max() < 1e-6

    def test_accepts_uint8_arrays_and_tensors(self):
        enc, _ = fresh_codec()
        msg = random_message(16, substream(6, "m"))
        img = synth_image(6, 40)
        out_t = resolution_scale_embed(img, msg, enc)
        out_a = resolution_scale_embed(denormalize(img), msg, enc)
        assert out_t.shape == out_a.shape == (40, 40, 3)
