import math

import numpy as np
import pytest
import torch

from sarmim.backbone import (
    AttnDistanceReport,
    EncoderConfig,
    MimDecoder,
    attention_distance,
    build_encoder,
    mean_attention_distance,
    patchify_units,
    sincos_pos_embed,
)
from sarmim.checkpoint import EncoderCheckpoint
from sarmim.errors import IncompatibleCheckpointError, ParameterError, ShapeError
from sarmim.pretrain import make_mask

SMALL = EncoderConfig(input_size=64, dims=(16, 32, 32), depths=(1, 1, 2), num_heads=2)


def images(b, size, seed=0, c=1):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(b, c, size, size, generator=g)


class TestConfig:
    def test_grids(self):
        assert EncoderConfig().grid == 8 and EncoderConfig().stride == 16
        assert EncoderConfig(input_size=64).grid == 4

    def test_invalid(self):
        with pytest.raises(ParameterError):
            EncoderConfig(input_size=100)
        with pytest.raises(ParameterError):
            EncoderConfig(dims=(32, 64, 130))
        with pytest.raises(ParameterError):
            EncoderConfig(variant="swin")

    def test_hash_and_round_trip(self):
        cfg = EncoderConfig(input_size=64)
        assert EncoderConfig.from_dict(cfg.to_dict()) == cfg
        assert cfg.config_hash() == EncoderConfig(input_size=64).config_hash()
        assert cfg.config_hash() != EncoderConfig().config_hash()

    def test_default_parameter_count_stable(self):
        a, b = build_encoder(EncoderConfig(), 0), build_encoder(EncoderConfig(), 5)
        assert a.num_parameters() == b.num_parameters() == 593_408
        assert 0.4e6 < a.num_parameters() < 0.7e6


class TestPatchEmbed:
    @pytest.mark.parametrize("size,grid", [(128, 32), (64, 16)])
    def test_patch_grid(self, size, grid):
        units = patchify_units(images(2, size), 4)
        assert units.shape == (2, (size // 16) ** 2, 16, 16)
        assert units.shape[1] * units.shape[2] == grid * grid

    def test_patchify_layout(self):
        img = torch.arange(32 * 32, dtype=torch.float32).reshape(1, 1, 32, 32)
        units = patchify_units(img, 4)
        # unit 1 is the top-right 16x16 block; its sub-patch 4 starts at row 4, col 16
        assert torch.equal(units[0, 1, 4], img[0, 0, 4:8, 16:20].reshape(-1))

    def test_zero_image_zero_tokens(self):
        enc = build_encoder(SMALL)
        units = enc.units(torch.zeros(1, 1, 64, 64))
        assert not enc.patch_embed(units).any()

    def test_size_mismatch(self):
        enc = build_encoder(SMALL)
        with pytest.raises(ShapeError):
            enc(torch.zeros(1, 1, 128, 128))
        with pytest.raises(ShapeError):
            enc(torch.zeros(1, 1, 64, 64), torch.zeros(2, 3, dtype=torch.long))
        with pytest.raises(ShapeError):
            enc(torch.zeros(1, 1, 64, 64), torch.tensor([[99]]))


class TestEncode:
    def test_no_masking_bit_identical(self):
        enc = build_encoder(SMALL).eval()
        x = images(3, 64)
        ids = enc.default_ids(3).clone()
        with torch.no_grad():
            assert torch.equal(enc(x), enc(x, ids))

    def test_stage3_length_at_075(self):
        enc = build_encoder(EncoderConfig()).eval()
        plan = make_mask(8, 0.75, seed=3)
        ids = torch.as_tensor(plan.visible).unsqueeze(0)
        seen = {}
        enc.blocks[0].register_forward_pre_hook(lambda m, args: seen.update(n=args[0].shape[1]))
        with torch.no_grad():
            out = enc(images(1, 128), ids)
        assert seen["n"] == 16 and out.shape == (1, 16, 128)
        assert enc.token_counts(16) == {"stage1": 256, "stage2": 64, "stage3": 16}

    def test_masked_matches_restricted_full(self):
        enc = build_encoder(SMALL).double().eval()
        x = images(2, 64).double()
        ids = torch.tensor([[0, 5, 7, 12], [3, 4, 9, 15]])
        with torch.no_grad():
            masked = enc(x, ids)
            local = enc.local_stages(enc.units(x))
            local = torch.stack([local[b, ids[b]] for b in range(2)])
            full = enc.global_stage(local, ids)
        torch.testing.assert_close(masked, full, rtol=0, atol=1e-12)

    def test_permutation_equivariance_without_positions(self):
        enc = build_encoder(SMALL).double().eval()
        x = torch.randn(1, 4, 32, dtype=torch.float64)
        ids = torch.arange(4).unsqueeze(0)
        perm = torch.tensor([2, 0, 3, 1])
        inv = torch.argsort(perm)
        with torch.no_grad():
            base = enc.global_stage(x, ids, add_pos=False)
            permuted = enc.global_stage(x[:, perm], ids, add_pos=False)[:, inv]
        assert torch.max(torch.abs(base - permuted)) <= 1e-6

    def test_attention_rows_sum_to_one(self):
        enc = build_encoder(SMALL).eval()
        mods = enc.attention_modules()
        for m in mods:
            m.record = True
        with torch.no_grad():
            enc(images(2, 64))
        for m in mods:
            torch.testing.assert_close(m.last_attn.sum(-1), torch.ones_like(m.last_attn.sum(-1)), atol=1e-6,
                                       rtol=0)

    def test_vit_variant(self):
        cfg = EncoderConfig(input_size=64, dims=(16, 32, 32), depths=(0, 0, 2), num_heads=2, variant="vit")
        enc = build_encoder(cfg)
        assert not hasattr(enc, "stage1")
        out = enc(images(2, 64), torch.tensor([[0, 1], [2, 3]]))
        assert out.shape == (2, 2, 32)
        assert EncoderConfig(variant="vit").grid == 8

    def test_deterministic_build(self):
        a, b = build_encoder(SMALL, 4), build_encoder(SMALL, 4)
        for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
            assert ka == kb and torch.equal(va, vb)

    def test_decoder_scatter(self):
        dec = MimDecoder(32, 4, out_dim=48, width=16, depth=1, num_heads=2)
        out = dec(torch.randn(2, 3, 32), torch.tensor([[0, 1, 2], [5, 9, 15]]))
        assert out.shape == (2, 16, 48)


def test_sincos_shape_and_range():
    pe = sincos_pos_embed(4, 32)
    assert pe.shape == (16, 32)
    assert pe.abs().max() <= 1.0
    assert len({tuple(r) for r in pe.numpy().round(6)}) == 16


class TestAttentionDistance:
    def brute(self, attn, grid, stride):
        n = grid * grid
        centres = [((i // grid + 0.5) * stride, (i % grid + 0.5) * stride) for i in range(n)]
        total = 0.0
        for q in range(n):
            for k in range(n):
                total += attn[q, k] * math.dist(centres[q], centres[k])
        return total / n

    def test_uniform_two_by_two(self):
        attn = torch.full((1, 1, 4, 4), 0.25, dtype=torch.float64)
        got = float(mean_attention_distance(attn, 2, 16)[0])
        assert abs(got - self.brute(attn[0, 0].numpy(), 2, 16)) <= 1e-6
        assert got == pytest.approx((0 + 16 + 16 + 16 * math.sqrt(2)) / 4, abs=1e-6)
        assert got == pytest.approx(13.657, abs=1e-3)

    def test_identity_zero(self):
        attn = torch.eye(9, dtype=torch.float64).reshape(1, 1, 9, 9)
        assert float(mean_attention_distance(attn, 3, 16)[0]) == 0.0

    def test_random_stochastic_within_bounds(self):
        g = torch.Generator().manual_seed(0)
        attn = torch.rand(2, 3, 16, 16, generator=g, dtype=torch.float64).softmax(-1)
        d = mean_attention_distance(attn, 4, 16)
        assert torch.all(d >= 0) and torch.all(d <= math.hypot(64, 64))
        assert float(d[1]) == pytest.approx(
            (self.brute(attn[0, 1].numpy(), 4, 16) + self.brute(attn[1, 1].numpy(), 4, 16)) / 2, abs=1e-9)

    def test_report_from_model(self):
        enc = build_encoder(SMALL)
        rep = attention_distance(enc, np.random.default_rng(0).random((5, 64, 64)))
        assert isinstance(rep, AttnDistanceReport)
        assert rep.distances.shape == (2, 2) and rep.count == 5
        assert np.all(rep.distances >= 0) and np.all(rep.distances <= rep.image_diagonal)
        assert len(list(rep.rows())) == 4
        assert all(m.last_attn is None and not m.record for m in enc.attention_modules())

    def test_masked_unsupported(self):
        with pytest.raises(ParameterError):
            attention_distance(build_encoder(SMALL), np.zeros((1, 64, 64)), masked=True)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            mean_attention_distance(torch.ones(1, 1, 4, 4) / 4, 3, 16)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        enc = build_encoder(SMALL, 1)
        ck = EncoderCheckpoint.from_model(enc, epoch=3, seed=1)
        ck.save(tmp_path / "ck")
        back = EncoderCheckpoint.load(tmp_path / "ck.npz")
        assert back.epoch == 3 and back.meta["param_count"] == enc.num_parameters()
        rebuilt = back.build_encoder()
        for k, v in enc.state_dict().items():
            assert torch.equal(v, rebuilt.state_dict()[k])

    def test_mismatched_dims_no_partial_load(self):
        src = build_encoder(SMALL, 1)
        other_cfg = EncoderConfig(input_size=64, dims=(16, 32, 64), depths=(1, 1, 2), num_heads=2)
        dst = build_encoder(other_cfg, 2)
        before = {k: v.clone() for k, v in dst.state_dict().items()}
        ck = EncoderCheckpoint.from_model(src)
        with pytest.raises(IncompatibleCheckpointError):
            ck.load_encoder(dst)
        # even with a forged hash the shape check refuses before writing anything
        ck.meta["config_hash"] = other_cfg.config_hash()
        with pytest.raises(IncompatibleCheckpointError):
            ck.load_encoder(dst)
        for k, v in dst.state_dict().items():
            assert torch.equal(v, before[k])
