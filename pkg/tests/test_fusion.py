from fractions import Fraction

import numpy as np
import pytest

from matcha.errors import ConfigError, DomainError, FormatError
from matcha.featuremap import FeatureMap
from matcha.fusion import (
    ATTENTION_KEYS,
    FusionConfig,
    FusionParams,
    TokenMatrix,
    deserialize_params,
    fusion_block,
    fusion_forward,
    merge_partial,
    merge_unified,
    multi_head_attention,
    patchify,
    serialize_params,
    unpatchify,
)

TOY = FusionConfig(
    num_blocks=1, hidden_dim=8, num_heads=2, patch_size=2,
    out_dim_geometric=3, out_dim_semantic=6,
    in_dim_semantic=6, in_dim_geometric=4, dino_dim=12,
)


def rand_map(rng, h, w, c, stride=8, role="unified"):
    return FeatureMap(rng.normal(size=(h, w, c)), Fraction(stride), role)


class TestConfig:
    def test_defaults_match_reference_dims(self):
        cfg = FusionConfig()
        assert cfg.semantic_channel_stride == 3
        assert cfg.merged_dim == 512
        assert cfg.dino_channel_stride == 2
        assert cfg.unified_dim == 1024
        assert cfg.head_dim == 64

    def test_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            FusionConfig(hidden_dim=10, num_heads=4)
        with pytest.raises(ConfigError):
            FusionConfig(out_dim_semantic=700)
        with pytest.raises(ConfigError):
            FusionConfig(dino_dim=1000)


class TestPatchify:
    def test_shapes(self):
        m = FeatureMap(np.zeros((4, 4, 1)))
        t = patchify(m, 2)
        assert (t.num_tokens, t.dim) == (4, 4)

    def test_p1_identity_tokens(self):
        rng = np.random.default_rng(0)
        m = rand_map(rng, 3, 5, 2)
        t = patchify(m, 1)
        assert t.num_tokens == 15
        assert np.array_equal(t.values, m.data.reshape(15, 2))

    def test_paper_shape_arithmetic(self):
        m = FeatureMap(np.zeros((64, 64, 640)).astype(np.float64))
        t = patchify(m, 2)
        assert (t.num_tokens, t.dim) == (1024, 2560)

    def test_roundtrip_bitwise(self):
        rng = np.random.default_rng(1)
        m = rand_map(rng, 4, 4, 3)
        back = unpatchify(patchify(m, 2), 2, 3, m.stride_to_image)
        assert np.array_equal(back.data, m.data)

    def test_token_layout(self):
        t = TokenMatrix(np.arange(4.0).reshape(1, 4), 1, 1)
        m = unpatchify(t, 2, 1)
        assert np.array_equal(m.data.reshape(2, 2), [[0.0, 1.0], [2.0, 3.0]])

    def test_errors(self):
        with pytest.raises(DomainError):
            patchify(FeatureMap(np.zeros((3, 4, 1))), 2)
        with pytest.raises(DomainError):
            unpatchify(TokenMatrix(np.zeros((1, 5)), 1, 1), 2, 1)


class TestAttention:
    def test_singleton_softmax(self):
        cfg = FusionConfig(num_blocks=1, hidden_dim=4, num_heads=1, patch_size=1,
                           out_dim_geometric=2, out_dim_semantic=4,
                           in_dim_semantic=4, in_dim_geometric=4, dino_dim=8)
        params = FusionParams.initialize(cfg, seed=0)
        w = params.attention_weights(0, "self_geo")
        tok = TokenMatrix(np.random.default_rng(2).normal(size=(1, 4)), 1, 1)
        out, weights = multi_head_attention(tok, tok, w, 1, return_weights=True)
        assert np.allclose(weights, 1.0)
        v = tok.values @ w["wv"] + w["bv"]
        assert np.allclose(out.values, v @ w["wo"] + w["bo"])

    def test_identical_keys_mix_invariant(self):
        rng = np.random.default_rng(3)
        cfg = FusionConfig(num_blocks=1, hidden_dim=4, num_heads=2, patch_size=1,
                           out_dim_geometric=2, out_dim_semantic=4,
                           in_dim_semantic=4, in_dim_geometric=4, dino_dim=8)
        params = FusionParams.initialize(cfg, seed=1)
        w = params.attention_weights(0, "cross_geo")
        kv_row = rng.normal(size=4)
        kv = TokenMatrix(np.tile(kv_row, (3, 1)), 1, 3)
        q = TokenMatrix(rng.normal(size=(2, 4)), 1, 2)
        out = multi_head_attention(q, kv, w, 2)
        expected = (kv_row @ w["wv"] + w["bv"]) @ w["wo"] + w["bo"]
        assert np.allclose(out.values, np.tile(expected, (2, 1)))

    def test_hand_computed_single_head(self):
        # N=2 tokens, one head, D=2: evaluate the closed-form softmax blend
        w = {
            "wq": np.array([[1.0, 0.0], [0.0, 1.0]]),
            "bq": np.zeros(2),
            "wk": np.array([[1.0, 0.0], [0.0, -1.0]]),
            "wv": np.array([[2.0, 0.0], [0.0, 1.0]]),
            "bv": np.array([0.5, 0.0]),
            "wo": np.eye(2),
            "bo": np.zeros(2),
        }
        x = np.array([[1.0, 0.0], [0.0, 1.0]])
        tok = TokenMatrix(x, 1, 2)
        out = multi_head_attention(tok, tok, w, 1)
        q = x
        k = x @ w["wk"]
        v = x @ w["wv"] + w["bv"]
        scores = q @ k.T / np.sqrt(2)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        a = e / e.sum(axis=1, keepdims=True)
        assert np.allclose(out.values, a @ v)

    def test_dim_mismatch(self):
        cfg = TOY
        params = FusionParams.initialize(cfg, seed=0)
        t8 = TokenMatrix(np.zeros((2, 8)), 1, 2)
        t4 = TokenMatrix(np.zeros((2, 4)), 1, 2)
        with pytest.raises(DomainError):
            multi_head_attention(t8, t4, params.attention_weights(0, "self_sem"), 2)


class TestFusionBlock:
    def make(self, zero_output_proj):
        params = FusionParams.initialize(TOY, seed=5)
        if zero_output_proj:
            for name in list(params.tensors):
                if name.endswith(".wo") or name.endswith(".bo"):
                    params.tensors[name] = np.zeros_like(params.tensors[name])
        return params

    def test_zero_output_projection_is_identity(self):
        params = self.make(zero_output_proj=True)
        rng = np.random.default_rng(6)
        sem = TokenMatrix(rng.normal(size=(4, 8)), 2, 2)
        geo = TokenMatrix(rng.normal(size=(4, 8)), 2, 2)
        out_sem, out_geo = fusion_block(sem, geo, params, 0)
        assert np.array_equal(out_sem.values, sem.values)
        assert np.array_equal(out_geo.values, geo.values)

    def test_branch_swap_symmetry(self):
        # swap only the block tensors; the projection/MLP shapes differ per
        # branch and fusion_block never touches them
        params = self.make(zero_output_proj=False)
        tensors = dict(params.tensors)
        for attn in ("self", "cross"):
            for key in ATTENTION_KEYS:
                a, b = f"block0.{attn}_sem.{key}", f"block0.{attn}_geo.{key}"
                tensors[a], tensors[b] = tensors[b], tensors[a]
        swapped = FusionParams(TOY, tensors)
        rng = np.random.default_rng(7)
        a = TokenMatrix(rng.normal(size=(4, 8)), 2, 2)
        b = TokenMatrix(rng.normal(size=(4, 8)), 2, 2)
        out1 = fusion_block(a, b, params, 0)
        out2 = fusion_block(b, a, swapped, 0)
        assert np.allclose(out1[0].values, out2[1].values)
        assert np.allclose(out1[1].values, out2[0].values)

    def test_hand_stepped_block(self):
        params = self.make(zero_output_proj=False)
        rng = np.random.default_rng(8)
        sem = TokenMatrix(rng.normal(size=(2, 8)), 1, 2)
        geo = TokenMatrix(rng.normal(size=(2, 8)), 1, 2)
        out_sem, out_geo = fusion_block(sem, geo, params, 0)

        def attn(q, kv, name):
            return multi_head_attention(
                TokenMatrix(q, 1, 2), TokenMatrix(kv, 1, 2),
                params.attention_weights(0, name), TOY.num_heads,
            ).values

        sem_s = sem.values + attn(sem.values, sem.values, "self_sem")
        geo_s = geo.values + attn(geo.values, geo.values, "self_geo")
        want_sem = sem.values + attn(sem_s, geo_s, "cross_sem")
        want_geo = geo.values + attn(geo_s, sem_s, "cross_geo")
        assert np.allclose(out_sem.values, want_sem)
        assert np.allclose(out_geo.values, want_geo)


class TestFusionForward:
    def test_output_shapes_and_roles(self):
        rng = np.random.default_rng(9)
        params = FusionParams.initialize(TOY, seed=0)
        sem = rand_map(rng, 4, 4, 6, stride=16, role="semantic_raw")
        geo = rand_map(rng, 8, 8, 4, stride=8, role="geometric_raw")
        fs, fg = fusion_forward(sem, geo, TOY, params)
        assert fs.data.shape == (8, 8, 6) and fs.role == "semantic_fused"
        assert fg.data.shape == (8, 8, 3) and fg.role == "geometric_fused"
        assert fs.stride_to_image == Fraction(8)
        assert np.isfinite(fs.data).all() and np.isfinite(fg.data).all()

    def test_paper_dims_shapes(self):
        cfg = FusionConfig()
        params = FusionParams.initialize(cfg, seed=0)
        rng = np.random.default_rng(10)
        sem = rand_map(rng, 4, 4, 1280, stride=16, role="semantic_raw")
        geo = rand_map(rng, 8, 8, 640, stride=8, role="geometric_raw")
        fs, fg = fusion_forward(sem, geo, cfg, params)
        assert fg.channels == 256 and fs.channels == 768

    def test_residual_identity_through_all_blocks(self):
        params = FusionParams.initialize(TOY, seed=1)
        for name in list(params.tensors):
            if name.endswith(".wo") or name.endswith(".bo"):
                params.tensors[name] = np.zeros_like(params.tensors[name])
        rng = np.random.default_rng(11)
        sem = rand_map(rng, 8, 8, 6, stride=8, role="semantic_raw")
        geo = rand_map(rng, 8, 8, 4, stride=8, role="geometric_raw")
        fs, fg = fusion_forward(sem, geo, TOY, params)
        # with zeroed attention outputs the MLP sees [F0 || F0]
        from matcha.fusion import patchify_array, unpatchify_array, _mlp_vars
        from matcha import autodiff as ad

        s0 = patchify_array(sem.data, 2) @ params.tensors["proj_sem.w"] + params.tensors["proj_sem.b"]
        cat = np.concatenate([s0, s0], axis=1)
        out = _mlp_vars(ad.Var(cat), params.tensors, "mlp_sem").value
        want = unpatchify_array(out, 2, 6, 4, 4)
        assert np.allclose(fs.data, want)

    def test_patch_shift_equivariance(self):
        params = FusionParams.initialize(TOY, seed=2)
        rng = np.random.default_rng(12)
        sem = rand_map(rng, 8, 8, 6, stride=8, role="semantic_raw")
        geo = rand_map(rng, 8, 8, 4, stride=8, role="geometric_raw")
        fs1, fg1 = fusion_forward(sem, geo, TOY, params)
        p = TOY.patch_size
        sem2 = FeatureMap(np.roll(sem.data, p, axis=0), sem.stride_to_image, sem.role)
        geo2 = FeatureMap(np.roll(geo.data, p, axis=0), geo.stride_to_image, geo.role)
        fs2, fg2 = fusion_forward(sem2, geo2, TOY, params)
        assert np.allclose(np.roll(fs1.data, p, axis=0), fs2.data, atol=1e-10)
        assert np.allclose(np.roll(fg1.data, p, axis=0), fg2.data, atol=1e-10)

    def test_validation_before_compute(self):
        params = FusionParams.initialize(TOY, seed=0)
        rng = np.random.default_rng(13)
        bad_sem = rand_map(rng, 4, 4, 5, stride=16, role="semantic_raw")
        geo = rand_map(rng, 8, 8, 4, stride=8, role="geometric_raw")
        with pytest.raises(DomainError):
            fusion_forward(bad_sem, geo, TOY, params)

    def test_flags_smoke(self):
        cfg = FusionConfig(num_blocks=1, hidden_dim=8, num_heads=2, patch_size=2,
                           out_dim_geometric=3, out_dim_semantic=6,
                           in_dim_semantic=6, in_dim_geometric=4, dino_dim=12,
                           use_positional_encoding=True, use_pre_norm=True)
        params = FusionParams.initialize(cfg, seed=3)
        rng = np.random.default_rng(14)
        sem = rand_map(rng, 8, 8, 6, stride=8, role="semantic_raw")
        geo = rand_map(rng, 8, 8, 4, stride=8, role="geometric_raw")
        fs, fg = fusion_forward(sem, geo, cfg, params)
        assert np.isfinite(fs.data).all() and np.isfinite(fg.data).all()


class TestMerge:
    def test_channel_accounting_defaults(self):
        cfg = FusionConfig()
        rng = np.random.default_rng(15)
        fg = rand_map(rng, 4, 4, 256, role="geometric_fused")
        fs = rand_map(rng, 4, 4, 768, role="semantic_fused")
        fd = rand_map(rng, 3, 3, 1024, stride=14, role="dino")
        ft = merge_partial(fg, fs, cfg)
        assert ft.channels == 512 and ft.role == "concat"
        fm = merge_unified(fg, fs, fd, cfg)
        assert fm.channels == 1024 and fm.role == "unified"

    def test_stride_one_degenerate(self):
        cfg = FusionConfig(num_blocks=1, hidden_dim=8, num_heads=2, patch_size=2,
                           out_dim_geometric=4, out_dim_semantic=4,
                           in_dim_semantic=6, in_dim_geometric=4, dino_dim=16)
        rng = np.random.default_rng(16)
        fg = rand_map(rng, 4, 4, 4, role="geometric_fused")
        fs = rand_map(rng, 4, 4, 4, role="semantic_fused")
        ft = merge_partial(fg, fs, cfg)
        assert np.array_equal(ft.data, np.concatenate([fg.data, fs.data], axis=2))

    def test_constant_dino_constant_tail(self):
        cfg = TOY
        rng = np.random.default_rng(17)
        fg = rand_map(rng, 4, 4, 3, role="geometric_fused")
        fs = rand_map(rng, 4, 4, 6, role="semantic_fused")
        fd = FeatureMap(np.full((5, 5, 12), 2.5), Fraction(14), "dino")
        fm = merge_unified(fg, fs, fd, cfg)
        tail = fm.data[:, :, cfg.merged_dim:]
        assert np.allclose(tail, 2.5)

    def test_divisibility_failure(self):
        cfg = TOY
        rng = np.random.default_rng(18)
        fg = rand_map(rng, 4, 4, 3, role="geometric_fused")
        fs = rand_map(rng, 4, 4, 7, role="semantic_fused")
        with pytest.raises(ConfigError):
            merge_partial(fg, fs, cfg)


class TestParamsFile:
    def test_roundtrip_bitwise(self):
        params = FusionParams.initialize(TOY, seed=42)
        blob = serialize_params(params)
        back = deserialize_params(blob)
        assert back.config == TOY
        for name in params.names():
            assert np.array_equal(back.tensors[name], params.tensors[name])
        assert serialize_params(back) == blob

    def test_truncated_file(self):
        blob = serialize_params(FusionParams.initialize(TOY, seed=0))
        with pytest.raises(FormatError):
            deserialize_params(blob[:-3])

    def test_mismatched_config_names_values(self):
        blob = serialize_params(FusionParams.initialize(TOY, seed=0))
        other = FusionConfig(num_blocks=2, hidden_dim=8, num_heads=2, patch_size=2,
                             out_dim_geometric=3, out_dim_semantic=6,
                             in_dim_semantic=6, in_dim_geometric=4, dino_dim=12)
        with pytest.raises(ConfigError, match="num_blocks=1.*expects 2"):
            deserialize_params(blob, expected_config=other)

    def test_flat_order_is_documented_layout(self):
        params = FusionParams.initialize(TOY, seed=0)
        names = params.names()
        assert names[0] == "proj_sem.w"
        assert names[2] == "proj_geo.w"
        assert names[4] == "block0.self_sem.wq"
        assert names[-1] == "mlp_geo.b2"
        # attention tensors follow the fixed key tuple
        blk = [n for n in names if n.startswith("block0.self_sem.")]
        assert [n.split(".")[-1] for n in blk] == list(ATTENTION_KEYS)

    def test_semantic_mask_selects_sem_branch(self):
        params = FusionParams.initialize(TOY, seed=0)
        mask = params.semantic_mask()
        off = 0
        for name, arr in params.tensors.items():
            seg = mask[off : off + arr.size]
            assert seg.all() == ("sem" in name)
            assert seg.any() == ("sem" in name)
            off += arr.size
