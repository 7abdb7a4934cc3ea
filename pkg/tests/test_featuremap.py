from fractions import Fraction

import numpy as np
import pytest

from matcha.errors import ConfigError, DomainError, FormatError
from matcha.featuremap import (
    FeatureMap,
    bilinear_sample,
    channel_stride_slice,
    concat_channels,
    l2_normalize_channels,
    read_feature_map,
    resample,
    role_from_path,
    write_feature_map,
)


def fmap(data, stride=1, role="unified"):
    return FeatureMap(np.asarray(data, dtype=np.float64), Fraction(stride), role)


class TestFeatureMapType:
    def test_invariants(self):
        with pytest.raises(DomainError):
            fmap(np.zeros((0, 2, 1)))
        with pytest.raises(DomainError):
            fmap([[[np.nan]]])
        with pytest.raises(DomainError):
            FeatureMap(np.zeros((1, 1, 1)), Fraction(0))
        with pytest.raises(DomainError):
            FeatureMap(np.zeros((1, 1, 1)), Fraction(1), "bogus")

    def test_data_is_immutable(self):
        m = fmap(np.zeros((2, 2, 1)))
        with pytest.raises(ValueError):
            m.data[0, 0, 0] = 1.0

    def test_coordinate_convention(self):
        m = fmap(np.zeros((4, 4, 1)), stride=8)
        # grid (0, 0) sits at the first cell center
        assert np.allclose(m.grid_to_image([[0.0, 0.0]]), [[3.5, 3.5]])
        assert np.allclose(m.image_to_grid([[3.5, 3.5]]), [[0.0, 0.0]])
        # stride 1 makes grid and pixel coordinates coincide
        m1 = fmap(np.zeros((4, 4, 1)), stride=1)
        pts = np.array([[1.25, 2.5]])
        assert np.allclose(m1.grid_to_image(pts), pts)


class TestBilinearSample:
    def test_constant_field(self):
        m = fmap(np.full((2, 2, 1), 3.0))
        assert np.allclose(bilinear_sample(m, [(0.5, 0.5)]), [[3.0]])

    def test_exact_grid_point_returns_stored(self):
        rng = np.random.default_rng(0)
        m = fmap(rng.normal(size=(3, 4, 5)))
        out = bilinear_sample(m, [(1.0, 0.0), (3.0, 2.0)])
        assert np.array_equal(out[0], m.data[0, 1])
        assert np.array_equal(out[1], m.data[2, 3])

    def test_hand_interpolation(self):
        m = fmap(np.array([[[0.0], [4.0]]]))  # 1x2 grid, values 0, 4 along x
        assert np.allclose(bilinear_sample(m, [(0.25, 0.0)]), [[1.0]])

    def test_cell_corner_reproduction(self):
        rng = np.random.default_rng(1)
        m = fmap(rng.normal(size=(4, 4, 3)))
        corners = [(1.0, 2.0), (2.0, 2.0), (1.0, 3.0), (2.0, 3.0)]
        out = bilinear_sample(m, corners)
        for (x, y), vec in zip(corners, out):
            assert np.array_equal(vec, m.data[int(y), int(x)])

    def test_out_of_range_names_point(self):
        m = fmap(np.zeros((2, 2, 1)))
        with pytest.raises(DomainError, match="point 1"):
            bilinear_sample(m, [(0.5, 0.5), (1.5, 0.0)])


class TestResample:
    def test_identity_is_bitwise(self):
        rng = np.random.default_rng(2)
        m = fmap(rng.normal(size=(3, 5, 2)), stride=8)
        out = resample(m, 3, 5)
        assert np.array_equal(out.data, m.data)
        assert out.stride_to_image == m.stride_to_image

    def test_constant_stays_constant(self):
        m = fmap(np.full((2, 3, 1), 7.0))
        out = resample(m, 5, 4)
        assert np.allclose(out.data, 7.0)

    def test_corner_aligned_oracle(self):
        m = fmap(np.array([[[0.0], [4.0]]]))
        out = resample(m, 1, 3)
        assert np.allclose(out.data.ravel(), [0.0, 2.0, 4.0])

    def test_stride_rescaled(self):
        m = fmap(np.zeros((32, 32, 1)), stride=16)
        out = resample(m, 64, 64)
        assert out.stride_to_image == Fraction(8)
        dino = fmap(np.zeros((36, 36, 1)), stride=14)
        assert resample(dino, 64, 64).stride_to_image == Fraction(63, 8)

    def test_down_up_roundtrip_on_bilinear_field(self):
        # affine-in-coordinates fields survive a 2x up/down cycle
        ys, xs = np.mgrid[0:4, 0:6].astype(np.float64)
        m = fmap((2.0 * xs - 3.0 * ys + 1.0)[:, :, None])
        up = resample(m, 7, 11)
        back = resample(up, 4, 6)
        assert np.abs(back.data - m.data).max() < 1e-10

    def test_role_preserved(self):
        m = fmap(np.zeros((4, 4, 2)), role="dino")
        assert resample(m, 8, 8).role == "dino"


class TestChannelStrideSlice:
    def test_stride_one_identity(self):
        m = fmap(np.random.default_rng(3).normal(size=(2, 2, 4)))
        assert channel_stride_slice(m, 1) is m

    def test_index_selection(self):
        m = fmap(np.arange(4.0).reshape(1, 1, 4))
        out = channel_stride_slice(m, 2)
        assert np.array_equal(out.data.ravel(), [0.0, 2.0])

    def test_paper_dims(self):
        m = fmap(np.zeros((2, 2, 768)))
        assert channel_stride_slice(m, 3).channels == 256

    def test_non_divisible_is_config_error(self):
        m = fmap(np.zeros((1, 1, 5)))
        with pytest.raises(ConfigError):
            channel_stride_slice(m, 2)

    def test_phases_permute_channels(self):
        rng = np.random.default_rng(4)
        m = fmap(rng.normal(size=(2, 3, 6)))
        phases = [FeatureMap(m.data[:, :, p::2], m.stride_to_image, m.role) for p in range(2)]
        merged = concat_channels(phases[0], phases[1])
        assert sorted(map(tuple, merged.data.reshape(-1, 6).T.tolist())) == sorted(
            map(tuple, m.data.reshape(-1, 6).T.tolist())
        )


class TestConcatChannels:
    def test_empty_identity(self):
        m = fmap(np.random.default_rng(5).normal(size=(2, 2, 3)))
        empty = FeatureMap(np.zeros((2, 2, 0)), m.stride_to_image, m.role)
        out = concat_channels(m, empty)
        assert np.array_equal(out.data, m.data)

    def test_ordering(self):
        a = fmap(np.array([[[1.0, 2.0]]]))
        b = fmap(np.array([[[3.0]]]))
        assert np.array_equal(concat_channels(a, b).data.ravel(), [1.0, 2.0, 3.0])

    def test_counts_add(self):
        a = fmap(np.zeros((2, 2, 256)))
        b = fmap(np.zeros((2, 2, 256)))
        assert concat_channels(a, b).channels == 512

    def test_spatial_mismatch(self):
        with pytest.raises(DomainError):
            concat_channels(fmap(np.zeros((2, 2, 1))), fmap(np.zeros((2, 3, 1))))
        with pytest.raises(DomainError):
            concat_channels(fmap(np.zeros((2, 2, 1)), stride=8),
                            fmap(np.zeros((2, 2, 1)), stride=16))


class TestL2Normalize:
    def test_three_four_five(self):
        m = fmap(np.array([[[3.0, 4.0]]]))
        assert np.allclose(l2_normalize_channels(m, 1e-8).data, [[[0.6, 0.8]]])

    def test_zero_vector_clamped(self):
        m = fmap(np.zeros((1, 1, 3)))
        assert np.array_equal(l2_normalize_channels(m, 1e-8).data, np.zeros((1, 1, 3)))

    def test_idempotent_on_unit(self):
        m = fmap(np.array([[[1.0, 0.0]]]))
        out = l2_normalize_channels(l2_normalize_channels(m, 1e-8), 1e-8)
        assert np.abs(out.data - m.data).max() < 1e-12

    def test_norms_in_range(self):
        rng = np.random.default_rng(6)
        m = fmap(rng.normal(size=(5, 7, 4)) * 10)
        out = l2_normalize_channels(m, 1e-12)
        norms = np.linalg.norm(out.data, axis=2).ravel()
        assert ((np.abs(norms - 1.0) < 1e-9) | (norms == 0)).all()


class TestMtfFormat:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(7)
        m = FeatureMap(
            rng.normal(size=(5, 3, 4)).astype(np.float32).astype(np.float64),
            Fraction(63, 8), "dino",
        )
        path = tmp_path / "thing.dino.mtf"
        write_feature_map(path, m)
        back = read_feature_map(path)
        assert np.array_equal(back.data, m.data)
        assert back.stride_to_image == m.stride_to_image
        assert back.role == "dino"

    def test_role_from_name(self):
        assert role_from_path("a/b/x.unified.mtf") == "unified"
        assert role_from_path("x.geometric_raw.mtf") == "geometric_raw"
        assert role_from_path("x.mtf") is None

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.unified.mtf"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(FormatError, match="magic"):
            read_feature_map(path)

    def test_truncated_payload(self, tmp_path):
        m = fmap(np.zeros((2, 2, 2)))
        path = tmp_path / "t.unified.mtf"
        write_feature_map(path, m)
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(FormatError, match="payload"):
            read_feature_map(path)

    def test_missing_role(self, tmp_path):
        m = fmap(np.zeros((1, 1, 1)))
        path = tmp_path / "anon.mtf"
        write_feature_map(path, m)
        with pytest.raises(FormatError, match="role"):
            read_feature_map(path)
        assert read_feature_map(path, role="concat").role == "concat"
