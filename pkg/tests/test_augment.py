from collections import Counter

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from dualvvs.augment import (
    DIRECTIONS,
    ORDERED_PAIRS,
    AugmentPolicy,
    direction_label,
    join_quadrants,
    make_views,
    make_views_batch,
    opposite_direction,
    sample_rp_batch,
    sample_rp_pair,
    split_quadrants,
)


@pytest.fixture
def image(small_images):
    return small_images.get(0)


class TestViews:
    def test_same_seed_same_pair(self, image):
        policy = AugmentPolicy(output_size=32)
        a1, b1 = make_views(image, np.random.default_rng(3), policy)
        a2, b2 = make_views(image, np.random.default_rng(3), policy)
        assert torch.equal(a1, a2) and torch.equal(b1, b2)

    def test_identity_policy(self, image):
        v1, v2 = make_views(image, np.random.default_rng(0), AugmentPolicy.identity(32))
        np.testing.assert_allclose(v1.numpy(), image, atol=1e-6)
        np.testing.assert_allclose(v2.numpy(), image, atol=1e-6)

    def test_identity_policy_resizes(self, image):
        v1, _ = make_views(image, np.random.default_rng(0), AugmentPolicy.identity(16))
        assert v1.shape == (3, 16, 16)

    def test_default_views_differ(self, image):
        policy = AugmentPolicy(output_size=32)
        differ = 0
        for seed in range(100):
            v1, v2 = make_views(image, np.random.default_rng(seed), policy)
            differ += not torch.allclose(v1, v2)
        assert differ / 100 > 0.99

    def test_outputs_in_unit_range(self, small_images):
        policy = AugmentPolicy(output_size=32, color_jitter_strengths=(0.9, 0.9, 0.9, 0.5))
        v1, v2 = make_views_batch(small_images.get(slice(0, 32)), np.random.default_rng(5), policy)
        for v in (v1, v2):
            assert v.min() >= 0 and v.max() <= 1

    def test_batch_matches_single(self, small_images):
        policy = AugmentPolicy(output_size=32)
        x = small_images.get(slice(0, 3))
        rng_b = np.random.default_rng(9)
        b1, b2 = make_views_batch(x, rng_b, policy)
        rng_s = np.random.default_rng(9)
        for i in range(3):
            s1, s2 = make_views(x[i], rng_s, policy)
            torch.testing.assert_close(s1, b1[i], atol=1e-6, rtol=0)
            torch.testing.assert_close(s2, b2[i], atol=1e-6, rtol=0)

    def test_flip_only(self, image):
        policy = AugmentPolicy(crop_scale_range=(1, 1), flip_prob=1.0,
                               color_jitter_strengths=(0, 0, 0, 0), grayscale_prob=0.0, output_size=32)
        v1, _ = make_views(image, np.random.default_rng(0), policy)
        np.testing.assert_allclose(v1.numpy(), image[:, :, ::-1], atol=1e-6)

    def test_grayscale_only(self, image):
        policy = AugmentPolicy(crop_scale_range=(1, 1), flip_prob=0.0,
                               color_jitter_strengths=(0, 0, 0, 0), grayscale_prob=1.0, output_size=32)
        v1, _ = make_views(image, np.random.default_rng(0), policy)
        assert torch.allclose(v1[0], v1[1]) and torch.allclose(v1[1], v1[2])

    def test_hue_rotation_roundtrip(self):
        from dualvvs.augment import _hsv_to_rgb, _rgb_to_hsv

        x = torch.rand(4, 3, 5, 5, dtype=torch.float64)
        torch.testing.assert_close(_hsv_to_rgb(*_rgb_to_hsv(x)), x)

    @pytest.mark.parametrize("kwargs", [
        dict(crop_scale_range=(0.0, 1.0)),
        dict(crop_scale_range=(0.8, 0.5)),
        dict(flip_prob=1.5),
        dict(grayscale_prob=-0.1),
    ])
    def test_policy_validation(self, kwargs):
        with pytest.raises(ValueError):
            AugmentPolicy(**kwargs)

    def test_degenerate_crop(self):
        policy = AugmentPolicy(crop_scale_range=(0.001, 0.001), crop_ratio_range=(1.0, 1.0), output_size=4)
        with pytest.raises(ValueError, match="degenerate"):
            make_views(np.zeros((3, 4, 4), dtype=np.float32), np.random.default_rng(0), policy)

    def test_policy_dict_roundtrip(self):
        p = AugmentPolicy(output_size=48, flip_prob=0.25)
        assert AugmentPolicy.from_dict(p.to_dict()) == p


class TestQuadrants:
    def test_block_zero_is_top_left(self):
        img = np.arange(16, dtype=np.float32).reshape(1, 4, 4)
        blocks = split_quadrants(img)
        np.testing.assert_array_equal(blocks[0], [[[0, 1], [4, 5]]])
        np.testing.assert_array_equal(blocks[1], [[[2, 3], [6, 7]]])
        np.testing.assert_array_equal(blocks[2], [[[8, 9], [12, 13]]])
        np.testing.assert_array_equal(blocks[3], [[[10, 11], [14, 15]]])

    def test_partition(self, image):
        blocks = split_quadrants(image)
        np.testing.assert_array_equal(join_quadrants(blocks), image)
        assert sum(b.size for b in blocks) == image.size

    def test_odd_size(self):
        with pytest.raises(ValueError):
            split_quadrants(np.zeros((3, 3, 3)))


class TestDirections:
    def test_examples(self):
        assert direction_label(0, 1) == 1
        assert DIRECTIONS[direction_label(0, 1)] == "right"
        assert direction_label(3, 0) == 4
        assert DIRECTIONS[direction_label(3, 0)] == "upper-left"

    def test_exhaustive_table(self):
        table = {p: direction_label(*p) for p in ORDERED_PAIRS}
        assert table == {
            (0, 1): 1, (0, 2): 3, (0, 3): 7,
            (1, 0): 0, (1, 2): 6, (1, 3): 3,
            (2, 0): 2, (2, 1): 5, (2, 3): 1,
            (3, 0): 4, (3, 1): 2, (3, 2): 0,
        }
        counts = Counter(table.values())
        assert set(counts) == set(range(8))
        for d in (4, 5, 6, 7):
            assert counts[d] == 1

    @given(st.sampled_from(ORDERED_PAIRS))
    def test_opposite_symmetry(self, pair):
        a, b = pair
        assert direction_label(b, a) == opposite_direction(direction_label(a, b))

    def test_equal_indices(self):
        with pytest.raises(ValueError):
            direction_label(2, 2)


class TestRPSampling:
    def test_uniform_over_pairs(self, image):
        rng = np.random.default_rng(0)
        counts = Counter()
        for _ in range(12000):
            s = sample_rp_pair(image, rng)
            counts[(s.a_idx, s.b_idx)] += 1
        assert set(counts) == set(ORDERED_PAIRS)
        for c in counts.values():
            assert abs(c - 1000) <= 150
        from scipy.stats import chisquare

        assert chisquare(list(counts.values())).pvalue > 0.001

    def test_determinism_and_label(self, image):
        s1 = sample_rp_pair(image, np.random.default_rng(4))
        s2 = sample_rp_pair(image, np.random.default_rng(4))
        assert (s1.a_idx, s1.b_idx, s1.d) == (s2.a_idx, s2.b_idx, s2.d)
        np.testing.assert_array_equal(s1.block_a, s2.block_a)
        assert s1.d == direction_label(s1.a_idx, s1.b_idx)
        np.testing.assert_array_equal(s1.block_a, split_quadrants(image)[s1.a_idx])

    def test_odd_image(self):
        with pytest.raises(ValueError):
            sample_rp_pair(np.zeros((3, 5, 5)), np.random.default_rng(0))

    def test_batch_blocks_match_quadrants(self, small_images):
        x = small_images.get(slice(0, 6))
        a, b, d = sample_rp_batch(x, np.random.default_rng(2))
        rng = np.random.default_rng(2)
        for i in range(6):
            s = sample_rp_pair(x[i], rng)
            np.testing.assert_array_equal(a[i].numpy(), s.block_a)
            np.testing.assert_array_equal(b[i].numpy(), s.block_b)
            assert d[i] == s.d

    def test_batch_resize(self, small_images):
        a, b, _ = sample_rp_batch(small_images.get(slice(0, 4)), np.random.default_rng(2), resize_to=32)
        assert a.shape == b.shape == (4, 3, 32, 32)
