import numpy as np
import pytest

from blackpatch.sampling import (
    SquareRegion,
    location_probabilities,
    sample_square,
    smooth_error_map,
    square_size,
    valid_center_range,
)


class TestSquareSize:
    def test_schedule_for_side_80(self):
        # 2.5% of 80^2 = 160 -> side 13; one halving -> 80 -> side 9
        assert square_size(0, 80) == 13
        assert square_size(99, 80) == 13
        assert square_size(100, 80) == 9
        assert square_size(10000, 80) == 2

    def test_nonincreasing_and_bounded(self):
        for h in (8, 16, 57, 80, 100):
            sides = [square_size(i, h) for i in range(0, 12000, 37)]
            assert all(2 <= s <= h for s in sides)
            assert all(b <= a for a, b in zip(sides, sides[1:]))

    def test_clamped_to_patch(self):
        assert square_size(0, 2) == 2


class TestSmoothErrorMap:
    def test_impulse_response(self):
        m = np.zeros((11, 11))
        m[5, 5] = 1.0
        out = smooth_error_map(m, 3)
        assert np.allclose(out[4:7, 4:7], 1 / 9)
        assert out[5, 8] == 0.0

    def test_constant_unchanged(self):
        m = np.full((6, 6), 0.37)
        assert np.array_equal(smooth_error_map(m, 3), m)

    def test_identity_kernel(self):
        m = np.random.default_rng(0).random((5, 7))
        assert np.array_equal(smooth_error_map(m, 1), m)

    def test_never_exceeds_max(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            m = rng.normal(size=(9, 9))
            for k in (2, 3, 4, 5):
                out = smooth_error_map(m, k)
                assert out.max() <= m.max() + 1e-12
                assert out.min() >= m.min() - 1e-12


class TestLocationProbabilities:
    def test_uniform_map(self):
        probs = location_probabilities(np.full((8, 8), 3.0), 2)
        lo, hi = valid_center_range(8, 2)
        valid = probs[lo : hi + 1, lo : hi + 1]
        assert np.allclose(valid, 1 / valid.size)

    def test_two_point_softmax_arithmetic(self):
        # with normalized values {1, 0} the softmax gives e/(e+1) and 1/(e+1)
        m = np.zeros((2, 2))
        m[1, 1] = 5.0
        probs = location_probabilities(m, 2)
        # side 2 in a 2x2 footprint leaves a single valid center
        assert probs[1, 1] == 1.0
        m = np.array([[5.0, 0.0], [0.0, 0.0]])
        probs = location_probabilities(m, 1)
        e = np.e
        assert probs[0, 0] == pytest.approx(e / (e + 3))

    def test_mass_and_support(self):
        rng = np.random.default_rng(2)
        for side in (2, 3, 5):
            m = rng.normal(size=(12, 12))
            probs = location_probabilities(m, side)
            assert probs.sum() == pytest.approx(1.0, abs=1e-9)
            lo, hi = valid_center_range(12, side)
            assert np.all(probs[lo : hi + 1, lo : hi + 1] > 0)
            outside = probs.copy()
            outside[lo : hi + 1, lo : hi + 1] = 0
            assert np.all(outside == 0)

    def test_all_zero_fallback(self):
        probs = location_probabilities(np.zeros((6, 6)), 2)
        lo, hi = valid_center_range(6, 2)
        valid = probs[lo : hi + 1, lo : hi + 1]
        assert np.allclose(valid, 1 / valid.size)

    def test_signed_values_pass_through(self):
        m = np.array([[-4.0, 0.0], [0.0, 2.0]])
        probs = location_probabilities(m, 1)
        # most negative cell gets the least mass
        assert probs[0, 0] == probs.min()
        assert probs[1, 1] == probs.max()


class TestSampleSquare:
    def test_uniform_warmup_frequencies(self):
        rng = np.random.default_rng(3)
        m = np.zeros((12, 12))
        counts = {}
        n = 20000
        for _ in range(n):
            sq = sample_square(0, m, (6, 6), 6, uniform_warmup=100, rng=rng)
            counts[sq.center] = counts.get(sq.center, 0) + 1
        lo, hi = valid_center_range(6, sq.side)
        cells = (hi - lo + 1) ** 2
        for count in counts.values():
            assert abs(count / n - 1 / cells) < 0.01
        assert len(counts) == cells

    def test_probabilistic_mode_prefers_hot_corner(self):
        rng = np.random.default_rng(4)
        m = np.zeros((20, 20))
        m[4:7, 4:7] = 5.0  # hot area near footprint top-left
        hits = {}
        for _ in range(3000):
            sq = sample_square(200, m, (10, 10), 16, uniform_warmup=100, rng=rng)
            hits[sq.center] = hits.get(sq.center, 0) + 1
        mode = max(hits, key=hits.get)
        # footprint starts at image row 2; hot cells sit at footprint rows 2-4
        assert mode[0] <= 6 and mode[1] <= 6

    def test_deterministic_sequence(self):
        m = np.random.default_rng(5).random((16, 16))
        a = [sample_square(i, m, (8, 8), 8, 2, np.random.default_rng(9)) for i in range(6)]
        b = [sample_square(i, m, (8, 8), 8, 2, np.random.default_rng(9)) for i in range(6)]
        assert a == b

    def test_prob_sampling_disabled_stays_uniform(self):
        m = np.zeros((16, 16))
        m[0, 0] = 100.0
        rng = np.random.default_rng(6)
        sq = sample_square(500, m, (8, 8), 8, uniform_warmup=100, rng=rng,
                           use_prob_sampling=False)
        assert isinstance(sq, SquareRegion)

    def test_region_always_fits(self):
        rng = np.random.default_rng(7)
        m = rng.random((16, 16))
        for i in (0, 50, 101, 600, 2000):
            sq = sample_square(i, m, (8, 8), 12, 100, rng)
            top = sq.row - sq.side // 2
            left = sq.col - sq.side // 2
            assert 0 <= top and top + sq.side <= 12
            assert 0 <= left and left + sq.side <= 12
