"""Square size scheduling and error-guided square location sampling.

The optimized unit is a small square inside the patch.  Its side follows a
coarse-to-fine schedule (area starts at a fraction of the patch area and
halves at fixed iteration milestones), and its location is drawn either
uniformly (warm-up) or from a softmax over the smoothed per-pixel error
restricted to the patch footprint, so high-error areas are revisited more
often.
"""

from __future__ import annotations

import numpy as np

from . import filters
from .tensor import crop

__all__ = [
    "DEFAULT_MILESTONES",
    "SquareRegion",
    "location_probabilities",
    "sample_square",
    "smooth_error_map",
    "square_size",
    "valid_center_range",
]

DEFAULT_MILESTONES = (100, 500, 1500, 3000, 5000, 10000)
DEFAULT_INIT_AREA = 0.025


class SquareRegion:
    """A square sub-area of the patch: center (row, col) and side length."""

    __slots__ = ("row", "col", "side")

    def __init__(self, row, col, side):
        self.row = int(row)
        self.col = int(col)
        self.side = int(side)

    @property
    def center(self):
        return (self.row, self.col)

    def __eq__(self, other):
        return (self.row, self.col, self.side) == (other.row, other.col, other.side)

    def __repr__(self):
        return f"SquareRegion(row={self.row}, col={self.col}, side={self.side})"


def square_size(iteration, patch_side, init_area_frac=DEFAULT_INIT_AREA,
                milestones=DEFAULT_MILESTONES):
    """Side of the square optimized at ``iteration``.

    The square area starts at ``init_area_frac`` of the patch area and is
    halved once the iteration index reaches each milestone; the side is
    round(sqrt(area)), clamped to [2, patch_side].
    """
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    if patch_side < 2:
        raise ValueError("patch side must be >= 2")
    halvings = sum(1 for m in milestones if m <= iteration)
    area = init_area_frac * patch_side * patch_side * 0.5**halvings
    side = int(np.floor(np.sqrt(area) + 0.5))  # round half up
    return max(2, min(side, patch_side))


def smooth_error_map(error_map, kernel):
    """Box-filter mean with a kernel x kernel window, replicate padding.

    Filtering the deviation from a reference entry keeps constant maps
    exactly constant (windowed float means of equal values can otherwise
    drift in the last ulp).
    """
    m = np.asarray(error_map, dtype=np.float64)
    if int(kernel) == 1:
        return m.copy()
    ref = m.flat[0]
    return ref + filters.box_mean(m - ref, kernel)


def valid_center_range(patch_side, square_side):
    """Inclusive (lo, hi) of center coordinates where the square fits."""
    lo = square_side // 2
    hi = patch_side - square_side + square_side // 2
    return lo, hi


def location_probabilities(footprint_map, square_side):
    """Sampling probabilities over square centers inside the patch.

    The h x h footprint map is normalized by its maximum absolute entry
    (signed values pass through as-is) and softmaxed over the centers
    where the square fits; invalid centers get probability zero and the
    rest renormalize to 1.  An all-zero map degenerates to uniform.
    """
    m = np.asarray(footprint_map, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"expected a square footprint map, got {m.shape}")
    h = m.shape[0]
    lo, hi = valid_center_range(h, square_side)
    if hi < lo:
        raise ValueError(f"square side {square_side} does not fit in footprint {h}")

    peak = np.abs(m).max()
    probs = np.zeros((h, h))
    valid = m[lo : hi + 1, lo : hi + 1]
    if peak == 0.0:
        probs[lo : hi + 1, lo : hi + 1] = 1.0 / valid.size
        return probs
    scaled = valid / peak
    scaled = scaled - scaled.max()  # stabilized softmax
    weights = np.exp(scaled)
    probs[lo : hi + 1, lo : hi + 1] = weights / weights.sum()
    return probs


def sample_square(iteration, error_map, q, patch_side, uniform_warmup, rng,
                  init_area_frac=DEFAULT_INIT_AREA, milestones=DEFAULT_MILESTONES,
                  use_prob_sampling=True):
    """Draw the square region to optimize at this iteration.

    Warm-up iterations (``iteration <= uniform_warmup``) and runs with
    probabilistic sampling disabled use a uniform draw over valid centers;
    afterwards centers are drawn from :func:`location_probabilities` of
    the smoothed footprint crop of ``error_map``.
    """
    side = square_size(iteration, patch_side, init_area_frac, milestones)
    lo, hi = valid_center_range(patch_side, side)
    span = hi - lo + 1
    if not use_prob_sampling or iteration <= uniform_warmup:
        flat = rng.integers(0, span * span)
        return SquareRegion(lo + flat // span, lo + flat % span, side)
    footprint = crop(np.asarray(error_map)[None], patch_side, q)[0]
    probs = location_probabilities(smooth_error_map(footprint, side), side)
    flat = rng.choice(probs.size, p=probs.reshape(-1))
    return SquareRegion(flat // patch_side, flat % patch_side, side)
