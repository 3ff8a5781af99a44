"""Score-based gradient estimation over a square patch area, plus Adam.

A batch of +/-bound probes is applied to the current square, each probe is
scored by the change it causes in attack performance on one training
sample, scores are adjusted (per-sign normalization to [-1, 1], then
division by the count of same-signed scores), and the estimated gradient
is the score-weighted probe average rescaled to a fixed L2 norm
sqrt(3 * side^2).  The square is then updated by an ascent Adam step with
moments local to the square.
"""

from __future__ import annotations

import numpy as np

from .oracles import (
    QueryBudgetExceeded,
    _patched_input,
    _sample_key,
    ensure_references,
    evaluate_counted,
    mean_error,
    reduce_output_difference,
)
from .tensor import attach, crop

__all__ = [
    "AdamState",
    "adam_step",
    "adjust_scores",
    "attack_score",
    "estimate_gradient",
    "generate_probes",
    "multi_position_gradient",
    "score_probes",
    "square_gradient",
]


def generate_probes(side, noise_bound, count, rng):
    """``count`` tensors over (3, side, side) with entries +/-noise_bound."""
    if noise_bound <= 0:
        raise ValueError(f"noise bound must be positive, got {noise_bound}")
    if count < 1:
        raise ValueError(f"probe count must be >= 1, got {count}")
    signs = rng.integers(0, 2, size=(count, 3, side, side)) * 2 - 1
    return signs.astype(np.float64) * noise_bound


def _objective_region(objective, q, h):
    if objective == "footprint":
        return (tuple(q), h)
    if objective == "full":
        return None
    raise ValueError(f"unknown objective {objective!r}")


def attack_score(oracle, samples, index, patch, q, cache, counter, *,
                 objective="footprint", threads=1):
    """Scalar attack performance of ``patch`` on one sample."""
    h = patch.shape[-1]
    ensure_references(oracle, _single(samples, index), q, h, cache, counter, threads)
    batch = _patched_input(samples[index], patch, q)[None]
    out = evaluate_counted(oracle, batch, counter, threads)
    ref = cache.get(_sample_key(samples, index), q, h)
    emap = reduce_output_difference(out - ref[None], oracle.out_channels)
    return mean_error(emap, _objective_region(objective, q, h))


def _single(samples, index):
    return samples.subset([index])


def score_probes(oracle, samples, index, patch, q, square, probes, cache, counter, *,
                 objective="footprint", base_cache=None, patch_version=None, threads=1):
    """Score each probe by its change in attack performance.

    score_i = omega(patch with square + probe_i, clamped) - omega(patch),
    both on the single training sample ``samples[index]``.  The baseline
    omega(patch) is reused from ``base_cache`` when it matches
    ``patch_version`` (saving one query); probe evaluations always cost
    one query each.
    """
    patch = np.asarray(patch, dtype=np.float64)
    h = patch.shape[-1]
    key = (_sample_key(samples, index), tuple(q))
    region = _objective_region(objective, q, h)

    base = None
    if base_cache is not None and patch_version is not None:
        hit = base_cache.get(key)
        if hit is not None and hit[0] == patch_version:
            base = hit[1]
    if base is None:
        base = attack_score(oracle, samples, index, patch, q, cache, counter,
                            objective=objective, threads=threads)
        if base_cache is not None and patch_version is not None:
            base_cache[key] = (patch_version, base)

    ensure_references(oracle, _single(samples, index), q, h, cache, counter, threads)
    center = square.center
    current = crop(patch, square.side, center)
    inputs = []
    for probe in probes:
        candidate = attach(patch, np.clip(current + probe, 0.0, 1.0), center)
        inputs.append(_patched_input(samples[index], candidate, q))
    try:
        outputs = evaluate_counted(oracle, np.stack(inputs), counter, threads)
    except QueryBudgetExceeded:
        raise
    except Exception as exc:
        raise RuntimeError(
            f"oracle failed while scoring a batch of {len(probes)} probes "
            f"on sample {key[0]}"
        ) from exc
    ref = cache.get(_sample_key(samples, index), q, h)
    scores = np.empty(len(probes))
    for i in range(len(probes)):
        emap = reduce_output_difference(outputs[i : i + 1] - ref[None], oracle.out_channels)
        scores[i] = mean_error(emap, region) - base
    return scores


def adjust_scores(scores, use_score_norm=True, use_adaptive_scale=True):
    """Per-sign normalization and adaptive scaling of probe scores.

    Normalization maps positives to (0, 1] (divide by the max positive)
    and negatives to [-1, 0) (divide by the magnitude of the most negative);
    adaptive scaling then divides each side by its element count, weighting
    the rarer sign more.  Signs are never flipped, zeros pass through, and
    an empty side is skipped.
    """
    out = np.asarray(scores, dtype=np.float64).copy()
    pos = out > 0
    neg = out < 0
    if use_score_norm:
        if pos.any():
            out[pos] = out[pos] / out[pos].max()
        if neg.any():
            out[neg] = out[neg] / abs(out[neg].min())
    if use_adaptive_scale:
        if pos.any():
            out[pos] = out[pos] / pos.sum()
        if neg.any():
            out[neg] = out[neg] / neg.sum()
    return out


def estimate_gradient(probes, scores):
    """Score-weighted probe average, rescaled to L2 norm sqrt(3 * side^2).

    Returns the zero tensor when the weighted sum cancels exactly (all
    scores zero, typically).
    """
    probes = np.asarray(probes, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    raw = np.einsum("b,bcij->cij", scores, probes) / len(scores)
    norm = np.sqrt((raw**2).sum())
    if norm == 0.0:
        return np.zeros_like(raw)
    side = probes.shape[-1]
    return np.sqrt(3.0 * side * side) * raw / norm


def square_gradient(oracle, samples, index, patch, q, square_region, noise_bound,
                    n_probes, rng, cache, counter, *, objective="footprint",
                    use_score_norm=True, use_adaptive_scale=True,
                    base_cache=None, patch_version=None, threads=1):
    """Full estimation pipeline for one square at one patch location."""
    probes = generate_probes(square_region.side, noise_bound, n_probes, rng)
    scores = score_probes(oracle, samples, index, patch, q, square_region, probes,
                          cache, counter, objective=objective, base_cache=base_cache,
                          patch_version=patch_version, threads=threads)
    adjusted = adjust_scores(scores, use_score_norm, use_adaptive_scale)
    return estimate_gradient(probes, adjusted)


def multi_position_gradient(oracle, samples, index, patch, positions, square_region,
                            noise_bound, n_probes, rng, cache, counter, *,
                            objective="footprint", use_score_norm=True,
                            use_adaptive_scale=True, base_cache=None,
                            patch_version=None, threads=1):
    """Average the square gradient over several patch locations.

    Location-independent mode: the same square is estimated with the patch
    attached at each position and the plain average is returned; the query
    cost scales with the number of positions.
    """
    if len(positions) < 1:
        raise ValueError("need at least one patch position")
    total = None
    for q in positions:
        g = square_gradient(oracle, samples, index, patch, q, square_region,
                            noise_bound, n_probes, rng, cache, counter,
                            objective=objective, use_score_norm=use_score_norm,
                            use_adaptive_scale=use_adaptive_scale,
                            base_cache=base_cache, patch_version=patch_version,
                            threads=threads)
        total = g if total is None else total + g
    return total / len(positions)


class AdamState:
    """Per-square Adam moments; created fresh for every sampled square."""

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0


def adam_step(state, square_values, grad, learning_rate=0.1, beta1=0.5, beta2=0.5,
              eps=1e-8):
    """One ascent Adam update of the square, clamped to [0, 1]."""
    grad = np.asarray(grad, dtype=np.float64)
    square_values = np.asarray(square_values, dtype=np.float64)
    if grad.shape != square_values.shape:
        raise ValueError(f"gradient shape {grad.shape} != square shape {square_values.shape}")
    state.t += 1
    state.m = beta1 * state.m + (1.0 - beta1) * grad
    state.v = beta2 * state.v + (1.0 - beta2) * grad**2
    m_hat = state.m / (1.0 - beta1**state.t)
    v_hat = state.v / (1.0 - beta2**state.t)
    return np.clip(square_values + learning_rate * m_hat / (np.sqrt(v_hat) + eps), 0.0, 1.0)
