"""Query-fingerprint detection and the per-query randomization bypass.

The detector hashes every incoming query: channel values are quantized to
a small number of levels, the byte stream is windowed, each window gets a
64-bit polynomial hash, and the k smallest distinct hashes form the query
fingerprint.  A query is flagged when its fingerprint shares at least
``match_threshold`` hashes with any previously seen query -- iterative
black-box attacks submit many near-duplicate inputs and light up
immediately, while adding small independent noise to every sample
(the bypass) scrambles all window hashes and drops the detection rate to
zero without disturbing the attack itself.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .oracles import Oracle

__all__ = [
    "DefendedOracle",
    "DetectorConfig",
    "QueryFingerprintDetector",
    "RandomizedOracle",
    "fingerprint_query",
    "randomize_sample",
]

HASH_BASE = 1099511628211  # FNV-1a prime, used as polynomial base
_COEFF_CACHE = {}


@dataclass(frozen=True)
class DetectorConfig:
    quant_levels: int = 32
    window: int = 64
    stride: int = 32
    n_hashes: int = 50
    match_threshold: int = 25

    def __post_init__(self):
        if self.window <= 0 or not (0 < self.stride <= self.window):
            raise ValueError("need window > 0 and 0 < stride <= window")
        if self.match_threshold > self.n_hashes:
            raise ValueError("match threshold cannot exceed kept hash count")


def quantize(image, levels):
    """Map [0, 1] values to integer levels 0 .. levels-1."""
    q = np.floor(np.asarray(image, dtype=np.float64) * levels)
    return np.clip(q, 0, levels - 1).astype(np.uint8)


def _window_hashes(data, window, stride):
    # polynomial hash modulo 2^64 (natural uint64 wraparound); vectorized
    if len(data) < window:
        padded = np.zeros(window, dtype=np.uint8)
        padded[: len(data)] = data
        data = padded
    coeffs = _COEFF_CACHE.get(window)
    if coeffs is None:
        coeffs = np.array([pow(HASH_BASE, window - 1 - i, 2**64) for i in range(window)],
                          dtype=np.uint64)
        _COEFF_CACHE[window] = coeffs
    windows = sliding_window_view(data, window)[::stride]
    return (windows.astype(np.uint64) * coeffs[None, :]).sum(axis=1)


def fingerprint_query(image, config=DetectorConfig()):
    """The k smallest distinct window hashes of the quantized query.

    Returned sorted ascending; identical images always produce identical
    fingerprints.
    """
    stream = quantize(image, config.quant_levels).reshape(-1)
    hashes = np.unique(_window_hashes(stream, config.window, config.stride))
    return hashes[: config.n_hashes]


class QueryFingerprintDetector:
    """Store of seen fingerprints with near-duplicate matching.

    ``observe`` returns (matched, max_overlap) and always adds the incoming
    fingerprint to the store.  Matching uses an inverted hash index, so
    cost scales with how many stored queries actually share hashes.
    """

    def __init__(self, config=DetectorConfig()):
        self.config = config
        self._postings = {}
        self._n_queries = 0
        self.detections = 0

    def __len__(self):
        return self._n_queries

    def observe(self, fingerprint):
        overlap = Counter()
        for h in fingerprint:
            ids = self._postings.get(int(h))
            if ids:
                overlap.update(ids)
        max_overlap = max(overlap.values()) if overlap else 0
        matched = max_overlap >= self.config.match_threshold
        if matched:
            self.detections += 1
        qid = self._n_queries
        self._n_queries += 1
        for h in fingerprint:
            self._postings.setdefault(int(h), []).append(qid)
        return matched, max_overlap

    def observe_image(self, image):
        return self.observe(fingerprint_query(image, self.config))

    @property
    def detection_rate(self):
        return self.detections / self._n_queries if self._n_queries else 0.0


def randomize_sample(image, amplitude, rng):
    """Add i.i.d. uniform noise in [-amplitude, amplitude], clamp to [0, 1]."""
    if not 0.0 <= amplitude <= 0.1:
        raise ValueError(f"noise amplitude must be in [0, 0.1], got {amplitude}")
    image = np.asarray(image, dtype=np.float64)
    if amplitude == 0.0:
        return image.copy()
    noise = rng.uniform(-amplitude, amplitude, size=image.shape)
    return np.clip(image + noise, 0.0, 1.0)


class DefendedOracle(Oracle):
    """Oracle wrapper that fingerprints every incoming sample.

    Detection is observational: flagged queries are still answered, and
    query accounting is untouched (the counter charges at the call site as
    usual).  Flow samples are fingerprinted on their first frame.
    """

    def __init__(self, oracle, detector=None):
        self.inner = oracle
        self.detector = QueryFingerprintDetector() if detector is None else detector
        self.out_channels = oracle.out_channels
        self.frames_per_sample = oracle.frames_per_sample

    def evaluate(self, batch):
        for sample in np.asarray(batch):
            self.detector.observe_image(sample[:3])
        return self.inner.evaluate(batch)


class RandomizedOracle(Oracle):
    """Bypass wrapper: independent noise on every sample of every query.

    Changes only what the downstream oracle sees; patch state and query
    accounting are unaffected.  Uses its own generator so attack-side
    seeding stays reproducible.
    """

    def __init__(self, oracle, amplitude, rng=None):
        self.inner = oracle
        self.amplitude = amplitude
        self.rng = np.random.default_rng(0) if rng is None else rng
        self.out_channels = oracle.out_channels
        self.frames_per_sample = oracle.frames_per_sample

    def evaluate(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        noisy = np.stack([randomize_sample(s, self.amplitude, self.rng) for s in batch])
        return self.inner.evaluate(noisy)
