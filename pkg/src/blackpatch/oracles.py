"""Black-box model abstraction, query accounting, and pixel-wise errors.

An :class:`Oracle` maps a batch of samples to per-sample pixel-wise
regression outputs: d=1 channels for depth, d=2 for optical flow (flow
oracles take two frames per sample, stacked along the channel axis).
Attack performance is always measured *relative* to the same scene with a
black (all-zero) reference patch attached, so the error functions here
take care of evaluating and caching those references, and every oracle
invocation is charged to an explicit :class:`QueryCounter` -- one sample
forward equals one query, a 2-frame flow sample included.

The synthetic oracles (``blur-depth``, ``conv-depth``, ``grad-flow``) are
desk-scale stand-ins for real depth/flow networks.  They are pure
functions of their input and expose hand-derived vector-Jacobian products
so white-box reference gradients are available for testing.
"""

from __future__ import annotations

import threading

import numpy as np

from . import filters
from .tensor import attach, footprint_slices

__all__ = [
    "Oracle",
    "QueryBudgetExceeded",
    "QueryCounter",
    "ReferenceCache",
    "SampleSet",
    "evaluate_counted",
    "make_synthetic_oracle",
    "mean_error",
    "pixel_error_map",
    "reduce_output_difference",
    "white_box_gradient",
    "white_box_reference",
]

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


class QueryBudgetExceeded(RuntimeError):
    """Raised when charging a batch would push the counter past its budget."""


class QueryCounter:
    """Exact count of oracle sample evaluations, optionally budget-capped.

    Thread-safe: concurrent charges serialize on a lock so the total is
    always exact.
    """

    def __init__(self, budget=None):
        self.total = 0
        self.budget = budget
        self._lock = threading.Lock()

    def charge(self, n):
        n = int(n)
        if n < 0:
            raise ValueError("cannot charge a negative query count")
        with self._lock:
            if self.budget is not None and self.total + n > self.budget:
                raise QueryBudgetExceeded(
                    f"charging {n} queries would exceed budget "
                    f"{self.budget} (current total {self.total})"
                )
            self.total += n
        return self.total

    def remaining(self):
        if self.budget is None:
            return None
        return self.budget - self.total


class SampleSet:
    """Ordered, shape-homogeneous collection of scene samples.

    Each sample is a (3, H, W) image for single-frame oracles or a pair of
    them for flow oracles.  ``role`` ("train"/"val"/"test") namespaces the
    stable per-sample keys used by the reference cache.
    """

    def __init__(self, samples, role):
        if len(samples) == 0:
            raise ValueError("sample set must be nonempty")
        normalized = []
        for s in samples:
            frames = (s,) if isinstance(s, np.ndarray) else tuple(s)
            normalized.append(tuple(np.asarray(f, dtype=np.float64) for f in frames))
        self.frames_per_sample = len(normalized[0])
        shape = normalized[0][0].shape
        for i, frames in enumerate(normalized):
            if len(frames) != self.frames_per_sample:
                raise ValueError(f"sample {i} has {len(frames)} frames, expected {self.frames_per_sample}")
            for f in frames:
                if f.shape != shape:
                    raise ValueError(f"sample {i} shape {f.shape} != {shape}")
        self.samples = normalized
        self.role = role
        self.height = shape[1]
        self.width = shape[2]

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def key(self, i):
        return f"{self.role}:{i}"

    def subset(self, indices):
        sub = SampleSet([self.samples[i] for i in indices], self.role)
        sub._keys = [self.key(i) for i in indices]  # preserve cache identity
        return sub


def _sample_key(samples, i):
    keys = getattr(samples, "_keys", None)
    if keys is not None:
        return keys[i]
    return samples.key(i)


class Oracle:
    """Base contract for a black-box pixel-wise regression model.

    Subclasses set ``out_channels`` (1 for depth, 2 for flow) and
    ``frames_per_sample`` (1 or 2) and implement :meth:`evaluate`, which
    maps a (n, 3*frames, H, W) batch to (n, out_channels, H, W) and must
    be deterministic for identical input.
    """

    out_channels = 1
    frames_per_sample = 1

    def evaluate(self, batch):
        raise NotImplementedError


def evaluate_counted(oracle, batch, counter, threads=1):
    """Single choke point for charged oracle evaluation.

    Charges ``counter`` by the batch size before evaluating.  With
    ``threads > 1`` the batch is split into contiguous chunks evaluated
    concurrently and reassembled in index order, so results are bit-stable
    regardless of parallelism.
    """
    batch = np.asarray(batch)
    n = batch.shape[0]
    counter.charge(n)
    if threads > 1 and n > 1:
        from concurrent.futures import ThreadPoolExecutor

        chunks = np.array_split(np.arange(n), min(threads, n))
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda idx: oracle.evaluate(batch[idx]), chunks))
        out = np.concatenate(parts, axis=0)
    else:
        out = oracle.evaluate(batch)
    out = np.asarray(out, dtype=np.float64)
    if out.shape != (n, oracle.out_channels, batch.shape[-2], batch.shape[-1]):
        raise ValueError(
            f"oracle protocol violation: output shape {out.shape}, expected "
            f"({n}, {oracle.out_channels}, {batch.shape[-2]}, {batch.shape[-1]})"
        )
    return out


class ReferenceCache:
    """Lazily computed black-patch reference outputs, never recomputed.

    Keyed by (sample key, patch center, patch side); an entry is the
    oracle output for the sample with the all-zero patch attached there.
    """

    def __init__(self):
        self._store = {}

    def __len__(self):
        return len(self._store)

    def has(self, sample_key, q, h):
        return (sample_key, tuple(q), int(h)) in self._store

    def get(self, sample_key, q, h):
        return self._store[(sample_key, tuple(q), int(h))]

    def put(self, sample_key, q, h, output):
        self._store[(sample_key, tuple(q), int(h))] = output


def _patched_input(frames, patch, q):
    """Attach ``patch`` at ``q`` in every frame, stack frames on channels."""
    patched = [attach(f, patch, q) for f in frames]
    return np.concatenate(patched, axis=0)


def ensure_references(oracle, samples, q, h, cache, counter, threads=1):
    """Evaluate and cache black-patch references for any uncached samples.

    Returns the number of queries spent (== number of cache misses).
    """
    black = np.zeros((3, h, h))
    missing = [i for i in range(len(samples)) if not cache.has(_sample_key(samples, i), q, h)]
    if not missing:
        return 0
    batch = np.stack([_patched_input(samples[i], black, q) for i in missing])
    outputs = evaluate_counted(oracle, batch, counter, threads)
    for j, i in enumerate(missing):
        cache.put(_sample_key(samples, i), q, h, outputs[j])
    return len(missing)


def reduce_output_difference(diff, out_channels):
    """Collapse a (n, d, H, W) output difference to the (H, W) error map.

    Depth (d=1): signed per-pixel difference averaged over samples.
    Flow (d=2): per-pixel Euclidean norm of the difference vector,
    averaged over samples (always >= 0).
    """
    diff = np.asarray(diff, dtype=np.float64)
    if out_channels == 1:
        return diff[:, 0].mean(axis=0)
    if out_channels == 2:
        return np.sqrt((diff**2).sum(axis=1)).mean(axis=0)
    raise ValueError(f"unsupported output channel count {out_channels}")


def pixel_error_map(oracle, samples, patch, q, cache, counter, threads=1):
    """Per-pixel error of ``patch`` vs the black reference over ``samples``.

    Charges the counter by (uncached references) + len(samples).
    """
    patch = np.asarray(patch, dtype=np.float64)
    h = patch.shape[-1]
    if samples.frames_per_sample != oracle.frames_per_sample:
        raise ValueError(
            f"oracle expects {oracle.frames_per_sample} frame(s) per sample, "
            f"sample set has {samples.frames_per_sample}"
        )
    ensure_references(oracle, samples, q, h, cache, counter, threads)
    batch = np.stack([_patched_input(samples[i], patch, q) for i in range(len(samples))])
    outputs = evaluate_counted(oracle, batch, counter, threads)
    refs = np.stack([cache.get(_sample_key(samples, i), q, h) for i in range(len(samples))])
    return reduce_output_difference(outputs - refs, oracle.out_channels)


def mean_error(error_map, region=None):
    """Mean of an error map over ``region`` -- the attack's scalar objective.

    ``region`` is None for the whole map or (center, side) for a square
    footprint; an empty or out-of-bounds region is rejected.
    """
    error_map = np.asarray(error_map)
    if region is None:
        if error_map.size == 0:
            raise ValueError("cannot average an empty error map")
        return float(error_map.mean())
    at, side = region
    if int(side) < 1:
        raise ValueError(f"region side must be >= 1, got {side}")
    rs, cs = footprint_slices(error_map.shape, side, at)
    return float(error_map[rs, cs].mean())


# --- synthetic oracles ----------------------------------------------------


def _gray(batch_rgb):
    return batch_rgb.mean(axis=1)


class SyntheticOracle(Oracle):
    """Oracle with an analytic input gradient (``vjp``)."""

    def vjp(self, batch, upstream):
        """d<upstream, output>/d(batch) for the given input batch."""
        raise NotImplementedError


class BlurDepthOracle(SyntheticOracle):
    """depth = 10 * boxblur_5x5(gray(x)) with replicate padding.

    Linear in the input with positive coefficients, so the white-box
    optimum over a patch is all-white.  ``precision="single"`` rounds the
    output to float32, matching what the wire protocol carries; the
    reference server is conformant with that mode bit-for-bit.
    """

    out_channels = 1
    frames_per_sample = 1

    def __init__(self, precision="double"):
        if precision not in ("double", "single"):
            raise ValueError(f"unknown precision {precision!r}")
        self.precision = precision

    def evaluate(self, batch):
        out = 10.0 * filters.box_mean(_gray(np.asarray(batch, dtype=np.float64)), 5)
        if self.precision == "single":
            out = out.astype(np.float32)
        return out[:, None]

    def vjp(self, batch, upstream):
        g_gray = 10.0 * filters.box_mean_adjoint(upstream[:, 0], 5)
        return np.repeat(g_gray[:, None] / 3.0, 3, axis=1)


class ConvDepthOracle(SyntheticOracle):
    """Fixed seeded 2-layer conv net: 3->8 channels 3x3, tanh, 8->1 1x1.

    Smooth and nonconvex; the weights carry no meaning beyond giving the
    attack a nontrivial landscape with an analytically checkable gradient.
    """

    out_channels = 1
    frames_per_sample = 1

    def __init__(self, seed=0):
        rng = np.random.default_rng(seed)
        self.w1 = rng.normal(0.0, 0.3, size=(8, 3, 3, 3))
        self.b1 = rng.normal(0.0, 0.1, size=8)
        self.w2 = rng.normal(0.0, 0.35, size=8)

    def evaluate(self, batch):
        z = filters.conv3x3_replicate(np.asarray(batch, dtype=np.float64), self.w1, self.b1)
        hidden = np.tanh(z)
        return np.einsum("o,nohw->nhw", self.w2, hidden, optimize=True)[:, None]

    def vjp(self, batch, upstream):
        z = filters.conv3x3_replicate(np.asarray(batch, dtype=np.float64), self.w1, self.b1)
        hidden = np.tanh(z)
        g_hidden = np.einsum("o,nhw->nohw", self.w2, upstream[:, 0], optimize=True)
        g_z = g_hidden * (1.0 - hidden**2)
        return filters.conv3x3_replicate_adjoint(g_z, self.w1)


class GradFlowOracle(SyntheticOracle):
    """flow = 4 * (sobel_x(gray(frame1)), sobel_y(gray(frame1))).

    Two frames per sample (stacked on channels); only the first frame
    drives the output, the second is accepted for interface parity with
    real flow models.
    """

    out_channels = 2
    frames_per_sample = 2

    def __init__(self):
        self._kx = SOBEL_X[None, None]
        self._ky = SOBEL_Y[None, None]

    def evaluate(self, batch):
        gray1 = _gray(np.asarray(batch, dtype=np.float64)[:, :3])[:, None]
        fx = filters.conv3x3_replicate(gray1, self._kx)[:, 0]
        fy = filters.conv3x3_replicate(gray1, self._ky)[:, 0]
        return 4.0 * np.stack([fx, fy], axis=1)

    def vjp(self, batch, upstream):
        g_fx = 4.0 * upstream[:, 0:1]
        g_fy = 4.0 * upstream[:, 1:2]
        g_gray = (
            filters.conv3x3_replicate_adjoint(g_fx, self._kx)
            + filters.conv3x3_replicate_adjoint(g_fy, self._ky)
        )[:, 0]
        g = np.zeros_like(np.asarray(batch, dtype=np.float64))
        g[:, :3] = np.repeat(g_gray[:, None] / 3.0, 3, axis=1)
        return g


def make_synthetic_oracle(kind, seed=0, precision="double"):
    if kind == "blur-depth":
        return BlurDepthOracle(precision=precision)
    if kind == "conv-depth":
        return ConvDepthOracle(seed=seed)
    if kind == "grad-flow":
        return GradFlowOracle()
    raise ValueError(f"unknown synthetic oracle kind {kind!r}")


# --- white-box reference --------------------------------------------------


def white_box_gradient(oracle, samples, patch, q, region=None, objective="footprint"):
    """Exact gradient of the attack objective w.r.t. a patch region.

    ``region`` is (center, side) in patch coordinates (defaults to the
    whole patch); the objective is the mean error over the patch footprint
    or the full map.  Only synthetic oracles support this.
    """
    if not isinstance(oracle, SyntheticOracle):
        raise TypeError("white-box gradients require a synthetic oracle")
    patch = np.asarray(patch, dtype=np.float64)
    h = patch.shape[-1]
    if region is None:
        region = ((h // 2, h // 2), h)
    at, side = region
    reg_rs, reg_cs = footprint_slices((h, h), side, at)

    height, width = samples.height, samples.width
    if objective == "footprint":
        obj_rs, obj_cs = footprint_slices((height, width), h, q)
        n_obj = h * h
    elif objective == "full":
        obj_rs, obj_cs = slice(0, height), slice(0, width)
        n_obj = height * width
    else:
        raise ValueError(f"unknown objective {objective!r}")

    black = np.zeros((3, h, h))
    n = len(samples)
    grad = np.zeros((3, side, side))
    img_rs, img_cs = footprint_slices((height, width), h, q)
    for i in range(n):
        x_adv = _patched_input(samples[i], patch, q)[None]
        out = np.asarray(oracle.evaluate(x_adv), dtype=np.float64)
        upstream = np.zeros_like(out)
        if oracle.out_channels == 1:
            upstream[0, 0, obj_rs, obj_cs] = 1.0 / (n_obj * n)
        else:
            ref = np.asarray(
                oracle.evaluate(_patched_input(samples[i], black, q)[None]),
                dtype=np.float64,
            )
            diff = out[0] - ref[0]
            norm = np.sqrt((diff**2).sum(axis=0))
            safe = np.where(norm > 0, norm, 1.0)
            w = np.zeros_like(norm)
            w[obj_rs, obj_cs] = 1.0 / (n_obj * n)
            upstream[0] = diff / safe * w[None]
        g_input = oracle.vjp(x_adv, upstream)[0]
        # the patch appears identically in every frame
        for f in range(oracle.frames_per_sample):
            g_patch = g_input[3 * f : 3 * (f + 1), img_rs, img_cs]
            grad += g_patch[:, reg_rs, reg_cs]
    return grad


def white_box_reference(oracle, samples, h, q, steps=500, learning_rate=0.1,
                        beta1=0.5, beta2=0.5, eps=1e-8, objective="footprint",
                        rng=None):
    """Adam gradient ascent on the full patch with exact gradients.

    Returns (best_patch, best_score); the reference optimum the black-box
    attack is measured against.
    """
    from .tensor import init_striped_patch

    rng = np.random.default_rng(0) if rng is None else rng
    patch = init_striped_patch(h, rng)
    cache = ReferenceCache()
    counter = QueryCounter()
    region = ((q[0], q[1]), h) if objective == "footprint" else None

    m = np.zeros_like(patch)
    v = np.zeros_like(patch)
    best_patch = patch.copy()
    best = mean_error(pixel_error_map(oracle, samples, patch, q, cache, counter), region)
    for t in range(1, steps + 1):
        g = white_box_gradient(oracle, samples, patch, q, objective=objective)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g**2
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        patch = np.clip(patch + learning_rate * m_hat / (np.sqrt(v_hat) + eps), 0.0, 1.0)
        score = mean_error(pixel_error_map(oracle, samples, patch, q, cache, counter), region)
        if score > best:
            best = score
            best_patch = patch.copy()
    return best_patch, best
