"""Single-step random-search baseline sharing the attack infrastructure.

Each iteration samples a square uniformly (same size schedule as the main
attack), proposes one uniform color from the 8 corners of the RGB cube
for the whole square, and keeps the proposal only if the validation score
strictly improves.  No gradient estimation, no per-square refinement:
this is the comparison harness the main attack is measured against.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import sampling
from .attack import _LogWriter, center_location
from .oracles import (
    QueryBudgetExceeded,
    QueryCounter,
    ReferenceCache,
    mean_error,
    pixel_error_map,
)
from .runlog import RunRecord
from .tensor import attach, footprint_slices, init_striped_patch

__all__ = ["RandomSearchAttack"]


class RandomSearchAttack(BaseEstimator):
    """Accept-if-better uniform-color square search.

    Shares the run-log format with :class:`~blackpatch.attack.PatchAttack`;
    every record is a ``square-switch`` event since each proposal uses a
    fresh square.  Queries per iteration equal the validation set size
    exactly (references are cached at initialization).
    """

    def __init__(self, patch_side=16, location=None, max_iters=10000,
                 init_area_frac=sampling.DEFAULT_INIT_AREA,
                 size_milestones=sampling.DEFAULT_MILESTONES,
                 objective="footprint", query_budget=None, val_subsample=None,
                 seed=0, threads=1, log_path=None):
        self.patch_side = patch_side
        self.location = location
        self.max_iters = max_iters
        self.init_area_frac = init_area_frac
        self.size_milestones = size_milestones
        self.objective = objective
        self.query_budget = query_budget
        self.val_subsample = val_subsample
        self.seed = seed
        self.threads = threads
        self.log_path = log_path

    def _val_score(self, oracle, val, patch, q):
        emap = pixel_error_map(oracle, val, patch, q, self._cache, self._counter,
                               self.threads)
        region = (q, patch.shape[-1]) if self.objective == "footprint" else None
        return mean_error(emap, region)

    def fit(self, oracle, train, val):
        h = int(self.patch_side)
        if h < 2:
            raise ValueError(f"patch side must be >= 2, got {h}")
        q = tuple(self.location) if self.location is not None else \
            center_location(val.height, val.width)
        footprint_slices((val.height, val.width), h, q)
        rng = np.random.default_rng(self.seed)

        self._cache = ReferenceCache()
        self._counter = QueryCounter(self.query_budget)
        self._q = q
        if self.val_subsample is not None and self.val_subsample < len(val):
            idx = sorted(rng.choice(len(val), size=self.val_subsample, replace=False))
            val = val.subset(idx)
        log = _LogWriter(self.log_path)
        self.history_ = []

        patch = init_striped_patch(h, rng)
        try:
            omega_star = self._val_score(oracle, val, patch, q)
        except QueryBudgetExceeded:
            log.close()
            raise
        self.history_.append(RunRecord(self._counter.total, -1, -1, omega_star,
                                       omega_star, 0.0, -1, -1, -1, "init"))
        log.write(self.history_[-1])

        try:
            for iteration in range(self.max_iters):
                side = sampling.square_size(iteration, h, self.init_area_frac,
                                            self.size_milestones)
                lo, hi = sampling.valid_center_range(h, side)
                span = hi - lo + 1
                flat = rng.integers(0, span * span)
                center = (lo + int(flat) // span, lo + int(flat) % span)
                color = rng.integers(0, 2, size=3).astype(np.float64)
                tile = np.broadcast_to(color[:, None, None], (3, side, side))
                candidate = attach(patch, tile, center)
                try:
                    omega = self._val_score(oracle, val, candidate, q)
                except QueryBudgetExceeded:
                    break
                if omega > omega_star:
                    patch = candidate
                    omega_star = omega
                rec = RunRecord(self._counter.total, iteration, 0, omega_star,
                                omega, 0.0, center[0], center[1], side,
                                "square-switch")
                self.history_.append(rec)
                log.write(rec)
        finally:
            log.close()

        self.patch_ = patch
        self.best_patch_ = patch.copy()
        self.best_score_ = omega_star
        self.n_queries_ = self._counter.total
        return self

    def score(self, oracle, samples):
        from .attack import evaluate_patch

        return evaluate_patch(oracle, self.best_patch_, samples, [self._q],
                              objective=self.objective, threads=self.threads)
