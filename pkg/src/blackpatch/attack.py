"""The outer patch optimization loop, as an sklearn-style estimator.

:class:`PatchAttack` iteratively samples a square area inside the patch,
estimates its gradient from probe scores on a random training sample,
applies an ascent Adam step, and re-scores the patch on the validation
set.  The best validation score seen is tracked monotonically; a square is
abandoned after ``max_stale_steps`` non-improving steps, and the probe
noise bound decays by ``noise_decay`` after ``max_stale_iters``
non-improving square iterations.

All randomness flows from one seeded generator consumed in loop order, so
a fixed seed reproduces logs and patches byte for byte.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import sampling
from .gradient import (
    AdamState,
    adam_step,
    multi_position_gradient,
    square_gradient,
)
from .oracles import (
    QueryBudgetExceeded,
    QueryCounter,
    ReferenceCache,
    mean_error,
    pixel_error_map,
)
from .runlog import RunRecord, format_record
from .tensor import attach, crop, footprint_slices, init_striped_patch

__all__ = ["PatchAttack", "evaluate_patch", "center_location"]


def center_location(height, width):
    return (height // 2, width // 2)


def evaluate_patch(oracle, patch, samples, positions, objective="footprint",
                   counter=None, threads=1):
    """Mean attack error of a fixed patch over a sample set.

    Pure with respect to attack state: uses a private reference cache, so
    repeated calls return identical values and cost identical query
    counts.  With several positions the per-position footprint errors are
    averaged.
    """
    patch = np.asarray(patch, dtype=np.float64)
    h = patch.shape[-1]
    counter = QueryCounter() if counter is None else counter
    cache = ReferenceCache()
    if isinstance(positions, tuple) and len(positions) == 2 and np.isscalar(positions[0]):
        positions = [positions]
    scores = []
    for q in positions:
        emap = pixel_error_map(oracle, samples, patch, q, cache, counter, threads)
        region = (tuple(q), h) if objective == "footprint" else None
        scores.append(mean_error(emap, region))
    return float(np.mean(scores))


class _LogWriter:
    def __init__(self, path):
        self._fh = open(path, "w", encoding="ascii") if path else None

    def write(self, record):
        if self._fh is not None:
            self._fh.write(format_record(record) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class PatchAttack(BaseEstimator):
    """Query-based black-box adversarial patch optimizer.

    Parameters follow the method defaults: 20 probes per gradient
    estimate, square patience 1, decay patience 1, noise bound 0.1 decayed
    by 0.98, 100 uniform warm-up iterations, square area starting at 2.5%
    of the patch and halving at the size milestones, and an Adam update
    with learning rate 0.1 and both betas 0.5.

    After :meth:`fit`:

    - ``patch_`` is the final patch, ``best_patch_`` the snapshot that
      achieved ``best_score_`` on the validation set;
    - ``history_`` holds one :class:`RunRecord` per query-consuming event;
    - ``n_queries_``, ``epsilon_``, ``decay_events_`` summarize the run.
    """

    def __init__(self, patch_side=16, location=None, positions=None,
                 max_iters=10000, max_steps=50, n_probes=20,
                 noise_bound=0.1, noise_decay=0.98, max_stale_steps=1,
                 max_stale_iters=1, uniform_warmup=100,
                 init_area_frac=sampling.DEFAULT_INIT_AREA,
                 size_milestones=sampling.DEFAULT_MILESTONES,
                 learning_rate=0.1, beta1=0.5, beta2=0.5, adam_eps=1e-8,
                 objective="footprint", use_score_norm=True,
                 use_adaptive_scale=True, use_prob_sampling=True,
                 query_budget=None, val_subsample=None, seed=0, threads=1,
                 log_path=None):
        self.patch_side = patch_side
        self.location = location
        self.positions = positions
        self.max_iters = max_iters
        self.max_steps = max_steps
        self.n_probes = n_probes
        self.noise_bound = noise_bound
        self.noise_decay = noise_decay
        self.max_stale_steps = max_stale_steps
        self.max_stale_iters = max_stale_iters
        self.uniform_warmup = uniform_warmup
        self.init_area_frac = init_area_frac
        self.size_milestones = size_milestones
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.adam_eps = adam_eps
        self.objective = objective
        self.use_score_norm = use_score_norm
        self.use_adaptive_scale = use_adaptive_scale
        self.use_prob_sampling = use_prob_sampling
        self.query_budget = query_budget
        self.val_subsample = val_subsample
        self.seed = seed
        self.threads = threads
        self.log_path = log_path

    # -- shared run plumbing ------------------------------------------------

    def _check_setup(self, train, val):
        h = int(self.patch_side)
        if h < 2:
            raise ValueError(f"patch side must be >= 2, got {h}")
        if train.height != val.height or train.width != val.width:
            raise ValueError("training and validation samples must share dimensions")
        if self.location is None and self.positions is None:
            q = center_location(val.height, val.width)
        else:
            q = tuple(self.location) if self.location is not None else tuple(self.positions[0])
        positions = [tuple(p) for p in self.positions] if self.positions else [q]
        for p in positions:
            footprint_slices((val.height, val.width), h, p)  # bounds check
        return h, q, positions

    def _val_objective(self, patch_version):
        """Validation maps and score of the current patch, cached per version."""
        if self._val_state is not None and self._val_state[0] == patch_version:
            return self._val_state[1], self._val_state[2]
        maps = []
        scores = []
        for q in self._positions:
            emap = pixel_error_map(self._oracle, self._val, self._patch, q,
                                   self._cache, self._counter, self.threads)
            region = (q, self._h) if self.objective == "footprint" else None
            maps.append(emap)
            scores.append(mean_error(emap, region))
        omega = float(np.mean(scores))
        self._val_state = (patch_version, maps, omega)
        return maps, omega

    def _sampling_footprint(self):
        """h x h error map over the patch footprint, averaged over positions."""
        maps = self._val_state[1]
        crops = [crop(m[None], self._h, q)[0] for m, q in zip(maps, self._positions)]
        return np.mean(crops, axis=0)

    def _emit(self, iteration, step, omega, event):
        sq = self._square
        rec = RunRecord(
            queries=self._counter.total, iter=iteration, step=step,
            omega_star=self._omega_star, omega=omega,
            epsilon=self._epsilon,
            square_r=sq.row if sq else -1, square_c=sq.col if sq else -1,
            square_e=sq.side if sq else -1, event=event,
        )
        self.history_.append(rec)
        self._log.write(rec)

    def _finalize(self):
        self._log.close()
        self.patch_ = self._patch
        self.n_queries_ = self._counter.total
        self.epsilon_ = self._epsilon
        self.best_score_ = self._omega_star

    # -- the optimization loop ----------------------------------------------

    def fit(self, oracle, train, val):
        """Optimize a patch against ``oracle`` and return ``self``."""
        h, q, positions = self._check_setup(train, val)
        rng = np.random.default_rng(self.seed)

        self._oracle = oracle
        self._h = h
        self._positions = positions
        self._cache = ReferenceCache()
        self._counter = QueryCounter(self.query_budget)
        self._val = val
        if self.val_subsample is not None and self.val_subsample < len(val):
            idx = sorted(rng.choice(len(val), size=self.val_subsample, replace=False))
            self._val = val.subset(idx)
        self._base_cache = {}
        self._val_state = None
        self._square = None
        self._log = _LogWriter(self.log_path)
        self.history_ = []
        self.decay_events_ = 0

        self._patch = init_striped_patch(h, rng)
        self._epsilon = float(self.noise_bound)
        patch_version = 0

        try:
            _, omega = self._val_objective(patch_version)
        except QueryBudgetExceeded:
            self._omega_star = float("nan")
            self.best_patch_ = self._patch.copy()
            self._finalize()
            raise
        self._omega_star = omega
        self.best_patch_ = self._patch.copy()
        self._emit(-1, -1, omega, "init")

        stop = False
        inter_stale = 0
        last_improved = True
        try:
            for iteration in range(self.max_iters):
                if stop:
                    break
                pending = "square-switch"
                if iteration > 0:
                    if last_improved:
                        inter_stale = 0
                    else:
                        inter_stale += 1
                        if inter_stale >= self.max_stale_iters:
                            self._epsilon *= self.noise_decay
                            self.decay_events_ += 1
                            inter_stale = 0
                            pending = "decay"

                footprint = self._sampling_footprint()
                self._square = sampling.sample_square(
                    iteration, footprint, (h // 2, h // 2), h,
                    self.uniform_warmup, rng,
                    init_area_frac=self.init_area_frac,
                    milestones=self.size_milestones,
                    use_prob_sampling=self.use_prob_sampling,
                )
                adam = AdamState((3, self._square.side, self._square.side))
                intra_stale = 0
                last_improved = False

                for step in range(self.max_steps):
                    t_index = int(rng.integers(0, len(train)))
                    try:
                        if len(positions) == 1:
                            grad = square_gradient(
                                oracle, train, t_index, self._patch, positions[0],
                                self._square, self._epsilon, self.n_probes, rng,
                                self._cache, self._counter,
                                objective=self.objective,
                                use_score_norm=self.use_score_norm,
                                use_adaptive_scale=self.use_adaptive_scale,
                                base_cache=self._base_cache,
                                patch_version=patch_version, threads=self.threads,
                            )
                        else:
                            grad = multi_position_gradient(
                                oracle, train, t_index, self._patch, positions,
                                self._square, self._epsilon, self.n_probes, rng,
                                self._cache, self._counter,
                                objective=self.objective,
                                use_score_norm=self.use_score_norm,
                                use_adaptive_scale=self.use_adaptive_scale,
                                base_cache=self._base_cache,
                                patch_version=patch_version, threads=self.threads,
                            )
                    except QueryBudgetExceeded:
                        stop = True
                        break

                    if np.any(grad):
                        values = crop(self._patch, self._square.side, self._square.center)
                        updated = adam_step(adam, values, grad, self.learning_rate,
                                            self.beta1, self.beta2, self.adam_eps)
                        self._patch = attach(self._patch, updated, self._square.center)
                        patch_version += 1
                        try:
                            _, omega = self._val_objective(patch_version)
                        except QueryBudgetExceeded:
                            stop = True
                            break
                    else:
                        # degenerate zero gradient: skip the update, reuse the
                        # last validation score, and count the step as stale
                        omega = self._val_state[2]

                    if omega > self._omega_star:
                        self._omega_star = omega
                        self.best_patch_ = self._patch.copy()
                        last_improved = True
                        intra_stale = 0
                    else:
                        intra_stale += 1

                    self._emit(iteration, step, omega, pending)
                    pending = "step"
                    if intra_stale >= self.max_stale_steps:
                        break
        except Exception:
            self._finalize()
            raise
        self._finalize()
        return self

    def score(self, oracle, samples):
        """Mean footprint error of the best patch on fresh samples."""
        return evaluate_patch(oracle, self.best_patch_, samples, self._positions,
                              objective=self.objective, threads=self.threads)
