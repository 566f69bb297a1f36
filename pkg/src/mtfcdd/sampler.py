"""Balanced per-iteration class sampling and balanced-epoch length estimation.

Training draws one class uniformly at random per iteration (normal counts as
its own class next to the anomaly types), then takes the next image from that
class's shuffled pool, reshuffling a pool whenever it runs dry. A *balanced
epoch* ends once every class i has been drawn at least m_i times, where m_i
is the number of images in class i. Rare classes therefore get oversampled
relative to a plain pass over the data.

The number of draws T needed to finish a balanced epoch is a generalized
coupon-collector quantity. A closed form exists but is impractical for large
quotas, so `estimate_epoch_length` estimates E[T] by Monte Carlo, and
`exact_epoch_length` solves the absorbing chain over joint drawn-counts
exactly for tiny instances (its state space is prod(m_i + 1)).
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError


class BalancedSampler:
    """Uniform-class balanced stream over dataset indices.

    ``class_indices`` maps each class to the dataset indices of its images;
    every class needs at least one image. Draw counters and the iteration
    counter reset at :meth:`reset_epoch`; pools shuffle without replacement
    within each cycle and reshuffle when exhausted.
    """

    def __init__(self, class_indices, seed=0, batch_size=1):
        if not class_indices:
            raise ConfigError("balanced sampler needs at least one class")
        for cid, idxs in enumerate(class_indices):
            if len(idxs) == 0:
                raise ConfigError(f"balanced sampler: class {cid} has no images")
        if batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        self.rng = np.random.default_rng(seed)
        self.batch_size = batch_size
        self.quotas = [np.asarray(idxs, dtype=np.int64) for idxs in class_indices]
        self.pools = [self.rng.permutation(idxs) for idxs in self.quotas]
        self.positions = [0] * len(self.quotas)
        self.drawn = [0] * len(self.quotas)
        self.iterations = 0  # total draws this epoch

    @property
    def num_classes(self):
        return len(self.quotas)

    def next_sample(self) -> int:
        cls = int(self.rng.integers(0, self.num_classes))
        if self.positions[cls] >= len(self.pools[cls]):
            self.pools[cls] = self.rng.permutation(self.quotas[cls])
            self.positions[cls] = 0
        idx = int(self.pools[cls][self.positions[cls]])
        self.positions[cls] += 1
        self.drawn[cls] += 1
        self.iterations += 1
        return idx

    def next_batch(self):
        return [self.next_sample() for _ in range(self.batch_size)]

    def epoch_complete(self) -> bool:
        return all(d >= len(q) for d, q in zip(self.drawn, self.quotas))

    def reset_epoch(self):
        self.drawn = [0] * len(self.quotas)
        self.iterations = 0


@dataclass
class EpochLengthEstimate:
    mu_T: float  # mean draws per balanced epoch
    mu_T_batch: float  # mean mini-batch iterations per balanced epoch
    std_T: float  # sample standard deviation of draws


def estimate_epoch_length(quotas, n_trials, batch_size=32, seed=0) -> EpochLengthEstimate:
    """Monte Carlo estimate of the expected draws per balanced epoch.

    Simulates ``n_trials`` independent epochs over classes with image counts
    ``quotas`` (class chosen uniformly per draw) and averages the completion
    times: mu_T = mean(T_j), mu_T_batch = mu_T / batch_size. Trials run
    vectorized over an active set, so runtime scales with the total number
    of simulated draws rather than trials * worst case.
    """
    m = np.asarray(quotas, dtype=np.int64)
    if m.ndim != 1 or m.size == 0 or (m < 1).any():
        raise ConfigError("quotas must be a non-empty list of positive counts")
    if n_trials < 1:
        raise ConfigError("n_trials must be >= 1")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    n = m.size
    rng = np.random.default_rng(seed)
    counts = np.zeros((n_trials, n), dtype=np.int64)
    total = np.zeros(n_trials, dtype=np.int64)
    active = np.arange(n_trials)
    while active.size:
        draws = rng.integers(0, n, size=active.size)
        counts[active, draws] += 1
        total[active] += 1
        done = (counts[active] >= m).all(axis=1)
        if done.any():
            active = active[~done]
    mu = float(total.mean())
    std = float(total.std(ddof=1)) if n_trials > 1 else 0.0
    return EpochLengthEstimate(mu_T=mu, mu_T_batch=mu / batch_size, std_T=std)


def exact_epoch_length(quotas, max_states=2_000_000) -> float:
    """Exact E[draws per balanced epoch] via the absorbing chain over counts.

    State is the vector of per-class drawn counts capped at the quotas;
    counts only grow, so the chain is a DAG and the expectation solves by
    memoized recursion: E[s] = 1 + (1/n) * sum_i E[s + e_i]. Feasible only
    for tiny instances (state count prod(m_i + 1) <= ``max_states``).
    """
    m = tuple(int(q) for q in quotas)
    if not m or any(q < 1 for q in m):
        raise ConfigError("quotas must be a non-empty list of positive counts")
    n_states = 1
    for q in m:
        n_states *= q + 1
    if n_states > max_states:
        raise ConfigError(f"state space too large for exact solve ({n_states} states)")
    n = len(m)

    @lru_cache(maxsize=None)
    def expected(state):
        if all(s >= q for s, q in zip(state, m)):
            return 0.0
        acc = 0.0
        for i in range(n):
            nxt = list(state)
            nxt[i] = min(nxt[i] + 1, m[i])
            acc += expected(tuple(nxt))
        return 1.0 + acc / n

    return expected((0,) * n)


def std_epoch_ratio(mu_T_batch, total_images, batch_size) -> float:
    """Balanced-epoch length expressed in standard epochs.

    A standard epoch is total_images / batch_size mini-batch iterations;
    the ratio says how many of those one balanced epoch is worth.
    """
    if total_images <= 0:
        raise ConfigError("total_images must be positive")
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    return mu_T_batch / (total_images / batch_size)
