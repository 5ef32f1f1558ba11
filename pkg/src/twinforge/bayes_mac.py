"""Bayesian digital twin of a slotted multiple-access channel.

The twin is a one-parameter capture model: when m devices transmit in a
slot, each packet independently survives with probability
``(1 - kappa)^(m-1)``, kappa being the interference level. Uncertainty
about kappa lives on a discrete grid with exact Bayesian updates from
(transmitted, received) slot counts.

Policies are shared tabular Q-learning over the device's own buffer
occupancy with actions {transmit, wait}. A Bayesian twin trains across
interference levels sampled fresh from the posterior every episode; the
frequentist baseline trains inside the single MAP model.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, seeding

DEFAULT_KAPPA_GRID = np.round(np.arange(10) * 0.1, 1)


@dataclass
class MacModel:
    kappa: float                      # interference level in [0, 1)
    n_devices: int
    arrival_prob: float               # per-slot Bernoulli arrival per device
    buffer_cap: int

    def __post_init__(self):
        if not 0.0 <= self.kappa < 1.0:
            raise ValueError("kappa must lie in [0, 1)")
        if not 0.0 <= self.arrival_prob <= 1.0:
            raise ValueError("arrival_prob must lie in [0, 1]")
        if self.n_devices < 1 or self.buffer_cap < 1:
            raise ValueError("n_devices and buffer_cap must be positive")


@dataclass
class DtPosterior:
    """Discrete distribution over candidate interference levels."""

    kappa_grid: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.kappa_grid = np.asarray(self.kappa_grid, dtype=np.float64).reshape(-1)
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if self.kappa_grid.shape != self.weights.shape:
            raise ValueError("grid and weights must have equal length")
        if np.any(np.diff(self.kappa_grid) <= 0):
            raise ValueError("kappa grid must be strictly increasing")
        if self.kappa_grid[0] < 0.0 or self.kappa_grid[-1] >= 1.0:
            raise ValueError("kappa grid must lie in [0, 1)")
        if np.any(self.weights < 0):
            raise ValueError("weights must be non-negative")
        total = self.weights.sum()
        if abs(total - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        self.weights = self.weights / total

    def map_kappa(self):
        """Highest-weight grid point; ties break to the lowest index."""
        return float(self.kappa_grid[int(np.argmax(self.weights))])

    def entropy(self):
        w = self.weights[self.weights > 0]
        return float(-np.sum(w * np.log(w)))


def uniform_posterior(kappa_grid=None):
    grid = DEFAULT_KAPPA_GRID if kappa_grid is None else np.asarray(kappa_grid, float)
    return DtPosterior(grid, np.full(grid.shape, 1.0 / grid.size))


@dataclass
class AccessLog:
    """Per-slot records of concurrent transmissions and received packets."""

    m_tx: np.ndarray
    r_rx: np.ndarray

    def __post_init__(self):
        self.m_tx = np.asarray(self.m_tx, dtype=np.int64).reshape(-1)
        self.r_rx = np.asarray(self.r_rx, dtype=np.int64).reshape(-1)
        if self.m_tx.shape != self.r_rx.shape:
            raise ValueError("m_tx and r_rx must have equal length")
        if np.any(self.m_tx < 0) or np.any(self.r_rx < 0):
            raise ValueError("counts must be non-negative")
        if np.any(self.r_rx > self.m_tx):
            raise ValueError("received packets cannot exceed transmitted packets")

    def __len__(self):
        return self.m_tx.size

    def concat(self, other):
        return AccessLog(np.concatenate([self.m_tx, other.m_tx]),
                         np.concatenate([self.r_rx, other.r_rx]))


@dataclass
class Policy:
    """Transmit probability per own-buffer occupancy level 0..buffer_cap."""

    p_transmit: np.ndarray

    def __post_init__(self):
        self.p_transmit = np.asarray(self.p_transmit, dtype=np.float64).reshape(-1)
        if np.any(self.p_transmit < 0) or np.any(self.p_transmit > 1):
            raise ValueError("transmit probabilities must lie in [0, 1]")

    @classmethod
    def uniform(cls, buffer_cap):
        return cls(np.full(buffer_cap + 1, 0.5))

    @classmethod
    def always_transmit(cls, buffer_cap):
        return cls(np.ones(buffer_cap + 1))

    @classmethod
    def always_wait(cls, buffer_cap):
        return cls(np.zeros(buffer_cap + 1))


@dataclass
class RlOptions:
    episodes: int = 2000
    slots_per_episode: int = 40
    lr: float = 0.1
    epsilon: float = 0.1
    seed: int = 0
    gamma: float = 0.9


@dataclass
class ThroughputEstimate:
    mean: float                       # packets per slot
    stderr: float
    episodes: int


# ---------------------------------------------------------------------------
# Likelihood and posterior
# ---------------------------------------------------------------------------

def channel_likelihood(kappa, m_tx, r_rx):
    """P(r packets received | m transmitted, interference kappa).

    Binomial(m, p) with per-packet success p = (1 - kappa)^(m-1); a lone
    transmission always succeeds.
    """
    if r_rx < 0 or m_tx < 0:
        raise ValueError("counts must be non-negative")
    if r_rx > m_tx:
        raise ValueError("received packets cannot exceed transmitted packets")
    if not 0.0 <= kappa < 1.0:
        raise ValueError("kappa must lie in [0, 1)")
    p = 1.0 if m_tx <= 1 else (1.0 - kappa) ** (m_tx - 1)
    return math.comb(m_tx, r_rx) * p**r_rx * (1.0 - p) ** (m_tx - r_rx)


def _log_likelihood_per_kappa(grid, log):
    m = log.m_tx[None, :].astype(np.float64)
    r = log.r_rx[None, :].astype(np.float64)
    p = np.where(m <= 1, 1.0, (1.0 - grid[:, None]) ** np.maximum(m - 1, 0))
    combs = np.array([math.comb(int(mm), int(rr)) for mm, rr in zip(log.m_tx, log.r_rx)],
                     dtype=np.float64)
    lik = combs[None, :] * p**r * (1.0 - p) ** (m - r)
    with np.errstate(divide="ignore"):
        return np.sum(np.log(lik), axis=1)


def update_posterior(prior, log):
    """Exact grid posterior after observing an access log."""
    if len(log) == 0:
        return DtPosterior(prior.kappa_grid.copy(), prior.weights.copy())
    ll = _log_likelihood_per_kappa(prior.kappa_grid, log)
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights) + ll
    peak = np.max(logw)
    if not np.isfinite(peak):
        raise ValueError("access log contradicts every grid point")
    w = np.exp(logw - peak)
    return DtPosterior(prior.kappa_grid.copy(), w / w.sum())


def sample_models(posterior, n, rng_seed):
    """n i.i.d. interference levels drawn by inverse CDF over the grid."""
    if n < 0:
        raise ValueError("n must be non-negative")
    if n == 0:
        return np.zeros(0)
    rng = np.random.default_rng(rng_seed)
    cdf = np.cumsum(posterior.weights)
    cdf[-1] = 1.0
    idx = np.searchsorted(cdf, rng.random(n), side="right")
    return posterior.kappa_grid[idx]


# ---------------------------------------------------------------------------
# Policy training and evaluation
# ---------------------------------------------------------------------------

def _draw_uniforms(rng, episodes, slots, n_devices):
    shape = (episodes, slots, n_devices)
    return (rng.random(shape), rng.random(shape), rng.random(shape), rng.random(shape))


def train_policy(source, env, opts):
    """Q-learning against the twin; ``source`` selects the twin's kappa.

    A DtPosterior source redraws kappa from the posterior at the start of
    every episode (Bayesian ensemble); a float source is the frequentist
    single-model baseline. env supplies n_devices / arrival_prob /
    buffer_cap; its own kappa field is unused here.
    """
    if opts.episodes < 0:
        raise ValueError("episodes must be non-negative")
    if opts.episodes == 0:
        return Policy.uniform(env.buffer_cap)
    if isinstance(source, DtPosterior):
        kappas = sample_models(source, opts.episodes,
                               seeding.substream_seq(opts.seed, "models"))
    else:
        kappas = np.full(opts.episodes, float(source))
        if np.any(kappas < 0) or np.any(kappas >= 1):
            raise ValueError("kappa must lie in [0, 1)")
    rng = seeding.substream(opts.seed, "episodes")
    arrival_u, explore_u, action_u, success_u = _draw_uniforms(
        rng, opts.episodes, opts.slots_per_episode, env.n_devices)
    q = np.zeros((env.buffer_cap + 1, 2))
    kernels.q_learning_train(q, kappas, env.arrival_prob, env.buffer_cap,
                             arrival_u, explore_u, action_u, success_u,
                             opts.lr, opts.gamma, opts.epsilon)
    p_tx = np.where(q[:, 0] > q[:, 1], 1.0, np.where(q[:, 0] < q[:, 1], 0.0, 0.5))
    return Policy(p_tx)


def evaluate_policy(policy, true_model, episodes, seed, slots_per_episode=200):
    """Seeded rollout in the ground-truth model; mean delivered packets/slot."""
    if episodes < 1:
        raise ValueError("episodes must be positive")
    if policy.p_transmit.shape[0] != true_model.buffer_cap + 1:
        raise ValueError("policy table does not match the model's buffer capacity")
    rng = seeding.substream(seed, "rollout")
    shape = (episodes, slots_per_episode, true_model.n_devices)
    arrival_u, action_u, success_u = rng.random(shape), rng.random(shape), rng.random(shape)
    delivered = kernels.policy_rollout(policy.p_transmit, true_model.kappa,
                                       true_model.arrival_prob, true_model.buffer_cap,
                                       arrival_u, action_u, success_u)
    per_episode = delivered / slots_per_episode
    stderr = float(per_episode.std(ddof=1) / np.sqrt(episodes)) if episodes > 1 else 0.0
    return ThroughputEstimate(float(per_episode.mean()), stderr, episodes)


def collect_access_log(model, slots, tx_prob, seed):
    """Calibration log: every device transmits w.p. tx_prob each slot."""
    rng = seeding.substream(seed, "log")
    m = rng.binomial(model.n_devices, tx_prob, slots)
    p = np.where(m <= 1, 1.0, (1.0 - model.kappa) ** np.maximum(m - 1, 0))
    r = rng.binomial(m, p)
    return AccessLog(m, r)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def write_access_log(log, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["m_tx", "r_rx"])
        for m, r in zip(log.m_tx, log.r_rx):
            writer.writerow([int(m), int(r)])


def read_access_log(path):
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["m_tx", "r_rx"]:
            raise ValueError("unrecognized access log header")
        rows = [(int(a), int(b)) for a, b in reader]
    if rows:
        m, r = zip(*rows)
    else:
        m, r = (), ()
    return AccessLog(np.array(m, dtype=np.int64), np.array(r, dtype=np.int64))


def write_policy(policy, path):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["buffer_level", "p_transmit"])
        for level, p in enumerate(policy.p_transmit):
            writer.writerow([level, repr(float(p))])


def read_policy(path):
    with open(path, "r", newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != ["buffer_level", "p_transmit"]:
            raise ValueError("unrecognized policy header")
        probs = [float(row[1]) for row in reader]
    return Policy(np.asarray(probs))
