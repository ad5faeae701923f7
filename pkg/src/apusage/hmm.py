"""Gaussian-emission hidden Markov models.

Covers sequence generation, forward log-likelihood with per-step
increments, Viterbi decoding, multi-sequence Baum-Welch training, and two
structural diagnostics: Mahalanobis divergence from the decoded state and
statistically rare transitions along the decoded path.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp
from scipy.stats import binom

from .gmm import COVARIANCE_FLOOR, _cholesky, floor_covariance, gaussian_logpdf, mahalanobis

MODEL_FORMAT_VERSION = 1


@dataclass
class HmmModel:
    """Ergodic HMM with per-state Gaussian emissions."""

    pi: np.ndarray
    a: np.ndarray  # (n, n) row-stochastic
    means: np.ndarray  # (n, D)
    covariances: np.ndarray  # (n, D, D)
    fingerprint: str | None = None

    def __post_init__(self):
        self.pi = np.asarray(self.pi, dtype=float)
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.covariances = np.asarray(self.covariances, dtype=float)
        if self.covariances.ndim == 2:
            self.covariances = self.covariances[None]

    @property
    def n(self) -> int:
        return self.pi.shape[0]

    @property
    def d(self) -> int:
        return self.means.shape[1]

    def validate(self, atol: float = 1e-9) -> None:
        if abs(self.pi.sum() - 1.0) > atol or np.any(self.pi < 0):
            raise ValueError("initial distribution must be non-negative and sum to 1")
        if self.a.shape != (self.n, self.n):
            raise ValueError("transition matrix shape does not match state count")
        if np.any(self.a < 0) or np.any(np.abs(self.a.sum(axis=1) - 1.0) > atol):
            raise ValueError("transition matrix rows must be non-negative and sum to 1")
        if self.means.shape[0] != self.n or self.covariances.shape != (self.n, self.d, self.d):
            raise ValueError("emission parameter shapes do not match state count")
        for s in range(self.n):
            cov = self.covariances[s]
            if not np.allclose(cov, cov.T, atol=1e-8):
                raise ValueError(f"covariance of state {s} is not symmetric")
            if np.linalg.eigvalsh(cov).min() < COVARIANCE_FLOOR - 1e-12:
                raise ValueError(f"covariance of state {s} is below the floor")

    def to_json(self) -> dict:
        doc = {
            "version": MODEL_FORMAT_VERSION,
            "n": self.n,
            "d": self.d,
            "pi": self.pi.tolist(),
            "a": self.a.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }
        if self.fingerprint is not None:
            doc["fingerprint"] = self.fingerprint
        return doc

    @classmethod
    def from_json(cls, doc: Mapping) -> "HmmModel":
        return cls(
            pi=np.asarray(doc["pi"], dtype=float),
            a=np.asarray(doc["a"], dtype=float),
            means=np.asarray(doc["means"], dtype=float),
            covariances=np.asarray(doc["covariances"], dtype=float),
            fingerprint=doc.get("fingerprint"),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "HmmModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class ViterbiResult:
    path: np.ndarray
    log_prob: float


def _as_sequence(model: HmmModel, sequence: np.ndarray) -> np.ndarray:
    obs = np.asarray(sequence, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    if obs.shape[0] < 1:
        raise ValueError("sequence must be non-empty")
    if obs.shape[1] != model.d:
        raise ValueError(f"observation dimension {obs.shape[1]} does not match model dimension {model.d}")
    return obs


def _emission_logpdfs(model: HmmModel, obs: np.ndarray) -> np.ndarray:
    out = np.empty((obs.shape[0], model.n))
    for s in range(model.n):
        try:
            out[:, s] = gaussian_logpdf(obs, model.means[s], model.covariances[s])
        except ValueError as exc:
            raise ValueError(f"state {s}: {exc}") from None
    return out


def _log_probs(model: HmmModel) -> tuple[np.ndarray, np.ndarray]:
    with np.errstate(divide="ignore"):
        return np.log(model.pi), np.log(model.a)


def generate(model: HmmModel, t: int, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sample (observations, hidden states) of length ``t``; deterministic per seed."""
    if t < 1:
        raise ValueError("sequence length must be at least 1")
    model.validate()
    rng = np.random.default_rng(seed)
    chols = [_cholesky(model.covariances[s]) for s in range(model.n)]
    pi_cum = np.cumsum(model.pi)
    a_cum = np.cumsum(model.a, axis=1)
    noise = rng.standard_normal((t, model.d))
    draws = rng.random(t)

    states = np.empty(t, dtype=int)
    obs = np.empty((t, model.d))
    state = int(np.searchsorted(pi_cum, draws[0], side="right"))
    state = min(state, model.n - 1)
    for i in range(t):
        states[i] = state
        obs[i] = model.means[state] + chols[state] @ noise[i]
        if i + 1 < t:
            nxt = int(np.searchsorted(a_cum[state], draws[i + 1], side="right"))
            state = min(nxt, model.n - 1)
    return obs, states


def forward_loglik(model: HmmModel, sequence: np.ndarray) -> tuple[float, np.ndarray]:
    """Total log P(sequence | model) plus per-step increments.

    Runs the forward recursion in the log domain; increment ``t`` is
    log P(o_t | o_1..o_{t-1}) and the increments sum to the total.
    """
    obs = _as_sequence(model, sequence)
    logb = _emission_logpdfs(model, obs)
    log_pi, log_a = _log_probs(model)

    t_len = obs.shape[0]
    increments = np.empty(t_len)
    alpha = log_pi + logb[0]
    prev = float(logsumexp(alpha))
    increments[0] = prev
    for t in range(1, t_len):
        alpha = logsumexp(alpha[:, None] + log_a, axis=0) + logb[t]
        cur = float(logsumexp(alpha))
        increments[t] = cur - prev
        prev = cur
    return prev, increments


def viterbi(model: HmmModel, sequence: np.ndarray) -> ViterbiResult:
    """Most probable state path; ties break toward the lower state index."""
    obs = _as_sequence(model, sequence)
    logb = _emission_logpdfs(model, obs)
    log_pi, log_a = _log_probs(model)

    t_len = obs.shape[0]
    delta = log_pi + logb[0]
    back = np.zeros((t_len, model.n), dtype=int)
    for t in range(1, t_len):
        scores = delta[:, None] + log_a
        back[t] = np.argmax(scores, axis=0)  # first max = lowest index
        delta = scores[back[t], np.arange(model.n)] + logb[t]

    path = np.empty(t_len, dtype=int)
    path[-1] = int(np.argmax(delta))
    for t in range(t_len - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return ViterbiResult(path=path, log_prob=float(delta[path[-1]]))


def state_divergence(
    model: HmmModel, sequence: np.ndarray, path: np.ndarray | None = None
) -> np.ndarray:
    """Mahalanobis distance of each observation to its Viterbi-assigned state."""
    obs = _as_sequence(model, sequence)
    if path is None:
        path = viterbi(model, obs).path
    path = np.asarray(path, dtype=int)
    if path.shape[0] != obs.shape[0]:
        raise ValueError("path length does not match sequence length")
    return np.array(
        [mahalanobis(obs[t], model.means[path[t]], model.covariances[path[t]]) for t in range(obs.shape[0])]
    )


@dataclass(frozen=True)
class TransitionFlag:
    """A decoded transition inconsistent with the trained transition matrix."""

    source: int
    target: int
    reason: str  # "under_represented" | "rare_taken"
    observed: int
    outgoing: int
    probability: float
    tail: float | None
    steps: tuple[int, ...]  # indices t of the flagged transitions (t -> t+1)


def transition_rarity(
    model: HmmModel,
    path: np.ndarray,
    alpha: float = 0.05,
    p_floor: float = 0.02,
    min_expected: float = 3.0,
) -> list[TransitionFlag]:
    """Flag transitions that are statistically under-represented or intrinsically rare.

    For each source state i with ``n_i`` outgoing transitions, a pair
    (i, j) is under-represented when its lower binomial tail
    P(X <= c_ij | n_i, a_ij) falls below ``alpha`` while the expected count
    ``n_i * a_ij`` is at least ``min_expected``.  Any realized transition
    whose trained probability is below ``p_floor`` is flagged as taken-rare.
    """
    path = np.asarray(path, dtype=int)
    if path.shape[0] < 2:
        raise ValueError("path must contain at least 2 states")

    pair_steps: dict[tuple[int, int], list[int]] = {}
    outgoing = Counter()
    for t in range(path.shape[0] - 1):
        pair = (int(path[t]), int(path[t + 1]))
        pair_steps.setdefault(pair, []).append(t)
        outgoing[pair[0]] += 1

    flags: list[TransitionFlag] = []
    for i in range(model.n):
        n_i = outgoing.get(i, 0)
        if n_i == 0:
            continue
        for j in range(model.n):
            prob = float(model.a[i, j])
            steps = tuple(pair_steps.get((i, j), ()))
            observed = len(steps)
            if n_i * prob >= min_expected:
                tail = float(binom.cdf(observed, n_i, prob))
                if tail < alpha:
                    flags.append(
                        TransitionFlag(i, j, "under_represented", observed, n_i, prob, tail, steps)
                    )
            if observed and prob < p_floor:
                flags.append(TransitionFlag(i, j, "rare_taken", observed, n_i, prob, None, steps))
    return flags


def _init_model(
    pooled: np.ndarray, n: int, rng: np.random.Generator, init: str
) -> HmmModel:
    mu = pooled.mean(axis=0)
    sd = pooled.std(axis=0, ddof=1)
    d = pooled.shape[1]
    means = rng.uniform(mu - 3 * sd, mu + 3 * sd, size=(n, d))
    variances = rng.uniform(sd**2 / 2.0, 3.0 * sd**2, size=(n, d))
    covs = np.stack([np.diag(np.maximum(v, COVARIANCE_FLOOR)) for v in variances])
    if init == "random":
        pi = rng.uniform(0.0, 1.0, size=n)
        a = rng.uniform(0.0, 1.0, size=(n, n))
    elif init == "uniform":
        pi = np.ones(n)
        a = np.ones((n, n))
    else:
        raise ValueError(f"unknown init mode {init!r}")
    pi = pi / pi.sum()
    a = a / a.sum(axis=1, keepdims=True)
    return HmmModel(pi=pi, a=a, means=means, covariances=covs)


def baum_welch(
    sequences: Sequence[np.ndarray] | np.ndarray,
    n: int = 3,
    seed: int = 0,
    max_iter: int = 20,
    tol: float = 1e-6,
    init: str = "random",
) -> tuple[HmmModel, list[float]]:
    """Multi-sequence Baum-Welch; returns the model and its log-likelihood trace.

    Each sequence is treated as an independent realization; the initial
    distribution is re-estimated from per-sequence first-step posteriors.
    Initialization draws means in [mu-3sd, mu+3sd] per column, diagonal
    variances in [sd^2/2, 3sd^2], and pi/A either random-uniform (default)
    or constant-uniform depending on ``init``.
    """
    if isinstance(sequences, np.ndarray) and sequences.ndim <= 2:
        sequences = [sequences]
    obs_list = []
    for seq in sequences:
        arr = np.asarray(seq, dtype=float)
        if arr.ndim == 1:
            arr = arr[:, None]
        obs_list.append(arr)
    if not obs_list:
        raise ValueError("need at least one sequence")
    d = obs_list[0].shape[1]
    if any(o.shape[1] != d for o in obs_list):
        raise ValueError("all sequences must share one observation dimension")
    pooled = np.concatenate(obs_list, axis=0)
    if pooled.shape[0] <= n:
        raise ValueError(f"need more than {n} total observations to fit {n} states")

    rng = np.random.default_rng(seed)
    model = _init_model(pooled, n, rng, init)

    trace: list[float] = []
    reseeded = np.zeros(n, dtype=bool)
    for _ in range(max_iter):
        total_ll = 0.0
        first_gammas = []
        gamma_blocks = []
        xi_sum = np.zeros((n, n))
        log_pi, log_a = _log_probs(model)

        for obs in obs_list:
            t_len = obs.shape[0]
            logb = _emission_logpdfs(model, obs)
            log_alpha = np.empty((t_len, n))
            log_alpha[0] = log_pi + logb[0]
            for t in range(1, t_len):
                log_alpha[t] = logsumexp(log_alpha[t - 1][:, None] + log_a, axis=0) + logb[t]
            ll = float(logsumexp(log_alpha[-1]))
            total_ll += ll

            log_beta = np.zeros((t_len, n))
            for t in range(t_len - 2, -1, -1):
                log_beta[t] = logsumexp(log_a + (logb[t + 1] + log_beta[t + 1])[None, :], axis=1)

            log_gamma = log_alpha + log_beta - ll
            gamma = np.exp(log_gamma)
            first_gammas.append(gamma[0])
            gamma_blocks.append(gamma)
            for t in range(t_len - 1):
                m = log_alpha[t][:, None] + log_a + (logb[t + 1] + log_beta[t + 1])[None, :] - ll
                xi_sum += np.exp(m)

        trace.append(total_ll)
        if len(trace) > 1 and total_ll - trace[-2] < tol:
            break

        gamma_all = np.concatenate(gamma_blocks, axis=0)
        occupancy = gamma_all.sum(axis=0)

        starved = np.flatnonzero(occupancy < 2.0)
        if starved.size:
            mu = pooled.mean(axis=0)
            sd = pooled.std(axis=0, ddof=1)
            for s in starved:
                if reseeded[s]:
                    raise RuntimeError(f"hidden state {s} starved of responsibility after reseeding")
                reseeded[s] = True
                model.means[s] = pooled[rng.integers(pooled.shape[0])]
                v = rng.uniform(sd**2 / 2.0, 3.0 * sd**2, size=d)
                model.covariances[s] = np.diag(np.maximum(v, COVARIANCE_FLOOR))
            continue

        pi = np.mean(first_gammas, axis=0)
        pi = pi / pi.sum()
        row_sums = xi_sum.sum(axis=1, keepdims=True)
        a = np.where(row_sums > 0, xi_sum / np.where(row_sums > 0, row_sums, 1.0), model.a)
        a = a / a.sum(axis=1, keepdims=True)

        means = (gamma_all.T @ pooled) / occupancy[:, None]
        covs = np.empty((n, d, d))
        for s in range(n):
            dev = pooled - means[s]
            covs[s] = floor_covariance((gamma_all[:, s, None] * dev).T @ dev / occupancy[s])
        model = HmmModel(pi=pi, a=a, means=means, covariances=covs)
    return model, trace
