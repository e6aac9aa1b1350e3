"""Generative model of the crowd: response noise, response latency, the
posterior-predictive response distribution, and frozen-pool replay.

Everything samples from an explicit numpy Generator; nothing touches global
random state, so concurrent simulations stay independent and a seeded run is
reproducible end to end.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .crf import CrfModel, TokenSequence, compute_potentials, condition_on_responses, forward_backward

REJECTION_CAP = 1000


class PoolExhausted(Exception):
    """No unconsumed frozen record remains for an (example, position) key."""


@dataclass(frozen=True)
class ResponseModel:
    """Worker answer noise: correct with probability ``accuracy``, otherwise
    uniform over the remaining labels."""

    accuracy: float = 0.7
    label_count: int = 2

    def __post_init__(self):
        if not 0.0 < self.accuracy <= 1.0:
            raise ValueError("accuracy must be in (0, 1], got %r" % self.accuracy)
        if self.label_count < 2:
            raise ValueError("need at least 2 labels")

    def prob(self, r: int, y: int) -> float:
        if r == y:
            return self.accuracy
        return (1.0 - self.accuracy) / (self.label_count - 1)

    def likelihood_matrix(self) -> np.ndarray:
        """K x K matrix with entry [r, y] = prob(r, y)."""
        K = self.label_count
        off = (1.0 - self.accuracy) / (K - 1)
        m = np.full((K, K), off)
        np.fill_diagonal(m, self.accuracy)
        return m

    def sample(self, y_true: int, rng: np.random.Generator) -> int:
        if rng.random() < self.accuracy:
            return y_true
        # uniform over the K-1 wrong labels
        r = int(rng.integers(self.label_count - 1))
        return r if r < y_true else r + 1

    def predictive(self, marginal: np.ndarray) -> np.ndarray:
        """Distribution of the next answer when the true label is distributed
        per ``marginal``: p(r) = sum_y prob(r, y) * marginal[y]."""
        return self.likelihood_matrix() @ np.asarray(marginal)


@dataclass(frozen=True)
class LatencyModel:
    """Gaussian response delay truncated below at ``floor`` seconds."""

    mean_mu: float = 1.2
    stddev_sigma: float = 0.4
    floor: float = 0.05

    def __post_init__(self):
        if self.mean_mu <= 0 or self.stddev_sigma <= 0 or self.floor <= 0:
            raise ValueError("latency parameters must be positive")

    def sample(self, rng: np.random.Generator) -> float:
        """Rejection-sample the truncated Gaussian; clamp to the floor after
        REJECTION_CAP failed draws."""
        for _ in range(REJECTION_CAP):
            d = rng.normal(self.mean_mu, self.stddev_sigma)
            if d >= self.floor:
                return float(d)
        return self.floor

    def sample_arrival(self, issue_time: float, now: float, rng: np.random.Generator) -> float:
        """Absolute arrival time for a query issued at ``issue_time``,
        conditioned on arriving strictly after ``now``."""
        return float(self.sample_arrivals(np.array([issue_time]), now, rng)[0])

    def sample_arrivals(self, issue_times: np.ndarray, now: float,
                        rng: np.random.Generator) -> np.ndarray:
        """Vectorized conditional arrivals via the inverse survival function,
        which stays exact arbitrarily deep in the tail (rejection would not)."""
        issue_times = np.asarray(issue_times, dtype=np.float64)
        lower = np.maximum(self.floor, now - issue_times)
        a = (lower - self.mean_mu) / self.stddev_sigma
        survival = ndtr(-a)
        u = rng.random(issue_times.shape)
        tail = survival * (1.0 - u)
        with np.errstate(divide="ignore"):
            z = -ndtri(tail)
        # survival can underflow to 0 beyond ~38 sigma; land on the bound then
        z = np.where(np.isfinite(z), z, a)
        arrivals = issue_times + self.mean_mu + self.stddev_sigma * z
        # contract: strictly after `now` even when rounding hits the bound
        return np.where(arrivals > now, arrivals, np.nextafter(now, np.inf))


@dataclass(frozen=True)
class CrowdResponse:
    query_index: int
    label: int
    arrival_time: float


class FrozenPool:
    """Pre-collected (label, delay) records replayed without replacement.

    Records are keyed by (example_id, position); consumption flags are scoped
    to one episode and reset by ``begin_episode``.
    """

    def __init__(self):
        self._records = {}
        self._consumed = {}

    def add(self, example_id: str, position: int, label: int, delay: float,
            worker_id: str = ""):
        if delay <= 0:
            raise ValueError("frozen delay must be positive, got %r" % delay)
        self._records.setdefault((example_id, position), []).append((label, float(delay), worker_id))

    def records_for(self, example_id: str, position: int):
        return list(self._records.get((example_id, position), []))

    def example_ids(self):
        return {key[0] for key in self._records}

    def begin_episode(self, example_id: str):
        for key in list(self._consumed):
            if key[0] == example_id:
                del self._consumed[key]

    def draw(self, example_id: str, position: int, rng: np.random.Generator):
        """Uniformly pick and consume an unconsumed record; raises
        PoolExhausted when none remain for the key."""
        key = (example_id, position)
        records = self._records.get(key, [])
        used = self._consumed.setdefault(key, set())
        available = [i for i in range(len(records)) if i not in used]
        if not available:
            raise PoolExhausted("no unconsumed record for example=%r position=%d" % (example_id, position))
        pick = available[int(rng.integers(len(available)))]
        used.add(pick)
        label, delay, _worker = records[pick]
        return label, delay


def load_frozen_pool(path, label_set) -> FrozenPool:
    """Read line-delimited JSON records
    {example_id, position, label, delay_seconds, worker_id}."""
    pool = FrozenPool()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError("%s:%d: bad record: %s" % (path, lineno, exc)) from exc
            label = rec["label"]
            if label not in label_set.labels:
                raise ValueError("%s:%d: unknown label %r" % (path, lineno, label))
            pool.add(str(rec["example_id"]), int(rec["position"]),
                     label_set.index(label), float(rec["delay_seconds"]),
                     str(rec.get("worker_id", "")))
    return pool


@dataclass
class EnvironmentModel:
    """Crowd side of the game dynamics. ``pool`` switches generative sampling
    to frozen replay; ``pool_fallback`` lets an exhausted pool fall back to
    generative draws (flagging the episode) instead of raising."""

    response_model: ResponseModel
    latency_model: LatencyModel
    pool: FrozenPool | None = None
    pool_fallback: bool = True

    @property
    def mode(self) -> str:
        return "frozen" if self.pool is not None else "generative"


def posterior_predictive_response(model: CrfModel, x: TokenSequence, received,
                                  q: int, resp_model: ResponseModel) -> np.ndarray:
    """Distribution of the next answer at position ``q`` given the answers
    received so far: marginalize the conditioned posterior against the
    response model."""
    potentials = condition_on_responses(compute_potentials(model, x), received, resp_model)
    marginal = forward_backward(potentials).node[q]
    return resp_model.predictive(marginal)


class EpisodeCrowd:
    """Replay-side crowd for one episode: answers come from the frozen pool
    when one is configured, otherwise from the response model applied to the
    gold labels. Frozen draws attach permanently to their query index."""

    def __init__(self, env: EnvironmentModel, example_id: str, gold_labels):
        self.env = env
        self.example_id = example_id
        self.gold = list(gold_labels)
        self.pool_exhausted = False
        self._attached = {}
        if env.pool is not None:
            env.pool.begin_episode(example_id)

    @property
    def frozen(self) -> bool:
        return self.env.pool is not None

    def attach(self, query_index: int, position: int, rng: np.random.Generator):
        """Frozen record (label, delay) for a query, drawn once."""
        if query_index not in self._attached:
            try:
                label, delay = self.env.pool.draw(self.example_id, position, rng)
            except PoolExhausted:
                if not self.env.pool_fallback:
                    raise
                self.pool_exhausted = True
                label = self.env.response_model.sample(self.gold[position], rng)
                delay = self.env.latency_model.sample(rng)
            self._attached[query_index] = (label, delay)
        return self._attached[query_index]

    def response_label(self, query_index: int, position: int, rng: np.random.Generator) -> int:
        if self.frozen:
            return self._attached[query_index][0]
        return self.env.response_model.sample(self.gold[position], rng)
