"""Monte Carlo estimation of protocol outcome frequencies."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from statsmodels.stats.proportion import proportion_confint

from .errors import ConfigurationError
from .protocol import (
    OutcomeKind,
    ProtocolParams,
    SeedLike,
    child_seed,
    classify_outcome,
    run_protocol,
)

ObservationSource = Union[Callable[[np.random.Generator], np.ndarray], np.ndarray, list, tuple]


def wilson_half_width(successes: int, trials: int, alpha: float = 0.05) -> float:
    lo, hi = proportion_confint(successes, trials, alpha=alpha, method="wilson")
    return float(hi - lo) / 2


class CountObservations:
    """Draw ``#(M^0=1)`` uniformly from ``counts``, then place the ones at random."""

    def __init__(self, n: int, counts):
        self.n = int(n)
        self.counts = [int(c) for c in counts]
        if not self.counts or any(not 0 <= c <= self.n for c in self.counts):
            raise ConfigurationError(f"observer counts must lie in [0, {self.n}]")

    def __call__(self, rng: np.random.Generator) -> np.ndarray:
        c = self.counts[int(rng.integers(len(self.counts)))]
        obs = np.zeros(self.n, dtype=np.uint8)
        obs[rng.permutation(self.n)[:c]] = 1
        return obs


def uniform_count_observations(n: int, counts) -> CountObservations:
    return CountObservations(n, counts)


def _observation_source(source: ObservationSource):
    if callable(source):
        return source
    fixed = np.asarray(source, dtype=np.uint8)
    return lambda rng: fixed


@dataclass(frozen=True)
class MonteCarloResult:
    trials: int
    counts: dict
    rates: dict
    half_widths: dict
    unsafe_rate: float
    unsafe_half_width: float

    @property
    def mis_coordination_rate(self) -> float:
        return self.rates[OutcomeKind.MIS_COORDINATION]

    def to_json(self) -> dict:
        return {
            "trials": self.trials,
            "unsafe_rate": self.unsafe_rate,
            "unsafe_half_width": self.unsafe_half_width,
            "outcomes": {
                str(kind): {
                    "count": self.counts[kind],
                    "rate": self.rates[kind],
                    "half_width": self.half_widths[kind],
                }
                for kind in OutcomeKind
            },
        }


def summarize(counter: Counter, trials: int) -> MonteCarloResult:
    counts = {kind: int(counter.get(kind, 0)) for kind in OutcomeKind}
    rates = {kind: c / trials for kind, c in counts.items()}
    halves = {kind: wilson_half_width(c, trials) for kind, c in counts.items()}
    unsafe = counts[OutcomeKind.MIS_COORDINATION] + counts[OutcomeKind.FALSE_COORDINATION]
    return MonteCarloResult(trials, counts, rates, halves, unsafe / trials, wilson_half_width(unsafe, trials))


def outcome_counts(params, observations, attacker, trial_ids, seed) -> Counter:
    """Outcome tally over the given trial indices; each trial has its own derived seed.

    Trial ``i`` always uses the same randomness regardless of how trials are
    partitioned, so chunked or parallel evaluation gives identical totals.
    """
    source = _observation_source(observations)
    counter = Counter()
    for i in trial_ids:
        obs_rng = np.random.default_rng(child_seed(seed, i, 0))
        tr = run_protocol(params, source(obs_rng), attacker, child_seed(seed, i, 1))
        counter[classify_outcome(tr).kind] += 1
    return counter


def monte_carlo_estimate(
    params: ProtocolParams,
    observations: ObservationSource,
    attacker,
    trials: int,
    seed: SeedLike = 0,
) -> MonteCarloResult:
    if trials < 1:
        raise ConfigurationError(f"trials must be >= 1, got {trials}")
    return summarize(outcome_counts(params, observations, attacker, range(trials), seed), trials)
