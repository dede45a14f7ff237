"""Attacker strategies and search-based worst-case attackers.

A strategy produces, for each round, the ``t x (n+t)`` block of bits the
attackers send.  Its inputs are the round index and the message history of
earlier rounds; the hidden round count is not part of the interface.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .protocol import (
    ProtocolParams,
    SeedLike,
    child_seed,
    execute,
)
from .sampling import ObservationSource, outcome_counts, summarize


class AttackerStrategy:
    """Base class.  Subclasses override :meth:`row` or :meth:`rows`."""

    name = "attacker"
    # strategies that ignore the history can be driven without building message matrices
    uses_history = True

    def __init__(self, **params):
        self.params = params

    def reset(self, seed: Optional[np.random.SeedSequence]) -> None:
        """Called once per run with a run-specific stream; stateless strategies ignore it."""

    def row(self, round_index: int, history: Sequence, attacker: int, n: int, t: int) -> np.ndarray:
        raise NotImplementedError

    def rows(self, round_index: int, history: Sequence, n: int, t: int) -> np.ndarray:
        out = np.zeros((t, n + t), dtype=np.uint8)
        for a in range(t):
            out[a] = self.row(round_index, history, a, n, t)
        return out

    def clone(self) -> "AttackerStrategy":
        return copy.deepcopy(self)

    def describe(self) -> dict:
        return {"name": self.name, **{k: _jsonable(v) for k, v in self.params.items()}}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.params.items())
        return f"{self.name}({args})"


def _jsonable(value):
    if isinstance(value, (list, tuple, frozenset, set)):
        return sorted(value) if isinstance(value, (set, frozenset)) else list(value)
    return value


class ConstantAttacker(AttackerStrategy):
    uses_history = False

    def __init__(self, bit: int):
        super().__init__(bit=int(bit))
        self.name = "all_one" if bit else "all_zero"
        self.bit = int(bit)

    def rows(self, round_index, history, n, t):
        return np.full((t, n + t), self.bit, dtype=np.uint8)


class SplitAttacker(AttackerStrategy):
    """Sends 1 to one block of benign receivers and 0 to everyone else."""

    name = "all_one_all_zero"
    uses_history = False

    def __init__(self, ones: Optional[Iterable[int]] = None):
        ones = None if ones is None else frozenset(int(i) for i in ones)
        super().__init__(ones=ones)
        self.ones = ones

    def block(self, n: int) -> np.ndarray:
        mask = np.zeros(n, dtype=np.uint8)
        if self.ones is None:
            mask[: math.ceil(n / 2)] = 1
        else:
            mask[[i for i in self.ones if i < n]] = 1
        return mask

    def rows(self, round_index, history, n, t):
        row = np.zeros(n + t, dtype=np.uint8)
        row[:n] = self.block(n)
        return np.tile(row, (t, 1))


class RandomAttacker(AttackerStrategy):
    """Independent Bernoulli(p) bit per attacker, recipient and round."""

    name = "random_p"
    uses_history = False

    def __init__(self, p: float, seed: int = 0):
        if not 0.0 <= p <= 1.0:
            raise ConfigurationError(f"p must lie in [0, 1], got {p}")
        super().__init__(p=p, seed=seed)
        self.p = p
        self.seed = seed
        self._rng = np.random.default_rng(seed)

    def reset(self, seed):
        extra = [] if seed is None else [int(x) for x in seed.generate_state(4)]
        self._rng = np.random.default_rng([self.seed, *extra])

    def rows(self, round_index, history, n, t):
        return (self._rng.random((t, n + t)) < self.p).astype(np.uint8)


class SequenceAttacker(AttackerStrategy):
    """Replays a fixed list of per-round attacker blocks (an attack sequence)."""

    name = "fixed_sequence"
    uses_history = False

    def __init__(self, rounds):
        rounds = getattr(rounds, "rounds", rounds)
        self.matrices = tuple(np.asarray(m, dtype=np.uint8) for m in rounds)
        super().__init__(rounds=len(self.matrices))

    def rows(self, round_index, history, n, t):
        if round_index >= len(self.matrices):
            raise ConfigurationError(
                f"attack sequence covers rounds 0..{len(self.matrices) - 1}, asked for {round_index}"
            )
        return self.matrices[round_index]

    def describe(self):
        return {"name": self.name, "rounds": [m.tolist() for m in self.matrices]}


class FunctionAttacker(AttackerStrategy):
    """Wraps ``fn(round_index, history, n, t) -> block``."""

    def __init__(self, fn: Callable, name: str = "custom"):
        super().__init__()
        self.fn = fn
        self.name = name

    def rows(self, round_index, history, n, t):
        return np.asarray(self.fn(round_index, history, n, t), dtype=np.uint8)


def all_one() -> AttackerStrategy:
    return ConstantAttacker(1)


def all_zero() -> AttackerStrategy:
    return ConstantAttacker(0)


def all_one_all_zero(split: Optional[Iterable[int]] = None) -> AttackerStrategy:
    return SplitAttacker(split)


def random_p(p: float, seed: int = 0) -> AttackerStrategy:
    return RandomAttacker(p, seed)


def from_config(spec: dict) -> AttackerStrategy:
    """Build a strategy from a scenario entry such as ``{"name": "random_p", "p": 0.3}``."""
    name = spec.get("name")
    if name == "all_one":
        return all_one()
    if name == "all_zero":
        return all_zero()
    if name == "all_one_all_zero":
        return all_one_all_zero(spec.get("ones"))
    if name == "random_p":
        return random_p(float(spec["p"]), int(spec.get("seed", 0)))
    if name == "fixed_sequence":
        return SequenceAttacker(spec["rounds"])
    raise ConfigurationError(f"unknown attacker {name!r}")


@dataclass(frozen=True)
class SearchResult:
    strategy: AttackerStrategy
    estimate: float
    half_width: float
    results: tuple  # MonteCarloResult per candidate, in candidate order


def best_response_search(
    params: ProtocolParams,
    observations: ObservationSource,
    candidates: Sequence[AttackerStrategy],
    trials: int,
    seed: SeedLike = 0,
) -> SearchResult:
    """Pick the candidate with the highest estimated unsafe-outcome rate.

    Every candidate is evaluated on the same per-trial seeds (paired
    comparison).  Ties go to the earlier candidate.
    """
    candidates = list(candidates)
    if not candidates:
        raise ConfigurationError("candidate space is empty")
    if trials < 1:
        raise ConfigurationError(f"trials must be >= 1, got {trials}")
    results = []
    for cand in candidates:
        results.append(summarize(outcome_counts(params, observations, cand, range(trials), seed), trials))
    best = max(range(len(candidates)), key=lambda i: (results[i].unsafe_rate, -i))
    return SearchResult(candidates[best], results[best].unsafe_rate, results[best].unsafe_half_width, tuple(results))


@dataclass(frozen=True)
class Environment:
    """One point of an attack-distance instance space."""

    params: ProtocolParams
    observations: tuple
    r_tot: int
    seed: int = 0


def instance_space(params: ProtocolParams, r_tot: int = 3, seed: int = 0) -> list:
    """Every canonical observation pattern (first ``c`` agents observe) at a fixed round count."""
    space = []
    for c in range(params.n + 1):
        obs = tuple([1] * c + [0] * (params.n - c))
        space.append(Environment(params, obs, r_tot, seed))
    return space


def delivered_counts(attacker: AttackerStrategy, env: Environment) -> np.ndarray:
    """Attacker ones delivered to each benign receiver, per round (rounds x n)."""
    p = env.params
    attacker = attacker.clone()
    attacker.reset(child_seed(env.seed, 1))
    tr = execute(p.n, p.t, p.k, p.lam, env.observations, attacker, env.r_tot)
    return np.stack([m.bits[p.n :, : p.n].sum(axis=0, dtype=np.int64) for m in tr.rounds])


def attack_distance(a1: AttackerStrategy, a2: AttackerStrategy, space: Sequence[Environment]) -> int:
    """Smallest gap, over environments, rounds and benign receivers, between delivered attacker-one counts."""
    if not space:
        raise ConfigurationError("instance space is empty")
    best = None
    for env in space:
        gap = int(np.abs(delivered_counts(a1, env) - delivered_counts(a2, env)).min())
        best = gap if best is None else min(best, gap)
    return best
