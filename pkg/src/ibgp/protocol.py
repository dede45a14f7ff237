"""Round-based (k, lambda) consensus protocol over a complete synchronous network.

Participants are indexed ``0 .. n+t-1``; the first ``n`` are benign agents and
the top ``t`` are attackers.  A message matrix ``bits[j, i]`` holds the bit
sender ``j`` delivered to receiver ``i`` in one round.  Benign senders
broadcast one value to everyone (themselves included), attackers may
equivocate per recipient.

The hidden round count ``r_tot`` is drawn by a trusted randomizer before the
run starts.  Attackers are only ever shown the round index and the message
history, never ``r_tot``.
"""

from __future__ import annotations

import bisect
import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import TYPE_CHECKING, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, ShapeError

if TYPE_CHECKING:
    from .adversary import AttackerStrategy

SeedLike = Union[int, Sequence[int], np.random.SeedSequence, None]

_SUM_TOLERANCE = 1e-12


def _as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, str):
        return Fraction(value)
    return Fraction(value)


def seed_sequence(seed: SeedLike) -> np.random.SeedSequence:
    """Normalise a user seed to a SeedSequence without mutating caller state."""
    if isinstance(seed, np.random.SeedSequence):
        return np.random.SeedSequence(seed.entropy, spawn_key=seed.spawn_key)
    if seed is None:
        return np.random.SeedSequence(0)
    if isinstance(seed, (int, np.integer)):
        return np.random.SeedSequence(int(seed))
    return np.random.SeedSequence([int(s) for s in seed])


def child_seed(seed: SeedLike, *key: int) -> np.random.SeedSequence:
    """Deterministic child stream ``key`` of ``seed`` (repeatable, unlike ``spawn``)."""
    base = seed_sequence(seed)
    return np.random.SeedSequence(base.entropy, spawn_key=tuple(base.spawn_key) + tuple(key))


@dataclass(frozen=True)
class RoundDistribution:
    """Distribution of the total round count, stored as exact rationals.

    ``probabilities`` is a tuple of ``(round, probability)`` pairs with
    rounds ``>= 1``.  Floats are accepted and converted exactly.
    """

    probabilities: tuple

    def __post_init__(self):
        pairs = []
        seen = set()
        for r, p in self.probabilities:
            r = int(r)
            p = _as_fraction(p)
            if r < 1:
                raise ConfigurationError(f"round index must be >= 1, got {r}")
            if p < 0:
                raise ConfigurationError(f"negative probability {p} for round {r}")
            if r in seen:
                raise ConfigurationError(f"round {r} listed twice")
            seen.add(r)
            pairs.append((r, p))
        if not pairs:
            raise ConfigurationError("round distribution is empty")
        pairs.sort()
        total = sum(p for _, p in pairs)
        if abs(float(total) - 1.0) > _SUM_TOLERANCE:
            raise ConfigurationError(f"round probabilities sum to {float(total)}, not 1")
        object.__setattr__(self, "probabilities", tuple(pairs))
        support = [(r, p) for r, p in pairs if p > 0]
        acc, cum = Fraction(0), []
        for _, p in support:
            acc += p
            cum.append(float(acc / total))
        object.__setattr__(self, "_rounds", tuple(r for r, _ in support))
        object.__setattr__(self, "_cumulative", tuple(cum))

    @classmethod
    def uniform(cls, r_max: int = 5) -> "RoundDistribution":
        if r_max < 1:
            raise ConfigurationError(f"r_max must be >= 1, got {r_max}")
        return cls(tuple((r, Fraction(1, r_max)) for r in range(1, r_max + 1)))

    @classmethod
    def point(cls, r: int) -> "RoundDistribution":
        return cls(((r, Fraction(1)),))

    @classmethod
    def from_mapping(cls, mapping) -> "RoundDistribution":
        return cls(tuple((int(r), p) for r, p in mapping.items()))

    @property
    def support(self) -> tuple:
        """Rounds with positive probability, ascending."""
        return self._rounds

    @property
    def r_max(self) -> int:
        return self._rounds[-1]

    def probability(self, r: int) -> Fraction:
        for rr, p in self.probabilities:
            if rr == r:
                return p
        return Fraction(0)

    def max_probability(self) -> Fraction:
        return max(p for _, p in self.probabilities)

    def sample(self, rng: np.random.Generator) -> int:
        u = rng.random()
        idx = bisect.bisect_right(self._cumulative, u)
        return self._rounds[min(idx, len(self._rounds) - 1)]

    def to_json(self) -> dict:
        return {str(r): str(p) for r, p in self.probabilities}


@dataclass(frozen=True)
class ProtocolParams:
    """One IBGP game: ``n`` benign agents, ``t`` attackers, threshold ``k``.

    ``lam`` is the safety margin; it defaults to ``t``.
    """

    n: int
    t: int
    k: int
    lam: Optional[int] = None
    round_dist: RoundDistribution = field(default_factory=RoundDistribution.uniform)

    def __post_init__(self):
        if self.lam is None:
            object.__setattr__(self, "lam", self.t)
        if self.n < 1:
            raise ConfigurationError(f"n must be >= 1, got {self.n}")
        if self.t < 0:
            raise ConfigurationError(f"t must be >= 0, got {self.t}")
        if not 1 <= self.k <= self.n:
            raise ConfigurationError(f"k must lie in [1, n={self.n}], got {self.k}")
        if self.lam < 0:
            raise ConfigurationError(f"lambda must be >= 0, got {self.lam}")

    @property
    def size(self) -> int:
        return self.n + self.t

    @property
    def feasible(self) -> bool:
        # enough benign agents for the continuation threshold to be reachable unaided
        return self.n >= self.k + self.lam


@dataclass(frozen=True, eq=False)
class RoundMessages:
    """Directed one-bit messages of a single round; ``bits[sender, receiver]``."""

    bits: np.ndarray
    n: int

    def __post_init__(self):
        bits = np.array(self.bits, dtype=np.uint8)
        if bits.ndim != 2 or bits.shape[0] != bits.shape[1]:
            raise ShapeError(f"message matrix must be square, got shape {bits.shape}")
        if bits.shape[0] < self.n:
            raise ShapeError(f"matrix of size {bits.shape[0]} cannot hold {self.n} benign agents")
        if bits.size and bits.max() > 1:
            raise ShapeError("message bits must be 0 or 1")
        if self.n and not (bits[: self.n] == bits[: self.n, :1]).all():
            raise ShapeError("benign senders must broadcast a constant row")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def size(self) -> int:
        return self.bits.shape[0]

    @property
    def t(self) -> int:
        return self.size - self.n

    def benign_values(self) -> np.ndarray:
        """The value each benign agent broadcast this round."""
        return self.bits[: self.n, 0].copy()

    def received(self) -> np.ndarray:
        """Count of ones delivered to every benign receiver, own broadcast included."""
        return self.bits[:, : self.n].sum(axis=0, dtype=np.int64)

    def __eq__(self, other):
        if not isinstance(other, RoundMessages):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash((self.n, self.bits.tobytes()))


@dataclass(frozen=True, eq=False)
class AgentState:
    """Per benign agent: the value ``M^r_i`` it broadcasts this round."""

    active: np.ndarray

    def __post_init__(self):
        active = np.array(self.active, dtype=bool)
        active.setflags(write=False)
        object.__setattr__(self, "active", active)

    def __eq__(self, other):
        return isinstance(other, AgentState) and np.array_equal(self.active, other.active)


class OutcomeKind(enum.Enum):
    COORDINATED = "Coordinated"
    ALL_ABSTAIN = "AllAbstain"
    MIS_COORDINATION = "MisCoordination"
    FALSE_COORDINATION = "FalseCoordination"

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class Outcome:
    kind: OutcomeKind
    acting_count: int
    illegal_actors: int
    observers: int

    @property
    def unsafe(self) -> bool:
        """Agreement broken: too few valid actors, or acting without enough valid observers."""
        return self.kind in (OutcomeKind.MIS_COORDINATION, OutcomeKind.FALSE_COORDINATION)


@dataclass(frozen=True, eq=False)
class Transcript:
    n: int
    t: int
    k: int
    observations: np.ndarray
    rounds: tuple
    r_tot: int
    decisions: np.ndarray

    def active_history(self) -> np.ndarray:
        """Row ``r`` is the benign broadcast vector of round ``r``."""
        return np.stack([m.benign_values() for m in self.rounds])

    def __eq__(self, other):
        if not isinstance(other, Transcript):
            return NotImplemented
        return (
            (self.n, self.t, self.k, self.r_tot) == (other.n, other.t, other.k, other.r_tot)
            and np.array_equal(self.observations, other.observations)
            and np.array_equal(self.decisions, other.decisions)
            and len(self.rounds) == len(other.rounds)
            and all(a == b for a, b in zip(self.rounds, other.rounds))
        )


def _bits(values, length: int, what: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.uint8).reshape(-1)
    if arr.shape[0] != length:
        raise ShapeError(f"{what} must have length {length}, got {arr.shape[0]}")
    if arr.size and arr.max() > 1:
        raise ShapeError(f"{what} must contain only 0/1")
    return arr


def _attacker_block(rows, t: int, size: int) -> np.ndarray:
    rows = np.asarray(rows, dtype=np.uint8)
    if t == 0 and rows.size == 0:
        return np.zeros((0, size), dtype=np.uint8)
    if rows.shape != (t, size):
        raise ShapeError(f"attacker rows must have shape ({t}, {size}), got {rows.shape}")
    return rows


def compose_round(benign: np.ndarray, attacker_rows: np.ndarray, n: int) -> RoundMessages:
    size = attacker_rows.shape[1] if attacker_rows.ndim == 2 else n
    block = np.repeat(np.asarray(benign, dtype=np.uint8)[:, None], size, axis=1)
    return RoundMessages(np.vstack([block, attacker_rows]), n)


def sample_round_count(dist: RoundDistribution, seed: Union[SeedLike, np.random.Generator]) -> int:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed_sequence(seed))
    return dist.sample(rng)


def initial_broadcast(observations, attacker_bits) -> RoundMessages:
    obs = np.asarray(observations, dtype=np.uint8).reshape(-1)
    n = obs.shape[0]
    rows = np.asarray(attacker_bits, dtype=np.uint8)
    if rows.size == 0:
        rows = np.zeros((0, n), dtype=np.uint8)
    if rows.ndim != 2:
        raise ShapeError(f"attacker rows must be 2-D, got shape {rows.shape}")
    t = rows.shape[0]
    _bits(obs, n, "observations")
    return compose_round(obs, _attacker_block(rows, t, n + t), n)


def step_round(state: AgentState, received: RoundMessages, k: int, lam) -> AgentState:
    """Continuation rule: stay active iff already active and ``count >= k + lam``.

    ``lam`` may be a scalar or one value per benign agent.
    """
    counts = received.received()
    return AgentState(state.active & (counts >= k + np.asarray(lam)))


def decide(state: AgentState, received: RoundMessages, k: int) -> np.ndarray:
    counts = received.received()
    return (state.active & (counts >= k)).astype(np.uint8)


def classify(observations, decisions, k: int) -> Outcome:
    obs = np.asarray(observations, dtype=bool)
    dec = np.asarray(decisions, dtype=bool)
    acting = int(np.count_nonzero(obs & dec))
    illegal = int(np.count_nonzero(~obs & dec))
    observers = int(np.count_nonzero(obs))
    if (acting or illegal) and (illegal or observers < k):
        kind = OutcomeKind.FALSE_COORDINATION
    elif 0 < acting < k:
        kind = OutcomeKind.MIS_COORDINATION
    elif acting >= k:
        kind = OutcomeKind.COORDINATED
    else:
        kind = OutcomeKind.ALL_ABSTAIN
    return Outcome(kind, acting, illegal, observers)


def classify_outcome(transcript: Transcript, k: Optional[int] = None) -> Outcome:
    return classify(transcript.observations, transcript.decisions, transcript.k if k is None else k)


def single_round_rule(observations, attacker_rows, threshold: int) -> np.ndarray:
    """One broadcast round, then act iff at least ``threshold`` ones were received.

    Only agents that observed 1 may act.
    """
    msg = initial_broadcast(observations, attacker_rows)
    obs = msg.benign_values().astype(bool)
    return (obs & (msg.received() >= threshold)).astype(np.uint8)


def execute(
    n: int,
    t: int,
    k: int,
    lam,
    observations,
    attacker: "AttackerStrategy",
    r_tot: int,
    initial: Optional[RoundMessages] = None,
) -> Transcript:
    """Run the protocol for a known ``r_tot``.

    ``r_tot`` is only used by this loop to stop; the attacker never sees it.
    ``initial`` replaces the round-0 matrix (used by the dispersion defense).
    """
    obs = _bits(observations, n, "observations")
    size = n + t
    lam = np.asarray(lam)
    if initial is None:
        rows = _attacker_block(attacker.rows(0, (), n, t), t, size)
        current = compose_round(obs, rows, n)
    else:
        current = initial
    history = [current]
    state = AgentState(obs.astype(bool))
    for r in range(1, r_tot + 1):
        rows = _attacker_block(attacker.rows(r, tuple(history), n, t), t, size)
        state = step_round(state, current, k, lam)
        current = compose_round(state.active, rows, n)
        history.append(current)
    decisions = decide(state, current, k)
    obs.setflags(write=False)
    decisions.setflags(write=False)
    return Transcript(n, t, k, obs, tuple(history), r_tot, decisions)


def run_protocol(
    params: ProtocolParams,
    observations,
    attacker: "AttackerStrategy",
    seed: SeedLike = 0,
) -> Transcript:
    if not params.feasible:
        raise ConfigurationError(
            f"infeasible instance: n={params.n} < k+lambda={params.k + params.lam}"
        )
    r_tot = sample_round_count(params.round_dist, child_seed(seed, 0))
    attacker.reset(child_seed(seed, 1))
    return execute(params.n, params.t, params.k, params.lam, observations, attacker, r_tot)


def fast_decisions(n, t, k, lam, observations, attacker: AttackerStrategy, r_tot: int) -> np.ndarray:
    """Decisions of :func:`execute` for attackers that ignore the history.

    Skips building message matrices; falls back to ``execute`` otherwise.
    """
    if attacker.uses_history:
        return execute(n, t, k, lam, observations, attacker, r_tot).decisions
    thr = k + np.asarray(lam)
    active = np.asarray(observations, dtype=bool)
    counts = int(active.sum()) + attacker.rows(0, (), n, t)[:, :n].sum(axis=0, dtype=np.int64)
    for r in range(1, r_tot + 1):
        extra = attacker.rows(r, (), n, t)[:, :n].sum(axis=0, dtype=np.int64)
        active = active & (counts >= thr)
        counts = int(active.sum()) + extra
    return (active & (counts >= k)).astype(np.uint8)
