"""Exact worst-case verification of the (k, lambda)-protocol on small instances.

Benign behaviour depends on the attackers only through the number of
attacker ones each benign receiver gets per round, so the search runs over
per-receiver delivered counts instead of raw ``t x (n+t)`` bit blocks.  Every
raw block maps to exactly one count vector and every count vector is
realisable, which makes the search exhaustive over raw attack sequences.
Because benign agents are deterministic given those counts, a fixed attack
sequence can imitate any adaptive attacker on a fixed initialization, so the
worst case over sequences is the worst case over adaptive attackers too.

Probabilities are exact ``Fraction`` values.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, Optional, Sequence

import numpy as np

from .adversary import SequenceAttacker
from .errors import BudgetExceeded, ConfigurationError
from .protocol import (
    OutcomeKind,
    ProtocolParams,
    classify,
    classify_outcome,
    execute,
    single_round_rule,
)
from .sampling import monte_carlo_estimate  # noqa: F401  (re-exported)

DEFAULT_BUDGET = 2**28


@dataclass(frozen=True, eq=False)
class AttackSequence:
    """Attacker blocks for rounds ``0 .. r_max`` (round 0 is the initial broadcast)."""

    rounds: tuple

    def __post_init__(self):
        mats = []
        for m in self.rounds:
            m = np.array(m, dtype=np.uint8)
            m.setflags(write=False)
            mats.append(m)
        object.__setattr__(self, "rounds", tuple(mats))

    def flat(self) -> tuple:
        return tuple(int(b) for m in self.rounds for b in m.reshape(-1))

    def to_json(self) -> list:
        return [m.tolist() for m in self.rounds]

    def attacker(self) -> SequenceAttacker:
        return SequenceAttacker(self.rounds)

    def __eq__(self, other):
        return isinstance(other, AttackSequence) and self.flat() == other.flat() and len(self.rounds) == len(other.rounds)


@dataclass(frozen=True)
class Witness:
    observations: tuple
    sequence: AttackSequence
    unsafe_rounds: tuple  # r_tot values for which the run ends unsafe

    def to_json(self) -> dict:
        return {
            "observations": list(self.observations),
            "attack_sequence": self.sequence.to_json(),
            "unsafe_r_tot": list(self.unsafe_rounds),
        }


@dataclass(frozen=True)
class _Transition:
    acting: int
    nxt: tuple
    counts: tuple  # minimal delivered count per active agent, aligned with the state
    mult: int  # raw bit patterns over the active receivers' columns
    key: tuple  # flattened lexicographically smallest raw block


class _Explorer:
    """Shared state graph: a state is the tuple of active benign agents."""

    def __init__(self, n, t, k, thresholds, dist):
        self.n, self.t, self.k = n, t, k
        self.size = n + t
        self.thr = tuple(int(x) for x in thresholds)
        self.dist = dist
        self.r_max = dist.r_max
        self.p = {r: dist.probability(r) for r in range(1, self.r_max + 1)}
        self._cache = {}
        self.evaluations = 0

    def _options(self, i, a):
        groups = {}
        for c in range(self.t + 1):
            key = (a + c >= self.k, a + c >= self.thr[i])
            c_min, mult = groups.get(key, (c, 0))
            groups[key] = (c_min, mult + math.comb(self.t, c))
        return [(act, cont, c_min, mult) for (act, cont), (c_min, mult) in groups.items()]

    def realize(self, state, counts) -> np.ndarray:
        block = np.zeros((self.t, self.size), dtype=np.uint8)
        for i, c in zip(state, counts):
            if c:
                block[self.t - c :, i] = 1
        return block

    def transitions(self, state) -> list:
        cached = self._cache.get(state)
        if cached is not None:
            return cached
        opts = [self._options(i, len(state)) for i in state]
        groups = {}
        for combo in itertools.product(*opts):
            self.evaluations += 1
            acting = sum(1 for o in combo if o[0])
            nxt = tuple(i for i, o in zip(state, combo) if o[1])
            counts = tuple(o[2] for o in combo)
            mult = math.prod(o[3] for o in combo)
            key = tuple(self.realize(state, counts).reshape(-1).tolist())
            prev = groups.get((acting, nxt))
            if prev is None:
                groups[(acting, nxt)] = _Transition(acting, nxt, counts, mult, key)
            else:
                best = prev if prev.key <= key else _Transition(acting, nxt, counts, 0, key)
                groups[(acting, nxt)] = _Transition(acting, nxt, best.counts, prev.mult + mult, best.key)
        result = sorted(groups.values(), key=lambda tr: tr.key)
        self._cache[state] = result
        return result

    def kind(self, acting, observers) -> OutcomeKind:
        if acting >= self.k:
            return OutcomeKind.COORDINATED
        if acting == 0:
            return OutcomeKind.ALL_ABSTAIN
        if observers < self.k:
            return OutcomeKind.FALSE_COORDINATION
        return OutcomeKind.MIS_COORDINATION

    def unsafe(self, acting) -> bool:
        return 0 < acting < self.k

    # worst case ---------------------------------------------------------
    def worst(self):
        """Value function V[(r, state)]: max unsafe probability collectable from round r on."""
        values = {}

        def value(r, state):
            if r > self.r_max:
                return Fraction(0)
            key = (r, state)
            if key in values:
                return values[key]
            best = None
            for tr in self.transitions(state):
                v = value(r + 1, tr.nxt)
                if r >= 1 and self.unsafe(tr.acting):
                    v = v + self.p[r]
                if best is None or v > best:
                    best = v
            values[key] = best
            return best

        return value

    def trace(self, value, state) -> tuple:
        """Follow the first maximising transition from round 0; returns (blocks, unsafe rounds)."""
        blocks, unsafe_rounds = [], []
        for r in range(self.r_max + 1):
            target = value(r, state)
            for tr in self.transitions(state):
                v = value(r + 1, tr.nxt) + (self.p[r] if r >= 1 and self.unsafe(tr.acting) else 0)
                if v == target:
                    break
            blocks.append(self.realize(state, tr.counts))
            if r >= 1 and self.unsafe(tr.acting) and self.p[r] > 0:
                unsafe_rounds.append(r)
            state = tr.nxt
        return blocks, tuple(unsafe_rounds)

    # raw-space outcome counting -------------------------------------------
    def count_outcomes(self, state, observers) -> dict:
        counts = {kind: 0 for kind in OutcomeKind}
        support = set(self.dist.support)
        free_round = 2 ** (self.t * self.size)
        frontier = {state: 1}
        for r in range(self.r_max + 1):
            nxt_frontier = {}
            for st, ways in frontier.items():
                pad = 2 ** (self.t * (self.n - len(st))) * 2 ** (self.t * self.t)
                for tr in self.transitions(st):
                    w = ways * tr.mult * pad
                    if r in support:
                        kind = self.kind(tr.acting, observers)
                        counts[kind] += w * free_round ** (self.r_max - r)
                    nxt_frontier[tr.nxt] = nxt_frontier.get(tr.nxt, 0) + w
            frontier = nxt_frontier
        return counts

    # first-match depth-first search --------------------------------------
    def search(self, state, flags, step: Callable, accept: Callable):
        """Lexicographically smallest raw sequence whose path satisfies ``accept``.

        ``step(flags, r, state, transition)`` returns updated flags or ``None``
        to prune.  Transitions are tried in order of their smallest raw block.
        """
        failed = set()

        def go(r, st, fl):
            if r > self.r_max:
                return [] if accept(fl) else None
            if (r, st, fl) in failed:
                return None
            for tr in self.transitions(st):
                nf = step(fl, r, st, tr)
                if nf is None:
                    continue
                rest = go(r + 1, tr.nxt, nf)
                if rest is not None:
                    return [self.realize(st, tr.counts)] + rest
            failed.add((r, st, fl))
            return None

        return go(0, state, flags)


def _thresholds(params: ProtocolParams, lambdas=None) -> tuple:
    if lambdas is None:
        return (params.k + params.lam,) * params.n
    lambdas = tuple(int(x) for x in lambdas)
    if len(lambdas) != params.n:
        raise ConfigurationError(f"need {params.n} per-agent lambdas, got {len(lambdas)}")
    return tuple(params.k + lam for lam in lambdas)


def evaluation_bound(params: ProtocolParams) -> int:
    """Upper bound on transition evaluations of :func:`exhaustive_verify`."""
    per_agent = min(params.t + 1, 3)
    return (per_agent + 1) ** params.n


def raw_space_size(params: ProtocolParams) -> int:
    """Number of (initialization class, raw attack sequence) pairs the search covers."""
    rounds = params.round_dist.r_max + 1
    return (params.n + 1) * 2 ** (params.t * params.size * rounds)


@dataclass(frozen=True)
class VerificationReport:
    params: ProtocolParams
    lambdas: tuple
    worst_probability: Fraction
    bound: Fraction
    guarantee_applies: bool
    witnesses: tuple
    outcome_counts: dict
    per_initialization: tuple  # worst probability for #(M^0=1) = 0..n
    evaluations: int
    raw_space: int

    @property
    def violation(self) -> bool:
        return self.guarantee_applies and self.worst_probability > self.bound

    def to_json(self) -> dict:
        p = self.params
        return {
            "instance": {
                "n": p.n,
                "t": p.t,
                "k": p.k,
                "lambda": list(self.lambdas),
                "round_distribution": p.round_dist.to_json(),
            },
            "worst_probability": str(self.worst_probability),
            "bound": str(self.bound),
            "guarantee_applies": self.guarantee_applies,
            "violation": self.violation,
            "per_initialization": [str(v) for v in self.per_initialization],
            "outcome_counts": {str(k): str(v) for k, v in self.outcome_counts.items()},
            "evaluations": self.evaluations,
            "raw_space": str(self.raw_space),
            "witnesses": [w.to_json() for w in self.witnesses],
        }

    def rows(self) -> list:
        """One CSV row per initialization class."""
        return [
            {"observers": c, "worst_probability": str(v), "bound": str(self.bound)}
            for c, v in enumerate(self.per_initialization)
        ]

    def table(self) -> str:
        p = self.params
        lines = [
            f"instance n={p.n} t={p.t} k={p.k} lambda={list(self.lambdas)}",
            f"worst unsafe probability {self.worst_probability}  bound {self.bound}"
            + ("  VIOLATION" if self.violation else ""),
            "observers  worst",
        ]
        lines += [f"{c:9d}  {v}" for c, v in enumerate(self.per_initialization)]
        lines.append("outcome counts over (initialization class, raw sequence, r_tot):")
        lines += [f"  {str(k):18s} {v}" for k, v in self.outcome_counts.items()]
        return "\n".join(lines)


def _explorer(params, lambdas=None) -> _Explorer:
    return _Explorer(params.n, params.t, params.k, _thresholds(params, lambdas), params.round_dist)


def _canonical(n, c) -> tuple:
    return tuple([1] * c + [0] * (n - c))


def exhaustive_verify(params: ProtocolParams, budget: int = DEFAULT_BUDGET, lambdas=None) -> VerificationReport:
    """Exact worst-case unsafe probability over every initialization and attack sequence.

    Initializations are enumerated up to permutation (``#(M^0=1)``), which is
    exact because the benign rules are anonymous threshold counts.
    """
    bound_work = evaluation_bound(params)
    if bound_work > budget:
        raise BudgetExceeded(bound_work, budget)
    ex = _explorer(params, lambdas)
    value = ex.worst()
    n = params.n
    per_init = []
    for c in range(n + 1):
        per_init.append(value(0, tuple(range(c))))
    worst = max(per_init)
    witnesses = []
    if worst > 0:
        for c, v in enumerate(per_init):
            if v == worst:
                blocks, unsafe_rounds = ex.trace(value, tuple(range(c)))
                witnesses.append(Witness(_canonical(n, c), AttackSequence(tuple(blocks)), unsafe_rounds))
    totals = {kind: 0 for kind in OutcomeKind}
    for c in range(n + 1):
        for kind, v in ex.count_outcomes(tuple(range(c)), c).items():
            totals[kind] += v
    lam_vec = tuple(th - params.k for th in ex.thr)
    return VerificationReport(
        params=params,
        lambdas=lam_vec,
        worst_probability=worst,
        bound=params.round_dist.max_probability(),
        guarantee_applies=min(lam_vec) >= params.t,
        witnesses=tuple(witnesses),
        outcome_counts=totals,
        per_initialization=tuple(per_init),
        evaluations=ex.evaluations,
        raw_space=raw_space_size(params),
    )


def replay(params: ProtocolParams, witness: Witness, r_tot: int, lambdas=None):
    lam = params.lam if lambdas is None else np.asarray(lambdas)
    return execute(params.n, params.t, params.k, lam, witness.observations, witness.sequence.attacker(), r_tot)


def find_witness(params: ProtocolParams, kind: OutcomeKind, lambdas=None) -> Optional[tuple]:
    """Lexicographically smallest ``(observations, sequence, r_tot)`` ending in ``kind``, or None."""
    ex = _explorer(params, lambdas)
    support = set(params.round_dist.support)
    for c in range(params.n + 1):

        def step(hit, r, state, tr, c=c):
            if hit:
                return hit
            if r in support and ex.kind(tr.acting, c) == kind:
                return r
            return 0

        blocks = ex.search(tuple(range(c)), 0, step, lambda hit: bool(hit))
        if blocks is not None:
            seq = AttackSequence(tuple(blocks))
            w = Witness(_canonical(params.n, c), seq, ())
            for r in params.round_dist.support:
                if classify_outcome(replay(params, w, r, lambdas)).kind == kind:
                    return _canonical(params.n, c), seq, r
    return None


# diagram ---------------------------------------------------------------

DIAGRAM_FAMILIES = ("direct", "round_1", "round_2", "round_3")


def _family_drop_round(family: str) -> int:
    return 1 if family == "direct" else int(family.split("_")[1])


@dataclass(frozen=True)
class DiagramResult:
    params: ProtocolParams
    rows: tuple  # (family, r_tot, OutcomeKind)
    witnesses: dict  # family -> Witness or None

    def mis_cells(self) -> dict:
        cells = {}
        for family, r, kind in self.rows:
            if kind in (OutcomeKind.MIS_COORDINATION, OutcomeKind.FALSE_COORDINATION):
                cells.setdefault(family, []).append(r)
        return cells

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["attack_family", "r_tot", "outcome"])
        for family, r, kind in self.rows:
            writer.writerow([family, r, str(kind) if kind is not None else "none"])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            family: (w.to_json() if w is not None else None) for family, w in self.witnesses.items()
        }


def enumerate_diagram(params: Optional[ProtocolParams] = None, r_max: int = 3, families=DIAGRAM_FAMILIES) -> DiagramResult:
    """Outcome grid per attack family and round count.

    A family is identified by the round at which the attack first pushes the
    active count from at least ``k`` to below ``k``: ``direct`` is the first
    continuation step on the initial broadcast, ``round_r`` is round ``r``.
    The representative attack is the lexicographically smallest
    (observations, sequence) in the family that ends unsafe for some ``r_tot``.
    """
    from .protocol import RoundDistribution

    if params is None:
        params = ProtocolParams(5, 1, 3, 1, RoundDistribution.uniform(r_max))
    elif params.round_dist.r_max != r_max:
        params = ProtocolParams(params.n, params.t, params.k, params.lam, RoundDistribution.uniform(r_max))
    ex = _explorer(params)
    k = params.k
    rows, witnesses = [], {}
    for family in families:
        drop = _family_drop_round(family)
        found = None
        for c in range(k, params.n + 1):
            # flags: (round the count first fell below k or 0, unsafe seen)
            def step(fl, r, state, tr):
                dropped, unsafe = fl
                if r >= 1 and ex.unsafe(tr.acting):
                    unsafe = True
                if not dropped and len(tr.nxt) < k:
                    dropped = r + 1
                    if dropped != drop:
                        return None
                return dropped, unsafe

            blocks = ex.search(tuple(range(c)), (0, False), step, lambda fl: fl[0] == drop and fl[1])
            if blocks is not None:
                found = Witness(_canonical(params.n, c), AttackSequence(tuple(blocks)), ())
                break
        if found is not None:
            unsafe_rounds = []
            for r in range(1, r_max + 1):
                kind = classify_outcome(replay(params, found, r)).kind
                rows.append((family, r, kind))
                if kind in (OutcomeKind.MIS_COORDINATION, OutcomeKind.FALSE_COORDINATION):
                    unsafe_rounds.append(r)
            found = Witness(found.observations, found.sequence, tuple(unsafe_rounds))
        else:
            rows.extend((family, r, None) for r in range(1, r_max + 1))
        witnesses[family] = found
    return DiagramResult(params, tuple(rows), witnesses)


# single-round rule -------------------------------------------------------


def single_round_witnesses(n: int = 5, t: int = 1, k: int = 3, thresholds: Optional[Sequence[int]] = None) -> dict:
    """For each threshold, the first (observations, attacker block) whose one-round outcome is unsafe.

    Search order: observer count ascending, then attacker blocks in
    lexicographic order of their raw bits.
    """
    size = n + t
    if thresholds is None:
        thresholds = range(1, size + 1)
    blocks = [
        np.array(bits, dtype=np.uint8).reshape(t, size)
        for bits in itertools.product((0, 1), repeat=t * size)
    ]
    found = {}
    for lam_sr in thresholds:
        found[lam_sr] = None
        for c in range(n + 1):
            obs = _canonical(n, c)
            for block in blocks:
                outcome = classify(obs, single_round_rule(obs, block, lam_sr), k)
                if outcome.unsafe:
                    found[lam_sr] = (obs, block, outcome)
                    break
            if found[lam_sr] is not None:
                break
    return found
