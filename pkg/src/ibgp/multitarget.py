"""Multi-target games: per-target protocol instances, the dispersion defense and target selection.

Messages in the proposing round (round 0) carry a target label in
``0..m`` (0 means "no proposal").  Target ``j``'s protocol instance reads the
bit ``label == j``.  Later rounds are per-target bit matrices.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .adversary import AttackerStrategy, all_one
from .errors import BudgetExceeded, ConfigurationError, ShapeError
from .protocol import (
    OutcomeKind,
    RoundDistribution,
    RoundMessages,
    SeedLike,
    child_seed,
    classify,
    compose_round,
    execute,
    sample_round_count,
)

SELECT_BUDGET = 2**16


@dataclass(frozen=True)
class MultiTargetInstance:
    n: int
    t: int
    thresholds: tuple
    rewards: tuple
    availability: tuple  # frozenset of agent indices per target
    observations: tuple  # per benign agent, 0 = no proposal, else target 1..m
    round_dist: RoundDistribution = RoundDistribution.uniform()

    def __post_init__(self):
        object.__setattr__(self, "thresholds", tuple(int(k) for k in self.thresholds))
        object.__setattr__(self, "rewards", tuple(float(r) for r in self.rewards))
        object.__setattr__(self, "availability", tuple(frozenset(int(a) for a in s) for s in self.availability))
        obs = self.observations if self.observations is not None else (0,) * self.n
        object.__setattr__(self, "observations", tuple(int(o) for o in obs))
        m = len(self.thresholds)
        if self.n < 1 or self.t < 0:
            raise ConfigurationError(f"bad sizes n={self.n}, t={self.t}")
        if len(self.rewards) != m or len(self.availability) != m:
            raise ConfigurationError("thresholds, rewards and availability must have one entry per target")
        for j, k in enumerate(self.thresholds):
            if not 1 <= k <= self.n:
                raise ConfigurationError(f"target {j + 1}: threshold {k} outside [1, {self.n}]")
        if not all(math.isfinite(r) for r in self.rewards):
            raise ConfigurationError("rewards must be finite")
        for j, s in enumerate(self.availability):
            if any(not 0 <= a < self.n for a in s):
                raise ConfigurationError(f"target {j + 1}: availability set outside [0, {self.n})")
        if len(self.observations) != self.n:
            raise ShapeError(f"need {self.n} observations, got {len(self.observations)}")
        if any(not 0 <= o <= m for o in self.observations):
            raise ConfigurationError(f"observations must lie in 0..{m}")

    @property
    def m(self) -> int:
        return len(self.thresholds)

    @property
    def k_max(self) -> int:
        return max(self.thresholds)

    def target_observations(self, j: int) -> np.ndarray:
        """Bits ``1(o_i = j)`` for target ``j`` (1-based)."""
        return (np.asarray(self.observations) == j).astype(np.uint8)

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "t": self.t,
            "thresholds": list(self.thresholds),
            "rewards": list(self.rewards),
            "availability": [sorted(s) for s in self.availability],
            "observations": list(self.observations),
        }

    @classmethod
    def from_json(cls, data: dict, round_dist: Optional[RoundDistribution] = None) -> "MultiTargetInstance":
        return cls(
            n=int(data["n"]),
            t=int(data.get("t", 0)),
            thresholds=tuple(data["thresholds"]),
            rewards=tuple(data["rewards"]),
            availability=tuple(data.get("availability") or [range(data["n"])] * len(data["thresholds"])),
            observations=tuple(data.get("observations") or [0] * int(data["n"])),
            round_dist=round_dist or RoundDistribution.uniform(),
        )


# dispersion ------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PermutationPack:
    perms: np.ndarray  # q x (n+t), row u is p_u

    def __post_init__(self):
        perms = np.array(self.perms, dtype=np.int64)
        if perms.ndim != 2 or perms.shape[0] < 1:
            raise ShapeError("a pack needs at least one permutation")
        size = perms.shape[1]
        if not (np.sort(perms, axis=1) == np.arange(size)).all():
            raise ConfigurationError("every pack entry must be a permutation")
        perms.setflags(write=False)
        object.__setattr__(self, "perms", perms)

    @property
    def q(self) -> int:
        return self.perms.shape[0]

    @classmethod
    def sample(cls, size: int, q: int = 31, seed: SeedLike = 0) -> "PermutationPack":
        rng = np.random.default_rng(child_seed(seed))
        return cls(np.stack([rng.permutation(size) for _ in range(q)]))

    @classmethod
    def identity(cls, size: int) -> "PermutationPack":
        return cls(np.arange(size)[None, :])


def disperse_labels(labels: np.ndarray, pack: PermutationPack) -> np.ndarray:
    """Receiver ``r`` credits sender ``i`` with the strict-majority label of ``labels[i, p_u(r)]``.

    No strict majority gives 0.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.ndim != 2 or labels.shape[1] != pack.perms.shape[1]:
        raise ShapeError(f"label matrix of shape {labels.shape} does not match pack size {pack.perms.shape[1]}")
    gathered = labels[:, pack.perms]  # [sender, u, receiver]
    out = np.zeros((labels.shape[0], labels.shape[1]), dtype=np.int64)
    for value in np.unique(labels):
        if value == 0:
            continue
        hits = (gathered == value).sum(axis=1)
        out[2 * hits > pack.q] = value
    return out


def dispersion_defense(round1: RoundMessages, pack: PermutationPack) -> RoundMessages:
    bits = disperse_labels(round1.bits, pack).astype(np.uint8)
    return RoundMessages(bits, round1.n)


# attacks -----------------------------------------------------------------


class ProposalAttack:
    """Round-0 label rows (``t x (n+t)``) plus a bit strategy for later rounds.

    ``labels`` is a fixed matrix or ``fn(instance, rng) -> matrix``.
    """

    def __init__(self, labels, follow_up: AttackerStrategy, name: str = "proposal"):
        self.labels = labels
        self.follow_up = follow_up
        self.name = name

    def proposal(self, instance: MultiTargetInstance, rng: np.random.Generator) -> np.ndarray:
        labels = self.labels(instance, rng) if callable(self.labels) else self.labels
        labels = np.asarray(labels, dtype=np.int64)
        if labels.shape != (instance.t, instance.n + instance.t):
            raise ShapeError(f"proposal rows must have shape ({instance.t}, {instance.n + instance.t})")
        return labels


@dataclass(frozen=True)
class MultiTargetResult:
    outcomes: tuple  # Outcome per target, in target order
    r_tot: int
    table_reward: int
    obtained_reward: float

    @property
    def mis_coordinated(self) -> int:
        return sum(1 for o in self.outcomes if o.unsafe)

    def to_json(self) -> dict:
        return {
            "r_tot": self.r_tot,
            "outcomes": [str(o.kind) for o in self.outcomes],
            "table_reward": self.table_reward,
            "obtained_reward": self.obtained_reward,
            "mis_coordinated_targets": self.mis_coordinated,
        }


def target_reward(observers: int, acting: int, k: int, n: int) -> int:
    """Per-target term of the multi-target reward."""
    if observers == n:
        return int(acting >= k)
    if observers < k:
        return int(acting == 0)
    return int(acting >= k) + int(acting == 0)


def run_multi_target(
    instance: MultiTargetInstance,
    attacker,
    lam: Optional[int] = None,
    seed: SeedLike = 0,
    q: Optional[int] = None,
    pack: Optional[PermutationPack] = None,
) -> MultiTargetResult:
    """Independent per-target (k_j, lambda)-protocols sharing one hidden round count.

    ``attacker`` is either a bit strategy (run against every target instance)
    or a :class:`ProposalAttack`.  Passing ``q`` or ``pack`` applies the
    dispersion defense to the proposing round; the pack is drawn after the
    proposals are fixed.
    """
    n, t = instance.n, instance.t
    lam = t if lam is None else int(lam)
    size = n + t
    r_tot = sample_round_count(instance.round_dist, child_seed(seed, 0))
    labels = None
    follow = attacker
    if isinstance(attacker, ProposalAttack):
        rng = np.random.default_rng(child_seed(seed, 3))
        labels = np.vstack(
            [
                np.repeat(np.asarray(instance.observations, dtype=np.int64)[:, None], size, axis=1),
                attacker.proposal(instance, rng),
            ]
        )
        follow = attacker.follow_up
    if pack is None and q is not None:
        pack = PermutationPack.sample(size, q, child_seed(seed, 2))
    if labels is not None and pack is not None:
        labels = disperse_labels(labels, pack)
    outcomes, table_reward, obtained = [], 0, 0.0
    for j in range(1, instance.m + 1):
        obs = instance.target_observations(j)
        follow.reset(child_seed(seed, 1))
        initial = None
        if labels is not None:
            initial = RoundMessages((labels == j).astype(np.uint8), n)
        elif pack is not None:
            first = compose_round(obs, follow.rows(0, (), n, t), n)
            initial = dispersion_defense(first, pack)
        k = instance.thresholds[j - 1]
        tr = execute(n, t, k, lam, obs, follow, r_tot, initial=initial)
        out = classify(obs, tr.decisions, k)
        outcomes.append(out)
        table_reward += target_reward(out.observers, out.acting_count, k, n)
        if out.kind is OutcomeKind.COORDINATED:
            obtained += instance.rewards[j - 1]
    return MultiTargetResult(tuple(outcomes), r_tot, table_reward, obtained)


# selection ---------------------------------------------------------------


@dataclass(frozen=True)
class SelectionResult:
    selected: tuple  # target indices, 0-based, ascending
    assignment: dict  # target -> tuple of agents
    occupied: frozenset
    total_reward: float

    def to_json(self) -> dict:
        return {
            "selected_targets": list(self.selected),
            "assignment": {str(j): list(a) for j, a in sorted(self.assignment.items())},
            "occupied": sorted(self.occupied),
            "total_reward": self.total_reward,
        }


def check_selection(instance: MultiTargetInstance, result: SelectionResult) -> list:
    """Invariant violations (empty list when the selection is valid)."""
    problems = []
    seen = set()
    for j in result.selected:
        agents = set(result.assignment.get(j, ()))
        if len(agents) != instance.thresholds[j]:
            problems.append(f"target {j}: {len(agents)} agents assigned, threshold {instance.thresholds[j]}")
        if not agents <= instance.availability[j]:
            problems.append(f"target {j}: assigned agents outside its availability set")
        if agents & seen:
            problems.append(f"target {j}: agents shared with another target")
        seen |= agents
    if set(result.assignment) != set(result.selected):
        problems.append("assignment keys differ from the selected targets")
    if seen != set(result.occupied):
        problems.append("occupied set differs from the union of assignments")
    expected = sum(instance.rewards[j] for j in result.selected)
    if not math.isclose(expected, result.total_reward, rel_tol=1e-12, abs_tol=1e-12):
        problems.append("total reward does not match the selected targets")
    return problems


def greedy_select(instance: MultiTargetInstance) -> SelectionResult:
    """Highest reward first; take a target when enough of its agents are still free.

    Ties in reward go to the lower target index; the agents taken are the
    lowest-indexed free ones.
    """
    order = sorted(range(instance.m), key=lambda j: (-instance.rewards[j], j))
    used, chosen, assignment = set(), [], {}
    for j in order:
        free = sorted(instance.availability[j] - used)
        k = instance.thresholds[j]
        if len(free) >= k:
            chosen.append(j)
            assignment[j] = tuple(free[:k])
            used.update(free[:k])
    chosen.sort()
    return SelectionResult(tuple(chosen), assignment, frozenset(used), sum(instance.rewards[j] for j in chosen))


def _assign(instance: MultiTargetInstance, targets: Sequence[int]) -> Optional[dict]:
    slots = [j for j in targets for _ in range(instance.thresholds[j])]
    if not slots:
        return {}
    if len(slots) > instance.n:
        return None
    rows, cols = [], []
    for s, j in enumerate(slots):
        for a in instance.availability[j]:
            rows.append(s)
            cols.append(a)
    graph = csr_matrix((np.ones(len(rows), dtype=np.int8), (rows, cols)), shape=(len(slots), instance.n))
    match = maximum_bipartite_matching(graph, perm_type="column")
    if (match < 0).any():
        return None
    assignment = {}
    for s, j in enumerate(slots):
        assignment.setdefault(j, []).append(int(match[s]))
    return {j: tuple(sorted(a)) for j, a in assignment.items()}


def brute_force_select(instance: MultiTargetInstance, budget: int = SELECT_BUDGET) -> SelectionResult:
    """Optimal selection by subset enumeration (highest reward first, first feasible wins)."""
    m = instance.m
    if 2**m > budget:
        raise BudgetExceeded(2**m, budget)
    subsets = []
    for mask in range(2**m):
        targets = tuple(j for j in range(m) if mask >> j & 1)
        subsets.append((-sum(instance.rewards[j] for j in targets), targets))
    subsets.sort()
    for neg_reward, targets in subsets:
        assignment = _assign(instance, targets)
        if assignment is not None:
            used = frozenset(a for agents in assignment.values() for a in agents)
            return SelectionResult(targets, assignment, used, -neg_reward if targets else 0.0)
    raise AssertionError("the empty selection is always feasible")


def random_instance(rng: np.random.Generator, max_m: int = 8, max_n: int = 12, max_k: int = 4, p: float = 0.5) -> MultiTargetInstance:
    """Random selection instance: m, n uniform, thresholds uniform, Bernoulli(p) availability, uniform rewards."""
    m = int(rng.integers(1, max_m + 1))
    n = int(rng.integers(1, max_n + 1))
    thresholds = tuple(int(rng.integers(1, min(n, max_k) + 1)) for _ in range(m))
    availability = tuple(frozenset(np.flatnonzero(rng.random(n) < p).tolist()) for _ in range(m))
    rewards = tuple(float(x) for x in rng.random(m))
    return MultiTargetInstance(n, 0, thresholds, rewards, availability, (0,) * n)


def selection_table(pairs) -> str:
    """CSV for (instance, greedy, optimal) triples."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["instance", "m", "n", "k_max", "greedy_reward", "optimal_reward", "ratio"])
    for idx, (inst, greedy, best) in enumerate(pairs):
        ratio = 1.0 if best.total_reward == 0 else greedy.total_reward / best.total_reward
        writer.writerow([idx, inst.m, inst.n, inst.k_max, f"{greedy.total_reward:.6g}", f"{best.total_reward:.6g}", f"{ratio:.6g}"])
    return buf.getvalue()


# dispersion bound check ----------------------------------------------------


def dispersion_envelope(m: int, t: int, n: int, k_max: int, q: int) -> float:
    """Failure envelope of the mis-coordinated-target count bound."""
    return (m - 3) * t * k_max * math.exp(-2 * q * (1 / 6 - t / (n + t)) ** 2)


def concentrated_proposals(instance: MultiTargetInstance, rng: np.random.Generator) -> np.ndarray:
    """Attacker label rows from the concentration family.

    Each attacker picks up to three heavy targets, each labelled on about a
    third of the recipients, placed on those targets' observers first.  The
    remaining recipients get light labels (under a third each) or 0.
    """
    n, t, m = instance.n, instance.t, instance.m
    size = n + t
    third = math.ceil(size / 3)
    obs = np.asarray(instance.observations)
    rows = np.zeros((t, size), dtype=np.int64)
    for a in range(t):
        heavy = rng.choice(np.arange(1, m + 1), size=min(int(rng.integers(1, 4)), m), replace=False)
        free = list(range(size))
        for j in heavy:
            want = int(rng.integers(third // 2, third + 1))
            own = [i for i in free if i < n and obs[i] == j]
            rest = [i for i in free if i not in own]
            rng.shuffle(rest)
            # split the target's observers so a naive receiver would disagree
            pick = own[: max(1, len(own) // 2)] + rest
            for i in pick[:want]:
                rows[a, i] = j
                free.remove(i)
        light = [j for j in range(1, m + 1) if j not in heavy]
        for i in free:
            if light and rng.random() < 0.5:
                rows[a, i] = light[int(rng.integers(len(light)))]
    return rows


def targeted_proposals(instance: MultiTargetInstance, rng=None) -> np.ndarray:
    """Every attacker labels half of each target's observers with that target."""
    n, t = instance.n, instance.t
    rows = np.zeros((t, n + t), dtype=np.int64)
    for j in range(1, instance.m + 1):
        own = np.flatnonzero(np.asarray(instance.observations) == j)
        rows[:, own[: max(1, len(own) // 2)]] = j
    return rows


def dispersion_instance(seed: SeedLike = 0, n: int = 40, m: int = 12, t: int = 2, r_max: int = 5) -> MultiTargetInstance:
    """Observer counts at or just below each threshold, thresholds in {2, 3}."""
    rng = np.random.default_rng(child_seed(seed))
    thresholds = tuple(int(rng.integers(2, 4)) for _ in range(m))
    obs = np.zeros(n, dtype=np.int64)
    cursor = 0
    for j, k in enumerate(thresholds, start=1):
        c = k - int(rng.integers(0, 2))
        obs[cursor : cursor + c] = j
        cursor += c
    perm = rng.permutation(n)
    return MultiTargetInstance(
        n, t, thresholds, tuple(1.0 for _ in range(m)), tuple(frozenset(range(n)) for _ in range(m)),
        tuple(int(x) for x in obs[perm]), RoundDistribution.uniform(r_max),
    )


@dataclass(frozen=True)
class DispersionCheck:
    runs: int
    limit: float  # the count bound 3t/lambda
    exceed: int  # runs with more than ``limit`` unsafe targets
    envelope: float
    histogram: tuple  # runs per unsafe-target count

    @property
    def holding_fraction(self) -> float:
        return 1 - self.exceed / self.runs

    @property
    def required_fraction(self) -> float:
        return 1 - 2 * self.envelope

    def to_json(self) -> dict:
        return {
            "runs": self.runs,
            "limit": self.limit,
            "runs_over_limit": self.exceed,
            "holding_fraction": self.holding_fraction,
            "envelope": self.envelope,
            "required_fraction": self.required_fraction,
            "histogram": list(self.histogram),
        }


def dispersion_runs(run_ids, seed: SeedLike = 0, q: Optional[int] = 31, lam: int = 1, n: int = 40, m: int = 12, t: int = 2) -> list:
    """Unsafe-target counts for the given run indices; each run draws its own instance."""
    attack = ProposalAttack(concentrated_proposals, all_one(), name="concentrated")
    counts = []
    for i in run_ids:
        inst = dispersion_instance(child_seed(seed, i, 0), n=n, m=m, t=t)
        counts.append(run_multi_target(inst, attack, lam, child_seed(seed, i, 1), q=q).mis_coordinated)
    return counts


def summarize_dispersion(counts: Sequence[int], q: int = 31, lam: int = 1, n: int = 40, m: int = 12, t: int = 2, k_max: int = 3) -> DispersionCheck:
    limit = 3 * t / lam
    hist = np.bincount(np.asarray(counts, dtype=np.int64), minlength=m + 1)
    return DispersionCheck(len(counts), limit, int(sum(c > limit for c in counts)), dispersion_envelope(m, t, n, k_max, q), tuple(int(x) for x in hist))

