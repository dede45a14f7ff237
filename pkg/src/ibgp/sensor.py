"""Sharing a tracked target position across a 1-D sensor line with neighbourhood consensus.

Each timestep, sensors near the target discretize a noisy reading.  A sensor
whose belief changed proposes the value to its neighbourhood through a
(k=1, lambda=1) protocol instance; members that accept it propose in turn.
The vanilla baseline forwards claims without any agreement step.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError
from .adversary import SequenceAttacker
from .protocol import RoundDistribution, SeedLike, child_seed, fast_decisions

UNKNOWN = None


@dataclass(frozen=True)
class SensorWorld:
    positions: tuple
    sensing_radius: float
    neighborhood_radius: float
    attacker_ids: frozenset = frozenset()
    grid_width: float = 0.5
    noise_bound: float = 0.2
    noise: str = "uniform"  # or "gaussian" (may break exact agreement)

    def __post_init__(self):
        object.__setattr__(self, "positions", tuple(float(p) for p in self.positions))
        object.__setattr__(self, "attacker_ids", frozenset(int(a) for a in self.attacker_ids))
        if not self.positions:
            raise ConfigurationError("world has no sensors")
        if self.grid_width <= 0 or self.sensing_radius <= 0 or self.neighborhood_radius <= 0:
            raise ConfigurationError("radii and grid width must be positive")
        if any(not 0 <= a < self.n for a in self.attacker_ids):
            raise ConfigurationError("attacker id out of range")
        if self.noise not in ("uniform", "gaussian"):
            raise ConfigurationError(f"unknown noise model {self.noise!r}")
        pos = self.positions
        nbrs = tuple(tuple(j for j, q in enumerate(pos) if abs(p - q) <= self.neighborhood_radius) for p in pos)
        object.__setattr__(self, "_neighborhoods", nbrs)

    @property
    def n(self) -> int:
        return len(self.positions)

    @property
    def benign(self) -> tuple:
        return tuple(i for i in range(self.n) if i not in self.attacker_ids)

    def neighborhood(self, i: int) -> tuple:
        """Sensors within the neighbourhood radius of ``i``, itself included."""
        return self._neighborhoods[i]

    def benign_connected(self) -> bool:
        benign = self.benign
        if not benign:
            return True
        seen, stack = {benign[0]}, [benign[0]]
        while stack:
            i = stack.pop()
            for j in self.neighborhood(i):
                if j not in self.attacker_ids and j not in seen:
                    seen.add(j)
                    stack.append(j)
        return len(seen) == len(benign)

    def precondition_problems(self, trajectory: Optional["TargetTrajectory"] = None, horizon: int = 0) -> list:
        """Reasons the robustness preconditions fail (empty when they all hold)."""
        problems = []
        if not self.benign_connected():
            problems.append("benign sensors are not connected")
        for i in range(self.n):
            members = self.neighborhood(i)
            bad = [j for j in members if j in self.attacker_ids]
            if len(bad) > 1:
                problems.append(f"neighbourhood of {i} holds attackers {bad}")
            if len(members) <= 3:
                problems.append(f"neighbourhood of {i} has only {len(members)} members")
        if trajectory is not None:
            for t in range(horizon):
                s = trajectory.position(t)
                seen = [i for i in self.benign if abs(s - self.positions[i]) < self.sensing_radius]
                if not seen:
                    continue
                if not any(j != i and j in self.neighborhood(i) for i in seen for j in seen):
                    problems.append(f"step {t}: fewer than two adjacent benign observers")
        return problems


@dataclass(frozen=True)
class TargetTrajectory:
    """Piecewise-linear position through ``(time, position)`` waypoints; constant outside them."""

    waypoints: tuple

    def __post_init__(self):
        pts = tuple((float(t), float(x)) for t, x in self.waypoints)
        if not pts:
            raise ConfigurationError("trajectory needs at least one waypoint")
        if any(b[0] <= a[0] for a, b in zip(pts, pts[1:])):
            raise ConfigurationError("waypoint times must increase")
        object.__setattr__(self, "waypoints", pts)

    def position(self, t: float) -> float:
        times = [p[0] for p in self.waypoints]
        xs = [p[1] for p in self.waypoints]
        return float(np.interp(t, times, xs))


def discretize(raw: float, grid_width: float) -> float:
    """Nearest multiple of ``grid_width``; exact midpoints go to the lower cell."""
    if grid_width <= 0:
        raise ConfigurationError("grid width must be positive")
    return math.ceil(raw / grid_width - 0.5) * grid_width


def observe(world: SensorWorld, trajectory: TargetTrajectory, t: float, seed: SeedLike = 0) -> dict:
    """Raw readings ``s(t) + eps`` for every sensor within the sensing radius."""
    rng = np.random.default_rng(child_seed(seed))
    s = trajectory.position(t)
    readings = {}
    for i, p in enumerate(world.positions):
        # one draw per sensor keeps the stream aligned whatever the geometry
        if world.noise == "uniform":
            eps = rng.uniform(-world.noise_bound, world.noise_bound)
        else:
            eps = rng.normal(0.0, world.noise_bound)
        if abs(s - p) < world.sensing_radius:
            readings[i] = s + float(eps)
    return readings


class SensorAttacker:
    """Behaviour of the attacking sensors.

    ``bits[r]`` maps a neighbour offset (member index minus attacker index)
    to the bit sent in round ``r`` of a neighbourhood instance; missing
    offsets get ``default``.  ``fake`` is a value the attacker proposes every
    timestep (or None).  Attackers never forward other sensors' claims.
    """

    def __init__(self, default: int = 0, bits: Optional[Sequence[dict]] = None, fake: Optional[float] = None, p: Optional[float] = None, name: str = "attacker"):
        self.default = int(default)
        self.bits = tuple(dict(b) for b in (bits or ()))
        self.fake = fake
        self.p = p
        self.name = name

    def bit(self, round_index: int, attacker: int, receiver: int, rng: np.random.Generator) -> int:
        if self.p is not None:
            return int(rng.random() < self.p)
        if round_index < len(self.bits):
            return int(self.bits[round_index].get(receiver - attacker, self.default))
        return self.default

    def describe(self) -> dict:
        return {"name": self.name, "default": self.default, "fake": self.fake, "p": self.p}


def attacker_from_config(spec: dict) -> SensorAttacker:
    kind = spec.get("name", "silent")
    fake = spec.get("fake")
    if kind == "silent":
        return SensorAttacker(0, fake=fake, name=kind)
    if kind == "ones":
        return SensorAttacker(1, fake=fake, name=kind)
    if kind == "random":
        return SensorAttacker(0, fake=fake, p=float(spec.get("p", 0.5)), name=kind)
    raise ConfigurationError(f"unknown sensor attacker {kind!r}")


@dataclass
class BeliefState:
    beliefs: list  # per sensor: float or UNKNOWN
    updated: set = field(default_factory=set)  # sensors updated this timestep
    waves: int = 0

    def benign_values(self, world: SensorWorld) -> list:
        return [self.beliefs[i] for i in world.benign if self.beliefs[i] is not UNKNOWN]

    def consistent(self, world: SensorWorld) -> bool:
        return len(set(self.benign_values(world))) <= 1


def neighborhood_consensus(world: SensorWorld, beliefs: list, fresh: set, proposer: int, value: float,
                           attacker: SensorAttacker, rng: np.random.Generator,
                           round_dist: RoundDistribution) -> bool:
    """Run one (1, 1) instance in ``proposer``'s neighbourhood; True iff a benign holder acts.

    Holders (initial 1s) are benign members that took ``value`` this timestep.
    """
    members = world.neighborhood(proposer)
    benign = [j for j in members if j not in world.attacker_ids]
    bad = [j for j in members if j in world.attacker_ids]
    order = benign + bad
    obs = np.array([1 if (j in fresh and beliefs[j] == value) else 0 for j in benign], dtype=np.uint8)

    r_tot = round_dist.sample(rng)
    blocks = np.zeros((r_tot + 1, len(bad), len(order)), dtype=np.uint8)
    for r in range(r_tot + 1):
        for a_idx, a in enumerate(bad):
            for col, j in enumerate(order):
                blocks[r, a_idx, col] = attacker.bit(r, a, j, rng)
    decisions = fast_decisions(len(benign), len(bad), 1, 1, obs, SequenceAttacker(blocks), r_tot)
    return bool((decisions.astype(bool) & obs.astype(bool)).any())


def propagate(world: SensorWorld, beliefs: list, newly_activated: Sequence[int], attacker: Optional[SensorAttacker] = None,
              seed: SeedLike = 0, round_dist: Optional[RoundDistribution] = None) -> BeliefState:
    """Recursive neighbourhood consensus from the freshly updated sensors.

    Every sensor changes belief at most once; proposers of a wave run in index
    order, and the first accepted proposal reaching a sensor wins.
    """
    attacker = attacker or SensorAttacker()
    round_dist = round_dist or RoundDistribution.point(1)
    rng = np.random.default_rng(child_seed(seed))
    beliefs = list(beliefs)
    fresh = set(int(i) for i in newly_activated)
    wave = sorted(i for i in fresh if i not in world.attacker_ids)
    waves = 0
    while wave or (attacker.fake is not None and waves == 0 and world.attacker_ids):
        waves += 1
        if waves > world.n:
            raise RuntimeError("propagation did not terminate within n waves")
        proposals = [(p, beliefs[p]) for p in wave]
        if waves == 1 and attacker.fake is not None:
            proposals += [(a, attacker.fake) for a in sorted(world.attacker_ids)]
            proposals.sort(key=lambda pv: pv[0])
        nxt = []
        for p, value in proposals:
            if not neighborhood_consensus(world, beliefs, fresh, p, value, attacker, rng, round_dist):
                continue
            for j in world.neighborhood(p):
                if j in world.attacker_ids or j in fresh:
                    continue
                beliefs[j] = value
                fresh.add(j)
                nxt.append(j)
        wave = sorted(nxt)
    return BeliefState(beliefs, fresh, waves)


def vanilla_broadcast(world: SensorWorld, beliefs: list, newly_activated: Sequence[int], attacker: Optional[SensorAttacker] = None) -> BeliefState:
    """Forward claims hop by hop; a sensor keeps the first claim it hears (wave, then sender index).

    Attackers inject their fake value in the first wave and never forward.
    """
    attacker = attacker or SensorAttacker()
    beliefs = list(beliefs)
    fresh = set(int(i) for i in newly_activated)
    senders = sorted(i for i in fresh if i not in world.attacker_ids)
    fake_senders = sorted(world.attacker_ids) if attacker.fake is not None else []
    waves = 0
    while senders or fake_senders:
        waves += 1
        if waves > world.n:
            raise RuntimeError("broadcast did not terminate within n waves")
        claims = [(s, beliefs[s]) for s in senders] + [(a, attacker.fake) for a in fake_senders]
        claims.sort(key=lambda sv: sv[0])
        fake_senders = []
        nxt = []
        for s, value in claims:
            for j in world.neighborhood(s):
                if j in world.attacker_ids or j in fresh or j == s:
                    continue
                beliefs[j] = value
                fresh.add(j)
                nxt.append(j)
        senders = sorted(nxt)
    return BeliefState(beliefs, fresh, waves)


@dataclass(frozen=True)
class StepRecord:
    t: int
    true_signal: float
    discretized_signal: float
    belief_mean: float
    belief_std: float
    consistent: bool
    known: int
    waves: int


@dataclass(frozen=True)
class SimulationResult:
    steps: tuple
    beliefs: tuple  # per step, final belief list

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "true_signal", "discretized_signal", "belief_mean", "belief_std", "consistent_flag"])
        for s in self.steps:
            writer.writerow([s.t, _fmt(s.true_signal), _fmt(s.discretized_signal), _fmt(s.belief_mean), _fmt(s.belief_std), int(s.consistent)])
        return buf.getvalue()

    def first_contact(self) -> Optional[int]:
        for s in self.steps:
            if s.known:
                return s.t
        return None


def _fmt(x: float) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    return f"{x:.6g}"


def simulate(world: SensorWorld, trajectory: TargetTrajectory, horizon: int, attacker: Optional[SensorAttacker] = None,
             mode: str = "consensus", seed: SeedLike = 0, round_dist: Optional[RoundDistribution] = None) -> SimulationResult:
    if horizon < 1:
        raise ConfigurationError("horizon must be >= 1")
    if mode not in ("consensus", "vanilla"):
        raise ConfigurationError(f"unknown mode {mode!r}")
    attacker = attacker or SensorAttacker()
    beliefs = [UNKNOWN] * world.n
    steps, history = [], []
    for t in range(horizon):
        readings = observe(world, trajectory, t, child_seed(seed, t, 0))
        updated = []
        for i in sorted(readings):
            if i in world.attacker_ids:
                continue
            cell = discretize(readings[i], world.grid_width)
            if beliefs[i] != cell:
                beliefs[i] = cell
                updated.append(i)
        if mode == "consensus":
            state = propagate(world, beliefs, updated, attacker, child_seed(seed, t, 1), round_dist)
        else:
            state = vanilla_broadcast(world, beliefs, updated, attacker)
        beliefs = state.beliefs
        values = state.benign_values(world)
        s = trajectory.position(t)
        mean = float(np.mean(values)) if values else float("nan")
        std = float(np.std(values)) if values else float("nan")
        steps.append(StepRecord(t, s, discretize(s, world.grid_width), mean, std, state.consistent(world), len(values), state.waves))
        history.append(tuple(beliefs))
    return SimulationResult(tuple(steps), tuple(history))


def default_world() -> SensorWorld:
    """20 unit-spaced sensors, three attackers far enough apart that no neighbourhood holds two."""
    return SensorWorld(tuple(range(20)), sensing_radius=2.0, neighborhood_radius=3.0, attacker_ids=frozenset({5, 12, 19}))


def default_trajectory() -> TargetTrajectory:
    # half a cell per step, so every sample sits on a cell centre
    return TargetTrajectory(((0, 0.0), (36, 18.0), (56, 8.0)))


DEFAULT_HORIZON = 57


def counterexample_world() -> SensorWorld:
    """Ten sensors where each neighbourhood is a sensor and its two neighbours; attacker in the middle."""
    return SensorWorld(tuple(range(10)), sensing_radius=1.5, neighborhood_radius=1.0, attacker_ids=frozenset({5}))


def counterexample_trajectory() -> TargetTrajectory:
    return TargetTrajectory(((0, 2.0), (4, 2.0)))


def counterexample_attacker() -> SensorAttacker:
    return SensorAttacker(0, fake=7.5, name="fake_and_block")


def small_world() -> SensorWorld:
    """Eight sensors, one attacker, for exhaustive checks over attacker behaviours."""
    return SensorWorld(tuple(range(8)), sensing_radius=2.0, neighborhood_radius=3.0, attacker_ids=frozenset({4}))


def small_trajectory() -> TargetTrajectory:
    # first on the attacker's own position, then far from it
    return TargetTrajectory(((0, 4.0), (1, 1.0)))


def attacker_family(world: SensorWorld, rounds: int = 2, fakes=(None, 7.5)):
    """Every per-offset bit pattern over the attacker's neighbours for ``rounds`` rounds, with and without a fake value."""
    reach = int(math.floor(world.neighborhood_radius))
    offsets = [d for d in range(-reach, reach + 1) if d != 0]
    width = len(offsets) * rounds
    for fake in fakes:
        for code in range(2**width):
            bits = []
            for r in range(rounds):
                bits.append({d: (code >> (r * len(offsets) + i)) & 1 for i, d in enumerate(offsets)})
            yield SensorAttacker(0, bits=bits, fake=fake, name=f"pattern_{code}")
