"""Relaxed and per-agent safety margins, and sweeps of the margin against fixed attackers."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adversary import AttackerStrategy
from .errors import ConfigurationError
from .protocol import (
    OutcomeKind,
    ProtocolParams,
    RoundDistribution,
    SeedLike,
    Transcript,
    child_seed,
    classify,
    execute,
    fast_decisions,
    sample_round_count,
)
from .sampling import wilson_half_width


@dataclass(frozen=True)
class LambdaProfile:
    per_agent: tuple

    def __post_init__(self):
        values = tuple(int(x) for x in self.per_agent)
        if not values:
            raise ConfigurationError("profile is empty")
        if min(values) < 0:
            raise ConfigurationError("per-agent lambda must be >= 0")
        object.__setattr__(self, "per_agent", values)

    @classmethod
    def uniform(cls, n: int, lam: int) -> "LambdaProfile":
        return cls((lam,) * n)

    def __len__(self):
        return len(self.per_agent)

    def over_conservative(self, t: int) -> bool:
        """Any margin above ``t`` buys no extra safety."""
        return max(self.per_agent) > t

    def label(self) -> str:
        if len(set(self.per_agent)) == 1:
            return f"lambda={self.per_agent[0]}"
        return "lambda=[" + ",".join(map(str, self.per_agent)) + "]"


def run_protocol_profiled(
    params: ProtocolParams,
    profile: LambdaProfile,
    observations,
    attacker: AttackerStrategy,
    seed: SeedLike = 0,
) -> Transcript:
    """Like ``run_protocol`` with agent ``i`` continuing on ``count >= k + lambda_i``."""
    if len(profile) != params.n:
        raise ConfigurationError(f"profile has {len(profile)} entries for {params.n} agents")
    if params.n < params.k + max(profile.per_agent):
        raise ConfigurationError(
            f"infeasible instance: n={params.n} < k+lambda={params.k + max(profile.per_agent)}"
        )
    r_tot = sample_round_count(params.round_dist, child_seed(seed, 0))
    attacker.reset(child_seed(seed, 1))
    return execute(params.n, params.t, params.k, np.asarray(profile.per_agent), observations, attacker, r_tot)


@dataclass(frozen=True)
class EpisodeEnv:
    """One target over a fixed horizon; unsafe actors die, first coordination ends the episode.

    Each step draws ``#(o_i=1)`` uniformly from ``0..max_observers`` over all
    ``n`` agent slots; observers that have died take no part.
    """

    n: int
    k: int
    t: int
    horizon: int = 10
    max_observers: int = 6
    round_dist: RoundDistribution = field(default_factory=RoundDistribution.uniform)
    death_cost: float = 1.0

    def __post_init__(self):
        if self.n < 1 or self.t < 0 or not 1 <= self.k <= self.n:
            raise ConfigurationError(f"bad environment n={self.n}, k={self.k}, t={self.t}")
        if self.horizon < 1:
            raise ConfigurationError("horizon must be >= 1")


@dataclass(frozen=True)
class EpisodeResult:
    success: bool
    deaths: int
    steps: int

    def reward(self, death_cost: float) -> float:
        return float(self.success) - death_cost * self.deaths

    @property
    def clean_success(self) -> bool:
        return self.success and self.deaths == 0


def run_episode(env: EpisodeEnv, profile: LambdaProfile, attacker: AttackerStrategy, seed: SeedLike) -> EpisodeResult:
    """Observation and round-count streams depend only on the seed, so profiles compare on paired draws."""
    if len(profile) != env.n:
        raise ConfigurationError(f"profile has {len(profile)} entries for {env.n} agents")
    obs_rng = np.random.default_rng(child_seed(seed, 0))
    round_rng = np.random.default_rng(child_seed(seed, 1))
    lam_all = np.asarray(profile.per_agent)
    alive = np.arange(env.n)
    deaths = 0
    for step in range(env.horizon):
        c = int(obs_rng.integers(0, env.max_observers + 1))
        keys = obs_rng.random(env.n)
        r_tot = env.round_dist.sample(round_rng)
        na = alive.size
        watchers = set(np.argsort(keys, kind="stable")[:c].tolist())
        obs = np.array([1 if a in watchers else 0 for a in alive], dtype=np.uint8)
        attacker.reset(child_seed(seed, 2, step))
        dec = fast_decisions(na, env.t, env.k, lam_all[alive], obs, attacker, r_tot)
        out = classify(obs, dec, env.k)
        if out.kind is OutcomeKind.COORDINATED:
            return EpisodeResult(True, deaths, step + 1)
        if out.unsafe:
            dead = dec.astype(bool)
            deaths += int(dead.sum())
            alive = alive[~dead]
    return EpisodeResult(False, deaths, env.horizon)


@dataclass(frozen=True)
class Cell:
    trials: int
    successes: int
    success_rate: float
    half_width: float
    mean_reward: float
    clean_success_rate: float

    def metric(self, name: str) -> float:
        return {"success": self.success_rate, "reward": self.mean_reward, "clean_success": self.clean_success_rate}[name]


@dataclass(frozen=True)
class SweepResult:
    attackers: tuple  # labels, row order
    profiles: tuple  # labels, column order
    grid: dict  # (attacker label, profile label) -> Cell
    metric: str = "success"

    def value(self, attacker: str, profile: str) -> float:
        return self.grid[(attacker, profile)].metric(self.metric)

    def best_profile(self, attacker: str) -> str:
        """Highest metric in the attacker's row; ties go to the earlier profile."""
        return max(self.profiles, key=lambda p: (self.value(attacker, p), -self.profiles.index(p)))

    def worst_case(self, profile: str) -> float:
        return min(self.value(a, profile) for a in self.attackers)

    def best_worst_case(self) -> str:
        return max(self.profiles, key=lambda p: (self.worst_case(p), -self.profiles.index(p)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["attacker"] + [f"{p}" for p in self.profiles] + [f"{p} half_width" for p in self.profiles] + ["best"])
        for a in self.attackers:
            vals = [f"{self.value(a, p):.6g}" for p in self.profiles]
            halves = [f"{self.grid[(a, p)].half_width:.6g}" for p in self.profiles]
            writer.writerow([a] + vals + halves + [self.best_profile(a)])
        writer.writerow(["worst"] + [f"{self.worst_case(p):.6g}" for p in self.profiles] + [""] * len(self.profiles) + [self.best_worst_case()])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "metric": self.metric,
            "cells": [
                {
                    "attacker": a,
                    "profile": p,
                    "trials": c.trials,
                    "success_rate": c.success_rate,
                    "half_width": c.half_width,
                    "mean_reward": c.mean_reward,
                    "clean_success_rate": c.clean_success_rate,
                }
                for (a, p), c in sorted(self.grid.items(), key=lambda kv: (self.attackers.index(kv[0][0]), self.profiles.index(kv[0][1])))
            ],
            "best_worst_case": self.best_worst_case(),
        }


def _profile_for(env: EpisodeEnv, profile) -> LambdaProfile:
    if isinstance(profile, LambdaProfile):
        return profile
    return LambdaProfile.uniform(env.n, int(profile))


def sweep_cell(env: EpisodeEnv, profile, attacker: AttackerStrategy, episodes: Sequence[int], seed: SeedLike):
    """Raw per-episode results for a slice of episode indices."""
    profile = _profile_for(env, profile)
    return [run_episode(env, profile, attacker, child_seed(seed, e)) for e in episodes]


def summarize_cell(env: EpisodeEnv, results: Sequence[EpisodeResult]) -> Cell:
    trials = len(results)
    wins = sum(r.success for r in results)
    clean = sum(r.clean_success for r in results)
    reward = sum(r.reward(env.death_cost) for r in results) / trials
    return Cell(trials, wins, wins / trials, wilson_half_width(wins, trials), reward, clean / trials)


def lambda_sweep(
    env: EpisodeEnv,
    attackers: Sequence,
    profiles: Sequence,
    trials: int,
    seed: SeedLike = 0,
    metric: str = "success",
) -> SweepResult:
    """Fill the (attacker x profile) grid.

    ``attackers`` holds strategies or ``(label, strategy)`` pairs; ``profiles``
    holds integers (uniform margins), :class:`LambdaProfile` objects or
    ``(label, profile)`` pairs.  Episode ``e`` uses the same seed in every
    cell.
    """
    if not attackers or not profiles:
        raise ConfigurationError("attackers and profiles must be non-empty")
    if trials < 1:
        raise ConfigurationError(f"trials must be >= 1, got {trials}")
    a_items = [a if isinstance(a, tuple) else (a.name, a) for a in attackers]
    p_items = []
    for p in profiles:
        if isinstance(p, tuple):
            p_items.append((p[0], _profile_for(env, p[1])))
        else:
            prof = _profile_for(env, p)
            p_items.append((prof.label(), prof))
    grid = {}
    for a_label, atk in a_items:
        for p_label, prof in p_items:
            grid[(a_label, p_label)] = summarize_cell(env, sweep_cell(env, prof, atk, range(trials), seed))
    return SweepResult(tuple(a for a, _ in a_items), tuple(p for p, _ in p_items), grid, metric)


def false_coordination_witnesses(params: ProtocolParams, profile: LambdaProfile, attacker: AttackerStrategy) -> list:
    """Every (observations, r_tot) where ``attacker`` causes FalseCoordination, over all 2^n observation vectors."""
    found = []
    dist = params.round_dist
    for mask in range(2**params.n):
        obs = np.array([(mask >> i) & 1 for i in range(params.n)], dtype=np.uint8)
        for r in dist.support:
            atk = attacker.clone()
            atk.reset(child_seed(0, 1))
            tr = execute(params.n, params.t, params.k, np.asarray(profile.per_agent), obs, atk, r)
            if classify(obs, tr.decisions, params.k).kind is OutcomeKind.FALSE_COORDINATION:
                found.append((tuple(int(x) for x in obs), r))
    return found


def success_probability_all_one(n: int, k: int, t: int, lam: int, horizon: int = 10, max_observers: int = 6) -> float:
    """Exact success probability of :class:`EpisodeEnv` against the all-one attacker.

    With all-one attackers every live observer gets ``c + t`` ones each
    round, so a step is Coordinated iff ``c >= k`` and ``c + t >= k + lam``,
    all ``c`` observers act unsafely iff ``0 < c < k`` and ``c + t >= k + lam``
    (and ``c + t >= k``), and otherwise everyone abstains.  The number of live
    observers among ``draw`` random slots is hypergeometric.
    """
    from functools import lru_cache

    @lru_cache(maxsize=None)
    def win(step, alive):
        if step == horizon:
            return 0.0
        total = 0.0
        for draw in range(max_observers + 1):
            for c in range(0, min(draw, alive) + 1):
                weight = math.comb(alive, c) * math.comb(n - alive, draw - c) / math.comb(n, draw)
                if weight == 0:
                    continue
                reach = c + t >= k + lam
                if c >= k and reach:
                    total += weight
                elif 0 < c < k and c + t >= k and reach:
                    total += weight * win(step + 1, alive - c)
                else:
                    total += weight * win(step + 1, alive)
        return total / (max_observers + 1)

    return win(0, n)
