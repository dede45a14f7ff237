"""Acceptance criteria 1-9, each printing one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the lines appear even when
output capture is on.
"""

import csv
import io
import json
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ibgp import OutcomeKind, ProtocolParams, RoundDistribution, classify_outcome, run_protocol
from ibgp.adaptive import EpisodeEnv, lambda_sweep
from ibgp.adversary import SequenceAttacker, all_one, all_one_all_zero, all_zero, random_p
from ibgp.cli import main
from ibgp.multitarget import PermutationPack, disperse_labels, dispersion_runs, summarize_dispersion
from ibgp.protocol import classify, single_round_rule
from ibgp.sensor import (
    DEFAULT_HORIZON,
    attacker_family,
    counterexample_attacker,
    counterexample_trajectory,
    counterexample_world,
    default_trajectory,
    default_world,
    simulate,
    small_trajectory,
    small_world,
)
from ibgp.verifier import exhaustive_verify, single_round_witnesses

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


@pytest.fixture
def report(capsys):
    def emit(criterion, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail

    return emit


# 1 -------------------------------------------------------------------------

DISTRIBUTIONS = [
    RoundDistribution.uniform(1),
    RoundDistribution.uniform(2),
    RoundDistribution.uniform(3),
    RoundDistribution.from_mapping({1: Fraction(1, 2), 2: Fraction(1, 4), 3: Fraction(1, 4)}),
    RoundDistribution.from_mapping({1: Fraction(1, 4), 2: Fraction(1, 2), 3: Fraction(1, 4)}),
    RoundDistribution.from_mapping({2: Fraction(1, 3), 3: Fraction(2, 3)}),
]


def test_criterion_1_exact_bound(report):
    ref = exhaustive_verify(ProtocolParams(5, 1, 3, 1, RoundDistribution.uniform(3)))
    exact = ref.worst_probability == Fraction(1, 3)
    checked, broken = 0, []
    for n in range(1, 7):
        for t in range(0, 3):
            for k in range(1, n - t + 1):
                for dist in DISTRIBUTIONS:
                    rep = exhaustive_verify(ProtocolParams(n, t, k, t, dist))
                    checked += 1
                    if rep.worst_probability > dist.max_probability():
                        broken.append((n, t, k, dist.to_json()))
    report(1, exact and not broken,
           f"reference worst={ref.worst_probability} (want 1/3); {checked} instances, {len(broken)} above max_r p(r)")


# 2 -------------------------------------------------------------------------


def test_criterion_2_diagram(report, tmp_path):
    out = tmp_path / "diagram"
    code = main(["diagram", "--scenario", str(SCENARIOS / "diagram.json"), "--out", str(out)])
    rows = list(csv.DictReader(io.StringIO((out / "diagram.csv").read_text())))
    cells = {}
    for row in rows:
        if row["outcome"] == "MisCoordination":
            cells.setdefault(row["attack_family"], []).append(int(row["r_tot"]))
    families = sorted({row["attack_family"] for row in rows})
    ok = code == 0 and len(families) == 4 and all(len(cells.get(f, [])) == 1 for f in families)
    ok = ok and {int(r["r_tot"]) for r in rows} == {1, 2, 3}
    report(2, ok, f"MisCoordination cells per family: {dict(sorted(cells.items()))}")


# 3 -------------------------------------------------------------------------


def test_criterion_3_single_round(report):
    found = single_round_witnesses(5, 1, 3, range(1, 7))
    mis = {lam: w is not None and 0 < w[2].acting_count < 3 for lam, w in found.items()}
    specific = True
    for lam_sr, observers in ((4, 3), (5, 4)):
        obs = [1] * observers + [0] * (5 - observers)
        block = np.zeros((1, 6), dtype=np.uint8)
        block[0, 0] = 1
        out = classify(obs, single_round_rule(obs, block, lam_sr), 3)
        specific &= out.kind is OutcomeKind.MIS_COORDINATION
    report(3, all(mis.values()) and specific,
           f"witness with 0<acting<k for thresholds {sorted(k for k, v in mis.items() if v)}; split constructions at 4 and 5: {specific}")


# 4 -------------------------------------------------------------------------

small = st.integers(1, 7).flatmap(
    lambda n: st.tuples(st.just(n), st.integers(0, 3), st.integers(1, n), st.integers(1, 5), st.integers(0, 2**32))
)
CASE1 = {"runs": 0, "violations": 0}
CASE2 = {"runs": 0, "violations": 0}


@settings(max_examples=10_000, deadline=None, derandomize=True, database=None)
@given(small, st.floats(0, 1), st.booleans(), st.data())
def _all_ones_coordinate(inst, p, use_sequence, data):
    n, t, k, r_max, seed = inst
    if n < k + t:
        t = n - k
    params = ProtocolParams(n, t, k, t, RoundDistribution.uniform(r_max))
    atk = random_p(p) if not use_sequence else SequenceAttacker(
        data.draw(st.lists(st.lists(st.lists(st.integers(0, 1), min_size=n + t, max_size=n + t), min_size=t, max_size=t),
                           min_size=r_max + 1, max_size=r_max + 1)))
    tr = run_protocol(params, [1] * n, atk, seed)
    CASE1["runs"] += 1
    if classify_outcome(tr).kind is not OutcomeKind.COORDINATED:
        CASE1["violations"] += 1


@settings(max_examples=10_000, deadline=None, derandomize=True, database=None)
@given(small, st.floats(0, 1), st.data())
def _few_observers_abstain(inst, p, data):
    n, t, k, r_max, seed = inst
    lam = data.draw(st.integers(t, t + 2))
    c = data.draw(st.integers(0, k - 1))
    obs = [1] * c + [0] * (n - c)
    params = ProtocolParams(n, t, k, lam, RoundDistribution.uniform(r_max))
    from ibgp.protocol import execute, sample_round_count, child_seed

    atk = random_p(p)
    atk.reset(child_seed(seed, 1))
    tr = execute(n, t, k, lam, obs, atk, sample_round_count(params.round_dist, child_seed(seed, 0)))
    CASE2["runs"] += 1
    if classify_outcome(tr).kind is not OutcomeKind.ALL_ABSTAIN:
        CASE2["violations"] += 1


def test_criterion_4_consistency_and_case1_safety(report):
    _all_ones_coordinate()
    _few_observers_abstain()
    ok = CASE1["runs"] >= 10_000 and CASE2["runs"] >= 10_000 and not CASE1["violations"] and not CASE2["violations"]
    report(4, ok, f"all-ones: {CASE1['violations']} violations in {CASE1['runs']}; "
                  f"#(M^0=1)<k: {CASE2['violations']} violations in {CASE2['runs']}")


# 5 -------------------------------------------------------------------------


def test_criterion_5_greedy(report, tmp_path):
    out = tmp_path / "select"
    code = main(["select", "--scenario", str(SCENARIOS / "select_pack.json"), "--out", str(out)])
    summary = json.loads((out / "summary.json").read_text())
    rows = list(csv.DictReader(io.StringIO((out / "selection.csv").read_text())))
    below = sum(float(r["greedy_reward"]) * int(r["k_max"]) < float(r["optimal_reward"]) - 1e-9 for r in rows)
    big = all(int(r["m"]) <= 8 and int(r["n"]) <= 12 for r in rows)
    ok = code == 0 and len(rows) == 200 and big and below == 0 and not summary["invariant_violations"]
    report(5, ok, f"{len(rows)} instances, {below} below optimal/k_max, "
                  f"{len(summary['invariant_violations'])} invariant violations, min ratio {summary['min_ratio']}")


# 6 -------------------------------------------------------------------------


@settings(max_examples=500, deadline=None, derandomize=True, database=None)
@given(st.integers(2, 50), st.integers(1, 41), st.integers(0, 12), st.integers(0, 2**32))
def _benign_preserved(size, q, m, seed):
    rng = np.random.default_rng(seed)
    benign = np.repeat(rng.integers(0, m + 1, size=size)[:, None], size, axis=1)
    assert (disperse_labels(benign, PermutationPack.sample(size, q, seed)) == benign).all()


def test_criterion_6_dispersion(report):
    _benign_preserved()
    check = summarize_dispersion(dispersion_runs(range(10_000), seed=0, q=31, lam=1), q=31, lam=1)
    ok = check.holding_fraction >= check.required_fraction
    report(6, ok, f"benign rows preserved on 500 packs; {check.exceed}/{check.runs} runs above 3t/lambda={check.limit:g}, "
                  f"holding {check.holding_fraction:.4f} >= required {check.required_fraction:.4g} (envelope {check.envelope:.4g})")


# 7 -------------------------------------------------------------------------


def test_criterion_7_lambda_orderings(report):
    attackers = [("all_one", all_one()), ("all_zero", all_zero()), ("all_one_all_zero", all_one_all_zero())]
    lines, ok = [], True
    best = {}
    for n in (6, 10):
        res = lambda_sweep(EpisodeEnv(n, 4, 2), attackers, [0, 1, 2], trials=10_000, seed=0)
        ones = [res.value("all_one", p) for p in res.profiles]
        zeros = [res.value("all_zero", p) for p in res.profiles]
        inc = all(a <= b for a, b in zip(ones, ones[1:]))
        dec = all(a >= b for a, b in zip(zeros, zeros[1:]))
        best[n] = res.best_worst_case()
        worst = [round(res.worst_case(p), 4) for p in res.profiles]
        lines.append(f"n={n}: all-1 {[round(x, 4) for x in ones]} increasing={inc}, all-0 {[round(x, 4) for x in zeros]} "
                     f"decreasing={dec}, worst-case {worst} best {best[n]}")
        ok &= inc and dec
    shift = best[6] == "lambda=2" and best[10] == "lambda=1"
    report(7, ok and shift, "; ".join(lines) + f"; optimum shift 2->1: {shift}")


# 8 -------------------------------------------------------------------------


def test_criterion_8_sensor(report):
    world, traj = default_world(), default_trajectory()
    pre = world.precondition_problems(traj, DEFAULT_HORIZON)
    res = simulate(world, traj, DEFAULT_HORIZON)
    first = res.first_contact()
    after = res.steps[first:] if first is not None else ()
    exact = bool(after) and all(s.belief_std == 0 and s.belief_mean == s.discretized_signal for s in after)
    vanilla = simulate(counterexample_world(), counterexample_trajectory(), 5, counterexample_attacker(), mode="vanilla")
    broken = sum(not s.consistent for s in vanilla.steps)
    family_bad = 0
    for atk in attacker_family(small_world()):
        run = simulate(small_world(), small_trajectory(), 2, atk)
        family_bad += sum(1 for s in run.steps if s.known and not (s.consistent and s.belief_std == 0))
    ok = not pre and exact and broken >= 1 and family_bad == 0
    report(8, ok, f"default world: {len(after)} steps exact (std 0, mean = grid signal) = {exact}; "
                  f"vanilla counterexample inconsistent steps {broken}; 8192 attacker patterns, {family_bad} inconsistent steps")


# 9 -------------------------------------------------------------------------

RUNS = [
    ("verify", "verify_reference.json", []),
    ("verify", "verify_monte_carlo.json", ["--trials", "2000", "--jobs", "2"]),
    ("simulate", "simulate.json", []),
    ("diagram", "diagram.json", []),
    ("sweep", "sweep_n6.json", ["--trials", "300"]),
    ("multi-target", "multi_target.json", []),
    ("multi-target", "dispersion.json", ["--trials", "200"]),
    ("select", "select_pack.json", []),
    ("sensor", "sensor_consensus.json", []),
    ("sensor", "sensor_vanilla.json", []),
]


def test_criterion_9_determinism(report, tmp_path):
    mismatched = []
    for idx, (cmd, scenario, extra) in enumerate(RUNS):
        digests = []
        for rep in (0, 1):
            out = tmp_path / f"{idx}_{rep}"
            code = main([cmd, "--scenario", str(SCENARIOS / scenario), "--out", str(out), "--seed", "42", *extra])
            files = {p.name: p.read_bytes() for p in sorted(out.iterdir()) if p.name != "manifest.json"}
            manifest = json.loads((out / "manifest.json").read_text())
            digests.append((code, files, manifest["outputs"], manifest["scenario_sha256"]))
        if digests[0] != digests[1]:
            mismatched.append(f"{cmd}:{scenario}")
    report(9, not mismatched, f"{len(RUNS)} command runs repeated, byte-identical outputs; mismatches {mismatched}")
