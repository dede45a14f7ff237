import numpy as np
import pytest
from hypothesis import given, strategies as st

from ibgp import ConfigurationError, OutcomeKind, ProtocolParams, RoundDistribution, ShapeError, classify_outcome, run_protocol
from ibgp.adversary import all_one, random_p
from ibgp.multitarget import (
    MultiTargetInstance,
    PermutationPack,
    ProposalAttack,
    brute_force_select,
    check_selection,
    concentrated_proposals,
    disperse_labels,
    dispersion_envelope,
    dispersion_instance,
    dispersion_runs,
    greedy_select,
    random_instance,
    run_multi_target,
    selection_table,
    summarize_dispersion,
    target_reward,
    targeted_proposals,
)

from oracles import brute_force_selection


def instance(n, thresholds, rewards, availability=None, observations=None, t=0):
    availability = availability or [range(n)] * len(thresholds)
    return MultiTargetInstance(n, t, thresholds, rewards, availability, observations or (0,) * n)


def test_instance_validation():
    with pytest.raises(ConfigurationError):
        instance(3, [4], [1.0])
    with pytest.raises(ConfigurationError):
        instance(3, [1, 1], [1.0])
    with pytest.raises(ShapeError):
        instance(3, [1], [1.0], observations=(0, 1))
    with pytest.raises(ConfigurationError):
        instance(3, [1], [float("nan")])


def test_json_round_trip():
    inst = instance(4, [2, 1], [1.5, 0.5], [[0, 1], [2, 3]], (1, 1, 2, 0), t=1)
    assert MultiTargetInstance.from_json(inst.to_json()) == inst


def test_target_reward_table():
    assert target_reward(5, 5, 3, 5) == 1
    assert target_reward(5, 0, 3, 5) == 0
    assert target_reward(2, 0, 3, 5) == 1
    assert target_reward(2, 2, 3, 5) == 0
    assert target_reward(3, 3, 3, 5) == 1 and target_reward(3, 0, 3, 5) == 1
    assert target_reward(3, 1, 3, 5) == 0


def test_single_target_equals_plain_protocol():
    dist = RoundDistribution.uniform(4)
    obs = (1, 1, 0, 1, 1, 0)
    inst = MultiTargetInstance(6, 2, (3,), (1.0,), (frozenset(range(6)),), obs, dist)
    for seed in range(10):
        res = run_multi_target(inst, random_p(0.5), lam=2, seed=seed)
        tr = run_protocol(ProtocolParams(6, 2, 3, 2, dist), obs, random_p(0.5), seed)
        assert res.r_tot == tr.r_tot
        assert res.outcomes[0] == classify_outcome(tr)


def test_targets_share_one_round_count_and_are_independent():
    inst = instance(6, [2, 2], [1.0, 3.0], observations=(1, 1, 2, 2, 0, 0), t=1)
    # each pair of observers plus the attacker's vote reaches k + lambda = 3
    res = run_multi_target(inst, all_one(), seed=4)
    assert [o.kind for o in res.outcomes] == [OutcomeKind.COORDINATED] * 2
    assert res.obtained_reward == 4.0 and res.table_reward == 2


def test_identity_pack_preserves_everything():
    labels = np.array([[1, 1, 1, 1], [2, 0, 1, 2]])
    assert (disperse_labels(labels, PermutationPack.identity(4)) == labels).all()


@given(st.integers(2, 12), st.integers(1, 9), st.integers(0, 5), st.integers(0, 2**32))
def test_dispersion_preserves_benign_messages(size, q, m, seed):
    rng = np.random.default_rng(seed)
    benign = np.repeat(rng.integers(0, m + 1, size=size)[:, None], size, axis=1)
    pack = PermutationPack.sample(size, q, seed)
    assert (disperse_labels(benign, pack) == benign).all()


@given(st.integers(2, 7), st.integers(1, 7), st.integers(0, 2**32))
def test_dispersion_matches_direct_majority(size, q, seed):
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 3, size=(size, size))
    pack = PermutationPack.sample(size, q, seed)
    out = disperse_labels(labels, pack)
    for i in range(size):
        for r in range(size):
            votes = [int(labels[i, pack.perms[u, r]]) for u in range(q)]
            winners = [v for v in set(votes) if v and 2 * votes.count(v) > q]
            assert out[i, r] == (winners[0] if winners else 0)


def test_pack_rejects_non_permutations():
    with pytest.raises(ConfigurationError):
        PermutationPack(np.array([[0, 0, 1]]))


def test_targeted_attack_is_stopped_by_dispersion():
    inst = dispersion_instance(0)
    attack = ProposalAttack(targeted_proposals, all_one(), name="targeted")
    plain = run_multi_target(inst, attack, lam=1, seed=0)
    defended = run_multi_target(inst, attack, lam=1, seed=0, q=31)
    assert plain.mis_coordinated == 3 * inst.t
    assert defended.mis_coordinated == 0


def test_dispersion_runs_are_reproducible():
    assert dispersion_runs(range(5), seed=2) == dispersion_runs(range(5), seed=2)
    assert dispersion_runs(range(2, 5), seed=2) == dispersion_runs(range(5), seed=2)[2:]


def test_concentrated_proposal_shape():
    inst = dispersion_instance(1)
    rows = concentrated_proposals(inst, np.random.default_rng(0))
    assert rows.shape == (2, 42) and rows.max() <= inst.m


def test_envelope_value_and_check_summary():
    env = dispersion_envelope(12, 2, 40, 3, 31)
    assert env == pytest.approx(9 * 2 * 3 * np.exp(-62 * (1 / 6 - 2 / 42) ** 2))
    check = summarize_dispersion([0, 7, 2], q=31)
    assert check.exceed == 1 and check.limit == 6
    assert check.holding_fraction == pytest.approx(2 / 3)


def test_greedy_takes_highest_reward_first():
    inst = instance(3, [2, 1, 1], [5.0, 1.0, 1.0])
    res = greedy_select(inst)
    assert res.selected == (0, 1) and res.assignment[0] == (0, 1)
    assert check_selection(inst, res) == []


def test_greedy_can_fall_below_one_over_k_max():
    # taking agent 0 for the top target blocks the runner-up, which only agent 0 can serve
    inst = instance(2, [1, 1], [1.0, 0.9], [[0, 1], [0]])
    g, b = greedy_select(inst), brute_force_select(inst)
    assert g.total_reward == 1.0 and b.total_reward == pytest.approx(1.9)
    assert g.total_reward < b.total_reward / inst.k_max
    assert g.total_reward >= b.total_reward / (inst.k_max + 1)


def test_check_selection_flags_problems():
    inst = instance(3, [2], [1.0], [[0, 1]])
    from ibgp.multitarget import SelectionResult

    bad = SelectionResult((0,), {0: (1, 2)}, frozenset({1, 2}), 1.0)
    assert check_selection(inst, bad)


def test_brute_force_budget():
    from ibgp import BudgetExceeded

    inst = instance(2, [1] * 5, [1.0] * 5)
    with pytest.raises(BudgetExceeded):
        brute_force_select(inst, budget=16)


@given(st.integers(0, 2**32))
def test_brute_force_matches_labelling_oracle(seed):
    inst = random_instance(np.random.default_rng(seed), max_m=4, max_n=5, max_k=3)
    best = brute_force_select(inst)
    assert check_selection(inst, best) == []
    oracle = brute_force_selection(inst.n, inst.thresholds, inst.rewards, inst.availability)
    assert best.total_reward == pytest.approx(oracle)


@given(st.integers(0, 2**32))
def test_greedy_is_valid_and_dominated(seed):
    inst = random_instance(np.random.default_rng(seed))
    g, b = greedy_select(inst), brute_force_select(inst)
    assert check_selection(inst, g) == []
    assert g.total_reward <= b.total_reward + 1e-12
    assert g.total_reward >= b.total_reward / (inst.k_max + 1) - 1e-12


def test_selection_table_columns():
    inst = instance(2, [1], [2.0])
    text = selection_table([(inst, greedy_select(inst), brute_force_select(inst))])
    assert text.splitlines() == ["instance,m,n,k_max,greedy_reward,optimal_reward,ratio", "0,1,2,1,2,2,1"]
