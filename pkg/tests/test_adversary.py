import numpy as np
import pytest

from ibgp import ConfigurationError, OutcomeKind, ProtocolParams, RoundDistribution
from ibgp.adversary import (
    FunctionAttacker,
    all_one,
    all_one_all_zero,
    all_zero,
    attack_distance,
    best_response_search,
    delivered_counts,
    from_config,
    instance_space,
    random_p,
)
from ibgp.protocol import child_seed, execute
from ibgp.sampling import CountObservations, monte_carlo_estimate, wilson_half_width


def test_constant_rows():
    assert all_one().rows(0, (), 3, 2).tolist() == [[1] * 5, [1] * 5]
    assert all_zero().rows(3, (), 3, 1).sum() == 0


def test_split_sends_ones_to_first_half():
    assert all_one_all_zero().rows(0, (), 5, 1).tolist() == [[1, 1, 1, 0, 0, 0]]
    assert all_one_all_zero([4]).rows(0, (), 5, 1).tolist() == [[0, 0, 0, 0, 1, 0]]


def test_random_attacker_reset_is_repeatable():
    a = random_p(0.3)
    a.reset(child_seed(5))
    first = [a.rows(r, (), 6, 2) for r in range(4)]
    a.reset(child_seed(5))
    assert all((x == a.rows(r, (), 6, 2)).all() for r, x in enumerate(first))


def test_random_attacker_rejects_bad_p():
    with pytest.raises(ConfigurationError):
        random_p(1.5)


def test_from_config():
    assert from_config({"name": "all_one"}).name == "all_one"
    assert from_config({"name": "random_p", "p": 0.2}).p == 0.2
    seq = from_config({"name": "fixed_sequence", "rounds": [[[1, 0, 1]]]})
    assert seq.rows(0, (), 2, 1).tolist() == [[1, 0, 1]]
    with pytest.raises(ConfigurationError):
        from_config({"name": "nope"})


def test_history_dependent_attacker_sees_messages():
    # echoes back, in round r, whatever agent 0 sent in round r-1
    def echo(r, history, n, t):
        bit = 1 if r == 0 else int(history[-1].bits[0, 0])
        return np.full((t, n + t), bit)

    tr = execute(4, 1, 2, 1, [1, 0, 0, 0], FunctionAttacker(echo), 2)
    assert tr.rounds[1].bits[4].tolist() == [1] * 5
    assert tr.rounds[2].bits[4].tolist() == [0] * 5


def test_attack_distance_between_constants():
    p = ProtocolParams(5, 2, 2)
    space = instance_space(p)
    assert attack_distance(all_one(), all_zero(), space) == 2
    assert attack_distance(all_one(), all_one(), space) == 0
    assert attack_distance(all_one(), all_one_all_zero(), space) == 0


def test_delivered_counts_shape():
    p = ProtocolParams(4, 1, 2)
    env = instance_space(p, r_tot=2)[2]
    counts = delivered_counts(all_one(), env)
    assert counts.shape == (3, 4) and (counts == 1).all()


def test_best_response_prefers_the_damaging_attacker():
    p = ProtocolParams(5, 1, 3, round_dist=RoundDistribution.uniform(3))
    res = best_response_search(p, [1, 1, 1, 0, 0], [all_zero(), all_one_all_zero([0, 1])], trials=300, seed=1)
    assert res.strategy.name == "all_one_all_zero"
    # agents 0 and 1 stay active, then act as a pair of two whenever r_tot = 1
    assert abs(res.estimate - 1 / 3) < 0.08


def test_best_response_tie_goes_to_first():
    p = ProtocolParams(5, 1, 3)
    res = best_response_search(p, [0] * 5, [all_zero(), all_one()], trials=20)
    assert res.strategy.name == "all_zero" and res.estimate == 0


def test_monte_carlo_partition_independence():
    from collections import Counter

    from ibgp.sampling import outcome_counts, summarize

    p = ProtocolParams(5, 1, 3)
    obs = CountObservations(5, range(6))
    whole = monte_carlo_estimate(p, obs, random_p(0.5), 400, seed=3)
    parts = outcome_counts(p, obs, random_p(0.5), range(0, 150), 3) + outcome_counts(p, obs, random_p(0.5), range(150, 400), 3)
    assert summarize(Counter(parts), 400).counts == whole.counts


def test_monte_carlo_unsafe_rate_matches_exact_value():
    # three observers, extra vote to agents 0 and 1: unsafe exactly when r_tot = 1
    p = ProtocolParams(5, 1, 3, round_dist=RoundDistribution.uniform(3))
    res = monte_carlo_estimate(p, [1, 1, 1, 0, 0], all_one_all_zero([0, 1]), 6000, seed=2)
    assert abs(res.unsafe_rate - 1 / 3) <= 3 * res.unsafe_half_width
    assert res.counts[OutcomeKind.MIS_COORDINATION] == res.trials - res.counts[OutcomeKind.ALL_ABSTAIN]


def test_wilson_half_width_shrinks():
    assert wilson_half_width(50, 100) > wilson_half_width(5000, 10000) > 0
    assert wilson_half_width(0, 1000) > 0


def test_count_observations_respects_counts():
    src = CountObservations(6, [2])
    rng = np.random.default_rng(0)
    assert all(src(rng).sum() == 2 for _ in range(50))
    with pytest.raises(ConfigurationError):
        CountObservations(3, [4])
