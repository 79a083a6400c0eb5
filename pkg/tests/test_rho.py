import numpy as np
import pytest
from scipy import stats

from mipa.rho import RhoPolicy, advance_epoch, next_rho


def test_fixed_constant():
    policy = RhoPolicy.fixed(0.25)
    assert [next_rho(policy) for _ in range(100)] == [0.25] * 100
    assert policy.step == 100


def test_curriculum_schedule():
    policy = RhoPolicy.curriculum(0.25, 8, rng_seed=4)
    for epoch in range(8):
        assert [policy.next_rho() for _ in range(5)] == [0.25] * 5
        advance_epoch(policy)
    after = [policy.next_rho() for _ in range(50)]
    assert all(0.0 <= r < 1.0 for r in after)
    assert len(set(after)) == 50


def test_curriculum_replays_variable_after_warmup():
    cur = RhoPolicy.curriculum(0.25, 3, rng_seed=7)
    var = RhoPolicy.variable(rng_seed=7)
    for _ in range(3):
        [cur.next_rho() for _ in range(10)]
        cur.advance_epoch()
    np.testing.assert_array_equal([cur.next_rho() for _ in range(200)],
                                  [var.next_rho() for _ in range(200)])


def test_variable_matches_uniform():
    policy = RhoPolicy.variable(rng_seed=0)
    draws = np.array([policy.next_rho() for _ in range(10_000)])
    assert stats.kstest(draws, "uniform").pvalue > 0.01
    assert 0.48 <= draws.mean() <= 0.52
    assert abs(draws.var() - 1 / 12) <= 0.005


def test_replay_bitwise():
    a = RhoPolicy.variable(rng_seed=123)
    b = RhoPolicy.variable(rng_seed=123)
    assert [a.next_rho() for _ in range(1000)] == [b.next_rho() for _ in range(1000)]


def test_advance_epoch():
    policy = RhoPolicy.variable()
    policy.next_rho()
    assert advance_epoch(policy).epoch == 1
    assert policy.step == 1
    for _ in range(11):
        advance_epoch(policy)
    assert policy.epoch == 12


def test_warmup_boundary_flips_on_next_draw():
    policy = RhoPolicy.curriculum(0.25, 8)
    policy.epoch = 7
    assert policy.next_rho() == 0.25
    policy.advance_epoch()
    assert policy.next_rho() != 0.25


@pytest.mark.parametrize("kwargs", [
    {"kind": "nope"}, {"kind": "fixed", "fixed_value": 1.5},
    {"kind": "curriculum", "warmup_epochs": -1}, {"kind": "curriculum", "warmup_value": -0.1}])
def test_invalid_policies(kwargs):
    with pytest.raises(ValueError):
        RhoPolicy(**kwargs)


def test_dict_round_trip():
    for policy in (RhoPolicy.fixed(0.75), RhoPolicy.curriculum(0.25, 4), RhoPolicy.variable()):
        clone = RhoPolicy.from_dict(policy.to_dict())
        assert clone.to_dict() == policy.to_dict()
        assert clone.label() == policy.label()
