import math
import statistics

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import make_record
from gradcheck import PROMPT, V, finite_difference, max_relative_error, random_instance, random_policy
from groupreplay.buffer import SampleRecord
from groupreplay.optimizer import (
    AdvantageParams,
    DegenerateGroupError,
    Member,
    ObjectiveParams,
    StdMode,
    add_gradients,
    apply_update,
    gradient_norm,
    group_advantages,
    kl_divergence,
    objective_gradient,
    surrogate_objective,
)
from groupreplay.toy_env import TabularPolicy


def oracle_advantages(rewards, alpha, lam):
    mean = math.fsum(rewards) / len(rewards)
    std = statistics.pstdev(rewards)
    return [(r - mean) / (alpha * std + lam) for r in rewards]


# -- advantages ---------------------------------------------------------------


def test_advantage_example_eq1():
    adv = group_advantages([1, 0, 0, 0], AdvantageParams(alpha=1, lam=0)).advantages
    assert adv == pytest.approx([1.732051, -0.577350, -0.577350, -0.577350], abs=1e-6)


def test_all_equal_rewards_exact_zero():
    out = group_advantages([1, 1, 1, 1], AdvantageParams(lam=1e-4))
    assert out.advantages == (0.0, 0.0, 0.0, 0.0)
    out = group_advantages([0.1] * 7, AdvantageParams(lam=1e-4))
    assert all(a == 0.0 for a in out.advantages)


def test_alpha_halves_advantages():
    a1 = group_advantages([1, 0, 0, 0], AdvantageParams(alpha=1, lam=0)).advantages
    a2 = group_advantages([1, 0, 0, 0], AdvantageParams(alpha=2, lam=0)).advantages
    assert a2 == pytest.approx([x / 2 for x in a1], rel=1e-15)


def test_degenerate_group_error():
    with pytest.raises(DegenerateGroupError):
        group_advantages([0.5, 0.5], AdvantageParams(alpha=1, lam=0))


def test_sample_std_mode():
    r = [1.0, 0.0, 0.0]
    out = group_advantages(r, AdvantageParams(alpha=1, lam=0, std_mode=StdMode.SAMPLE))
    sd = statistics.stdev(r)
    assert out.advantages == pytest.approx([(x - 1 / 3) / sd for x in r])
    assert out.group_std == pytest.approx(sd)


@pytest.mark.parametrize("kwargs", [dict(alpha=0), dict(alpha=-1), dict(lam=-1e-3)])
def test_advantage_params_validation(kwargs):
    with pytest.raises(ValueError):
        AdvantageParams(**kwargs)


def test_advantages_reject_empty():
    with pytest.raises(ValueError):
        group_advantages([])


rewards_st = st.lists(st.floats(-3, 3, allow_nan=False), min_size=2, max_size=12)


@given(rewards_st, st.floats(0.5, 3), st.floats(1e-6, 1e-2))
def test_advantages_match_oracle(rewards, alpha, lam):
    got = group_advantages(rewards, AdvantageParams(alpha=alpha, lam=lam))
    want = oracle_advantages(rewards, alpha, lam)
    assert got.advantages == pytest.approx(want, rel=1e-9, abs=1e-9)


@given(rewards_st, st.floats(-5, 5))
def test_shift_invariance(rewards, c):
    p = AdvantageParams(alpha=1.5, lam=1e-4)
    a = group_advantages(rewards, p).advantages
    b = group_advantages([r + c for r in rewards], p).advantages
    assert b == pytest.approx(a, rel=1e-6, abs=1e-6)


@given(rewards_st, st.floats(0.1, 10))
def test_scale_invariance_without_lambda(rewards, c):
    if statistics.pstdev(rewards) < 1e-3:
        return
    p = AdvantageParams(alpha=1.0, lam=0.0)
    a = group_advantages(rewards, p).advantages
    b = group_advantages([r * c for r in rewards], p).advantages
    assert b == pytest.approx(a, rel=1e-7, abs=1e-7)


@given(rewards_st)
def test_lambda_shrinks_advantages(rewards):
    sizes = [
        sum(abs(a) for a in group_advantages(rewards, AdvantageParams(alpha=1, lam=lam)).advantages)
        for lam in (1e-3, 1e-1, 1.0, 10.0)
    ]
    assert all(x >= y for x, y in zip(sizes, sizes[1:]))


# -- objective ---------------------------------------------------------------


def single_token_member(pol, tok, ratio, adv):
    key = pol.context_key("u", PROMPT)
    blp = pol.log_prob(key, tok) - math.log(ratio)
    rec = SampleRecord("u", (tok,), (blp,), (0.5,), 0.0, False, 1)
    return Member(rec, adv, PROMPT)


def test_objective_identity_policies(rng):
    pol = random_policy(rng)
    members = []
    advs = [0.7, -1.2, 0.3]
    for a in advs:
        resp = tuple(int(t) for t in rng.integers(0, V, 3))
        keys = pol.context_keys("u", PROMPT, resp)
        blps = [pol.log_prob(k, t) for k, t in zip(keys, resp)]
        members.append(Member(SampleRecord("u", resp, blps, (0.1,) * 3, 0.0, False, 1), a, PROMPT))
    j = surrogate_objective(pol, members, pol.copy(), ObjectiveParams(beta=0.3))
    assert j == pytest.approx(statistics.mean(advs), rel=1e-12)


def test_objective_zero_advantage_is_kl_only(rng):
    pol, ref = random_policy(rng), random_policy(rng)
    resp = (1, 2)
    keys = pol.context_keys("u", PROMPT, resp)
    rec = SampleRecord("u", resp, [pol.log_prob(k, t) for k, t in zip(keys, resp)], (0.1, 0.1), 0.0, False, 1)
    beta = 0.4
    j = surrogate_objective(pol, [Member(rec, 0.0, PROMPT)], ref, ObjectiveParams(beta=beta))
    kl = statistics.mean(kl_divergence(pol.log_distribution(k), ref.log_distribution(k)) for k in keys)
    assert j == pytest.approx(-beta * kl, rel=1e-12)


def test_objective_clip_binds_example(rng):
    pol = random_policy(rng)
    m = single_token_member(pol, 2, 1.5, 1.0)
    assert surrogate_objective(pol, [m], pol, ObjectiveParams(epsilon=0.2)) == pytest.approx(1.2)


def test_objective_negative_advantage_clip(rng):
    pol = random_policy(rng)
    # A < 0, r = 0.5: min(-0.5, -0.8) = -0.8 (clip binds, gradient zero)
    m = single_token_member(pol, 2, 0.5, -1.0)
    assert surrogate_objective(pol, [m], pol) == pytest.approx(-0.8)
    assert objective_gradient(pol, [m], pol) == {}
    # A < 0, r = 1.5: min(-1.5, -1.2) = -1.5 (unclipped)
    m = single_token_member(pol, 2, 1.5, -1.0)
    assert surrogate_objective(pol, [m], pol) == pytest.approx(-1.5)
    assert gradient_norm(objective_gradient(pol, [m], pol)) > 0


def test_objective_length_mismatch(rng):
    pol = random_policy(rng)
    rec = SampleRecord("u", (1, 2), (-0.1,), (0.1, 0.1), 0.0, False, 1)
    with pytest.raises(ValueError):
        surrogate_objective(pol, [Member(rec, 1.0, PROMPT)], pol)
    with pytest.raises(ValueError):
        objective_gradient(pol, [Member(rec, 1.0, PROMPT)], pol)


def test_kl_inside_clip_differs_from_standard(rng):
    pol = random_policy(rng)
    ref = pol.copy()
    key0 = pol.context_key("u", PROMPT)
    ref.set_row(key0, pol.row(key0) + 0.3 * rng.standard_normal(V))
    beta = 0.5
    key = pol.context_key("u", PROMPT)
    kl = kl_divergence(pol.log_distribution(key), ref.log_distribution(key))
    assert 0 < beta * kl < 0.3
    # clipped branch wins under A > 0: both forms agree
    m = single_token_member(pol, 1, 1.5, 1.0)
    std = surrogate_objective(pol, [m], ref, ObjectiveParams(beta=beta))
    lit = surrogate_objective(pol, [m], ref, ObjectiveParams(beta=beta, kl_inside_clip=True))
    assert std == pytest.approx(lit) == pytest.approx(1.2 - beta * kl)
    # A < 0, r = 1.5: the unclipped arm wins and the literal form drops the penalty
    m = single_token_member(pol, 1, 1.5, -1.0)
    std = surrogate_objective(pol, [m], ref, ObjectiveParams(beta=beta))
    lit = surrogate_objective(pol, [m], ref, ObjectiveParams(beta=beta, kl_inside_clip=True))
    assert std == pytest.approx(-1.5 - beta * kl)
    assert lit == pytest.approx(-1.5)


@given(st.integers(0, 10_000))
def test_clip_inert_inside_range(seed):
    rng = np.random.default_rng(seed)
    pol, ref, members, _ = random_instance(rng, "unclipped")
    wide = ObjectiveParams(epsilon=0.99)
    narrow = ObjectiveParams(epsilon=0.2)
    assert surrogate_objective(pol, members, ref, narrow) == pytest.approx(
        surrogate_objective(pol, members, ref, wide), rel=1e-12
    )


# -- gradients -------------------------------------------------------------


@pytest.mark.parametrize("case", ["unclipped", "clipped", "replayed", "kl", "kl_inside"])
def test_gradient_matches_finite_differences(case):
    rng = np.random.default_rng(hash(case) % 2**32)
    for _ in range(5):
        pol, ref, members, params = random_instance(rng, case)
        g = objective_gradient(pol, members, ref, params)
        fd = finite_difference(pol, ref, members, params)
        assert max_relative_error(g, fd) < 1e-5


def test_zero_advantage_zero_gradient(rng):
    pol = random_policy(rng)
    m = single_token_member(pol, 3, 1.0, 0.0)
    assert objective_gradient(pol, [m, m], pol, ObjectiveParams(beta=0.0)) == {}


def test_kl_gradient_vanishes_at_reference(rng):
    pol = random_policy(rng)
    m = single_token_member(pol, 3, 1.0, 0.0)
    g = objective_gradient(pol, [m], pol.copy(), ObjectiveParams(beta=0.7))
    assert gradient_norm(g) < 1e-15


def test_gradient_sums_to_zero_per_row(rng):
    # softmax logits are shift-invariant
    pol, ref, members, params = random_instance(rng, "kl")
    for g in objective_gradient(pol, members, ref, params).values():
        assert abs(g.sum()) < 1e-12


# -- updates -----------------------------------------------------------------


def test_apply_update_single_parameter():
    pol = TabularPolicy(4, 1)
    key = ("u", (7,))
    before = pol.row(key).copy()
    apply_update(pol, {key: np.array([0.0, 2.0, 0.0, 0.0])}, lr=0.1)
    assert pol.row(key) - before == pytest.approx([0.0, 0.2, 0.0, 0.0])


def test_apply_update_zero_gradient(rng):
    pol = random_policy(rng)
    snap = {k: v.copy() for k, v in pol.logits.items()}
    apply_update(pol, {}, lr=1.0)
    apply_update(pol, {k: np.zeros(V) for k in snap}, lr=1.0)
    assert all(np.array_equal(pol.logits[k], v) for k, v in snap.items())


def test_apply_update_rejects_bad_lr(rng):
    with pytest.raises(ValueError):
        apply_update(random_policy(rng), {}, lr=0.0)


def test_sequential_updates_do_not_commute_with_summed_step(rng):
    pol, ref, members, params = random_instance(rng, "replayed")
    g1 = objective_gradient(pol, members, ref, params)
    two_step = pol.copy()
    apply_update(two_step, g1, 0.5)
    g2 = objective_gradient(two_step, members, ref, params)
    apply_update(two_step, g2, 0.5)
    one_step = pol.copy()
    apply_update(one_step, add_gradients(dict(g1), g1), 0.5)
    diff = max(float(np.max(np.abs(two_step.row(k) - one_step.row(k)))) for k in g1)
    assert diff > 1e-6


def test_add_gradients_does_not_alias():
    a = {"k": np.ones(2)}
    total = add_gradients({}, a)
    add_gradients(total, a)
    assert np.array_equal(a["k"], np.ones(2))
    assert np.array_equal(total["k"], 2 * np.ones(2))


def test_degenerate_group_gradient_exactly_zero(rng):
    pol = random_policy(rng)
    recs = [make_record("u", 0.0, response=(1, 2)) for _ in range(4)]
    adv = group_advantages([r.reward for r in recs], AdvantageParams(alpha=1.0, lam=1e-4))
    members = [Member(r, a, PROMPT) for r, a in zip(recs, adv.advantages)]
    assert objective_gradient(pol, members, pol, ObjectiveParams(beta=0.0)) == {}
