import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_sequential
from reconvene.model import param_counts, validate
from reconvene.pipeline import prune_model
from reconvene.policies import make_plan, plan_inverted, plan_random, plan_spai_all, plan_upai
from reconvene.presets import build_preset
from reconvene.pruner import PruneConfig, magnitude_prune
from reconvene.rectifier import apply_plan
from reconvene.sensitivity import build_plan
from reconvene.serialize import storage_size


def conv_flags(plan):
    return [e.sensitive for e in plan.entries if e.kind == "conv2d"]


@pytest.fixture(scope="module")
def vgg11_sparse():
    return magnitude_prune(build_preset("vgg11-cifar", 0), 0.95)


def test_upai_all_sensitive_and_size_preserving(toy):
    g = magnitude_prune(toy, 0.8)
    plan = plan_upai(g)
    assert all(e.sensitive for e in plan.entries)
    out = apply_plan(g, plan, 0)
    assert param_counts(out) == param_counts(g)
    assert storage_size(toy) / storage_size(out) == 1.0


def test_spai_all_examples(toy):
    assert plan_spai_all(magnitude_prune(toy, 0.0)).is_noop
    plan = plan_spai_all(magnitude_prune(toy, 0.9))
    assert all(not f for f in conv_flags(plan))
    linear = [e for e in plan.entries if e.kind == "linear"]
    assert all(e.sensitive for e in linear)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 0.9, 0.98]))
def test_spai_all_is_smallest(seed, p):
    g = magnitude_prune(random_sequential(np.random.default_rng(seed)), p)
    conv = g.conv_indices()

    def conv_params(plan):
        out = apply_plan(g, plan, 0, reinit=False)
        return sum(out[i].weight.size for i in conv)

    spai, upai, rec = plan_spai_all(g), plan_upai(g), build_plan(g)
    assert conv_params(spai) <= conv_params(rec)
    # lattice: every policy's channel counts lie between the two extremes
    for plan in (rec, plan_inverted(rec), plan_random(g, seed)):
        for lo, mid, hi in zip(spai.entries, plan.entries, upai.entries):
            assert lo.channels_after <= mid.channels_after <= hi.channels_after
        assert validate(apply_plan(g, plan, seed)).ok


def test_inverted_flips(vgg11_sparse):
    plan = build_plan(vgg11_sparse)
    inv = plan_inverted(plan)
    assert conv_flags(inv) == [not f for f in conv_flags(plan)]
    assert conv_flags(plan_inverted(inv)) == conv_flags(plan)
    assert plan_inverted(inv) == plan
    # early layers pruned, deep layers kept at full width
    conv = [e for e in inv.entries if e.kind == "conv2d"]
    assert conv[0].shrinks and not conv[-1].shrinks
    assert conv[-1].channels_after == conv[-1].channels_before


def test_inverted_small_case():
    from fractions import Fraction

    from reconvene.sensitivity import PlanEntry, PrunePlan

    entries = (
        PlanEntry(0, True, 3, 3, n_zero=9, n_total=27),
        PlanEntry(2, False, 4, 1, n_zero=35, n_total=36),
        PlanEntry(4, False, 4, 1, n_zero=36, n_total=36),
    )
    inv = plan_inverted(PrunePlan(Fraction(9, 10), entries))
    assert [(e.sensitive, e.channels_after) for e in inv.entries] == [(False, 2), (True, 4), (True, 4)]


def test_random_reproducible_and_noop_at_p0(vgg11_sparse, toy):
    assert plan_random(vgg11_sparse, 3) == plan_random(vgg11_sparse, 3)
    dense = magnitude_prune(toy, 0.0)
    assert all(plan_random(dense, s).is_noop for s in range(20))


def test_random_matches_expected_count(vgg11_sparse):
    base = conv_flags(build_plan(vgg11_sparse))
    n, k = len(base), sum(base)
    q = k / n
    counts = np.array([sum(conv_flags(plan_random(vgg11_sparse, s))) for s in range(1000)])
    # binomial(n, q) per seed; the mean of 1000 draws has std sqrt(n q (1-q) / 1000)
    sigma = np.sqrt(n * q * (1 - q) / 1000)
    assert abs(counts.mean() - k) <= 3 * sigma


def test_random_coin_mode(vgg11_sparse):
    counts = [sum(conv_flags(plan_random(vgg11_sparse, s, mode="coin"))) for s in range(400)]
    n = len(conv_flags(build_plan(vgg11_sparse)))
    assert abs(np.mean(counts) - n / 2) <= 3 * np.sqrt(n / 4 / 400)
    with pytest.raises(ValueError):
        plan_random(vgg11_sparse, 0, mode="dice")


@pytest.mark.parametrize("policy", ["reconvene", "upai", "spai_all", "inverted", "random"])
def test_every_policy_runs_through_rectifier(policy):
    dense = build_preset("toy4", 4)
    result = prune_model(dense, PruneConfig(0.9, seed=4, policy=policy))
    assert result.plan.policy == policy
    assert validate(result.pruned).ok
    assert make_plan(result.sparse, PruneConfig(0.9, seed=4, policy=policy)) == result.plan
