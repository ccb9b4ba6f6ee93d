import numpy as np
import pytest

from hdsa import GsvdConfig, randomized_gsvd
from hdsa.discrepancy import Kron2Mat
from hdsa.gsvd import b_apply
from hdsa.oracle import MAX_P, appendix_identities, dense_mtheta, probe, random_instance, reopt_check, run_checks, small_context


def test_size_caps():
    rng = np.random.default_rng(0)
    with pytest.raises(MemoryError):
        random_instance(rng, 10, 5)
    inst = random_instance(rng, 6, 5)
    assert inst.m * (inst.n + 1) <= MAX_P
    with pytest.raises(MemoryError):
        probe(lambda y: y, 8, 8)


def test_run_checks_pass():
    results = run_checks(seed=3, repetitions=5)
    failed = [k for k, (ok, _) in results.items() if not ok]
    assert not failed
    for i in range(1, 5):
        assert f"identity_{i}" in results


def test_x_sign_mutation_is_caught():
    results = run_checks(seed=0, repetitions=3, mutate_x_sign=True)
    assert not results["closed_form_inverse"][0]
    assert not results["identity_1"][0]
    assert not results["identity_3"][0]


def test_identities_reject_wrong_x():
    inst = random_instance(np.random.default_rng(1), 3, 4)
    good = appendix_identities(inst)
    assert max(good.values()) < 1e-12
    bad = appendix_identities(inst, x=np.zeros(4))
    assert bad["identity_1"] > 1e-3


def test_reopt_zero_theta():
    ctx = small_context(4)
    theta = Kron2Mat.zeros(ctx.m, ctx.n)
    rep = reopt_check(ctx.problem, ctx.opt, theta, np.zeros(ctx.n))
    # re-optimizing the unperturbed problem moves z-bar only by roundoff
    scale = np.linalg.norm(ctx.opt.z)
    assert all(r["remainder"] <= 1e-13 * scale for r in rep["rows"])


def test_reopt_leading_mode_order():
    ctx = small_context(6)
    res = randomized_gsvd(ctx, GsvdConfig(2, 2, 2, seed=0))
    th = res.theta.column(0)
    shift = -ctx.hinv(b_apply(ctx, th))[:, 0]
    rep = reopt_check(ctx.problem, ctx.opt, th, shift, eps=(0.2, 0.1, 0.05))
    assert rep["sign_consistent"]
    assert all(1.6 <= r <= 2.4 for r in rep["ratios"]), rep["ratios"]
    assert 1.6 <= rep["order"] <= 2.4
