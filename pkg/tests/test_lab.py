import hashlib
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rainbow_rf.config import ScenarioError, fig1_scenario, scenario_from_dict
from rainbow_rf.lab import (
    RidgeError,
    derive_seed,
    empirical_gen_error_analytic,
    joint_gaussian_root,
    prepare_instance,
    resolvent_functional_mc,
    ridge_fit,
    run_replicates,
    sample_joint_gaussian_features,
    sample_network_pair,
)
from rainbow_rf.linearization import CovarianceTriple

from conftest import small_dict


def test_derive_seed_is_blake2b():
    digest = hashlib.blake2b(b"7:3:data", digest_size=8).digest()
    assert derive_seed(7, 3, "data") == int.from_bytes(digest, "little")
    assert derive_seed(7, 3, "data") != derive_seed(7, 3, "noise")
    assert derive_seed(7, 3, "data") != derive_seed(7, 4, "data")


def test_tied_and_mixed_weights():
    sc = fig1_scenario(0.5, dim=30)
    pair = sample_network_pair(sc, seed=1)
    w = pair.student.weights
    assert w[1] is w[0]
    assert pair.provenance["student"] == ["mixed:teacher1", "tied:1", "function:inv_gram_plus_half:1"]
    c_teacher = pair.teacher.row_covs[0]
    assert np.allclose(pair.cross_covs[1], 0.5 * c_teacher, atol=1e-14)


def test_caption_variant_cross_covariance():
    pair = sample_network_pair(fig1_scenario(0.5, dim=30, variant="caption"), seed=1)
    assert np.allclose(pair.cross_covs[1], 0.5 * np.eye(30), atol=1e-10)


def test_same_seed_same_network():
    sc = fig1_scenario(0.2, dim=20)
    a, b = sample_network_pair(sc, 5), sample_network_pair(sc, 5)
    assert all(np.array_equal(x, y) for x, y in zip(a.student.weights, b.student.weights))
    assert np.array_equal(a.theta, b.theta)
    c = sample_network_pair(sc, 5, replicate=1)
    assert not np.array_equal(a.theta, c.theta)


def test_runtime_budget_violation():
    data = small_dict()
    data["teacher"]["layers"][0]["weight_rule"]["cov"] = {"kind": "power_law", "exponent": 2.0}
    data["student"]["layers"][0]["weight_rule"] = {
        "rule": "mixed",
        "cov": {"kind": "identity"},
        "layer": 1,
        "transform": "inverse_cov",
    }
    sc = scenario_from_dict(data)
    with pytest.raises(ScenarioError, match="exceeds budget"):
        sample_network_pair(sc, 0)


def test_ridge_zero_features():
    fit = ridge_fit(np.zeros((3, 5)), np.ones(5), 0.1)
    assert np.array_equal(fit.theta_hat, np.zeros(3))


def test_ridge_scalar():
    fit = ridge_fit(np.array([[2.0]]), np.array([3.0]), 0.5)
    assert fit.theta_hat[0] == pytest.approx(2 * 3 / (4 + 0.5))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 30), st.integers(1, 30), st.floats(1e-3, 10.0), st.integers(0, 2**16))
def test_ridge_primal_dual_agree(p, n, lam, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((p, n)), rng.standard_normal(n)
    a = ridge_fit(x, y, lam, "primal")
    b = ridge_fit(x, y, lam, "dual")
    assert np.allclose(a.theta_hat, b.theta_hat, rtol=1e-8, atol=1e-10)
    assert a.gram_min_eig >= lam * (1 - 1e-9)


def test_ridge_rejects_bad_input():
    with pytest.raises(ValueError):
        ridge_fit(np.eye(2), np.ones(2), 0.0)
    with pytest.raises(RidgeError, match="non-finite"):
        ridge_fit(np.array([[np.nan]]), np.ones(1), 1.0)
    with pytest.raises(ValueError, match="labels"):
        ridge_fit(np.eye(2), np.ones(3), 1.0)


def test_analytic_error_null_and_perfect():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((6, 6))
    cov = a @ a.T / 6
    t = CovarianceTriple(cov, cov, cov)
    theta = rng.standard_normal(6)
    assert empirical_gen_error_analytic(np.zeros(6), t, theta) == pytest.approx(theta @ cov @ theta / 6)
    assert empirical_gen_error_analytic(theta, t, theta) == pytest.approx(0.0, abs=1e-12)


def linear_scenario(dim=40):
    data = small_dict(dim)
    for net in ("teacher", "student"):
        for layer in data[net]["layers"]:
            layer["activation"] = "identity"
    data["noise_trace"] = 0.1
    return scenario_from_dict(data)


def test_test_set_error_matches_analytic_for_linear_nets():
    sc = linear_scenario()
    inst = prepare_instance(sc)
    a = run_replicates(sc, 1.5, reps=3, instance=inst)
    b = run_replicates(sc, 1.5, reps=3, instance=inst, error_mode="test_set", test_points=200_000)
    assert np.allclose(a.values, b.values, rtol=0.02)


def test_tied_replicates_have_zero_stderr():
    sc = linear_scenario(20)
    est = run_replicates(sc, 1.0, reps=5, tie_replicates=True)
    assert est.stderr == 0.0 and len(set(est.values)) == 1


def test_threads_do_not_change_values():
    sc = fig1_scenario(0.5, dim=40)
    a = run_replicates(sc, 1.0, reps=6, threads=1)
    b = run_replicates(sc, 1.0, reps=6, threads=3)
    assert a.values == b.values


def test_stderr_shrinks_with_replicates():
    sc = replace(fig1_scenario(0.5, dim=40), ridge_lambda=1e-2)
    inst = prepare_instance(sc)
    small = run_replicates(sc, 1.0, reps=20, instance=inst)
    large = run_replicates(sc, 1.0, reps=80, instance=inst)
    assert 0.3 < large.stderr / small.stderr < 0.8


def test_resampled_networks_differ():
    sc = linear_scenario(20)
    a = run_replicates(sc, 1.0, reps=3)
    b = run_replicates(sc, 1.0, reps=3, resample_network=True)
    assert a.values[0] == b.values[0]
    assert a.values[1] != b.values[1]


def test_joint_sampler_covariance():
    omega = np.array([[2.0, 0.3], [0.3, 1.0]])
    psi = np.array([[1.5]])
    phi = np.array([[0.4], [0.2]])
    t = CovarianceTriple(omega, psi, phi)
    x, z = sample_joint_gaussian_features(t, 400_000, 0)
    assert x.shape == (2, 400_000) and z.shape == (1, 400_000)
    emp = np.cov(np.vstack([x, z]), bias=True)
    assert np.allclose(emp, t.joint(), atol=0.02)


def test_joint_sampler_rank_deficient_and_indefinite():
    t = CovarianceTriple(np.eye(2), np.eye(2), np.eye(2))
    root = joint_gaussian_root(t)
    assert np.allclose(root @ root.T, t.joint(), atol=1e-12)
    with pytest.raises(ValueError, match="indefinite"):
        joint_gaussian_root(CovarianceTriple(np.eye(1), np.eye(1), np.array([[2.0]])))


def test_resolvent_large_lambda():
    t = CovarianceTriple(np.eye(10), np.eye(10), np.zeros((10, 10)))
    est = resolvent_functional_mc("resolvent", t, 1e6, {"A": np.eye(10)}, n=10, reps=3, seed=0)
    assert est.mean == pytest.approx(1e-6, rel=1e-4)


def test_resolvent_fluctuations_shrink():
    # Hanson-Wright style concentration: |<G - M>| shrinks as p grows
    devs = []
    for p in (50, 200):
        t = CovarianceTriple(np.eye(p), np.eye(p), np.zeros((p, p)))
        est = resolvent_functional_mc("mp_law", t, 0.1, {"A": np.eye(p)}, n=p, reps=20, seed=1, absolute=True)
        devs.append(est.mean)
    assert devs[1] < devs[0]


def test_unknown_functional():
    t = CovarianceTriple(np.eye(2), np.eye(2), np.zeros((2, 2)))
    with pytest.raises(ValueError, match="unknown functional"):
        resolvent_functional_mc("trace", t, 0.1, {}, 2, 2, 0)
