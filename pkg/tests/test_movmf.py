import logging
import math

import mpmath
import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from vmfdino.errors import DimensionError, DomainError
from vmfdino.movmf import (
    KAPPA_MAX,
    KAPPA_MIN,
    MixtureModel,
    _reference_loglik,
    em_fit,
    estimate_kappa,
    hard_assign,
    log_likelihood,
    random_separated_directions,
    responsibilities,
    sample_mixture,
    solve_kappa,
)
from vmfdino.vmf import VmfComponent, mean_resultant_length, normalize, sample_vmf


def mp_log_c(p, kappa):
    nu = mpmath.mpf(p) / 2 - 1
    k = mpmath.mpf(kappa)
    return nu * mpmath.log(k) - (mpmath.mpf(p) / 2) * mpmath.log(2 * mpmath.pi) - mpmath.log(mpmath.besseli(nu, k))


def mp_responsibilities(y, means, kappas, pis):
    with mpmath.workdps(40):
        p = len(y)
        w = [
            mpmath.mpf(pi) * mpmath.exp(mp_log_c(p, k) + k * mpmath.fsum(mpmath.mpf(a) * b for a, b in zip(m, y)))
            for m, k, pi in zip(means, kappas, pis)
        ]
        total = mpmath.fsum(w)
        return np.array([float(v / total) for v in w])


@pytest.fixture
def model3():
    means = normalize(np.array([[1.0, 0.2, 0.0, -0.3], [0.0, 1.0, 0.5, 0.1], [-0.4, 0.1, 1.0, 0.7]]))
    return MixtureModel.from_arrays(means, [3.0, 12.0, 0.7], [0.5, 0.3, 0.2])


class TestModel:
    def test_proportions_validated(self):
        c = VmfComponent(np.array([1.0, 0.0]), 1.0)
        with pytest.raises(DomainError):
            MixtureModel((c, c), np.array([0.6, 0.6]))
        with pytest.raises(DomainError):
            MixtureModel((c, c), np.array([1.2, -0.2]))
        with pytest.raises(DimensionError):
            MixtureModel((c, VmfComponent(np.array([0.0, 0.0, 1.0]), 1.0)), np.array([0.5, 0.5]))


class TestResponsibilities:
    def test_mirror_symmetry(self):
        y = np.array([1.0, 0.0, 0.0])
        mu1 = normalize(np.array([1.0, 1.0, 0.0]))
        mu2 = normalize(np.array([1.0, -1.0, 0.0]))
        m = MixtureModel.from_arrays([mu1, mu2], [5.0, 5.0], [0.5, 0.5])
        np.testing.assert_allclose(responsibilities(y, m), [0.5, 0.5], atol=1e-15)

    def test_single_component(self):
        m = MixtureModel.from_arrays([[0.0, 1.0, 0.0]], [4.0], [1.0])
        assert responsibilities(np.array([1.0, 0.0, 0.0]), m).tolist() == [1.0]

    def test_brute_force(self, model3):
        y = normalize(np.array([0.3, -0.2, 0.9, 0.1]))
        ref = mp_responsibilities(y, model3.means, model3.kappas, model3.proportions)
        got = responsibilities(y, model3)
        np.testing.assert_allclose(got, ref, rtol=1e-10)
        assert abs(got.sum() - 1.0) <= 1e-12

    def test_batch_matches_rows(self, model3, rng):
        y = normalize(rng.standard_normal((6, 4)))
        batch = responsibilities(y, model3)
        for row, yi in zip(batch, y):
            np.testing.assert_allclose(row, responsibilities(yi, model3), rtol=1e-15)

    def test_proportion_rescaling_invariance(self, model3, rng):
        # the normalized result only sees the ratios of the proportions
        y = normalize(rng.standard_normal(4))
        pis = np.array([0.5, 0.3, 0.2])
        direct = mp_responsibilities(y, model3.means, model3.kappas, pis * 7.0)
        np.testing.assert_allclose(responsibilities(y, model3), direct, rtol=1e-10)

    def test_large_kappa_is_stable_and_one_hot(self):
        means = np.eye(3)
        m = MixtureModel.from_arrays(means, [1e5, 1e5, 1e5], np.full(3, 1 / 3))
        r = responsibilities(normalize(np.array([1.0, 0.01, 0.0])), m)
        assert np.all(np.isfinite(r))
        assert r.max() >= 0.999 and r.argmax() == 0

    def test_dimension_mismatch(self, model3):
        with pytest.raises(DimensionError):
            responsibilities(np.array([1.0, 0.0, 0.0]), model3)


class TestLogLikelihood:
    def test_uniform(self, rng):
        y = normalize(rng.standard_normal((11, 3)))
        m = MixtureModel((VmfComponent(np.array([0.0, 0.0, 1.0]), 0.0),), np.array([1.0]))
        assert log_likelihood(y, m) == pytest.approx(-11 * math.log(4 * math.pi), rel=1e-14)

    def test_brute_force(self, rng):
        m = MixtureModel.from_arrays(normalize(rng.standard_normal((2, 5))), [2.0, 9.0], [0.35, 0.65])
        y = normalize(rng.standard_normal((5, 5)))
        with mpmath.workdps(40):
            total = mpmath.mpf(0)
            for yi in y:
                total += mpmath.log(
                    mpmath.fsum(
                        mpmath.mpf(pi) * mpmath.exp(mp_log_c(5, c.kappa) + c.kappa * mpmath.mpf(float(c.mu @ yi)))
                        for pi, c in zip(m.proportions, m.components)
                    )
                )
        assert log_likelihood(y, m) == pytest.approx(float(total), rel=1e-10)
        assert _reference_loglik(y, m) == pytest.approx(float(total), rel=1e-10)

    def test_permutation_invariance(self, model3, rng):
        y = normalize(rng.standard_normal((20, 4)))
        a = log_likelihood(y, model3)
        assert log_likelihood(y, model3.permuted([2, 0, 1])) == pytest.approx(a, rel=1e-14)

    def test_chunked_reduction(self, model3, rng):
        y = normalize(rng.standard_normal((1000, 4)))
        whole = log_likelihood(y, model3)
        parts = math.fsum(log_likelihood(chunk, model3) for chunk in np.array_split(y, 7))
        assert abs(whole - parts) <= 1e-12 * abs(whole)


class TestKappaEstimators:
    def test_banerjee_formula(self):
        r, p = 0.9, 8
        assert estimate_kappa(r, p) == pytest.approx(r * (p - r * r) / (1 - r * r))

    def test_clipping(self):
        assert estimate_kappa(0.0, 8) == KAPPA_MIN
        assert estimate_kappa(1.0, 8) == KAPPA_MAX

    @pytest.mark.parametrize("p,kappa", [(3, 2.0), (8, 50.0), (64, 10.0), (256, 400.0)])
    def test_newton_inverts_mean_resultant_length(self, p, kappa):
        rbar = mean_resultant_length(p, kappa)
        assert solve_kappa(rbar, p) == pytest.approx(kappa, rel=1e-10)


class TestEmFit:
    def test_single_vmf_recovery(self):
        mu = normalize(np.arange(1.0, 9.0))
        y = sample_vmf(VmfComponent(mu, 50.0), 2000, seed=5)
        res = em_fit(y, 1, seed=0)
        c = res.model.components[0]
        assert c.mu @ mu >= 0.999
        assert 45 <= c.kappa <= 55

    @pytest.mark.parametrize("seed", range(3))
    def test_three_separated_components(self, seed):
        rng = np.random.default_rng(100 + seed)
        dirs = random_separated_directions(3, 8, 0.2, rng)
        truth = MixtureModel.from_arrays(dirs, [50.0] * 3, np.full(3, 1 / 3))
        y, labels = sample_mixture(truth, 3000, rng)
        res = em_fit(y, 3, seed=seed)
        pred = hard_assign(responsibilities(y, res.model))
        assert adjusted_rand_score(labels, pred) >= 0.95

    def test_monotone_log_likelihood(self):
        rng = np.random.default_rng(7)
        dirs = random_separated_directions(4, 6, 0.5, rng)
        truth = MixtureModel.from_arrays(dirs, [5.0, 10.0, 20.0, 8.0], [0.1, 0.2, 0.3, 0.4])
        y, _ = sample_mixture(truth, 1500, rng)
        hist = np.array(em_fit(y, 4, seed=1, tol=1e-12).history)
        assert np.all(np.diff(hist) >= -1e-9)

    def test_banerjee_only_dips_are_logged(self, caplog):
        rng = np.random.default_rng(3)
        dirs = random_separated_directions(3, 8, 0.6, rng)
        y, _ = sample_mixture(MixtureModel.from_arrays(dirs, [4.0, 6.0, 9.0], np.full(3, 1 / 3)), 1500, rng)
        with caplog.at_level(logging.INFO, logger="vmfdino.movmf"):
            res = em_fit(y, 3, seed=0, kappa_update="banerjee", tol=1e-12)
        dips = np.diff(res.history) < 0
        if dips.any():
            assert "decreased log-likelihood" in caplog.text

    def test_duplicate_components(self):
        # the K=2 fit can only overfit by O(extra parameters) nats in total,
        # so the per-point gap shrinks like 1/n
        mu = normalize(np.ones(6))
        y = sample_vmf(VmfComponent(mu, 20.0), 10_000, seed=9)
        one = em_fit(y, 1, seed=0).history[-1]
        two = em_fit(y, 2, seed=0).history[-1]
        assert abs(two - one) / len(y) <= 1e-3

    @pytest.mark.parametrize("split", [0.5, 0.1, 0.93])
    def test_identical_components_any_split(self, split, rng):
        mu = normalize(np.ones(6))
        y = normalize(rng.standard_normal((50, 6)))
        one = MixtureModel.from_arrays([mu], [20.0], [1.0])
        two = MixtureModel.from_arrays([mu, mu], [20.0, 20.0], [split, 1 - split])
        assert log_likelihood(y, two) == pytest.approx(log_likelihood(y, one), rel=1e-13)

    def test_permuted_initialization(self, model3):
        rng = np.random.default_rng(4)
        y, _ = sample_mixture(model3, 800, rng)
        a = em_fit(y, 3, seed=0, init=model3, max_iters=30)
        b = em_fit(y, 3, seed=0, init=model3.permuted([1, 2, 0]), max_iters=30)
        assert a.history[-1] == pytest.approx(b.history[-1], abs=1e-9)
        np.testing.assert_allclose(b.model.means, a.model.means[[1, 2, 0]], atol=1e-9)

    def test_deterministic(self, model3):
        y, _ = sample_mixture(model3, 500, seed=2)
        a = em_fit(y, 3, seed=11)
        b = em_fit(y, 3, seed=11)
        assert a.history == b.history
        np.testing.assert_array_equal(a.model.means, b.model.means)

    def test_empty_cluster_reinitialized(self, caplog):
        y = normalize(np.array([[1.0, 0.0, 0.0]] * 5 + [[0.0, 1.0, 0.0]] * 5))
        init = MixtureModel.from_arrays([[1.0, 0, 0], [0, 1.0, 0], [0, 0, 1.0]], [500.0] * 3, [0.4, 0.4, 0.2])
        with caplog.at_level(logging.WARNING, logger="vmfdino.movmf"):
            res = em_fit(y, 3, seed=0, init=init, max_iters=2)
        assert res.reinitialized >= 1
        assert "empty" in caplog.text

    def test_too_few_points(self):
        with pytest.raises(DomainError):
            em_fit(np.eye(3)[:2], 3)

    def test_hard_assign_ties(self):
        assert hard_assign(np.array([[0.5, 0.5], [0.2, 0.8]])).tolist() == [0, 1]
