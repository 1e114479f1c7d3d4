import json
import math

import numpy as np
import pytest
from hypothesis import given, settings

from regime_stop import extraction as ex
from regime_stop.errors import PreconditionViolated
from regime_stop.model import ExtractionModel
from regime_stop.regime import discounted_price_integral, x_roots

from .conftest import any_models, threshold_models


def ode_residual(model, sol, regime, p):
    """Generator residual ``rJ - L J - coupling - (p - C)`` at prices ``p``."""
    mu, sig, lam = model.mu[regime], model.sigma[regime], model.rates[regime]
    J = ex.evaluate_value(sol, regime, p)
    Jo = ex.evaluate_value(sol, 1 - regime, p)
    dJ = ex.evaluate_derivative(sol, regime, p)
    h = 1e-4 * p
    d2 = (ex.evaluate_derivative(sol, regime, p + h) - ex.evaluate_derivative(sol, regime, p - h)) / (2 * h)
    return model.r * J - mu * p * dJ - 0.5 * sig ** 2 * p ** 2 * d2 - lam * (Jo - J) - (p - model.C)


class TestRoots:
    def test_paper_exponents(self, paper_model):
        zs = ex.quartic_roots(paper_model)
        np.testing.assert_allclose(zs.z, (-3.4706, -1.6030, 1.0650, 2.4886), atol=1e-4)

    def test_w_roots_bracket(self, paper_model):
        zs = ex.quartic_roots(paper_model)
        for i in (0, 1):
            lo, hi = ex.w_roots(paper_model, i)
            assert lo < 0 < 1 < hi
            assert abs(ex.w(paper_model, i, lo)) < 1e-12 and abs(ex.w(paper_model, i, hi)) < 1e-12
        assert zs.z1 < min(zs.y1, zs.ybar1) and zs.z4 > max(zs.y2, zs.ybar2)

    def test_coefficients_match_product(self, paper_model):
        z = np.linspace(-4, 3, 13)
        direct = ex.w(paper_model, 0, z) * ex.w(paper_model, 1, z) - paper_model.lambda1 * paper_model.lambda2
        np.testing.assert_allclose(ex.quartic(paper_model, z), direct, rtol=1e-12, atol=1e-14)
        np.testing.assert_allclose(np.polyval(ex.quartic_coefficients(paper_model)[::-1], z), direct, rtol=1e-12, atol=1e-14)

    def test_infinite_value_rejected(self):
        m = ExtractionModel(0.01, 0.10, 0.25, 0.25, 0.05, 0.05, 0.05, 20, 5)
        assert ex.classify(m) is ex.Classification.INFINITE_VALUE
        with pytest.raises(PreconditionViolated):
            ex.quartic_roots(m)

    @given(any_models())
    def test_roots_for_any_finite_model(self, m):
        if ex.classify(m) is ex.Classification.INFINITE_VALUE:
            return
        zs = ex.quartic_roots(m)
        scale = zs.residual_scale()
        for z in zs.z:
            assert abs(ex.quartic(m, z)) <= ex.ROOT_TOL * scale
        assert zs.z1 < zs.z2 < 0 < 1 < zs.z3 < zs.z4


class TestClassify:
    def test_boundary_r_equals_x2(self):
        base = ExtractionModel(0.01, 0.10, 0.25, 0.25, 0.05, 0.05, 0.08, 20, 5)
        _, x2 = x_roots(base)
        m = ExtractionModel(0.01, 0.10, 0.25, 0.25, 0.05, 0.05, x2, 20, 5)
        assert ex.classify(m) is ex.Classification.INFINITE_VALUE

    def test_boundary_c_equals_rk(self):
        m = ExtractionModel(0.01, 0.10, 0.25, 0.25, 0.05, 0.05, 0.08, 0.4, 5)
        assert ex.classify(m) is ex.Classification.NEVER_STOP

    def test_paper_threshold(self, paper_model):
        assert ex.classify(paper_model) is ex.Classification.THRESHOLD

    def test_k_coefficients(self, paper_model):
        k1, k2 = ex.k_coefficients(paper_model)
        assert k1 == pytest.approx(154.545454, rel=1e-6)
        assert k2 == pytest.approx(72.727272, rel=1e-6)

    def test_k_matches_expected_discounted_price(self, paper_model):
        # regime 1 (index 0) earns k2 per unit of price
        k1, k2 = ex.k_coefficients(paper_model)
        assert discounted_price_integral(paper_model, 0) == pytest.approx(k2, rel=1e-12)
        assert discounted_price_integral(paper_model, 1) == pytest.approx(k1, rel=1e-12)

    def test_lipschitz_bound_is_slope(self, paper_model):
        k1, k2 = ex.k_coefficients(paper_model)
        assert ex.lipschitz_bound(paper_model, 0) == pytest.approx(k2, rel=1e-10)
        assert ex.lipschitz_bound(paper_model, 1) == pytest.approx(k1, rel=1e-10)


class TestPaperExample:
    def test_case_and_thresholds(self, paper_solution):
        assert paper_solution.case is ex.Case.CASE2
        np.testing.assert_allclose(paper_solution.thresholds, (2.08, 1.04), atol=0.005)

    def test_coefficient_names(self, paper_solution):
        # the band case reports barred and tilded coefficients
        assert {"Abar1", "Abar2"} <= set(paper_solution.coefficients)

    def test_value_matching_and_pasting(self, paper_solution, paper_model):
        for i, th in enumerate(paper_solution.thresholds):
            assert ex.evaluate_value(paper_solution, i, th) == pytest.approx(-paper_model.K, abs=1e-9)
            assert ex.evaluate_derivative(paper_solution, i, th * (1 + 1e-12)) == pytest.approx(0.0, abs=1e-7)

    def test_ode_on_joint_continuation(self, paper_solution, paper_model):
        p = np.geomspace(2.2, 80.0, 40)
        for i in (0, 1):
            res = ode_residual(paper_model, paper_solution, i, p)
            assert np.max(np.abs(res) / (1 + p)) < 1e-5

    def test_band_equations(self, paper_solution, paper_model):
        lo, hi = sorted(paper_solution.thresholds)
        p = np.linspace(lo * 1.01, hi * 0.99, 25)
        cont = int(np.argmin(paper_solution.thresholds))
        stop = 1 - cont
        assert np.max(np.abs(ode_residual(paper_model, paper_solution, cont, p))) < 1e-5
        m = paper_model
        Jo = ex.evaluate_value(paper_solution, cont, p)
        stopped = m.r * (-m.K) - m.rates[stop] * (Jo + m.K) - (p - m.C)
        assert np.all(stopped >= -1e-9)

    def test_linear_asymptote(self, paper_solution, paper_model):
        k1, k2 = ex.k_coefficients(paper_model)
        p = 1e4
        assert ex.evaluate_value(paper_solution, 0, p) == pytest.approx(k2 * p - paper_model.C / paper_model.r, rel=1e-6)
        assert ex.evaluate_value(paper_solution, 1, p) == pytest.approx(k1 * p - paper_model.C / paper_model.r, rel=1e-6)

    def test_json_round_trip(self, paper_solution):
        doc = json.loads(json.dumps(paper_solution.to_dict(), allow_nan=False))
        back = ex.ClosedFormSolution.from_dict(doc)
        p = np.geomspace(0.1, 100, 50)
        for i in (0, 1):
            np.testing.assert_array_equal(ex.evaluate_value(back, i, p), ex.evaluate_value(paper_solution, i, p))
        assert back.thresholds == paper_solution.thresholds and back.case is paper_solution.case

    def test_evaluate_rejects_nonpositive(self, paper_solution):
        with pytest.raises(PreconditionViolated):
            ex.evaluate_value(paper_solution, 0, 0.0)
        with pytest.raises(PreconditionViolated):
            ex.evaluate_value(paper_solution, 0, np.array([1.0, -1.0]))

    def test_scalar_and_vector(self, paper_solution):
        v = ex.evaluate_value(paper_solution, 0, np.array([3.0, 4.0]))
        assert isinstance(ex.evaluate_value(paper_solution, 0, 3.0), float)
        assert v[0] == ex.evaluate_value(paper_solution, 0, 3.0)


class TestOtherCases:
    def test_swapped_labels(self, paper_model):
        m = paper_model.swapped()
        sol = ex.solve(m)
        base = ex.solve(paper_model)
        np.testing.assert_allclose(sol.thresholds, base.thresholds[::-1], rtol=1e-10)
        p = np.geomspace(0.5, 50, 20)
        np.testing.assert_allclose(ex.evaluate_value(sol, 0, p), ex.evaluate_value(base, 1, p), rtol=1e-9, atol=1e-9)
        assert sol.swapped

    def test_case1_exists(self):
        # slow switching with drift favouring regime 2 stops first in regime 1
        m = ExtractionModel(-0.05, 0.05, 0.3, 0.3, 0.05, 0.05, 0.1, 10, 2)
        sol = ex.solve(m)
        assert sol.case in (ex.Case.CASE1, ex.Case.CASE2)
        assert sol.thresholds[0] != sol.thresholds[1]

    def test_identical_regimes_case3(self):
        m = ExtractionModel(0.01, 0.01, 0.25, 0.25, 0.05, 0.05, 0.08, 20, 5)
        sol = ex.solve(m)
        single = ex.single_regime_threshold(0.01, 0.25, 0.08, 20, 5)
        assert sol.case is ex.Case.CASE3
        np.testing.assert_allclose(sol.thresholds, (single.p_star,) * 2, rtol=1e-8)
        p = np.geomspace(1, 100, 20)
        np.testing.assert_allclose(ex.evaluate_value(sol, 0, p), single.value(p), rtol=1e-8, atol=1e-8)

    def test_never_stop_linear(self):
        m = ExtractionModel(0.01, 0.10, 0.25, 0.25, 0.05, 0.05, 0.08, 0.3, 5)
        sol = ex.solve(m)
        k1, k2 = ex.k_coefficients(m)
        assert sol.classification is ex.Classification.NEVER_STOP and sol.thresholds is None
        p = np.geomspace(0.01, 100, 30)
        np.testing.assert_allclose(ex.evaluate_value(sol, 0, p), k2 * p - m.C / m.r, rtol=1e-12)
        np.testing.assert_allclose(ex.evaluate_value(sol, 1, p), k1 * p - m.C / m.r, rtol=1e-12)

    def test_infinite_value_solution(self):
        m = ExtractionModel(0.01, 0.10, 0.25, 0.25, 0.05, 0.05, 0.05, 20, 5)
        sol = ex.solve(m)
        assert sol.classification is ex.Classification.INFINITE_VALUE
        with pytest.raises(PreconditionViolated):
            ex.evaluate_value(sol, 0, 1.0)


class TestSingleRegime:
    def test_smooth_pasting_by_finite_difference(self):
        s = ex.single_regime_threshold(0.01, 0.25, 0.08, 20, 5)
        h = 1e-6 * s.p_star
        assert s.value(s.p_star) == pytest.approx(-5.0, abs=1e-10)
        assert (s.value(s.p_star + h) + 5.0) / h == pytest.approx(0.0, abs=1e-4)

    def test_derived_threshold_value(self):
        s = ex.single_regime_threshold(0.01, 0.25, 0.08, 20, 5)
        assert s.p_star == pytest.approx(9.6796, abs=1e-3)

    def test_optimal_over_threshold_family(self):
        # the value at a fixed price is maximised over threshold rules at p*
        mu, sig, r, C, K = 0.01, 0.25, 0.08, 20.0, 5.0
        s = ex.single_regime_threshold(mu, sig, r, C, K)
        g = s.exponent
        p = 30.0

        def val(b):
            lin = lambda x: x / (r - mu) - C / r
            return lin(p) + (-K - lin(b)) * (p / b) ** g

        bs = np.linspace(0.5 * s.p_star, 1.5 * s.p_star, 2001)
        assert bs[np.argmax([val(b) for b in bs])] == pytest.approx(s.p_star, rel=1e-3)

    def test_infinite_and_never(self):
        assert ex.single_regime_threshold(0.10, 0.25, 0.08, 20, 5).classification is ex.Classification.INFINITE_VALUE
        assert ex.single_regime_threshold(0.01, 0.25, 0.08, 0.3, 5).classification is ex.Classification.NEVER_STOP

    def test_limit_of_two_regime_model_with_no_switching(self):
        # tiny switching rates approach the isolated regime's threshold
        m = ExtractionModel(0.01, 0.05, 0.25, 0.25, 1e-6, 1e-6, 0.08, 20, 5)
        sol = ex.solve(m)
        s = ex.single_regime_threshold(0.01, 0.25, 0.08, 20, 5)
        assert sol.thresholds[0] == pytest.approx(s.p_star, rel=1e-3)


@settings(max_examples=60)
@given(threshold_models())
def test_random_models_satisfy_ode(m):
    sol = ex.solve(m)
    top = max(sol.thresholds)
    p = np.geomspace(top * 1.05, top * 20, 15)
    for i in (0, 1):
        res = ode_residual(m, sol, i, p)
        scale = 1 + p + m.C + abs(ex.evaluate_value(sol, i, p)) * m.r
        assert np.max(np.abs(res) / scale) < 1e-4
