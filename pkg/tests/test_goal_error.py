import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from goalcalib.elliptic import EllipticFineParams, EllipticModelPair
from goalcalib.goal_error import (
    ErrorEstimateReport,
    adjoint_residual,
    adjoint_weighted_residual,
    curvature_corrected_estimate,
    estimate_report,
    linearized_qoi_of_error,
    order_study,
    residual,
    solve_errors_first_order,
    solve_errors_second_order,
)
from goalcalib.mesh import build_mesh


@pytest.fixture(scope="module")
def pair():
    mesh = build_mesh(24, 24)
    return EllipticModelPair(mesh, fine=EllipticFineParams(0.25, 10.0))


@pytest.fixture(scope="module")
def coarse_states(pair):
    return pair.solve_coarse_forward(), pair.solve_coarse_adjoint()


def random_test_fields(pair, count, seed):
    rng = np.random.default_rng(seed)
    fields = rng.standard_normal((count, pair.mesh.n_nodes))
    fields[:, pair.mesh.boundary_mask] = 0.0
    return fields


class TestErrorProblems:
    def test_first_order_forward_equation(self, pair, coarse_states):
        # form'(u0; e, q) must reproduce the residual for arbitrary q
        u0, p0 = coarse_states
        e, _ = solve_errors_first_order(u0, p0, pair)
        for q in random_test_fields(pair, 3, seed=11):
            lhs = pair.form_derivative(u0, e, q)
            assert lhs == pytest.approx(residual(u0, q, pair), abs=1e-9)

    def test_first_order_adjoint_equation(self, pair, coarse_states):
        u0, p0 = coarse_states
        _, eps = solve_errors_first_order(u0, p0, pair)
        for v in random_test_fields(pair, 3, seed=12):
            lhs = pair.form_derivative(u0, v, eps)
            assert lhs == pytest.approx(adjoint_residual(u0, v, p0, pair), abs=1e-9)

    def test_second_order_forward_equation(self, pair, coarse_states):
        u0, p0 = coarse_states
        e, _ = solve_errors_second_order(u0, p0, pair)
        for q in random_test_fields(pair, 3, seed=13):
            lhs = pair.form_derivative(u0, e, q)
            lhs += 0.5 * pair.form_second_derivative(u0, e, e, q)
            assert lhs == pytest.approx(residual(u0, q, pair), abs=1e-9)

    def test_second_order_adjoint_equation(self, pair, coarse_states):
        u0, p0 = coarse_states
        e, eps = solve_errors_second_order(u0, p0, pair)
        for v in random_test_fields(pair, 3, seed=14):
            lhs = pair.form_derivative(u0, v, eps)
            lhs += pair.form_second_derivative(u0, e, v, eps)
            lhs -= pair.qoi_second_derivative(u0, e, v)
            rhs = adjoint_residual(u0, v, p0, pair)
            rhs -= pair.form_second_derivative(u0, e, v, p0)
            assert lhs == pytest.approx(rhs, abs=1e-9)

    def test_second_order_error_closer_to_truth(self, pair, coarse_states):
        u0, p0 = coarse_states
        u = pair.solve_fine_forward()
        e1, _ = solve_errors_first_order(u0, p0, pair)
        e2, _ = solve_errors_second_order(u0, p0, pair)
        gap1 = np.linalg.norm(u - u0 - e1)
        gap2 = np.linalg.norm(u - u0 - e2)
        assert gap2 < gap1


class TestLinearModelsExactness:
    def test_all_estimates_exact_for_linear_pair(self):
        # with alpha = 0 the fine model is linear, only kappa differs, and
        # every estimate must hit the exact error to solver precision
        mesh = build_mesh(20, 20)
        pair = EllipticModelPair(mesh, fine=EllipticFineParams(0.4, 0.0))
        report = estimate_report(pair, error_source="fine-solve")
        for name in ("residual_estimate", "corrected_estimate", "error_qoi_estimate"):
            assert getattr(report, name) == pytest.approx(report.exact_error, abs=1e-8)
        cheap = estimate_report(pair, error_source="first-order")
        for name in ("residual_estimate", "corrected_estimate", "error_qoi_estimate"):
            assert getattr(cheap, name) == pytest.approx(report.exact_error, abs=1e-8)

    def test_residual_splits_across_adjoint_error(self, pair, coarse_states):
        # weighting by p0 + eps is the same as weighting by each part
        u0, p0 = coarse_states
        _, eps = solve_errors_first_order(u0, p0, pair)
        total = residual(u0, p0 + eps, pair)
        split = residual(u0, p0, pair) + residual(u0, eps, pair)
        assert total == pytest.approx(split, rel=1e-12)


class TestEstimates:
    def test_fine_solve_weight_recovers_plain_residual(self, pair, coarse_states):
        u0, _ = coarse_states
        u = pair.solve_fine_forward()
        p = pair.solve_fine_adjoint(u)
        report = estimate_report(pair, error_source="fine-solve")
        assert report.residual_estimate == pytest.approx(
            residual(u0, p, pair), rel=1e-12
        )
        assert report.exact_error == pytest.approx(
            report.qoi_fine - report.qoi_coarse, rel=1e-12
        )

    @pytest.mark.parametrize("alpha", [1.0, 5.0])
    def test_corrected_estimate_with_true_errors_is_sharp(self, alpha):
        # exact error fields leave only a third-order leftover behind, so
        # at moderate mismatch the correction must beat the plain residual
        mesh = build_mesh(20, 20)
        local = EllipticModelPair(mesh, fine=EllipticFineParams(0.25, alpha))
        report = estimate_report(local, error_source="fine-solve")
        sharp = abs(report.corrected_estimate - report.exact_error)
        plain = abs(report.residual_estimate - report.exact_error)
        assert sharp < plain

    def test_first_order_estimates_track_exact_error(self, pair):
        truth = estimate_report(pair, error_source="fine-solve")
        cheap = estimate_report(pair, error_source="first-order")
        assert cheap.qoi_fine is None and cheap.exact_error is None
        # weighting the residual with p0 + first-order adjoint error is
        # algebraically identical to the QoI of the first-order error
        assert cheap.residual_estimate == pytest.approx(
            cheap.error_qoi_estimate, abs=1e-11
        )
        for name in ("residual_estimate", "corrected_estimate", "error_qoi_estimate"):
            value = getattr(cheap, name)
            assert np.sign(value) == np.sign(truth.exact_error)
        gap = abs(cheap.error_qoi_estimate - truth.exact_error)
        assert gap < 0.25 * abs(truth.exact_error)

    def test_second_order_error_qoi_is_tighter(self, pair, coarse_states):
        u0, p0 = coarse_states
        u = pair.solve_fine_forward()
        exact = pair.qoi(u) - pair.qoi(u0)
        e2, _ = solve_errors_second_order(u0, p0, pair)
        assert abs(linearized_qoi_of_error(u0, e2, pair) - exact) < 0.08 * abs(exact)

    def test_hot_path_matches_generic_estimate(self, pair, coarse_states):
        u0, _ = coarse_states
        theta = np.array([0.25, 10.0])
        e, _ = solve_errors_first_order(u0, pair.solve_coarse_adjoint(), pair)
        generic = linearized_qoi_of_error(u0, e, pair)
        assert pair.qoi_error_estimate(theta) == pytest.approx(generic, rel=1e-12)

    def test_unknown_error_source_rejected(self, pair):
        with pytest.raises(ValueError, match="error_source"):
            estimate_report(pair, error_source="oracle")


@pytest.fixture(scope="module")
def study():
    mesh = build_mesh(24, 24)

    def family(s):
        return EllipticModelPair(mesh, fine=EllipticFineParams(0.25, 10.0 * s))

    return order_study(family, levels=(1.0, 0.5, 0.25, 0.125))


class TestOrderStudy:
    def test_exact_error_shrinks_along_homotopy(self, study):
        magnitudes = np.abs(study.exact_errors)
        assert np.all(np.diff(magnitudes) < 0)

    def test_deficits_superconverge(self, study):
        assert study.slopes["weighted_residual"] >= 1.7
        assert study.slopes["error_qoi_first_order"] >= 1.7
        # with true error fields the corrected estimate gains one order
        assert study.slopes["curvature_corrected"] >= 2.4
        assert (
            study.slopes["curvature_corrected"]
            > study.slopes["weighted_residual"] + 0.5
        )

    def test_second_order_beats_first_order_everywhere(self, study):
        first = study.deficits["error_qoi_first_order"]
        second = study.deficits["error_qoi_second_order"]
        for lo, hi in zip(second, first):
            assert lo <= hi * (1 + 1e-9)

    def test_needs_two_levels(self, pair):
        with pytest.raises(ValueError, match="levels"):
            order_study(lambda s: pair, levels=(1.0,))

    def test_json_payload_is_complete(self, study, tmp_path):
        path = tmp_path / "study.json"
        study.to_json(path)
        data = json.loads(path.read_text())
        assert data["levels"] == [1.0, 0.5, 0.25, 0.125]
        assert set(data["slopes"]) == set(data["deficits"])


class TestReportSerialization:
    def test_round_trip_through_file(self, pair, tmp_path):
        report = estimate_report(pair, error_source="second-order", provenance={"run": 3})
        path = tmp_path / "report.json"
        report.to_json(path)
        loaded = ErrorEstimateReport.from_json(str(path))
        assert loaded == report
        assert loaded.provenance["run"] == 3
        assert loaded.provenance["seconds"] >= 0

    def test_round_trip_through_text(self, pair):
        report = estimate_report(pair, error_source="first-order")
        clone = ErrorEstimateReport.from_json(report.to_json())
        assert clone == report


def third_form_derivative(pair, u, a, b, c, v, alpha):
    # third directional derivative of the weighted-gradient form for the
    # quadratic conductivity law: the weight's second derivative is the
    # constant 2*kappa*alpha and its third derivative vanishes, leaving
    # only the three symmetrized cross terms
    ctx = pair.ctx
    d2k = 2.0 * pair.fine.kappa * alpha
    ag, bg, cg = ctx.interpolate(a), ctx.interpolate(b), ctx.interpolate(c)
    ga, gb, gc, gv = (ctx.gradient(f) for f in (a, b, c, v))
    term = ag * bg * np.einsum("egk,egk->eg", gc, gv)
    term += bg * cg * np.einsum("egk,egk->eg", ga, gv)
    term += cg * ag * np.einsum("egk,egk->eg", gb, gv)
    return d2k * ctx.integrate(term)


IDENTITY_ALPHA = 10.0


@pytest.fixture(scope="module")
def fields():
    mesh = build_mesh(20, 20)
    local = EllipticModelPair(mesh, fine=EllipticFineParams(0.25, IDENTITY_ALPHA))
    u0 = local.solve_coarse_forward()
    p0 = local.solve_coarse_adjoint()
    u = local.solve_fine_forward()
    p = local.solve_fine_adjoint(u)
    return local, u0, p0, u, p


class TestRepresentationIdentity:
    """The estimates plus their leftover integrals must be EXACT.

    The leftovers are line integrals over states u0 + s*e; for the
    quadratic conductivity law their integrands are polynomials in s, so
    an 8-point Gauss rule evaluates them to roundoff. These checks pin
    down every coefficient in the estimator formulas: any dropped factor
    (the easiest mistake is doubling the half on the curvature term)
    breaks equality at the 1e-2 level while all tolerances here are 1e-9.
    """

    ALPHA = IDENTITY_ALPHA

    @staticmethod
    def gauss_01(n=8):
        nodes, weights = np.polynomial.legendre.leggauss(n)
        return 0.5 * (nodes + 1.0), 0.5 * weights

    def test_averaged_residual_representation(self, fields):
        local, u0, p0, u, p = fields
        e, eps = u - u0, p - p0
        s, w = self.gauss_01()
        leftover = 0.0
        for si, wi in zip(s, w):
            us = u0 + si * e
            val = -3.0 * local.form_second_derivative(us, e, e, eps)
            val -= third_form_derivative(local, us, e, e, e, p0 + si * eps, self.ALPHA)
            leftover += 0.5 * wi * val * (si - 1.0) * si
        lhs = local.qoi(u) - local.qoi(u0)
        rhs = residual(u0, p0, local)
        rhs += 0.5 * (residual(u0, eps, local) + adjoint_residual(u0, e, p0, local))
        assert lhs == pytest.approx(rhs + leftover, abs=1e-9)

    def test_adjoint_residual_quadratic_link(self, fields):
        local, u0, p0, u, p = fields
        e, eps = u - u0, p - p0
        s, w = self.gauss_01()
        leftover = sum(
            wi
            * (1.0 - si)
            * third_form_derivative(
                local, u0 + si * e, e, e, e, p - 0.5 * (1 - si) * eps, self.ALPHA
            )
            for si, wi in zip(s, w)
        )
        lhs = adjoint_residual(u0, e, p0, local)
        rhs = residual(u0, eps, local)
        rhs -= local.qoi_second_derivative(u0, e, e)
        rhs += local.form_second_derivative(u0, e, e, p0)
        rhs += 0.5 * local.form_second_derivative(u0, e, e, eps)
        assert lhs == pytest.approx(rhs + leftover, abs=1e-9)

    def test_corrected_estimate_leftover_is_the_cubic_term(self, fields):
        local, u0, p0, u, p = fields
        e, eps = u - u0, p - p0
        s, w = self.gauss_01()
        cubic = 0.0
        for si, wi in zip(s, w):
            us = u0 + si * e
            val = -3.0 * local.form_second_derivative(us, e, e, eps)
            val -= third_form_derivative(local, us, e, e, e, p0 + si * eps, self.ALPHA)
            cubic += 0.5 * wi * val * (si - 1.0) * si
            cubic += (
                0.5
                * wi
                * (1.0 - si)
                * third_form_derivative(
                    local, u0 + si * e, e, e, e, p - 0.5 * (1 - si) * eps, self.ALPHA
                )
            )
        exact = local.qoi(u) - local.qoi(u0)
        estimate = curvature_corrected_estimate(u0, p0, e, eps, local)
        assert exact == pytest.approx(estimate + cubic, abs=1e-9)
        # the cubic term is material here, so the match is not vacuous
        assert abs(cubic) > 1e-3
