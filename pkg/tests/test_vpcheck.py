import io
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from vpei.errors import CertificateError, DimensionError
from vpei.integrators import (
    ERKNStepper,
    RKStepper,
    SecondOrderEIStepper,
    SolverConfig,
    SSEIStepper,
    integrate,
)
from vpei.problems import (
    J2,
    charged_particle,
    divergence_free_3d,
    duffing,
    helmholtz_duffing,
    js_field,
    synthetic_f_infinity,
)
from vpei.tableau import equal_node_two_stage, gauss_legendre
from vpei.vpcheck import (
    CSV_COLUMNS,
    ClassCertificate,
    VolumeReport,
    certify,
    e_matrix,
    finite_difference_jacobian,
    parse_certificate,
    step_jacobian,
    symplecticity_defect,
    verify_class,
    volume_drift,
    volume_ratio,
    volume_target,
    vp_condition_residual,
)


def ssei(spec, s=2, h=0.01):
    return SSEIStepper(spec.problem, gauss_legendre(s), SolverConfig(h=h))


@pytest.mark.parametrize(
    "stepper",
    [
        ssei(duffing()),
        ssei(divergence_free_3d()),
        SecondOrderEIStepper(helmholtz_duffing().second_order, gauss_legendre(2), SolverConfig(h=0.01)),
        ERKNStepper(duffing().partitioned, gauss_legendre(2), SolverConfig(h=0.01)),
        RKStepper(duffing().problem, gauss_legendre(2), SolverConfig(h=0.01)),
    ],
    ids=["ssei-duffing", "ssei-divfree3d", "second-order-helmholtz", "erkn-duffing", "rk-duffing"],
)
def test_step_jacobian_matches_finite_differences(stepper):
    y = np.linspace(0.3, 0.9, stepper.dimension)
    J = step_jacobian(stepper, y)
    assert_allclose(J, finite_difference_jacobian(stepper, y), atol=1e-6 * (1 + np.abs(J).max()))
    assert volume_ratio(stepper, y) == pytest.approx(np.linalg.det(J), rel=1e-11)


def test_class_h_volume_is_preserved_by_every_ssei_method():
    spec = duffing()
    rng = np.random.default_rng(1)
    for s in (1, 2):
        for h in (0.5, 0.1):
            stepper = ssei(spec, s, h)
            for y in rng.uniform(-1, 1, size=(5, 2)) * [1, 20]:
                assert abs(volume_ratio(stepper, y) - 1) <= 1e-10
                assert abs(vp_condition_residual(stepper, y)) <= 1e-10


def test_class_s_volume_needs_one_stage_or_equal_nodes():
    spec = divergence_free_3d()
    y = np.array([0.5, 0.1, -0.2])
    one_stage = ssei(spec, 1, 0.05)
    equal = SSEIStepper(spec.problem, equal_node_two_stage(), SolverConfig(h=0.05))
    gauss = ssei(spec, 2, 0.05)
    assert abs(volume_ratio(one_stage, y) - 1) <= 1e-10
    assert abs(volume_ratio(equal, y) - 1) <= 1e-10
    deviation = abs(volume_ratio(gauss, y) - 1)
    assert (deviation <= 1e-10) == (abs(vp_condition_residual(gauss, y)) <= 1e-10)


def test_damped_determinant_is_the_contraction_factor():
    spec = helmholtz_duffing()
    stepper = SecondOrderEIStepper(spec.second_order, gauss_legendre(1), SolverConfig(h=0.01))
    target = volume_target(stepper)
    assert target == pytest.approx(math.exp(-0.0002), rel=1e-14)
    assert volume_ratio(stepper, spec.y0) == pytest.approx(target, rel=1e-11)


def test_symplecticity_defect_on_hamiltonian_field():
    spec = duffing()
    assert symplecticity_defect(ssei(spec, 2, 0.1), spec.y0) <= 1e-10
    with pytest.raises(DimensionError):
        symplecticity_defect(ssei(spec), spec.y0, J=np.eye(4))


@pytest.mark.parametrize(
    "spec",
    [duffing(), divergence_free_3d(), charged_particle(), synthetic_f_infinity(), js_field()],
    ids=lambda spec: spec.name,
)
def test_bundled_certificates_pass(spec):
    report = verify_class(spec.problem, spec.certificate)
    assert report.passed, report.relations
    assert report.samples == 64
    assert all(name.startswith(("f:", "g:")) for name in report.relations)


def test_wrong_relation_fails():
    spec = divergence_free_3d()
    cert = ClassCertificate("H", np.fliplr(np.eye(3)))
    report = verify_class(spec.problem, cert)
    assert not report.passed
    with pytest.raises(CertificateError):
        certify(spec.problem, cert)


def test_certify_attaches_the_report():
    spec = duffing()
    cert = certify(spec.problem, spec.certificate, samples=8)
    assert cert.report is not None
    assert cert.report.samples == 8
    assert cert.report.max_residual <= 1e-10


def test_f_infinity_reports_every_block_relation():
    spec = synthetic_f_infinity()
    report = verify_class(spec.problem, spec.certificate, samples=4)
    assert {"f:triangular", "f:u.H", "f:v.H", "g:triangular", "g:u.H", "g:v.H"} <= set(report.relations)


def test_certificate_validation():
    with pytest.raises(CertificateError):
        ClassCertificate("X", J2)
    with pytest.raises(CertificateError):
        ClassCertificate("H", np.zeros((2, 2)))
    with pytest.raises(CertificateError):
        ClassCertificate("F_inf", J2, m=2)
    with pytest.raises(CertificateError):
        ClassCertificate("H", J2, m=2, inner=ClassCertificate("H", J2))
    with pytest.raises(CertificateError):
        verify_class(divergence_free_3d().problem, ClassCertificate("H", J2))


def test_parse_certificate():
    cert = parse_certificate(
        """
        # block-triangular field
        tag = F_inf
        m = 2
        P = 0 1; -1 0
        inner.tag = H
        inner.P = 0 1; -1 0
        """
    )
    assert cert.tag == "F_inf"
    assert cert.dimension == 4
    assert_array_equal(cert.P, J2)
    assert cert.inner.tag == "H"
    for text in ("tag = H", "tag H\nP = 1", "tag = H\nP = 1 x; 0 1"):
        with pytest.raises(CertificateError):
            parse_certificate(text)


def test_e_matrix():
    E = e_matrix(0.1, np.array([[0.0, 1.0], [-4.0, 0.0]]), [0.5, 0.5])
    assert_array_equal(E.to_dense(), np.kron(np.ones((2, 2)), np.eye(2)))


def test_volume_report_csv():
    report = VolumeReport(
        times=np.array([0.0, 0.5]),
        per_step_det=np.array([2.0, 0.5]),
        vp_residual=np.array([0.0, 1e-3]),
        notes=["report-only"],
    )
    assert_allclose(report.log_drift, [math.log(2), 0.0], atol=1e-16)
    assert report.max_abs_det_minus_one == 1.0
    stream = io.StringIO()
    report.write_csv(stream, ["vpei test"])
    lines = stream.getvalue().splitlines()
    assert lines[:2] == ["# vpei test", "# report-only"]
    assert lines[2] == ",".join(CSV_COLUMNS)
    assert lines[3].startswith("0,0,2,1,0,")
    assert len(lines) == 5


def test_non_finite_determinants_are_infinite_deviation():
    report = VolumeReport(np.zeros(2), np.array([1.0, np.nan]), np.zeros(2))
    assert report.max_abs_det_minus_one == math.inf


def test_volume_drift_along_a_trajectory():
    spec = duffing()
    stepper = ssei(spec, 1, 0.1)
    trajectory = integrate(stepper, spec.y0, 2.0)
    report = volume_drift(trajectory, stepper)
    assert report.per_step_det.shape == (20,)
    assert report.target == 1.0
    assert report.max_abs_det_minus_one <= 1e-10
    assert abs(report.cumulative_log_drift) <= 1e-9
    assert report.max_abs_vp_residual <= 1e-10


def test_volume_drift_skips_diverged_steps():
    spec = divergence_free_3d()
    stepper = RKStepper(spec.problem, gauss_legendre(1), SolverConfig(h=0.5))
    trajectory = integrate(stepper, spec.y0, 1.0)
    assert trajectory.diverged == 2
    report = volume_drift(trajectory, stepper)
    assert np.isnan(report.per_step_det).all()
    assert report.max_abs_det_minus_one == math.inf


def test_f_two_accepts_either_relation_on_the_v_block():
    divfree = divergence_free_3d()
    report = verify_class(divfree.problem, ClassCertificate("F_2", np.fliplr(np.eye(3))), samples=8)
    assert report.passed
    assert set(report.relations) == {"f:v.H|S", "g:v.H|S"}

    spec = synthetic_f_infinity()
    inner = spec.certificate.inner
    cert = ClassCertificate("F_2", spec.certificate.P, m=spec.certificate.m, inner=inner)
    assert verify_class(spec.problem, cert, samples=8).passed


def test_e_matrix_transpose_identity():
    K = np.random.default_rng(5).standard_normal((3, 3))
    c = gauss_legendre(2).c
    E = e_matrix(0.3, K, c).to_dense()
    E_reflected = e_matrix(0.3, -K.T, c).to_dense()
    assert_allclose(E_reflected.T, E, rtol=0, atol=1e-13)


@pytest.mark.parametrize("s", [1, 2])
def test_block_triangular_field_volume_is_preserved(s):
    spec = synthetic_f_infinity()
    stepper = ssei(spec, s, 0.1)
    rng = np.random.default_rng(11)
    for y in spec.y0 + rng.uniform(-1, 1, size=(10, spec.problem.n)):
        assert abs(volume_ratio(stepper, y) - 1) <= 1e-12
