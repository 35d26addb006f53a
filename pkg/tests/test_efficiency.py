import numpy as np
import pytest

from exciton_coherence import efficiency as ef
from exciton_coherence.core import devectorize, site_state, vectorize
from exciton_coherence.heom import build_heom_generator
from exciton_coherence.redfield import build_redfield_generator


def dense_partition(model, rho0):
    """Oracle: the partition formulas evaluated with explicit dense inverses."""
    M = model.generator.matrix
    T = model.M_trap.matrix
    S_inv = np.linalg.inv(T + model.M_loss.matrix)
    x = -np.linalg.inv(M) @ vectorize(rho0)
    tr = lambda v: np.trace(devectorize(v)).real
    eta = -tr(T @ x)
    eta_H = tr(T @ S_inv @ model.M_H.matrix @ x)
    eta_dec = tr(T @ S_inv @ model.M_decoherence.matrix @ x)
    return eta, eta_H, eta_dec


def no_jump_oracle(model, psi):
    """Oracle: closed-form integral of the damped no-jump trajectory."""
    s = model.system
    lam, V = np.linalg.eig(model.effective_hamiltonian())
    a = np.linalg.solve(V, psi)
    m = s.trap_site
    amp = V[m] * a
    # int_0^inf exp(-i (l_j - conj l_k) t) dt = 1 / (i (l_j - conj l_k))
    K = 1.0 / (1j * (lam[:, None] - lam[None, :].conj()))
    return 2 * s.trap_rate * np.real(amp @ K @ amp.conj())


@pytest.fixture(scope="module")
def dimer_model(dimer):
    return build_redfield_generator(dimer)


@pytest.fixture(scope="module")
def dimer_report(dimer_model):
    return ef.efficiency_report(dimer_model, site_state(2, 0))


def test_dimer_report_matches_dense_oracle(dimer_model, dimer_report):
    eta, eta_H, eta_dec = dense_partition(dimer_model, site_state(2, 0))
    np.testing.assert_allclose([dimer_report.eta, dimer_report.eta_H,
                                dimer_report.eta_decoherence], [eta, eta_H, eta_dec],
                               atol=1e-12)


def test_dimer_frozen_values(dimer_report):
    # values from the dense and closed-form oracles above
    np.testing.assert_allclose(dimer_report.eta, 0.997105, atol=1e-6)
    np.testing.assert_allclose(dimer_report.eta_H, 0.427521, atol=1e-6)
    np.testing.assert_allclose(dimer_report.eta_decoherence, 0.569584, atol=1e-6)
    np.testing.assert_allclose(dimer_report.eta_init, 0.009026, atol=1e-6)


def test_dimer_efficiency_near_unity(dimer_report):
    assert dimer_report.eta > 0.99


def test_eta_init_matches_closed_form(dimer_model, fmo):
    np.testing.assert_allclose(
        ef.initial_state_contribution(dimer_model, np.array([1.0, 0.0])),
        no_jump_oracle(dimer_model, np.array([1.0, 0.0])), rtol=1e-10)
    m = build_redfield_generator(fmo)
    e1, e6 = np.eye(7)[0], np.eye(7)[5]
    mix = ef.initial_state_contribution(m, np.stack([e1, e6]), weights=[0.5, 0.5])
    np.testing.assert_allclose(mix, 0.5 * (no_jump_oracle(m, e1) + no_jump_oracle(m, e6)),
                               rtol=1e-10)
    rep = ef.efficiency_report(m, site_state(7, 0, 5), quadrature=False)
    np.testing.assert_allclose(rep.eta_init, mix, rtol=1e-10)


def test_partition_and_quadrature(dimer_report):
    assert abs(dimer_report.residual) <= 1e-6
    assert abs(dimer_report.eta - dimer_report.eta_quadrature) <= 1e-6


def test_no_trap_means_no_efficiency(dimer):
    rep = ef.efficiency_report(build_redfield_generator(dimer.replace(trap_rate=0.0)),
                               site_state(2, 0))
    assert rep.eta == 0.0 and rep.eta_H == 0.0 and rep.eta_decoherence == 0.0


def test_no_loss_means_full_efficiency(dimer, fmo):
    for s, rho in ((dimer, site_state(2, 0)), (fmo, site_state(7, 0))):
        m = build_redfield_generator(s.replace(loss_rate=0.0))
        assert abs(ef.efficiency(m, rho) - 1.0) <= 1e-6


def test_zero_loss_limit_is_continuous(dimer):
    a = ef.efficiency_report(build_redfield_generator(dimer.replace(loss_rate=0.0)),
                             site_state(2, 0), quadrature=False)
    b = ef.efficiency_report(build_redfield_generator(dimer.replace(loss_rate=1e-13)),
                             site_state(2, 0), quadrature=False)
    np.testing.assert_allclose([a.eta_H, a.eta_decoherence], [b.eta_H, b.eta_decoherence],
                               atol=1e-8)


def test_zero_lambda_is_all_coherent(dimer):
    m = build_redfield_generator(dimer.replace(reorganization_energy=0.0))
    rep = ef.efficiency_report(m, site_state(2, 0))
    assert rep.eta_decoherence == 0.0
    assert abs(rep.eta - rep.eta_H) <= 1e-8


def test_zero_lambda_no_loss_initial_state_is_everything(dimer):
    m = build_redfield_generator(dimer.replace(reorganization_energy=0.0, loss_rate=0.0))
    rep = ef.efficiency_report(m, site_state(2, 0), quadrature=False)
    np.testing.assert_allclose(rep.eta_init, 1.0, atol=1e-10)


def test_whole_generator_contribution(dimer_model):
    # M_part = M collapses to the sink term Tr{M_trap (M_trap+M_loss)^-1 rho0};
    # with the positive flux convention it enters with the opposite sign
    rho0 = site_state(2, 0, 1, weights=[0.4, 0.6])
    S = dimer_model.M_trap.matrix + dimer_model.M_loss.matrix
    direct = np.trace(devectorize(dimer_model.M_trap.matrix
                                  @ np.linalg.solve(S, vectorize(rho0)))).real
    got = ef.contribution(dimer_model.generator, dimer_model.generator,
                          dimer_model.M_trap, dimer_model.M_loss, rho0)
    np.testing.assert_allclose(got, -direct, atol=1e-12)
    kappa, gamma = dimer_model.system.trap_rate, dimer_model.system.loss_rate
    np.testing.assert_allclose(direct, 0.6 * kappa / (kappa + gamma), rtol=1e-12)


def test_trap_population_residual(dimer_model):
    # eta - eta_H - eta_dec is the directly trapped initial population
    rho0 = site_state(2, 0, 1, weights=[0.4, 0.6])
    rep = ef.efficiency_report(dimer_model, rho0, quadrature=False)
    s = dimer_model.system
    np.testing.assert_allclose(rep.residual, 0.6 * s.trap_rate / (s.trap_rate + s.loss_rate),
                               atol=1e-10)


def test_singular_generator_rejected(dimer):
    m = build_redfield_generator(dimer.replace(trap_rate=0.0, loss_rate=0.0))
    with pytest.raises(ef.SingularGeneratorError):
        ef.efficiency(m, site_state(2, 0))


def test_not_dissipative_rejected():
    with pytest.raises(ef.NotDissipativeError):
        ef.check_dissipative(np.diag([-1.0, 0.5, -2.0, -3.0]).astype(complex))


def test_condition_reported(dimer_report):
    assert 1.0 < dimer_report.condition < 1e8


def test_heom_report(dimer):
    rep = ef.efficiency_report(build_heom_generator(dimer, 6), site_state(2, 0))
    assert np.isnan(rep.eta_init) and np.isnan(rep.eta_dyn)
    # site-local coupling never reaches the trap diagonal of the physical ADO
    assert abs(rep.eta_decoherence) <= 1e-14
    assert abs(rep.residual) <= 1e-10
    assert abs(rep.eta - rep.eta_quadrature) <= 1e-6


def test_concurrence_cases():
    assert ef.concurrence(site_state(2, 0)) == 0.0
    plus = 0.5 * np.ones((2, 2))
    assert ef.concurrence(plus) == pytest.approx(1.0)
    assert ef.concurrence(np.eye(2) / 2) == 0.0


def test_coherence_normalized_zero_lambda(dimer):
    rep = ef.integrated_coherence(build_redfield_generator(dimer.replace(
        reorganization_energy=0.0)), site_state(2, 0))
    assert rep.C_normalized == 1.0


def test_coherent_reference_routes_agree(dimer):
    s = dimer.replace(reorganization_energy=0.0)
    pure = ef.coherent_reference(s, site_state(2, 0))
    full = ef.integrated_coherence(build_redfield_generator(s), site_state(2, 0))
    np.testing.assert_allclose(pure.coherence, full.C, rtol=1e-5)


def test_cutoff_extension_changes_little(dimer_model):
    a = ef.integrated_coherence(dimer_model, site_state(2, 0))
    b = ef.integrated_coherence(dimer_model, site_state(2, 0), threshold=1e-5,
                                reference=a.C_reference)
    assert b.cutoff_time > a.cutoff_time
    assert abs(b.C - a.C) / a.C < 2e-3


def test_exciton_basis_coherence(dimer_model):
    rep = ef.integrated_coherence(dimer_model, site_state(2, 0), basis="exciton")
    assert rep.C > 0 and 0 < rep.C_normalized < 1
    with pytest.raises(ValueError):
        ef.integrated_coherence(dimer_model, site_state(2, 0), basis="nope")


def test_fmo_pathway_ordering_redfield(fmo):
    m = build_redfield_generator(fmo)
    c1 = ef.integrated_coherence(m, site_state(7, 0)).C_normalized
    c6 = ef.integrated_coherence(m, site_state(7, 5)).C_normalized
    assert c1 > c6


def test_enaqt_trend(fmo):
    rho = site_state(7, 0, 5)
    low = ef.efficiency(build_redfield_generator(fmo.replace(reorganization_energy=0.1)), rho)
    high = ef.efficiency(build_redfield_generator(fmo), rho)
    assert high > low


def test_large_hierarchy_iterative_solver(fmo):
    # FMO L=3 has 120 ADOs (5880 unknowns): the preconditioned iterative path
    gen = build_heom_generator(fmo, 3)
    parts = ef.generator_parts(gen)
    solver = ef.LinearSolver(parts.total, block_size=parts.block_size)
    b = parts.lift(site_state(7, 0))
    x = solver.solve(b)
    assert np.linalg.norm(parts.total @ x - b) <= 1e-9 * np.linalg.norm(b)
