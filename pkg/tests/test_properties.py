"""Property-based checks of the structural invariants."""
import numpy as np
from hypothesis import given, settings, strategies as st

from conftest import random_density, random_hermitian
from exciton_coherence import qpt
from exciton_coherence.core import (
    ExcitonSystem,
    build_hamiltonian,
    commutator_superoperator,
    devectorize,
    diagonalize,
    lindblad_dissipator,
    site_state,
    vectorize,
)
from exciton_coherence.efficiency import efficiency_quadrature, efficiency_report
from exciton_coherence.redfield import build_redfield_generator, propagate

seeds = st.integers(0, 2**32 - 1)
dims = st.integers(1, 7)


def _dimer(lam, trap, loss, delta=120.0, J=-87.7, T=300.0):
    return ExcitonSystem(site_energies=[0.0, delta], couplings=[[0, J], [J, 0]],
                         reorganization_energy=lam, temperature=T, trap_site=1,
                         trap_rate=trap, loss_rate=loss)


@given(seeds, dims)
def test_vectorize_round_trip(seed, n):
    rho = random_hermitian(np.random.default_rng(seed), n)
    assert np.array_equal(devectorize(vectorize(rho)), rho)


@given(seeds, dims)
def test_superoperators_preserve_hermiticity(seed, n):
    rng = np.random.default_rng(seed)
    H, X = random_hermitian(rng, n), random_hermitian(rng, n)
    L = rng.normal(size=(n, n)) + 1j * rng.normal(size=(n, n))
    for S in (commutator_superoperator(H), lindblad_dissipator(L, 0.3)):
        Y = S(X)
        assert np.abs(Y - Y.conj().T).max() <= 1e-12 * max(1.0, np.abs(Y).max())


@settings(max_examples=10)
@given(seeds, dims)
def test_composition_matches_sequential_application(seed, n):
    rng = np.random.default_rng(seed)
    A = commutator_superoperator(random_hermitian(rng, n))
    B = lindblad_dissipator(rng.normal(size=(n, n)), 0.7)
    AB = A @ B
    for _ in range(100):
        rho = random_density(rng, n)
        assert np.abs(AB(rho) - A(B(rho))).max() <= 1e-12 * max(1.0, np.abs(AB(rho)).max())


@given(seeds, st.integers(2, 7), st.floats(0.0, 500.0))
def test_hamiltonian_shift_invariance(seed, n, lam):
    rng = np.random.default_rng(seed)
    Jm = rng.normal(scale=50, size=(n, n))
    Jm = (Jm + Jm.T) / 2
    np.fill_diagonal(Jm, 0)
    base = ExcitonSystem(site_energies=rng.uniform(0, 400, n), couplings=Jm)
    H0, H1 = build_hamiltonian(base), build_hamiltonian(base.replace(reorganization_energy=lam))
    assert np.array_equal(H1, H1.T) and H1.dtype == float
    E0, E1 = diagonalize(H0).energies, diagonalize(H1).energies
    assert np.abs(E1 - E0 - lam).max() <= 1e-9 * max(1.0, lam)


@settings(max_examples=15)
@given(st.floats(0.0, 300.0), st.floats(1e-4, 1e-2), st.floats(0.0, 1e-4), seeds)
def test_partition_residual_is_direct_trapping(lam, trap, loss, seed):
    # population already on the trap site at t=0 is trapped without any transfer
    system = _dimer(lam, trap, loss)
    rho0 = random_density(np.random.default_rng(seed), 2)
    model = build_redfield_generator(system)
    rep = efficiency_report(model, rho0, quadrature=False)
    assert abs(rep.residual - trap / (trap + loss) * rho0[1, 1].real) <= 1e-6
    assert abs(efficiency_quadrature(model, rho0) - rep.eta) <= 1e-6


@settings(max_examples=15)
@given(st.floats(0.0, 300.0), st.floats(1e-4, 1e-2), st.floats(0.0, 1e-4))
def test_partition_identity_site_initial_state(lam, trap, loss):
    # started away from the trap, nothing is trapped at t=0 and the identity is exact
    model = build_redfield_generator(_dimer(lam, trap, loss))
    rep = efficiency_report(model, site_state(2, 0), quadrature=True)
    assert abs(rep.residual) <= 1e-6
    assert abs(rep.eta_quadrature - rep.eta) <= 1e-6


@settings(max_examples=10)
@given(st.floats(1.0, 100.0), st.floats(1e-4, 1e-2))
def test_efficiency_continuous_in_loss_limit(lam, trap):
    rho0 = site_state(2, 0)
    at0 = efficiency_report(build_redfield_generator(_dimer(lam, trap, 0.0)), rho0,
                            quadrature=False)
    near = efficiency_report(build_redfield_generator(_dimer(lam, trap, 1e-12)), rho0,
                             quadrature=False)
    assert abs(at0.eta - 1.0) <= 1e-9
    for f in ("eta", "eta_H", "eta_decoherence", "eta_init"):
        assert abs(getattr(at0, f) - getattr(near, f)) <= 1e-6


@settings(max_examples=10)
@given(st.floats(0.0, 200.0), st.floats(0.0, 1e-2), st.floats(0.0, 1e-3), seeds)
def test_trace_non_increase(lam, trap, loss, seed):
    model = build_redfield_generator(_dimer(lam, trap, loss))
    rho0 = random_density(np.random.default_rng(seed), 2)
    t = np.linspace(0, 1000, 51)
    tr = propagate(model.generator, rho0, t, method="expm").traces
    assert np.all(np.diff(tr) <= 1e-10)


# lambda is kept out of the subnormal range, where the rates themselves lose bits
@given(st.floats(1e-100, 300.0), st.floats(10.0, 400.0), st.floats(-150, 150).filter(
    lambda x: abs(x) > 1), st.floats(30.0, 400.0))
def test_detailed_balance(lam, delta, J, T):
    model = build_redfield_generator(_dimer(lam, 0.0, 0.0, delta, J, T))
    assert model.detailed_balance_residual() <= 1e-10


@given(seeds, st.floats(-2, 2), st.floats(-2, 2))
def test_forward_model_linear_in_chi(seed, a, b):
    rng = np.random.default_rng(seed)
    lv = qpt.DimerLevelSystem.from_exciton_system(_dimer(35.0, 0.0, 0.0))
    pulses = qpt.experiment_pulses(lv)[seed % 8]
    c1 = qpt.ProcessTensor(0.0, rng.normal(size=81) + 1j * rng.normal(size=81))
    c2 = qpt.ProcessTensor(0.0, rng.normal(size=81) + 1j * rng.normal(size=81))
    mix = qpt.ProcessTensor(0.0, a * c1.data + b * c2.data)
    A = qpt.forward_matrix(lv, pulses)
    lhs = A @ mix.data.ravel()
    rhs = a * (A @ c1.data.ravel()) + b * (A @ c2.data.ravel())
    assert np.abs(lhs - rhs).max() <= 1e-12 * max(1.0, np.abs(lhs).max())
