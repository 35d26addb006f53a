import json

import numpy as np
import pytest

from conftest import random_density, random_hermitian
from exciton_coherence.core import (
    CM1_TO_RAD_FS,
    ExcitonSystem,
    Superoperator,
    UnitError,
    anticommutator_superoperator,
    basis_projector,
    build_hamiltonian,
    bundled_system,
    check_density_matrix,
    commutator_superoperator,
    devectorize,
    diagonalize,
    load_system,
    site_state,
    thermal_energy_cm1,
    unit_convert,
    vectorize,
)


def test_dimer_hamiltonian_without_reorganization(dimer):
    H = build_hamiltonian(dimer.replace(reorganization_energy=0.0))
    np.testing.assert_array_equal(H, [[0.0, -87.7], [-87.7, 120.0]])


def test_dimer_hamiltonian_shifted_by_lambda(dimer):
    H = build_hamiltonian(dimer)
    np.testing.assert_allclose(H, [[35.0, -87.7], [-87.7, 155.0]], atol=1e-12)
    assert H.dtype == float
    np.testing.assert_array_equal(H, H.T)


def test_uncoupled_hamiltonian_is_diagonal():
    s = ExcitonSystem([10.0, -3.0, 7.0], np.zeros((3, 3)))
    np.testing.assert_array_equal(build_hamiltonian(s), np.diag([10.0, -3.0, 7.0]))


def test_dimer_eigenvalues_closed_form(dimer):
    E = diagonalize(build_hamiltonian(dimer.replace(reorganization_energy=0.0))).energies
    half = np.hypot(60.0, 87.7)
    np.testing.assert_allclose(E, [60.0 - half, 60.0 + half], atol=1e-10)
    np.testing.assert_allclose(E, [-46.26, 166.26], atol=0.01)


def test_diagonal_input_sorted_with_identity_vectors():
    b = diagonalize(np.diag([3.0, 1.0, 2.0]))
    np.testing.assert_array_equal(b.energies, [1.0, 2.0, 3.0])
    np.testing.assert_array_equal(np.abs(b.vectors), np.eye(3)[:, [1, 2, 0]])


def test_eigenvectors_unitary_and_sign_fixed(rng):
    H = random_hermitian(rng, 7)
    b = diagonalize(H)
    V = b.vectors
    assert np.abs(V.conj().T @ V - np.eye(7)).max() <= 1e-12
    for k in range(7):
        j = np.argmax(np.abs(V[:, k]))
        assert abs(V[j, k].imag) < 1e-14 and V[j, k].real > 0


def test_degenerate_pairs_flagged():
    assert diagonalize(np.diag([1.0, 1.0, 2.0])).degenerate_pairs == ((0, 1),)


def test_diagonalize_rejects_non_hermitian():
    with pytest.raises(ValueError):
        diagonalize(np.array([[0.0, 1.0], [2.0, 0.0]]))


def test_unit_conversions():
    assert unit_convert(1.0, "ps", "fs") == 1000.0
    assert unit_convert(0.0, "cm-1", "rad/fs") == 0.0
    np.testing.assert_allclose(unit_convert(120.0, "cm-1", "rad/fs"), 2.2604e-2, rtol=5e-5)
    np.testing.assert_allclose(120.0 * CM1_TO_RAD_FS, 2 * np.pi * 2.99792458e-5 * 120)
    with pytest.raises(UnitError):
        unit_convert(1.0, "cm-1", "fs")


def test_thermal_energy_300K():
    np.testing.assert_allclose(thermal_energy_cm1(300.0), 208.51, atol=0.01)


def test_vectorization_column_stacking():
    rho = np.arange(9.0).reshape(3, 3)
    np.testing.assert_array_equal(vectorize(rho), rho.T.ravel())
    np.testing.assert_array_equal(devectorize(vectorize(rho)), rho)


def test_commutator_of_diagonals_vanishes():
    S = commutator_superoperator(np.diag([1.0, 2.0, 5.0]))
    np.testing.assert_array_equal(S(np.diag([0.2, 0.3, 0.5])), np.zeros((3, 3)))


def test_anticommutator_of_projector():
    P = basis_projector(2, 0)
    S = anticommutator_superoperator(P, 0.7)
    np.testing.assert_allclose(S(P), -2 * 0.7 * P)


def test_commutator_matches_direct_arithmetic(rng):
    H = random_hermitian(rng, 3)
    rho = random_density(rng, 3)
    out = commutator_superoperator(H)(rho)
    assert np.abs(out - (-1j) * (H @ rho - rho @ H)).max() <= 1e-13


def test_superoperator_shape_checks():
    with pytest.raises(ValueError):
        Superoperator(np.zeros((4, 5)))
    S = Superoperator.zeros(2)
    with pytest.raises(ValueError):
        S(np.zeros((3, 3)))


def test_site_state_mixture():
    rho = site_state(7, 0, 5)
    np.testing.assert_allclose(np.diag(rho), [0.5, 0, 0, 0, 0, 0.5, 0])
    rho = site_state(3, 1, 2, weights=[3, 1])
    np.testing.assert_allclose(np.diag(rho), [0, 0.75, 0.25])


def test_check_density_matrix_rejects_negative():
    with pytest.raises(ValueError):
        check_density_matrix(np.diag([1.5, -0.5]))


@pytest.mark.parametrize("bad", [
    {"couplings": [[0.0, 1.0], [2.0, 0.0]]},
    {"couplings": [[1.0, 0.0], [0.0, 0.0]]},
    {"temperature": 0.0},
    {"trap_site": 2},
    {"trap_rate": -1.0},
    {"bath_correlation_rate": 0.0},
])
def test_system_validation(bad):
    base = dict(site_energies=[0.0, 1.0], couplings=np.zeros((2, 2)))
    base.update(bad)
    with pytest.raises(ValueError):
        ExcitonSystem(**base)


def test_bundled_configs(dimer, fmo):
    assert dimer.n_sites == 2 and fmo.n_sites == 7
    assert dimer.trap_site == 1 and fmo.trap_site == 2
    np.testing.assert_allclose(dimer.trap_rate, 1e-3)
    np.testing.assert_allclose(dimer.loss_rate, 1e-6)
    np.testing.assert_allclose(dimer.bath_correlation_rate, 1 / 50.0)
    assert fmo.couplings[0, 1] == -87.7 and fmo.site_energies[2] == 0.0


def test_json_round_trip(tmp_path, dimer):
    p = tmp_path / "s.json"
    p.write_text(json.dumps(dimer.to_dict()))
    s = load_system(p)
    np.testing.assert_array_equal(s.site_energies, dimer.site_energies)
    np.testing.assert_array_equal(s.couplings, dimer.couplings)
    np.testing.assert_allclose([s.trap_rate, s.loss_rate, s.bath_correlation_rate],
                               [dimer.trap_rate, dimer.loss_rate, dimer.bath_correlation_rate])
    np.testing.assert_array_equal(s.dipoles, dimer.dipoles)


def test_system_is_immutable(dimer):
    with pytest.raises(Exception):
        dimer.site_energies[0] = 5.0
    with pytest.raises(Exception):
        dimer.temperature = 10.0


def test_unknown_bundled_system():
    with pytest.raises(FileNotFoundError):
        bundled_system("nope")
