import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from exciton_coherence import qpt
from exciton_coherence.core import CM1_TO_RAD_FS, build_hamiltonian, diagonalize


@pytest.fixture(scope="module")
def slow_dimer(dimer):
    return dimer.replace(bath_correlation_rate=1 / 150.0)


@pytest.fixture(scope="module")
def levels(slow_dimer):
    return qpt.DimerLevelSystem.from_exciton_system(slow_dimer)


@pytest.fixture(scope="module")
def heom_chis(slow_dimer):
    gen = qpt.manifold_generator(slow_dimer, "heom", tiers=8)
    return qpt.chi_from_generator(gen, np.arange(0.0, 1001.0, 50.0))


def test_identity_at_zero(heom_chis):
    np.testing.assert_allclose(heom_chis[0].data, qpt.ProcessTensor.identity().data,
                               atol=1e-12)


def test_unitary_generator(dimer):
    s = dimer.replace(reorganization_energy=0.0, loss_rate=0.0)
    T = np.array([0.0, 37.0, 250.0, 800.0])
    chis = qpt.chi_from_generator(qpt.manifold_generator(s, "redfield"), T)
    E = diagonalize(build_hamiltonian(s)).energies
    H_exc = np.diag([0.0, E[1], E[0]]) * CM1_TO_RAD_FS
    for t, chi in zip(T, chis):
        U = qpt.unitary_process(H_exc, t)
        assert np.abs(chi.data - U.data).max() <= 1e-10


def test_unitary_choi_is_rank_one():
    H = np.diag([0.0, 0.03, 0.01]) + 0.004 * (np.ones((3, 3)) - np.eye(3))
    ev = np.linalg.eigvalsh(qpt.unitary_process(H, 123.0).choi())
    np.testing.assert_allclose(ev[-1], 3.0, atol=1e-12)
    assert np.abs(ev[:-1]).max() < 1e-12


def test_heom_population_transfer(heom_chis):
    aa = np.array([c["aaaa"].real for c in heom_chis])
    bb = np.array([c["bbaa"].real for c in heom_chis])
    ab = np.array([c["abaa"].real for c in heom_chis])
    assert aa[-1] < 0.5 < aa[0]
    assert bb[-1] > 0.5 > bb[0]
    assert np.abs(ab).max() > 0.01
    assert abs(ab[0]) < 1e-12 and np.abs(ab[-5:]).max() < np.abs(ab).max()


def test_redfield_never_couples_population_to_coherence(slow_dimer):
    chis = qpt.chi_from_generator(qpt.manifold_generator(slow_dimer, "redfield"),
                                  np.arange(0.0, 1001.0, 50.0))
    assert max(abs(c["abaa"]) for c in chis) <= 1e-10


def test_generated_tensors_physical(heom_chis):
    for chi in heom_chis:
        rep = qpt.validate_process(chi)
        assert rep.ok, rep.flags


def test_pulse_coefficient():
    p = qpt.Pulse(12500.0, 100.0, strength=0.3)
    np.testing.assert_allclose(abs(qpt.pulse_coefficient(p, 12500.0)),
                               0.3 * np.sqrt(2 * np.pi * 100.0 ** 2))
    det = 1.0 / (100.0 * CM1_TO_RAD_FS)
    ratio = abs(qpt.pulse_coefficient(p, 12500.0 + det)) / abs(qpt.pulse_coefficient(p, 12500.0))
    np.testing.assert_allclose(ratio, np.exp(-0.5), rtol=1e-12)


def test_narrowband_suppression(dimer):
    lv = qpt.DimerLevelSystem.from_exciton_system(dimer)
    split = lv.omega_alpha - lv.omega_beta
    np.testing.assert_allclose(split, 212.52, atol=0.01)
    np.testing.assert_allclose(split * CM1_TO_RAD_FS, 4.003e-2, rtol=1e-3)
    p = qpt.Pulse(lv.omega_alpha, 470.0)
    r = abs(qpt.pulse_coefficient(p, lv.omega_beta)) / abs(qpt.pulse_coefficient(p, lv.omega_alpha))
    np.testing.assert_allclose(np.log(r), -177.0, rtol=0.01)


def test_isotropic_average_cases():
    x, y = np.eye(3)[0], np.eye(3)[1]
    assert qpt.isotropic_average_xxxx(x, x, x, x) == pytest.approx(1 / 5)
    assert qpt.isotropic_average_xxxx(x, y, x, y) == pytest.approx(1 / 15)
    assert qpt.isotropic_average_xxxx(x, y, np.zeros(3), y) == 0.0


def test_isotropic_average_monte_carlo():
    rng = np.random.default_rng(8)
    v = rng.normal(size=(4, 3))
    R = Rotation.random(200_000, random_state=9).as_matrix()
    proj = np.einsum("nij,kj->nk", R, v)[:, :, None]           # rotated vectors
    lab = np.einsum("nki,i->nk", np.einsum("nij,kj->nki", R, v), np.eye(3)[0])
    samples = lab.prod(axis=1)
    est, se = samples.mean(), samples.std() / np.sqrt(samples.size)
    assert proj.shape[0] == samples.size
    assert abs(est - qpt.isotropic_average_xxxx(*v)) < 4 * se


def test_identity_population_bracket():
    chi = qpt.ProcessTensor.identity()
    assert chi["ggaa"] - chi["gggg"] - chi["aaaa"] == -2
    assert chi["bbaa"] == 0 and chi["abaa"] == 0


def test_forward_linearity(levels, heom_chis, rng):
    a = heom_chis[4]
    b = qpt.ProcessTensor(0.0, rng.normal(size=81) + 1j * rng.normal(size=81))
    for pulses in qpt.experiment_pulses(levels):
        lhs = qpt.synthesize_peaks(a + b, levels, pulses).vector()
        rhs = (qpt.synthesize_peaks(a, levels, pulses).vector()
               + qpt.synthesize_peaks(b, levels, pulses).vector())
        assert np.abs(lhs - rhs).max() <= 1e-12 * np.abs(lhs).max()


def test_narrowband_reduction(levels, heom_chis):
    pulses = qpt.narrowband_experiment(levels)
    for chi in heom_chis[1:]:
        full = qpt.synthesize_peaks(chi, levels, pulses).peaks["aa"]
        red = qpt.reduced_peak_aa(chi, levels, pulses)
        assert abs(full - red) <= 1e-8 * abs(red)


def test_narrowband_leak_ratio(levels):
    pulses = qpt.narrowband_experiment(levels)
    A = qpt.forward_matrix(levels, pulses)[0]
    keep = np.ravel_multi_index((1, 2, 1, 1), (3, 3, 3, 3))
    leak = np.abs(np.delete(A, keep)).max()
    assert abs(A[keep]) / leak > 1e10


def test_round_trip_t200(levels, heom_chis):
    chi = heom_chis[4]
    assert chi.T == 200.0
    ms = [qpt.synthesize_peaks(chi, levels, p) for p in qpt.experiment_pulses(levels)]
    res = qpt.qpt_invert(ms, levels)
    mask = qpt.measured_entries()
    assert np.abs(res.chi.data - chi.data)[mask].max() <= 1e-8
    assert res.rank == res.n_free == 16
    b = np.concatenate([m.vector() for m in ms])
    assert res.residual <= 1e-12 * np.linalg.norm(b)
    assert np.isnan(res.chi["ggga"]) and np.isnan(res.chi["aaga"])
    assert res.chi["gagg"] == 0 and res.chi["gaaa"] == 0


def test_identity_inversion(levels):
    chi = qpt.ProcessTensor.identity()
    ms = [qpt.synthesize_peaks(chi, levels, p) for p in qpt.experiment_pulses(levels)]
    res = qpt.qpt_invert(ms, levels)
    mask = qpt.measured_entries()
    assert np.abs(res.chi.data - chi.data)[mask].max() <= 1e-10


def test_noise_propagation(levels, heom_chis):
    chi = heom_chis[4]
    ms = [qpt.synthesize_peaks(chi, levels, p) for p in qpt.experiment_pulses(levels)]
    clean = qpt.qpt_invert(ms, levels)
    b = np.concatenate([m.vector() for m in ms])
    scale = np.abs(b).max()
    mask = qpt.measured_entries()
    rng = np.random.default_rng(21)
    medians, amps = [], []
    for level in (0.01, 0.02):
        errs = []
        for _ in range(200):
            noisy = [qpt.PeakAmplitudeSet(
                {k: v + level * scale * (rng.standard_normal() + 1j * rng.standard_normal())
                 / np.sqrt(2) for k, v in m.peaks.items()}, m.pulses, m.T) for m in ms]
            r = qpt.qpt_invert(noisy, levels)
            errs.append(np.abs(r.chi.data - chi.data)[mask].max())
            db = np.concatenate([n.vector() for n in noisy]) - b
            dth = r.parameters - clean.parameters
            amps.append((np.linalg.norm(dth) / np.linalg.norm(clean.parameters))
                        / (np.linalg.norm(db) / np.linalg.norm(b)))
        medians.append(np.median(errs))
    assert abs(medians[1] / medians[0] - 2.0) < 0.3
    amp = np.median(amps)
    assert clean.condition / 10 <= amp <= clean.condition * 10


def test_rank_deficiency_reported(levels, heom_chis):
    ms = [qpt.synthesize_peaks(heom_chis[2], levels, qpt.experiment_pulses(levels)[0])]
    with pytest.raises(qpt.RankDeficiencyError) as info:
        qpt.qpt_invert(ms, levels)
    assert info.value.directions


def test_corrupted_tensor_flagged(heom_chis):
    chi = qpt.ProcessTensor(heom_chis[3].T, heom_chis[3].data.copy())
    chi.data[1, 1, 1, 1] += 0.1
    rep = qpt.validate_process(chi)
    np.testing.assert_allclose(rep.trace_alpha, 0.1, atol=1e-12)
    assert "trace" in rep.flags and not rep.ok


def test_measurement_json_round_trip(levels, heom_chis, tmp_path):
    ms = [qpt.synthesize_peaks(heom_chis[5], levels, p) for p in qpt.experiment_pulses(levels)]
    path = tmp_path / "m.json"
    qpt.measurements_to_json(ms, path)
    back = qpt.measurements_from_json(str(path))
    assert len(back) == 8
    for a, b in zip(ms, back):
        assert a.pulses == b.pulses
        assert a.peaks == b.peaks
    doc = json.loads(path.read_text())
    assert set(doc["experiments"][0]["peaks"]["aa"]) == {"re", "im"}


def test_inversion_json(levels, heom_chis):
    ms = [qpt.synthesize_peaks(heom_chis[5], levels, p) for p in qpt.experiment_pulses(levels)]
    d = qpt.qpt_invert(ms, levels).to_dict()
    json.dumps(d)
    assert {"chi", "residual", "condition", "validation"} <= set(d)


def test_non_dimer_rejected(fmo):
    with pytest.raises(ValueError):
        qpt.DimerLevelSystem.from_exciton_system(fmo)
    with pytest.raises(ValueError):
        qpt.manifold_generator(fmo)
