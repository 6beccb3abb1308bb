import sys
import os
import math
import numpy as np
import pytest

# Add the project root to the Python path to allow importing from 'app'
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../../')))

from app.core.fidelity import (
    FidelityReport,
    ICCState,
    IdealGateSpec,
    Rotation,
    averaged_fidelity,
    ensemble_fidelity,
    ensemble_gate_fidelity,
    icc_state_pairs,
    ideal_blockade_unitary,
    ideal_protocol_unitary,
    ideal_target_state,
    make_icc_state,
    protocol_target_species,
    state_fidelity,
    trace_cost,
)
from app.core.hamiltonian import DisorderRealization, PhysicalParams, occupation_table, sample_disorder
from app.core.lattice import build_ladder, build_reversed_h, build_row
from app.core.propagate import ResourceLimitError
from app.core.pulses import ControlMatrix, protocol_schedule, schedule_to_exact_controls

PARAMS = PhysicalParams.from_dict()
ROW7 = build_row(7)
REVERSED_H = build_reversed_h()
COARSE_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)


def _overlap(a, b):
    return abs(np.vdot(a, b))


@pytest.mark.parametrize("p, index", [(0.0, 64), (1.0, 80)])
def test_icc_basis_states_on_row(p, index):
    """
    Left of a B ICC at column 2 the Neel domain excites column 0; p = 1 also excites column 2.
    """
    state = make_icc_state(ROW7, ICCState(p, icc_position=2))
    expected = np.zeros(ROW7.dimension)
    expected[index] = 1.0
    np.testing.assert_allclose(np.abs(state), expected)


def test_icc_superposition_amplitudes():
    """
    The ICC qubit carries sqrt(1-p)|g> + sqrt(p) e^{i phi}|e>.
    """
    state = make_icc_state(ROW7, ICCState(0.25, phi=math.pi / 3, icc_position=2))
    assert state[64] == pytest.approx(math.sqrt(0.75))
    assert state[80] == pytest.approx(0.5 * np.exp(1j * math.pi / 3))
    assert np.linalg.norm(state) == pytest.approx(1.0)


def test_ladder_superposed_rows():
    """
    On the ladder every row of the ICC column is superposed unless rows are selected.
    """
    ladder = build_ladder(2)
    all_rows = make_icc_state(ladder, ICCState(0.3, icc_position=2))
    one_row = make_icc_state(ladder, ICCState(0.3, icc_position=2, superposed_rows=[0]))
    assert np.count_nonzero(np.abs(all_rows) > 1e-12) == 4
    assert np.count_nonzero(np.abs(one_row) > 1e-12) == 2
    # two independent superposed qubits: overlap with p = 0 is (1-p) per row
    ground = make_icc_state(ladder, ICCState(0.0, icc_position=2))
    assert _overlap(ground, all_rows) == pytest.approx(0.7)
    assert _overlap(ground, one_row) == pytest.approx(math.sqrt(0.7))


def test_icc_couplers_stay_ground():
    """
    Coupler qubits are |g> in every ICC state.
    """
    ladder = build_ladder(2)
    state = make_icc_state(ladder, ICCState(1.0, icc_position=2))
    occupied = occupation_table(ladder.n_qubits)[int(np.argmax(np.abs(state)))]
    assert occupied[ladder.couplers()[0]] == 0


@pytest.mark.parametrize("spec", [
    ICCState(0.5, icc_position=7),
    ICCState(0.5, icc_position=2, icc_column_type="C"),
    ICCState(0.5, icc_position=2, superposed_rows=[1]),
])
def test_invalid_icc_placement(spec):
    """
    Out-of-range positions, wrong column types and rows raise ValueError.
    """
    with pytest.raises(ValueError):
        make_icc_state(ROW7, spec)


@pytest.mark.parametrize("p", [-0.1, 1.5])
def test_icc_weight_range(p):
    """
    p must lie in [0, 1].
    """
    with pytest.raises(ValueError):
        ICCState(p)


def test_rotation_matrix():
    """
    R(pi, x) = -i sigma_x; the axis must be a unit vector.
    """
    np.testing.assert_allclose(Rotation(math.pi).matrix(), [[0, -1j], [-1j, 0]], atol=1e-15)
    with pytest.raises(ValueError):
        Rotation(1.0, (1.0, 1.0, 0.0))


def test_blockade_unitary_rotates_only_free_qubits():
    """
    On A-B-A a B pi pulse flips the middle qubit only when both A are |g>.
    """
    aba = build_row(3, start="A")
    u = ideal_blockade_unitary(aba, IdealGateSpec.primitive("B", math.pi, 0.0))
    assert u[2, 0] == pytest.approx(-1j)
    assert u[4, 4] == 1.0  # |egg> blocked
    assert u[1, 1] == 1.0  # |gge> blocked
    np.testing.assert_allclose(u.conj().T @ u, np.eye(8), atol=1e-12)


def test_crossed_qubit_rotates_twice():
    """
    A crossed qubit turns by 2 theta: a pi/2 pulse flips it fully.
    """
    row = build_row(3, start="A", crossed=[1])
    u = ideal_blockade_unitary(row, IdealGateSpec.primitive("B", math.pi / 2, 0.0))
    assert abs(u[2, 0]) == pytest.approx(1.0)


def test_blockade_unitary_commutes_with_sector_projectors():
    """
    The ideal gate preserves the neighbour configuration of every driven qubit.
    """
    aba = build_row(3, start="A")
    u = ideal_blockade_unitary(aba, IdealGateSpec.primitive("B", 0.7, 0.3))
    occ = occupation_table(3)
    for pattern in [(0, 0), (0, 1), (1, 0), (1, 1)]:
        projector = np.diag([float((row[0], row[2]) == pattern) for row in occ])
        np.testing.assert_allclose(projector @ u, u @ projector, atol=1e-12)


def test_identity_protocol():
    """
    The identity protocol is the identity matrix.
    """
    np.testing.assert_array_equal(ideal_protocol_unitary(ROW7, "identity"), np.eye(ROW7.dimension))


@pytest.mark.parametrize("protocol", ["shift", "shift^-1", "hadamard"])
def test_ideal_protocols_are_unitary(protocol):
    """
    Ideal protocol matrices are unitary.
    """
    u = ideal_protocol_unitary(ROW7, protocol)
    np.testing.assert_allclose(u.conj().T @ u, np.eye(ROW7.dimension), atol=1e-10)


def test_shift_and_inverse_cancel():
    """
    shift^-1 undoes shift.
    """
    forward = ideal_protocol_unitary(ROW7, "shift")
    backward = ideal_protocol_unitary(ROW7, "shift^-1")
    np.testing.assert_allclose(backward @ forward, np.eye(ROW7.dimension), atol=1e-10)


@pytest.mark.parametrize("p", [0.0, 1.0])
def test_shift_moves_icc_one_column(p):
    """
    The shift carries a B ICC at column 2 to an A ICC at column 3.
    """
    target = ideal_target_state(ROW7, "shift", ICCState(p, icc_position=2))
    moved = make_icc_state(ROW7, ICCState(p, icc_position=3))
    assert _overlap(target, moved) == pytest.approx(1.0, abs=1e-9)


def test_hadamard_maps_ground_to_equal_superposition():
    """
    H|g> is the p = 1/2, phi = pi ICC up to a global phase; H twice is the identity.
    """
    target = ideal_target_state(ROW7, "hadamard", ICCState(0.0, icc_position=2))
    expected = make_icc_state(ROW7, ICCState(0.5, phi=math.pi, icc_position=2))
    assert _overlap(target, expected) == pytest.approx(1.0, abs=1e-9)

    u = ideal_protocol_unitary(ROW7, "hadamard", target_species="B")
    psi = make_icc_state(ROW7, ICCState(0.3, phi=0.7, icc_position=2))
    assert _overlap(psi, u @ (u @ psi)) == pytest.approx(1.0, abs=1e-9)


def test_cz_phases_on_reversed_h():
    """
    Only |gg> of the two data qubits picks up a sign.
    """
    u = ideal_protocol_unitary(REVERSED_H, "cz")
    # data qubits 1 and 4 are bits 32 and 4
    for index, phase in [(0, -1.0), (4, 1.0), (32, 1.0), (36, 1.0)]:
        assert u[index, index] == pytest.approx(phase, abs=1e-9)
        assert abs(u[index, index]) == pytest.approx(1.0, abs=1e-9)


def test_protocol_target_species():
    """
    Hadamard needs a crossed B/C column, CZ a coupler on the ICC column.
    """
    assert protocol_target_species(ROW7, "hadamard", 2) == "B"
    assert protocol_target_species(ROW7, "shift", 3) is None
    assert protocol_target_species(REVERSED_H, "cz", 1) is None
    with pytest.raises(ValueError):
        protocol_target_species(ROW7, "hadamard", 4)
    with pytest.raises(ValueError):
        protocol_target_species(ROW7, "cz", 2)


def test_state_fidelity():
    """
    |<a|b>| is 1 for equal states up to phase and 0 for orthogonal ones.
    """
    a = np.array([1.0, 0.0], dtype=complex)
    b = np.array([0.0, 1.0], dtype=complex)
    assert state_fidelity(a, 1j * a) == pytest.approx(1.0)
    assert state_fidelity(a, b) == 0.0
    with pytest.raises(ValueError):
        state_fidelity(a, np.array([1.0, 0.0, 0.0]))
    with pytest.raises(ValueError):
        state_fidelity(a, np.array([1.0, 1.0]))


def test_trace_cost():
    """
    The trace cost ignores a global phase and is 1 for orthogonal operators.
    """
    x = np.array([[0, 1], [1, 0]], dtype=complex)
    assert trace_cost(np.eye(4), np.eye(4)) == 0.0
    assert trace_cost(-1j * np.eye(4), np.eye(4)) == pytest.approx(0.0)
    assert trace_cost(x, np.eye(2)) == 1.0
    with pytest.raises(ValueError):
        trace_cost(np.eye(2), np.eye(3))


def test_icc_state_pairs_shape():
    """
    Pairs are (d, J) matrices; an empty grid is rejected.
    """
    initial, target = icc_state_pairs(ROW7, "shift", COARSE_GRID, icc_position=2)
    assert initial.shape == target.shape == (128, 5)
    with pytest.raises(ValueError):
        icc_state_pairs(ROW7, "shift", (), icc_position=2)


def test_oracle_fidelity_is_one():
    """
    Without controls the ideal evolution is used and matches its own target.
    """
    report = averaged_fidelity("shift", ROW7, PARAMS, DisorderRealization.zero(ROW7), None,
                               COARSE_GRID, icc_position=2)
    assert report.mean == pytest.approx(1.0)


NAIVE_CASES = [
    ("shift", ROW7, 2),
    ("shift", ROW7, 3),
    ("hadamard", ROW7, 2),
    ("cz", REVERSED_H, 1),
]


@pytest.mark.parametrize("protocol, layout, icc_position", NAIVE_CASES)
def test_naive_protocols_without_disorder(protocol, layout, icc_position):
    """
    The naive schedules reach the blockade-limit targets at eta 20.
    """
    controls = schedule_to_exact_controls(protocol_schedule(protocol, PARAMS,
                                                            target_species="B"))
    report = averaged_fidelity(protocol, layout, PARAMS, DisorderRealization.zero(layout), controls,
                               COARSE_GRID, icc_position=icc_position)
    assert report.mean >= 0.98
    assert all(e.fidelity >= 0.98 for e in report.entries)


def _naive_controls(protocol):
    return schedule_to_exact_controls(protocol_schedule(protocol, PARAMS, target_species="B"))


def _omega_disorders(layout, epsilon, n_samples=20, mode="omega_only"):
    return [sample_disorder(layout, epsilon, seed=s, mode=mode) for s in range(n_samples)]


def test_naive_shift_collapses_under_disorder():
    """
    Two percent frequency disorder ruins the naive shift on the ICC pairs,
    from either parity of the ICC column.
    """
    controls = _naive_controls("shift")
    disorders = _omega_disorders(ROW7, 0.02)
    for icc_position in (2, 3):
        report = ensemble_fidelity("shift", ROW7, PARAMS, disorders, controls, COARSE_GRID, icc_position=icc_position)
        assert report.n_samples == 20
        assert report.mean < 0.25


@pytest.mark.parametrize("protocol, layout, icc_position", NAIVE_CASES)
def test_naive_gate_fidelity_collapses_under_disorder(protocol, layout, icc_position):
    """
    Two percent frequency disorder drops the gate fidelity of every naive
    protocol below 0.25.
    """
    report = ensemble_gate_fidelity(protocol, layout, PARAMS, _omega_disorders(layout, 0.02),
                                    _naive_controls(protocol), icc_position=icc_position)
    assert report.n_samples == 20
    assert report.metadata["metric"] == "gate"
    assert report.mean < 0.25


@pytest.mark.parametrize("protocol, layout, icc_position", NAIVE_CASES)
def test_naive_gate_fidelity_without_disorder(protocol, layout, icc_position):
    """
    At eta 20 the naive schedules stay close to their blockade-limit unitaries.
    """
    report = ensemble_gate_fidelity(protocol, layout, PARAMS, [DisorderRealization.zero(layout)],
                                    _naive_controls(protocol), icc_position=icc_position)
    assert report.mean > 0.9


def test_hadamard_state_metric_misses_spectator_phases():
    """
    Off-resonant Hadamard pulses leave the ICC pairs nearly intact while the
    gate fidelity, which sees every basis state's phase, collapses.
    """
    controls = _naive_controls("hadamard")
    disorders = _omega_disorders(ROW7, 0.02)
    state = ensemble_fidelity("hadamard", ROW7, PARAMS, disorders, controls, COARSE_GRID, icc_position=2)
    gate = ensemble_gate_fidelity("hadamard", ROW7, PARAMS, disorders, controls, icc_position=2)
    assert state.mean > gate.mean + 0.3


def test_identity_gate_fidelity_is_one():
    """
    An empty schedule matches the identity target exactly.
    """
    report = ensemble_gate_fidelity("identity", ROW7, PARAMS, [DisorderRealization.zero(ROW7)],
                                    ControlMatrix.zeros(0, 0.5), icc_position=2)
    assert report.mean == pytest.approx(1.0)


def test_gate_fidelity_size_limit():
    """
    Layouts above the unitary size limit raise ResourceLimitError.
    """
    ladder = build_ladder(3)
    with pytest.raises(ResourceLimitError):
        ensemble_gate_fidelity("shift", ladder, PARAMS, [DisorderRealization.zero(ladder)],
                               ControlMatrix.zeros(1, 0.5), icc_position=1)
    with pytest.raises(ValueError):
        ensemble_gate_fidelity("shift", ROW7, PARAMS, [], ControlMatrix.zeros(1, 0.5), icc_position=2)


def test_frequency_disorder_dominates_coupling_disorder():
    """
    At equal relative spread, frequency disorder hurts at least as much as
    coupling disorder, and adding coupling disorder on top changes the
    fidelity by less than two standard errors.
    """
    controls = _naive_controls("shift")
    reports = {
        mode: ensemble_fidelity("shift", ROW7, PARAMS, _omega_disorders(ROW7, 1e-3, mode=mode), controls,
                                COARSE_GRID, icc_position=2)
        for mode in ("omega_only", "zeta_only", "both")
    }
    omega, zeta, both = reports["omega_only"], reports["zeta_only"], reports["both"]
    assert omega.mean <= zeta.mean
    assert abs(omega.mean - both.mean) <= 2 * max(omega.stderr, both.stderr)


@pytest.mark.parametrize("protocol, icc_position", [("shift", 6), ("shift^-1", 0), ("shift^2", 5)])
def test_shift_off_grid_is_rejected(protocol, icc_position):
    """
    A shift that would move the ICC column past the end of the row raises ValueError.
    """
    with pytest.raises(ValueError):
        protocol_target_species(ROW7, protocol, icc_position)
    with pytest.raises(ValueError):
        ideal_target_state(ROW7, protocol, ICCState(1.0, icc_position=icc_position))


def test_ensemble_is_independent_of_threads():
    """
    Thread count does not change the numbers.
    """
    controls = schedule_to_exact_controls(protocol_schedule("shift", PARAMS))
    disorders = [sample_disorder(ROW7, 1e-4, seed=s, mode="both") for s in range(3)]
    serial = ensemble_fidelity("shift", ROW7, PARAMS, disorders, controls, COARSE_GRID, icc_position=2, threads=1)
    pooled = ensemble_fidelity("shift", ROW7, PARAMS, disorders, controls, COARSE_GRID, icc_position=2, threads=2)
    np.testing.assert_array_equal(serial.samples, pooled.samples)
    assert serial.mean == pooled.mean


def test_ensemble_requires_realizations():
    """
    An empty ensemble raises ValueError.
    """
    with pytest.raises(ValueError):
        ensemble_fidelity("shift", ROW7, PARAMS, [], None, COARSE_GRID, icc_position=2)


def test_report_statistics():
    """
    Mean, std and stderr follow the sample formulas.
    """
    report = FidelityReport.from_samples([[0.8], [0.7]], [0.5], metadata={"protocol": "shift"})
    assert report.mean == pytest.approx(0.75)
    assert report.std == pytest.approx(math.sqrt(0.005))
    assert report.stderr == pytest.approx(0.05)
    assert report.entries[0].n_samples == 2
    assert report.metadata["n_failed"] == 0


def test_report_excludes_failed_realizations():
    """
    NaN rows are dropped and counted.
    """
    report = FidelityReport.from_samples([[0.8, 0.9], [np.nan, np.nan], [0.7, 0.9]], [0.0, 1.0])
    assert report.n_samples == 2
    assert report.metadata["n_failed"] == 1
    assert report.entries[1].fidelity == pytest.approx(0.9)


def test_report_rows():
    """
    Rows carry the sweep columns.
    """
    report = FidelityReport.from_samples([[1.0, 0.5]], [0.0, 1.0],
                                         metadata={"epsilon": 0.01, "protocol": "shift", "seed": 3, "mode": "both"})
    rows = report.to_rows()
    assert [r["p"] for r in rows] == [0.0, 1.0]
    assert rows[1]["fidelity"] == 0.5
    assert set(rows[0]) == {"epsilon", "p", "phi", "fidelity", "std", "stderr", "n_samples", "protocol", "seed", "mode"}
    with pytest.raises(ValueError):
        FidelityReport.from_samples([[1.0]], [0.0, 1.0])
