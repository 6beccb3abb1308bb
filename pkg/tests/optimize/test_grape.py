import sys
import os
import math
import numpy as np
import pytest

# Add the project root to the Python path to allow importing from 'app'
sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '../../')))

from app.core.fidelity import Rotation, averaged_fidelity
from app.core.hamiltonian import DisorderRealization, PhysicalParams, sample_disorder
from app.core.lattice import build_layout, build_ladder, build_row
from app.core.propagate import ResourceLimitError
from app.core.pulses import ControlMatrix, protocol_schedule, schedule_to_controls, schedule_to_exact_controls
from app.optimize import grape
from app.optimize.grape import (
    GrapeConfig,
    GrapeDivergenceError,
    GrapeOptimizer,
    GrapeResult,
    StateSetTarget,
    UnitaryTarget,
    build_target,
    grape_gradient,
    optimize,
    optimize_reduced_time,
    resample_controls,
    resilience_sweep,
)

PARAMS = PhysicalParams.from_dict()
ABA = build_row(3, start="A")
ROW7 = build_row(7)
SINGLE_A = build_layout(["A"], [])
COARSE_GRID = (0.0, 0.5, 1.0)


def _single_qubit_config(**overrides):
    target = UnitaryTarget(Rotation(0.5).matrix(), np.zeros(2))
    return GrapeConfig.from_dict({"cost_mode": "unitary", **overrides}).with_target(target)


def _single_slot(u, duration=100.0):
    values = np.zeros((6, 1))
    values[0, 0] = u
    return ControlMatrix(values, [duration])


def _random_controls(n_slots, seed, scale=0.5, slot=20.0):
    rng = np.random.default_rng(seed)
    return ControlMatrix(rng.uniform(-scale, scale, size=(6, n_slots)), np.full(n_slots, slot))


def test_config_defaults():
    """
    Defaults come from GRAPE_CONFIG.
    """
    config = GrapeConfig.from_dict()
    assert config.cost_mode == "state_set"
    assert config.max_iters == 2000
    assert config.training_p == (0.0, 0.33, 0.66)
    assert "target" not in config.to_dict()


@pytest.mark.parametrize("overrides", [
    {"cost_mode": "trace"}, {"amplitude_bound": 1.5}, {"max_iters": 0}, {"threads": 0}, {"slot_chunk": 0},
])
def test_config_validation(overrides):
    """
    Unknown modes, bounds above 1, empty loops and empty worker pools raise ValueError.
    """
    with pytest.raises(ValueError):
        GrapeConfig.from_dict(overrides)


def test_optimizer_requires_target():
    """
    A config without a target is rejected.
    """
    with pytest.raises(ValueError):
        GrapeOptimizer(ABA, PARAMS, DisorderRealization.zero(ABA), GrapeConfig.from_dict())


def test_optimizer_size_limit():
    """
    Layouts above the unitary size limit raise ResourceLimitError.
    """
    ladder = build_ladder(3)
    config = GrapeConfig.from_dict().with_target(StateSetTarget(np.zeros((2, 1)), np.zeros((2, 1))))
    with pytest.raises(ResourceLimitError):
        GrapeOptimizer(ladder, PARAMS, DisorderRealization.zero(ladder), config)


def test_single_qubit_closed_form_gradient():
    """
    An x rotation by 0.3 against a target of 0.5 has gradient sin(-0.1) / 2 on A_x.
    """
    controls = _single_slot(0.3)
    optimizer = GrapeOptimizer(SINGLE_A, PARAMS, DisorderRealization.zero(SINGLE_A), _single_qubit_config())
    cost, grad = optimizer.cost_and_gradient(controls.values, controls.slot_durations)
    assert cost == pytest.approx(1.0 - math.cos(0.1), abs=1e-12)
    assert grad[0, 0] == pytest.approx(0.5 * math.sin(-0.1), abs=1e-12)
    np.testing.assert_allclose(grad[1:, 0], 0.0, atol=1e-12)


GRADIENT_CASES = [
    (ABA, 1, 10, "unitary"),
    (ABA, 1, 10, "state_set"),
    (ROW7, 2, 9, "unitary"),
    (ROW7, 2, 9, "state_set"),
]


@pytest.mark.parametrize("layout, icc_position, n_slots, cost_mode", GRADIENT_CASES)
def test_gradient_matches_finite_differences(layout, icc_position, n_slots, cost_mode):
    """
    The exact gradient agrees with central differences at 50 random entries
    on disordered 3- and 7-qubit rows. Entries below 1e-2 are compared on
    that absolute scale.
    """
    disorder = sample_disorder(layout, 0.001, seed=21, mode="both")
    target = build_target(layout, "shift", PARAMS, cost_mode, COARSE_GRID, icc_position=icc_position)
    config = GrapeConfig.from_dict({"cost_mode": cost_mode}).with_target(target)
    controls = _random_controls(n_slots, seed=3)
    optimizer = GrapeOptimizer(layout, PARAMS, disorder, config)
    report = optimizer.check_gradient(controls.values, controls.slot_durations, n_samples=50, seed=5, floor=1e-2)
    assert report["samples"] == 50
    assert report["max_rel_error"] < 1e-6


@pytest.mark.parametrize("cost_mode", ["unitary", "state_set"])
def test_gradient_independent_of_chunking(cost_mode):
    """
    Threaded, finely chunked slot sweeps reproduce the serial cost and gradient.
    """
    disorder = sample_disorder(ABA, 0.001, seed=4, mode="both")
    target = build_target(ABA, "shift", PARAMS, cost_mode, COARSE_GRID, icc_position=1)
    controls = _random_controls(10, seed=12)
    serial = GrapeConfig.from_dict({"cost_mode": cost_mode}).with_target(target)
    chunked = GrapeConfig.from_dict({"cost_mode": cost_mode, "threads": 2, "slot_chunk": 3}).with_target(target)
    cost, grad = GrapeOptimizer(ABA, PARAMS, disorder, serial).cost_and_gradient(
        controls.values, controls.slot_durations)
    cost_chunked, grad_chunked = GrapeOptimizer(ABA, PARAMS, disorder, chunked).cost_and_gradient(
        controls.values, controls.slot_durations)
    assert cost_chunked == pytest.approx(cost, abs=1e-12)
    np.testing.assert_allclose(grad_chunked, grad, atol=1e-12)


def test_gradient_with_store_disabled(monkeypatch):
    """
    Recomputing slot eigensystems gives the same gradient as caching them.
    """
    target = build_target(ABA, "shift", PARAMS, "unitary", icc_position=1)
    config = GrapeConfig.from_dict({"cost_mode": "unitary"}).with_target(target)
    controls = _random_controls(5, seed=8)
    disorder = DisorderRealization.zero(ABA)
    cached = grape_gradient(ABA, PARAMS, disorder, controls, config)
    monkeypatch.setattr(grape, "STORE_LIMIT", 0)
    recomputed = grape_gradient(ABA, PARAMS, disorder, controls, config)
    np.testing.assert_allclose(recomputed, cached, atol=1e-13)


def test_empty_controls_gradient_shape():
    """
    Zero slots give a (6, 0) gradient.
    """
    target = build_target(ABA, "identity", PARAMS, "state_set", COARSE_GRID, icc_position=1)
    config = GrapeConfig.from_dict().with_target(target)
    grad = grape_gradient(ABA, PARAMS, DisorderRealization.zero(ABA), ControlMatrix.zeros(0, 0.5), config)
    assert grad.shape == (6, 0)


def test_warm_start_cost_matches_averaged_fidelity():
    """
    The state-set cost of the naive shift is one minus its averaged fidelity on the training grid.
    """
    params = PARAMS.with_eta(5)
    layout = build_row(7)
    disorder = sample_disorder(layout, 1e-4, seed=4, mode="omega_only")
    controls = schedule_to_controls(protocol_schedule("shift", params))
    target = build_target(layout, "shift", params, "state_set", COARSE_GRID, icc_position=2)
    config = GrapeConfig.from_dict().with_target(target)
    cost = GrapeOptimizer(layout, params, disorder, config).cost(controls.values, controls.slot_durations)
    report = averaged_fidelity("shift", layout, params, disorder, controls, COARSE_GRID, icc_position=2)
    assert cost == pytest.approx(1.0 - report.mean, abs=1e-8)


def test_identity_converges_immediately():
    """
    Without drive or disorder the identity target is met at the warm start.
    """
    target = build_target(ABA, "identity", PARAMS, "unitary", icc_position=1)
    config = GrapeConfig.from_dict({"cost_mode": "unitary", "max_iters": 5}).with_target(target)
    result = optimize(ABA, PARAMS, DisorderRealization.zero(ABA), ControlMatrix.zeros(4, 0.5), config)
    assert result.converged
    assert result.iterations == 1
    assert result.final_cost < 1e-10
    assert result.fidelity == pytest.approx(1.0)


def test_descent_lowers_cost():
    """
    GRAPE improves a detuned single-qubit rotation.
    """
    config = _single_qubit_config(max_iters=60, learning_rate=0.02, cost_tolerance=1e-8)
    result = optimize(SINGLE_A, PARAMS, DisorderRealization.zero(SINGLE_A), _single_slot(0.3), config)
    assert result.final_cost < result.initial_cost
    assert len(result.cost_trajectory) == result.iterations
    assert result.final_cost == min(result.cost_trajectory)


def test_runs_are_deterministic():
    """
    The same seed reproduces the trajectory and the controls bit for bit.
    """
    target = build_target(ABA, "shift", PARAMS, "state_set", COARSE_GRID, icc_position=1)
    config = GrapeConfig.from_dict({"max_iters": 8, "init_jitter": 0.05, "seed": 17}).with_target(target)
    disorder = sample_disorder(ABA, 0.001, seed=2, mode="both")
    warm = _random_controls(6, seed=1)
    first = optimize(ABA, PARAMS, disorder, warm, config)
    second = optimize(ABA, PARAMS, disorder, warm, config)
    assert first.cost_trajectory == second.cost_trajectory
    np.testing.assert_array_equal(first.controls.values, second.controls.values)


def test_amplitude_bound_is_respected():
    """
    Optimized controls stay inside the configured bound.
    """
    target = build_target(ABA, "shift", PARAMS, "state_set", COARSE_GRID, icc_position=1)
    config = GrapeConfig.from_dict({"max_iters": 10, "learning_rate": 0.2,
                                    "amplitude_bound": 0.6}).with_target(target)
    result = optimize(ABA, PARAMS, DisorderRealization.zero(ABA), _random_controls(6, seed=9, scale=1.0), config)
    assert np.max(np.abs(result.controls.values)) <= 0.6


def test_gradient_check_recorded():
    """
    A requested gradient check is stored with the result.
    """
    config = _single_qubit_config(max_iters=2, gradient_check_samples=1)
    result = optimize(SINGLE_A, PARAMS, DisorderRealization.zero(SINGLE_A), _single_slot(0.3), config)
    assert result.gradient_check["samples"] == 1
    assert result.gradient_check["max_abs_error"] < 1e-7


def test_divergence_raises_with_partial_result(monkeypatch):
    """
    A cost stuck above its start for a full window aborts the run.
    """
    costs = iter([0.5, 0.6, 0.7, 0.8, 0.9, 0.95])

    def rising(self, values, durations):
        return next(costs), np.zeros_like(values)

    monkeypatch.setattr(GrapeOptimizer, "cost_and_gradient", rising)
    config = _single_qubit_config(divergence_window=3, max_iters=10)
    with pytest.raises(GrapeDivergenceError) as excinfo:
        optimize(SINGLE_A, PARAMS, DisorderRealization.zero(SINGLE_A), _single_slot(0.3), config)
    result = excinfo.value.result
    assert isinstance(result, GrapeResult)
    assert result.iterations == 4
    assert result.final_cost == 0.5


def test_resample_identity_scale():
    """
    time_scale = 1 returns the controls unchanged.
    """
    controls = schedule_to_controls(protocol_schedule("cz", PARAMS))
    assert resample_controls(controls, 1.0) is controls


def test_resample_half_time():
    """
    Half the time means half the slots at twice the amplitude, clamped.
    """
    values = np.zeros((6, 10))
    values[0] = 0.3
    values[2] = 0.8
    halved = resample_controls(ControlMatrix(values, np.full(10, 0.5)), 0.5)
    assert halved.n_slots == 5
    assert halved.uniform_slot == 0.5
    np.testing.assert_allclose(halved.values[0], 0.6)
    np.testing.assert_allclose(halved.values[2], 1.0)
    assert halved.metadata["time_scale"] == 0.5


@pytest.mark.parametrize("scale", [0.0, -0.5, 1.5])
def test_resample_rejects_bad_scale(scale):
    """
    time_scale must lie in (0, 1].
    """
    with pytest.raises(ValueError):
        resample_controls(ControlMatrix.zeros(4, 0.5), scale)


def test_resample_needs_uniform_slots():
    """
    Non-uniform slot grids cannot be compressed.
    """
    controls = schedule_to_exact_controls(protocol_schedule("shift", PARAMS))
    with pytest.raises(ValueError):
        resample_controls(controls, 0.5)


def test_optimize_reduced_time_records_scale():
    """
    The reduced-time run optimizes the compressed warm start.
    """
    target = build_target(ABA, "identity", PARAMS, "unitary", icc_position=1)
    config = GrapeConfig.from_dict({"cost_mode": "unitary", "max_iters": 3}).with_target(target)
    result = optimize_reduced_time(ABA, PARAMS, DisorderRealization.zero(ABA), ControlMatrix.zeros(8, 0.5),
                                   config, 0.5)
    assert result.controls.n_slots == 4
    assert result.metadata["time_scale"] == 0.5


def test_resilience_zero_spread_matches_fidelity():
    """
    Without perturbation the frozen controls score their own averaged fidelity.
    """
    layout = build_row(7)
    disorder = sample_disorder(layout, 1e-4, seed=6, mode="omega_only")
    controls = schedule_to_exact_controls(protocol_schedule("shift", PARAMS))
    result = GrapeResult(controls, [0.1], 0.1, 0.1, 1, 0.0)
    reports = resilience_sweep(result, disorder, [0.0], 2, seed=3, layout=layout, params=PARAMS,
                               protocol="shift", icc_position=2, p_grid=COARSE_GRID)
    expected = averaged_fidelity("shift", layout, PARAMS, disorder, controls, COARSE_GRID, icc_position=2)
    assert len(reports) == 1
    assert reports[0].mean == pytest.approx(expected.mean, abs=1e-10)
    assert reports[0].metadata["perturbation"] == 0.0


def test_resilience_rejects_bad_input():
    """
    Negative spreads and empty samples raise ValueError.
    """
    result = GrapeResult(ControlMatrix.zeros(1, 0.5), [0.0], 0.0, 0.0, 1, 0.0)
    disorder = DisorderRealization.zero(ABA)
    with pytest.raises(ValueError):
        resilience_sweep(result, disorder, [-1.0], 2, seed=1, layout=ABA, params=PARAMS,
                         protocol="shift", icc_position=1)
    with pytest.raises(ValueError):
        resilience_sweep(result, disorder, [0.0], 0, seed=1, layout=ABA, params=PARAMS,
                         protocol="shift", icc_position=1)


def test_resilience_decreases_with_spread():
    """
    The naive shift loses fidelity as the extra frequency spread grows, by at
    least 0.2 once it reaches 2*pi x 1 MHz.
    """
    controls = schedule_to_exact_controls(protocol_schedule("shift", PARAMS))
    result = GrapeResult(controls, [0.0], 0.0, 0.0, 1, 0.0)
    spreads = [2 * math.pi * f for f in (0.0, 2e4, 5e4, 1e5, 1e6)]
    reports = resilience_sweep(result, DisorderRealization.zero(ROW7), spreads, 10, seed=11, layout=ROW7,
                               params=PARAMS, protocol="shift", icc_position=2, p_grid=COARSE_GRID)
    means = [report.mean for report in reports]
    for before, after in zip(reports, reports[1:]):
        assert after.mean <= before.mean + before.stderr + after.stderr
    assert means[0] - means[-1] >= 0.2
