"""
GRAPE over the 6-channel piecewise-constant control matrix.

Two cost modes:
- 'unitary': 1 - |Tr(T^dagger U)| / d against a target propagator T.
- 'state_set': 1 - mean_s |<t_s|U|psi_s>| over training pairs.

Gradients are exact: the derivative of each slot exponential is taken in the
eigenbasis of the slot Hamiltonian and chained through forward products.
Nothing of size M x d x d is stored unless it fits STORE_LIMIT.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, replace

import numpy as np

from app.config import GRAPE_CONFIG, PROPAGATION_CONFIG
from app.core.fidelity import ensemble_fidelity, icc_state_pairs, ideal_protocol_unitary, protocol_target_species
from app.core.hamiltonian import RotatingFrameModel, perturb_disorder, zz_diagonal
from app.core.propagate import PropagationError, ResourceLimitError
from app.core.pulses import ControlMatrix
from app.optimize.adam import AdamOptimizer
from app.utils.seeding import GRADIENT_CHECK_STREAM, JITTER_STREAM, PERTURBATION_STREAM, derive_seed, make_rng

logger = logging.getLogger(__name__)

COST_MODES = ("unitary", "state_set")
STORE_LIMIT = 2 ** 24  # complex entries of cached slot eigenvectors


class GrapeDivergenceError(RuntimeError):
    """Raised when the cost stays above its initial value for too long; carries the partial result."""

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result


@dataclass(frozen=True)
class UnitaryTarget:
    """
    Ideal protocol unitary with the ZZ dynamical phase exp(-i T zz) applied on
    top; the two commute in the blockade limit.
    """
    ideal: np.ndarray
    zz_diagonal: np.ndarray

    def matrix(self, duration):
        return np.exp(-1j * self.zz_diagonal * duration)[:, None] * self.ideal


@dataclass(frozen=True)
class StateSetTarget:
    """Training pairs as (d, N) matrices of initial and target states."""
    initial: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        if self.initial.shape != self.target.shape or self.initial.ndim != 2:
            raise ValueError(f"Initial/target shapes differ: {self.initial.shape} vs {self.target.shape}.")


@dataclass(frozen=True)
class GrapeConfig:
    cost_mode: str = "state_set"
    max_iters: int = 2000
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    amplitude_bound: float = 1.0
    cost_tolerance: float = 1e-4
    init_jitter: float = 0.0
    seed: int = 1234
    divergence_window: int = 50
    warmup_iters: int = 20
    gradient_check_samples: int = 0
    log_every: int = 25
    threads: int = 1
    slot_chunk: int = 64
    training_p: tuple = (0.0, 0.33, 0.66)
    target: object = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        if self.cost_mode not in COST_MODES:
            raise ValueError(f"Unknown cost mode '{self.cost_mode}'; expected one of {COST_MODES}.")
        if self.max_iters < 1 or self.divergence_window < 1:
            raise ValueError(f"max_iters and divergence_window must be positive, got {self.max_iters}, {self.divergence_window}.")
        if not 0 < self.amplitude_bound <= 1.0:
            raise ValueError(f"Amplitude bound must lie in (0, 1], got {self.amplitude_bound}.")
        if self.threads < 1 or self.slot_chunk < 1:
            raise ValueError(f"threads and slot_chunk must be positive, got {self.threads}, {self.slot_chunk}.")

    @classmethod
    def from_dict(cls, config=None, **overrides):
        merged = dict(GRAPE_CONFIG)
        merged.update(config or {})
        merged.update(overrides)
        known = {f.name for f in fields(cls)}
        values = {k: v for k, v in merged.items() if k in known}
        if "training_p" in values:
            values["training_p"] = tuple(float(p) for p in values["training_p"])
        if values.get("threads") is None:
            values["threads"] = 1
        return cls(**values)

    def with_target(self, target):
        return replace(self, target=target)

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "target"}


@dataclass
class GrapeResult:
    """
    Outcome of one optimization.

    Attributes:
        controls (ControlMatrix): Best iterate.
        cost_trajectory (list[float]): Cost at every evaluated iterate.
        final_cost (float): Cost of the best iterate.
        initial_cost (float): Cost of the warm start.
        iterations (int): Number of evaluated iterates.
        wall_clock (float): Seconds spent.
        converged (bool): Cost tolerance reached.
        non_monotone_steps (int): Cost increases after the warm-up window.
        gradient_check (dict | None): Finite-difference comparison at the warm start.
    """
    controls: ControlMatrix
    cost_trajectory: list
    final_cost: float
    initial_cost: float
    iterations: int
    wall_clock: float
    converged: bool = False
    non_monotone_steps: int = 0
    gradient_check: dict | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def fidelity(self):
        return 1.0 - self.final_cost

    def summary(self):
        return {
            "final_cost": self.final_cost,
            "initial_cost": self.initial_cost,
            "fidelity": self.fidelity,
            "iterations": self.iterations,
            "wall_clock_s": self.wall_clock,
            "converged": self.converged,
            "non_monotone_steps": self.non_monotone_steps,
            "duration_ns": self.controls.duration,
            "n_slots": self.controls.n_slots,
            "gradient_check": self.gradient_check,
            "metadata": self.metadata,
        }


def _phi_matrix(evals, dt):
    """Divided differences of exp(-i lambda dt) in the eigenbasis; `evals` may be stacked (m, d) with dt (m,)."""
    dt = np.asarray(dt, dtype=float)[..., None, None]
    mean = 0.5 * (evals[..., :, None] + evals[..., None, :])
    diff = evals[..., :, None] - evals[..., None, :]
    return -1j * dt * np.exp(-1j * dt * mean) * np.sinc(dt * diff / (2.0 * np.pi))


def _adjoint(matrices):
    return np.conj(np.swapaxes(matrices, -1, -2))


def _propagators(evals, vecs, dt):
    """exp(-i H dt) from (stacked) eigensystems."""
    phases = np.exp(-1j * evals * np.asarray(dt, dtype=float)[..., None])
    return (vecs * phases[..., None, :]) @ _adjoint(vecs)


class GrapeOptimizer:
    """
    Cost, exact gradient and Adam loop for one disorder realization.

    Slot Hamiltonians are diagonalized in stacked chunks of `config.slot_chunk`
    slots with one batched eigh call each; `config.threads` chunks run at once.
    Chunking does not change the numbers.

    Args:
        layout (LadderLayout): Layout being controlled.
        params (PhysicalParams): Nominal parameters.
        disorder (DisorderRealization): The realization optimized for.
        config (GrapeConfig): Settings; `config.target` must be set.
    """

    def __init__(self, layout, params, disorder, config):
        if config.target is None:
            raise ValueError("GrapeConfig has no target; build one with build_target().")
        limit = PROPAGATION_CONFIG["max_unitary_qubits"]
        if layout.n_qubits > limit:
            raise ResourceLimitError(f"GRAPE is limited to {limit} qubits; layout has {layout.n_qubits}.")
        self.layout = layout
        self.params = params
        self.disorder = disorder
        self.config = config
        self.model = RotatingFrameModel(layout, params, disorder)
        coo = [op.tocoo() for op in self.model.controls]
        self.control_entries = [(c.row, c.col, c.data) for c in coo]
        self.logger = logging.getLogger(__name__)

    def _chunk_eigensystem(self, values, start):
        stop = min(start + self.config.slot_chunk, values.shape[1])
        h = np.tensordot(values[:, start:stop].T, self.model.dense_controls(), axes=1)
        diagonal = np.arange(self.layout.dimension)
        h[:, diagonal, diagonal] += self.model.static_diagonal
        try:
            return np.linalg.eigh(h)
        except np.linalg.LinAlgError as e:
            self.logger.error(f"Eigendecomposition failed in slots {start}-{stop - 1}: {e}", exc_info=True)
            raise PropagationError(f"Eigendecomposition failed in slots {start}-{stop - 1}: {e}", start) from e

    def _sweep(self, values, store=None, reverse=False):
        """
        Yields (start, evals, vecs) chunk by chunk, in slot order or reversed.
        Chunks come from `store` when it holds them, else from a thread pool
        working `config.threads` chunks ahead.
        """
        starts = list(range(0, values.shape[1], self.config.slot_chunk))
        if reverse:
            starts.reverse()
        if store is not None and len(store) == len(starts):
            for start in starts:
                yield (start, *store[start])
            return
        threads = self.config.threads
        if threads <= 1 or len(starts) <= 1:
            for start in starts:
                yield (start, *self._chunk_eigensystem(values, start))
            return
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for w in range(0, len(starts), threads):
                wave = starts[w:w + threads]
                systems = list(pool.map(lambda s: self._chunk_eigensystem(values, s), wave))
                for start, (evals, vecs) in zip(wave, systems):
                    yield start, evals, vecs

    def _start(self):
        if self.config.cost_mode == "unitary":
            return np.eye(self.layout.dimension, dtype=complex)
        return np.asarray(self.config.target.initial, dtype=complex)

    def _forward(self, values, durations, store=None, states=None):
        """Final propagated operator; fills `store` (chunk eigensystems) and `states` (input of every slot) when given."""
        state = self._start()
        for start, evals, vecs in self._sweep(values):
            if store is not None:
                store[start] = (evals, vecs)
            xs = _propagators(evals, vecs, durations[start:start + len(evals)])
            for i, x in enumerate(xs):
                if states is not None:
                    states[start + i] = state
                state = x @ state
        return state

    def _overlaps(self, final, durations):
        if self.config.cost_mode == "unitary":
            t = self.config.target.matrix(float(np.sum(durations)))
            return np.sum(np.conj(t) * final), t
        return np.sum(np.conj(self.config.target.target) * final, axis=0), None

    def _cost(self, z):
        if self.config.cost_mode == "unitary":
            value = 1.0 - abs(z) / self.layout.dimension
        else:
            value = 1.0 - float(np.mean(np.abs(z)))
        return float(min(1.0, max(0.0, value)))

    def cost(self, values, durations):
        final = self._forward(np.asarray(values, dtype=float), np.asarray(durations, dtype=float))
        z, _ = self._overlaps(final, durations)
        return self._cost(z)

    def cost_and_gradient(self, values, durations):
        """
        Returns (cost, gradient) with the gradient shaped like `values` (6, M).

        A zero overlap contributes the subgradient 0.
        """
        values = np.asarray(values, dtype=float)
        durations = np.asarray(durations, dtype=float)
        grad = np.zeros_like(values)
        d = self.layout.dimension
        n_slots = values.shape[1]
        store = {} if n_slots * d * d <= STORE_LIMIT else None
        if self.config.cost_mode == "unitary":
            final = self._forward(values, durations, store)
            z, t = self._overlaps(final, durations)
            if n_slots:
                self._unitary_gradient(values, durations, store, final, t, z, grad)
        else:
            states = np.empty((n_slots, *self._start().shape), dtype=complex)
            final = self._forward(values, durations, store, states)
            z, _ = self._overlaps(final, durations)
            if n_slots:
                self._state_gradient(values, durations, store, states, z, grad)
        return self._cost(z), grad

    def _contract(self, evals, vecs, dt, rhs):
        """sum_ab H_j (V^* (Phi o R) V^T) for every channel j and every slot of a chunk; shape (6, m)."""
        kernel = _phi_matrix(evals, dt) * rhs
        m = np.conj(vecs) @ kernel @ np.swapaxes(vecs, -1, -2)
        return np.stack([m[:, rows, cols] @ data for rows, cols, data in self.control_entries])

    def _unitary_gradient(self, values, durations, store, final, t, z, grad):
        if abs(z) == 0.0:
            self.logger.warning("Trace overlap is zero; using the zero subgradient.")
            return
        weight = np.conj(z) / abs(z)
        d = self.layout.dimension
        # c = F_{k-1} (T^dagger U) F_{k-1}^dagger
        c = np.conj(t).T @ final
        for start, evals, vecs in self._sweep(values, store):
            dt = durations[start:start + len(evals)]
            xs = _propagators(evals, vecs, dt)
            cs = np.empty_like(xs)
            for i, x in enumerate(xs):
                cs[i] = c
                c = x @ c @ x.conj().T
            p = _adjoint(vecs) @ cs @ vecs
            rhs = np.conj(np.exp(-1j * evals * dt[:, None]))[:, :, None] * np.swapaxes(p, -1, -2)
            dz = self._contract(evals, vecs, dt, rhs)
            grad[:, start:start + len(evals)] = -np.real(weight * dz) / d

    def _state_gradient(self, values, durations, store, states, z, grad):
        magnitudes = np.abs(z)
        zero = magnitudes == 0.0
        if np.any(zero):
            self.logger.warning(f"{int(np.sum(zero))} training overlaps are zero; using the zero subgradient for them.")
        weights = np.where(zero, 0.0, np.conj(z) / np.where(zero, 1.0, magnitudes))
        n_states = z.shape[0]

        # chi = (X_M ... X_{k+1})^dagger t, built backwards from the target
        chi = np.asarray(self.config.target.target, dtype=complex)
        for start, evals, vecs in self._sweep(values, store, reverse=True):
            stop = start + len(evals)
            dt = durations[start:stop]
            xs = _propagators(evals, vecs, dt)
            chis = np.empty((len(evals), *chi.shape), dtype=complex)
            for i in reversed(range(len(evals))):
                chis[i] = chi
                chi = xs[i].conj().T @ chi
            vh = _adjoint(vecs)
            a = vh @ chis
            b = vh @ states[start:stop]
            rhs = (np.conj(a) * weights) @ np.swapaxes(b, -1, -2)
            dz = self._contract(evals, vecs, dt, rhs)
            grad[:, start:stop] = -np.real(dz) / n_states


    def check_gradient(self, values, durations, n_samples, seed, step=1e-6, floor=1e-12):
        """
        Compares the analytic gradient with central finite differences at
        `n_samples` random entries. Relative errors are taken against
        max(|numeric|, |analytic|, floor).

        Returns:
            dict: samples, max_abs_error, max_rel_error.
        """
        values = np.asarray(values, dtype=float)
        _, grad = self.cost_and_gradient(values, durations)
        if values.size == 0 or n_samples <= 0:
            return {"samples": 0, "max_abs_error": 0.0, "max_rel_error": 0.0}
        rng = make_rng(seed, GRADIENT_CHECK_STREAM)
        picks = rng.choice(values.size, size=min(int(n_samples), values.size), replace=False)
        abs_errors, rel_errors = [], []
        for flat in picks:
            j, k = np.unravel_index(int(flat), values.shape)
            plus, minus = values.copy(), values.copy()
            plus[j, k] += step
            minus[j, k] -= step
            numeric = (self.cost(plus, durations) - self.cost(minus, durations)) / (2.0 * step)
            error = abs(numeric - grad[j, k])
            abs_errors.append(error)
            rel_errors.append(error / max(abs(numeric), abs(grad[j, k]), floor))
        report = {"samples": len(picks), "max_abs_error": float(max(abs_errors)), "max_rel_error": float(max(rel_errors))}
        self.logger.info(f"Gradient check: {report}")
        return report

    def _result(self, values, durations, trajectory, best_cost, start, converged, non_monotone, gradient_check):
        return GrapeResult(
            controls=ControlMatrix(values, durations.copy(), {"cost_mode": self.config.cost_mode}),
            cost_trajectory=list(trajectory),
            final_cost=float(best_cost),
            initial_cost=float(trajectory[0]) if trajectory else float("nan"),
            iterations=len(trajectory),
            wall_clock=time.perf_counter() - start,
            converged=converged,
            non_monotone_steps=non_monotone,
            gradient_check=gradient_check,
            metadata={
                "cost_mode": self.config.cost_mode,
                "layout": self.layout.name,
                "eta_br": self.params.eta_br,
                "epsilon": self.disorder.epsilon,
                "disorder_seed": self.disorder.seed,
                "grape_seed": self.config.seed,
            },
        )

    def run(self, initial_controls):
        """
        Adam descent from `initial_controls`, clamped to the amplitude bound
        after every step.

        Returns:
            GrapeResult: Best evaluated iterate.

        Raises:
            GrapeDivergenceError: Cost above the initial cost for
                `divergence_window` consecutive iterations.
        """
        cfg = self.config
        bound = cfg.amplitude_bound
        durations = initial_controls.slot_durations.copy()
        values = np.clip(initial_controls.values, -bound, bound)
        if cfg.init_jitter > 0:
            rng = make_rng(cfg.seed, JITTER_STREAM)
            values = np.clip(values + rng.normal(0.0, cfg.init_jitter, values.shape), -bound, bound)

        gradient_check = None
        if cfg.gradient_check_samples > 0:
            gradient_check = self.check_gradient(values, durations, cfg.gradient_check_samples, cfg.seed)

        adam = AdamOptimizer(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps, bound)
        start = time.perf_counter()
        trajectory, best_cost, best_values = [], math.inf, values
        above, non_monotone, converged = 0, 0, False
        self.logger.info(
            f"GRAPE start: {self.layout.name}, mode={cfg.cost_mode}, {values.shape[1]} slots, "
            f"{durations.sum():.1f} ns, max_iters={cfg.max_iters}"
        )
        for iteration in range(cfg.max_iters):
            cost, grad = self.cost_and_gradient(values, durations)
            trajectory.append(cost)
            if cost < best_cost:
                best_cost, best_values = cost, values
            if iteration >= cfg.warmup_iters and cost > trajectory[-2] + 1e-12:
                non_monotone += 1
            if iteration % cfg.log_every == 0:
                self.logger.info(f"GRAPE iter {iteration}: cost={cost:.6e} best={best_cost:.6e}")
            if cost <= cfg.cost_tolerance:
                converged = True
                break
            above = above + 1 if cost > trajectory[0] else 0
            if above >= cfg.divergence_window:
                result = self._result(best_values, durations, trajectory, best_cost, start, False, non_monotone, gradient_check)
                raise GrapeDivergenceError(
                    f"Cost stayed above its initial value {trajectory[0]:.6e} for {above} iterations "
                    f"(last {cost:.6e}, iteration {iteration}).",
                    result,
                )
            values = adam.step(values, grad)

        if non_monotone:
            self.logger.warning(f"Cost increased on {non_monotone} iterations after warm-up.")
        result = self._result(best_values, durations, trajectory, best_cost, start, converged, non_monotone, gradient_check)
        self.logger.info(
            f"GRAPE done: {result.iterations} iterations, cost {result.initial_cost:.6e} -> {result.final_cost:.6e} "
            f"in {result.wall_clock:.1f} s"
        )
        return result


def build_target(layout, protocol, params, cost_mode, p_grid=None, phi=0.0, *, icc_position, superposed_rows=None):
    """
    Target for a protocol run at an ICC column.

    'unitary' uses the ideal protocol unitary with the nominal ZZ phase;
    'state_set' uses the ICC pairs on `p_grid` (default: the training grid).
    """
    if cost_mode not in COST_MODES:
        raise ValueError(f"Unknown cost mode '{cost_mode}'.")
    if cost_mode == "unitary":
        target_species = protocol_target_species(layout, protocol, icc_position)
        return UnitaryTarget(ideal_protocol_unitary(layout, protocol, params, target_species), zz_diagonal(layout, params))
    p_grid = GRAPE_CONFIG["training_p"] if p_grid is None else p_grid
    initial, target = icc_state_pairs(layout, protocol, p_grid, phi, icc_position=icc_position,
                                      superposed_rows=superposed_rows, params=params)
    return StateSetTarget(initial, target)


def grape_gradient(layout, params, disorder, controls, config):
    """Exact gradient d cost / d u_jk, shape (6, M)."""
    return GrapeOptimizer(layout, params, disorder, config).cost_and_gradient(controls.values, controls.slot_durations)[1]


def optimize(layout, params, disorder, initial_controls, config):
    return GrapeOptimizer(layout, params, disorder, config).run(initial_controls)


def resample_controls(controls, time_scale, bound=1.0):
    """
    Compresses controls onto round(M * time_scale) slots of the same length,
    scaling amplitudes by 1 / time_scale and clamping to the bound.
    """
    if not 0.0 < time_scale <= 1.0:
        raise ValueError(f"time_scale must lie in (0, 1], got {time_scale}.")
    if time_scale == 1.0 or controls.n_slots == 0:
        return controls
    slot = controls.uniform_slot
    if slot is None:
        raise ValueError("Reduced-time runs need controls on a uniform slot grid.")
    n_slots = int(round(controls.n_slots * time_scale))
    if n_slots < 1:
        raise ValueError(f"time_scale {time_scale} leaves no slot of the {controls.n_slots}-slot schedule.")
    source = np.minimum(controls.n_slots - 1, ((np.arange(n_slots) + 0.5) * controls.n_slots / n_slots).astype(int))
    values = np.clip(controls.values[:, source] / time_scale, -bound, bound)
    return ControlMatrix(values, np.full(n_slots, slot), {**controls.metadata, "time_scale": time_scale})


def optimize_reduced_time(layout, params, disorder, initial_controls, config, time_scale):
    """GRAPE on a time-compressed warm start; time_scale = 1 is plain optimize()."""
    controls = resample_controls(initial_controls, time_scale, config.amplitude_bound)
    result = optimize(layout, params, disorder, controls, config)
    result.metadata["time_scale"] = time_scale
    return result


def resilience_sweep(result, base_disorder, spreads, n_samples, seed, *, layout, params, protocol,
                     icc_position, p_grid=None, phi=0.0, superposed_rows=None, threads=1):
    """
    Re-evaluates frozen optimized controls under extra frequency offsets.

    Args:
        result (GrapeResult): Optimized controls.
        base_disorder (DisorderRealization): Realization the controls were optimized for.
        spreads (sequence[float]): Perturbation standard deviations (rad/s).
        n_samples (int): Perturbations drawn per spread.
        seed (int): Top-level seed of the perturbation streams.

    Returns:
        list[FidelityReport]: One report per spread, in input order.
    """
    if any(s < 0 for s in spreads):
        raise ValueError(f"Perturbation spreads must be non-negative, got {list(spreads)}.")
    if n_samples < 1:
        raise ValueError(f"n_samples must be at least 1, got {n_samples}.")
    p_grid = GRAPE_CONFIG["training_p"] if p_grid is None else p_grid
    reports = []
    for index, spread in enumerate(spreads):
        disorders = [
            perturb_disorder(base_disorder, spread, derive_seed(seed, PERTURBATION_STREAM, index, sample))
            for sample in range(n_samples)
        ]
        report = ensemble_fidelity(
            protocol, layout, params, disorders, result.controls, p_grid, phi,
            icc_position=icc_position, superposed_rows=superposed_rows, threads=threads,
            metadata={"perturbation": float(spread), "seed": seed},
        )
        logger.info(f"Resilience spread {spread:.4g} rad/s: F = {report.mean:.4f} +- {report.stderr:.4f}")
        reports.append(report)
    return reports
