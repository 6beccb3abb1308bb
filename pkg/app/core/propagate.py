"""
Exact piecewise-constant time evolution under the RF+RWA Hamiltonian.

Small systems use dense eigendecompositions (cached per unique control
column); state evolution above PROPAGATION_CONFIG['dense_max_qubits'] uses
scipy's Krylov-type expm_multiply on sparse operators.
"""

import logging

import numpy as np
from scipy.sparse import issparse
from scipy.sparse.linalg import expm_multiply

from app.config import PROPAGATION_CONFIG
from app.core.hamiltonian import RotatingFrameModel, hermiticity_error

logger = logging.getLogger(__name__)


class ResourceLimitError(RuntimeError):
    """Raised when a request exceeds the configured system size."""


class PropagationError(RuntimeError):
    """Raised when a slot eigendecomposition fails."""

    def __init__(self, message, slot_index=None):
        super().__init__(message)
        self.slot_index = slot_index


def _is_diagonal(h):
    return not np.any(h - np.diag(np.diagonal(h)))


def slot_propagator(h, dt):
    """
    Returns exp(-i H dt) for a Hermitian H (rad/ns) and dt (ns).

    Diagonal inputs are exponentiated elementwise, so the result is exactly
    diagonal with phases -E_n dt.
    """
    if dt <= 0:
        raise ValueError(f"Slot duration must be positive, got {dt}.")
    h = h.toarray() if issparse(h) else np.asarray(h, dtype=complex)
    scale = max(1.0, float(np.max(np.abs(h)))) if h.size else 1.0
    if hermiticity_error(h) > PROPAGATION_CONFIG["hermiticity_tolerance"] * scale:
        raise ValueError("Slot Hamiltonian is not Hermitian.")
    if _is_diagonal(h):
        return np.diag(np.exp(-1j * np.real(np.diagonal(h)) * dt))
    evals, vecs = np.linalg.eigh(h)
    return (vecs * np.exp(-1j * evals * dt)) @ vecs.conj().T


class SlotEigensolver:
    """
    Eigensystems of the slot Hamiltonians of one model, cached per unique
    control column.
    """

    def __init__(self, model, cache=True):
        self.model = model
        self.cache = {} if cache else None
        self.logger = logging.getLogger(__name__)

    def eigensystem(self, column, slot_index=None):
        column = np.ascontiguousarray(column, dtype=float)
        key = column.tobytes()
        if self.cache is not None and key in self.cache:
            return self.cache[key]
        h = self.model.hamiltonian(column, dense=True)
        try:
            evals, vecs = np.linalg.eigh(h)
        except np.linalg.LinAlgError as e:
            self.logger.error(f"Eigendecomposition failed at slot {slot_index}: {e}", exc_info=True)
            raise PropagationError(f"Eigendecomposition failed at slot {slot_index}: {e}", slot_index) from e
        if self.cache is not None:
            self.cache[key] = (evals, vecs)
        return evals, vecs

    def propagator(self, column, dt, slot_index=None):
        evals, vecs = self.eigensystem(column, slot_index)
        return (vecs * np.exp(-1j * evals * dt)) @ vecs.conj().T


def _runs(controls):
    """Yields (column, total duration, first slot index) for runs of identical columns."""
    values, durations = controls.values, controls.slot_durations
    k = 0
    while k < controls.n_slots:
        stop = k + 1
        while stop < controls.n_slots and np.array_equal(values[:, stop], values[:, k]):
            stop += 1
        yield values[:, k], float(np.sum(durations[k:stop])), k
        k = stop


def _model(layout, params, disorder, model):
    if model is not None:
        return model
    return RotatingFrameModel(layout, params, disorder)


def evolve_unitary(layout, params, disorder, controls, model=None):
    """
    Full propagator X(t_M) = X_M ... X_1 over all slots.

    Args:
        layout (LadderLayout): Qubit graph.
        params (PhysicalParams): Nominal parameters.
        disorder (DisorderRealization): Static offsets.
        controls (ControlMatrix): Piecewise-constant amplitudes.
        model (RotatingFrameModel | None): Prebuilt operators for the same triple.

    Returns:
        np.ndarray: Dense (d, d) unitary.
    """
    limit = PROPAGATION_CONFIG["max_unitary_qubits"]
    if layout.n_qubits > limit:
        raise ResourceLimitError(f"Dense unitaries are limited to {limit} qubits; layout has {layout.n_qubits}.")
    solver = SlotEigensolver(_model(layout, params, disorder, model))
    unitary = np.eye(layout.dimension, dtype=complex)
    for k in range(controls.n_slots):
        unitary = solver.propagator(controls.values[:, k], controls.slot_durations[k], k) @ unitary
    return unitary


def _check_normalized(psi):
    norms = np.linalg.norm(psi, axis=0)
    bad = np.abs(norms - 1.0) > PROPAGATION_CONFIG["norm_tolerance"]
    if np.any(bad):
        raise ValueError(f"Initial state is not normalized (norms {np.atleast_1d(norms)[np.atleast_1d(bad)]}).")


def evolve_state(psi0, layout, params, disorder, controls, model=None):
    """
    Evolves one state (d,) or a batch of states (d, k) through all slots.

    Runs of identical columns are exponentiated in one step. Norm drift above
    the configured tolerance is logged.
    """
    psi = np.asarray(psi0, dtype=complex)
    if psi.shape[0] != layout.dimension:
        raise ValueError(f"State dimension {psi.shape[0]} does not match layout dimension {layout.dimension}.")
    _check_normalized(psi)
    limit = PROPAGATION_CONFIG["max_state_qubits"]
    if layout.n_qubits > limit:
        raise ResourceLimitError(f"State evolution is limited to {limit} qubits; layout has {layout.n_qubits}.")
    model = _model(layout, params, disorder, model)
    dense = layout.n_qubits <= PROPAGATION_CONFIG["dense_max_qubits"]
    solver = SlotEigensolver(model) if dense else None

    psi = psi.copy()
    for column, duration, k in _runs(controls):
        if dense:
            evals, vecs = solver.eigensystem(column, k)
            psi = vecs @ (np.exp(-1j * evals * duration)[:, None] * (vecs.conj().T @ psi.reshape(len(evals), -1)))
            psi = psi.reshape(np.shape(psi0)) if np.ndim(psi0) == 1 else psi
        else:
            h = model.hamiltonian(column)
            psi = expm_multiply(-1j * duration * h, psi)

    drift = float(np.max(np.abs(np.linalg.norm(psi, axis=0) - 1.0))) if psi.size else 0.0
    if drift > PROPAGATION_CONFIG["norm_tolerance"]:
        logger.warning(f"State norm drifted by {drift:.3e} over {controls.n_slots} slots.")
    return psi
