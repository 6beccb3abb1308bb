"""
ICC states, the ideal blockade-limit gate model and fidelity metrics.

The ideal model rotates a driven qubit only on the sector where all of its
neighbours are in |g>; crossed qubits rotate by twice the angle. Targets of
every protocol are computed with this algebra, never by simulation.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from app.config import EXPERIMENT_CONFIG, PROPAGATION_CONFIG
from app.core.hamiltonian import RAD_PER_S_TO_RAD_PER_NS, PhysicalParams, RotatingFrameModel, zz_diagonal
from app.core.lattice import CROSSED_DRIVE_MULTIPLIER
from app.core.propagate import PropagationError, ResourceLimitError, evolve_state, evolve_unitary
from app.core.pulses import Protocol, protocol_schedule

logger = logging.getLogger(__name__)

NORM_TOLERANCE = 1e-8

_IDENTITY = np.eye(2, dtype=complex)
# (g, e) ordering
_SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
_SIGMA_Y = np.array([[0, 1j], [-1j, 0]], dtype=complex)
_SIGMA_Z = np.array([[-1, 0], [0, 1]], dtype=complex)


@dataclass(frozen=True)
class ICCState:
    """
    Initial-state description: Neel domain left of the ICC, ferromagnetic
    domain right of it, ICC qubits in sqrt(1-p)|g> + sqrt(p) e^{i phi}|e>.

    Attributes:
        p (float): Excited-state weight in [0, 1].
        phi (float): Relative phase (rad).
        icc_position (int): Grid column of the ICC.
        icc_column_type (str | None): Expected species of the ICC column; checked when given.
        superposed_rows (tuple[int] | None): Rows carrying the superposition; None for all rows.
            The remaining ICC qubits are in |g>.
    """
    p: float
    phi: float = 0.0
    icc_position: int = 0
    icc_column_type: str | None = None
    superposed_rows: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"ICC weight p must lie in [0, 1], got {self.p}.")
        if self.superposed_rows is not None:
            object.__setattr__(self, "superposed_rows", tuple(int(r) for r in self.superposed_rows))


def _icc_column(layout, spec):
    if not 0 <= spec.icc_position < layout.columns:
        raise ValueError(f"ICC position {spec.icc_position} outside layout '{layout.name}' with {layout.columns} columns.")
    qubits = layout.column_qubits(spec.icc_position)
    if not qubits:
        raise ValueError(f"Layout '{layout.name}' has no grid qubits in column {spec.icc_position}.")
    species = {layout.qubits[i].species for i in qubits}
    if spec.icc_column_type is not None and species != {spec.icc_column_type}:
        raise ValueError(f"Column {spec.icc_position} holds species {sorted(species)}, not {spec.icc_column_type}.")
    if spec.superposed_rows is not None:
        bad = [r for r in spec.superposed_rows if not 0 <= r < layout.rows]
        if bad:
            raise ValueError(f"Superposed rows {bad} outside layout '{layout.name}' with {layout.rows} rows.")
    return qubits


def make_icc_state(layout, spec):
    """
    Product state of an ICC configuration.

    Args:
        layout (LadderLayout): Grid layout.
        spec (ICCState): ICC description.

    Returns:
        np.ndarray: Normalized state of dimension 2^n.
    """
    _icc_column(layout, spec)
    icc = spec.icc_position
    ground = np.array([1.0, 0.0], dtype=complex)
    excited = np.array([0.0, 1.0], dtype=complex)
    superposed = np.array([math.sqrt(1.0 - spec.p), math.sqrt(spec.p) * np.exp(1j * spec.phi)], dtype=complex)

    state = np.ones(1, dtype=complex)
    for q in layout.qubits:
        if q.coupler or q.column is None or q.column > icc:
            local = ground
        elif q.column < icc:
            local = excited if (icc - q.column) % 2 == 0 else ground
        elif spec.superposed_rows is None or q.row in spec.superposed_rows:
            local = superposed
        else:
            local = ground
        state = np.kron(state, local)
    return state


@dataclass(frozen=True)
class Rotation:
    """R(theta, n) = cos(theta/2) 1 - i sin(theta/2) n.sigma."""
    theta: float
    axis: tuple = (1.0, 0.0, 0.0)

    def __post_init__(self):
        norm = math.sqrt(sum(a * a for a in self.axis))
        if abs(norm - 1.0) > 1e-12:
            raise ValueError(f"Rotation axis must be a unit vector, got {self.axis}.")

    @classmethod
    def in_plane(cls, theta, phase):
        return cls(float(theta), (math.cos(phase), math.sin(phase), 0.0))

    def matrix(self):
        nx, ny, nz = self.axis
        n_sigma = nx * _SIGMA_X + ny * _SIGMA_Y + nz * _SIGMA_Z
        return math.cos(self.theta / 2) * _IDENTITY - 1j * math.sin(self.theta / 2) * n_sigma

    def inverse(self):
        return Rotation(-self.theta, self.axis)


@dataclass(frozen=True)
class IdealGateSpec:
    """
    One global pulse in the blockade limit.

    Attributes:
        rotations (dict): species -> (regular Rotation, crossed Rotation).
    """
    rotations: dict = field(default_factory=dict)

    @classmethod
    def primitive(cls, species, theta, phase):
        """Drive of one species: regular qubits by theta, crossed ones by 2 theta, same in-plane axis."""
        return cls({species: (Rotation.in_plane(theta, phase),
                              Rotation.in_plane(CROSSED_DRIVE_MULTIPLIER * theta, phase))})

    def merged(self, other):
        overlap = set(self.rotations) & set(other.rotations)
        if overlap:
            raise ValueError(f"Species {sorted(overlap)} driven twice in one ideal pulse.")
        return IdealGateSpec({**self.rotations, **other.rotations})

    def inverse(self):
        return IdealGateSpec({s: (r.inverse(), c.inverse()) for s, (r, c) in self.rotations.items()})


def _bit(layout, qubit):
    return 1 << (layout.n_qubits - 1 - qubit)


def _apply_conditional(layout, qubit, matrix, psi, indices):
    bit = _bit(layout, qubit)
    neighbour_mask = 0
    for j in layout.neighbors[qubit]:
        neighbour_mask |= _bit(layout, j)
    g = indices[((indices & bit) == 0) & ((indices & neighbour_mask) == 0)]
    e = g | bit
    psi_g, psi_e = psi[g].copy(), psi[e].copy()
    psi[g] = matrix[0, 0] * psi_g + matrix[0, 1] * psi_e
    psi[e] = matrix[1, 0] * psi_g + matrix[1, 1] * psi_e


def apply_ideal_gate(layout, spec, psi):
    """Applies one ideal pulse to a state (d,) or a batch (d, k); returns a new array."""
    psi = np.array(psi, dtype=complex)
    indices = np.arange(layout.dimension)
    for species, (regular, crossed) in spec.rotations.items():
        regular_m, crossed_m = regular.matrix(), crossed.matrix()
        # same-species qubits are never adjacent, so their order is irrelevant
        for index in layout.species_indices(species):
            matrix = crossed_m if layout.qubits[index].crossed else regular_m
            _apply_conditional(layout, index, matrix, psi, indices)
    return psi


def ideal_blockade_unitary(layout, spec):
    return apply_ideal_gate(layout, spec, np.eye(layout.dimension, dtype=complex))


def schedule_gate_specs(schedule, params):
    """Ideal pulses of a schedule, one per window; rotation angle = amplitude * Omega * duration."""
    specs = []
    for window in schedule.windows:
        spec = IdealGateSpec()
        for segment in window.segments:
            theta = segment.amplitude * params.rabi[segment.species] * RAD_PER_S_TO_RAD_PER_NS * segment.duration
            spec = spec.merged(IdealGateSpec.primitive(segment.species, theta, segment.phase))
        specs.append(spec)
    return specs


def _protocol_specs(protocol, params, target_species):
    protocol = Protocol.parse(protocol)
    schedule = protocol_schedule(protocol, params, target_species=target_species or "B")
    specs = schedule_gate_specs(schedule, params)
    if protocol.name == "shift" and protocol.power < 0:
        specs = [s.inverse() for s in reversed(specs)]
    return specs


def ideal_protocol_unitary(layout, protocol, params=None, target_species=None):
    """Blockade-limit unitary of a whole protocol."""
    params = params or PhysicalParams.from_dict()
    unitary = np.eye(layout.dimension, dtype=complex)
    for spec in _protocol_specs(protocol, params, target_species):
        unitary = apply_ideal_gate(layout, spec, unitary)
    return unitary


def protocol_target_species(layout, protocol, icc_position):
    """
    Checks that a protocol applies at the ICC column and returns the species a
    Hadamard must target there (None for other protocols).
    """
    protocol = Protocol.parse(protocol)
    column = ICCState(0.0, icc_position=icc_position)
    qubits = _icc_column(layout, column)
    if protocol.name == "shift":
        destination = icc_position + protocol.power
        if not 0 <= destination < layout.columns or not layout.column_qubits(destination):
            raise ValueError(f"{protocol} moves the ICC from column {icc_position} to {destination}, "
                             f"off the grid of '{layout.name}'.")
    if protocol.name == "hadamard":
        crossed = [i for i in qubits if layout.qubits[i].crossed]
        species = {layout.qubits[i].species for i in crossed}
        if not crossed or not species <= {"B", "C"}:
            raise ValueError(f"Hadamard needs a crossed B/C column; column {icc_position} of '{layout.name}' is not one.")
        return species.pop()
    if protocol.name == "cz":
        attached = [c for c in layout.couplers() if set(layout.neighbors[c]) & set(qubits)]
        if not attached:
            raise ValueError(f"CZ needs a coupler on the ICC column; column {icc_position} of '{layout.name}' has none.")
    return None


def ideal_target_state(layout, protocol, initial, params=None):
    """
    Applies the protocol's ideal pulse sequence to an ICC state.

    Args:
        layout (LadderLayout): Layout the protocol runs on.
        protocol (Protocol | str): 'shift^k', 'hadamard', 'cz' or 'identity'.
        initial (ICCState): Initial configuration.
        params (PhysicalParams | None): Only fixes the schedule's rounding of angles.

    Returns:
        np.ndarray: Target state, defined up to a global phase.
    """
    protocol = Protocol.parse(protocol)
    target_species = protocol_target_species(layout, protocol, initial.icc_position)
    params = params or PhysicalParams.from_dict()
    psi = make_icc_state(layout, initial)
    for spec in _protocol_specs(protocol, params, target_species):
        psi = apply_ideal_gate(layout, spec, psi)
    return psi


def _check_norm(psi, name):
    norm = np.linalg.norm(psi)
    if abs(norm - 1.0) > NORM_TOLERANCE:
        raise ValueError(f"{name} state is not normalized (norm {norm:.12f}).")


def state_fidelity(target, actual):
    """|<target|actual>| in [0, 1]."""
    target, actual = np.asarray(target), np.asarray(actual)
    if target.shape != actual.shape:
        raise ValueError(f"State shapes differ: {target.shape} vs {actual.shape}.")
    _check_norm(target, "Target")
    _check_norm(actual, "Actual")
    return float(min(1.0, abs(np.vdot(target, actual))))


def trace_cost(x, x_target):
    """1 - |Tr(X_target^dagger X)| / d."""
    x, x_target = np.asarray(x), np.asarray(x_target)
    if x.shape != x_target.shape or x.ndim != 2 or x.shape[0] != x.shape[1]:
        raise ValueError(f"Operator shapes differ or are not square: {x.shape} vs {x_target.shape}.")
    overlap = np.sum(np.conj(x_target) * x)
    return float(min(1.0, max(0.0, 1.0 - abs(overlap) / x.shape[0])))


def icc_state_pairs(layout, protocol, p_grid, phi=0.0, *, icc_position, superposed_rows=None, params=None):
    """(initial, target) matrices of shape (d, len(p_grid)) for a training or evaluation grid."""
    if len(p_grid) == 0:
        raise ValueError("The p grid must not be empty.")
    initial, target = [], []
    for p in p_grid:
        spec = ICCState(float(p), phi, icc_position, superposed_rows=superposed_rows)
        initial.append(make_icc_state(layout, spec))
        target.append(ideal_target_state(layout, protocol, spec, params))
    return np.stack(initial, axis=1), np.stack(target, axis=1)


@dataclass(frozen=True)
class FidelityEntry:
    p: float
    phi: float
    fidelity: float
    std: float
    stderr: float
    n_samples: int


@dataclass
class FidelityReport:
    """
    Fidelities on a p grid, aggregated over disorder realizations.

    Per-entry std/stderr are taken over realizations at fixed p; the overall
    std/stderr over the per-realization averages. stderr = std / sqrt(n).
    """
    entries: list
    mean: float
    std: float
    stderr: float
    n_samples: int
    samples: np.ndarray = field(repr=False, default=None)
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples, p_grid, phi=0.0, metadata=None):
        """
        Args:
            samples (np.ndarray): (S, J) fidelities; NaN marks a failed realization.
            p_grid (sequence[float]): The J grid points.
        """
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        if samples.shape[1] != len(p_grid):
            raise ValueError(f"{samples.shape[1]} sample columns for {len(p_grid)} grid points.")
        valid = samples[~np.any(np.isnan(samples), axis=1)]
        n = valid.shape[0]
        entries = []
        for j, p in enumerate(p_grid):
            column = valid[:, j]
            std = float(np.std(column, ddof=1)) if n > 1 else 0.0
            entries.append(FidelityEntry(
                p=float(p),
                phi=float(phi),
                fidelity=float(np.mean(column)) if n else float("nan"),
                std=std,
                stderr=std / math.sqrt(n) if n else float("nan"),
                n_samples=n,
            ))
        per_realization = valid.mean(axis=1) if n else np.zeros(0)
        std = float(np.std(per_realization, ddof=1)) if n > 1 else 0.0
        metadata = dict(metadata or {})
        metadata.setdefault("n_failed", int(samples.shape[0] - n))
        return cls(
            entries=entries,
            mean=float(valid.mean()) if n else float("nan"),
            std=std,
            stderr=std / math.sqrt(n) if n else float("nan"),
            n_samples=n,
            samples=samples,
            metadata=metadata,
        )

    def to_rows(self):
        m = self.metadata
        return [
            {
                "epsilon": m.get("epsilon", 0.0),
                "p": e.p,
                "phi": e.phi,
                "fidelity": e.fidelity,
                "std": e.std,
                "stderr": e.stderr,
                "n_samples": e.n_samples,
                "protocol": m.get("protocol", ""),
                "seed": m.get("seed", ""),
                "mode": m.get("mode", ""),
            }
            for e in self.entries
        ]

    def to_dict(self):
        return {
            "mean": self.mean,
            "std": self.std,
            "stderr": self.stderr,
            "n_samples": self.n_samples,
            "metadata": self.metadata,
            "entries": self.to_rows(),
        }


def fidelity_samples(protocol, layout, params, disorder, controls, p_grid, phi=0.0, *,
                     icc_position, superposed_rows=None, model=None, pairs=None):
    """
    Fidelities of one realization on the p grid.

    `controls=None` replaces the evolution with the ideal protocol (oracle).
    A failed propagation yields a row of NaN.
    """
    if pairs is None:
        pairs = icc_state_pairs(layout, protocol, p_grid, phi, icc_position=icc_position,
                                superposed_rows=superposed_rows, params=params)
    initial, target = pairs
    if controls is None:
        final = target
    else:
        try:
            final = evolve_state(initial, layout, params, disorder, controls, model=model)
        except PropagationError as e:
            logger.error(f"Propagation failed for protocol {protocol} (seed {disorder.seed}): {e}", exc_info=True)
            return np.full(initial.shape[1], np.nan)
    overlaps = np.abs(np.sum(np.conj(target) * final, axis=0))
    return np.minimum(1.0, overlaps)


def averaged_fidelity(protocol, layout, params, disorder, controls, p_grid=None, phi=0.0, *,
                      icc_position, superposed_rows=None, metadata=None):
    """
    Evolves each ICC state of the grid and compares it with the ideal target.

    Returns:
        FidelityReport: Report over a single realization.
    """
    p_grid = EXPERIMENT_CONFIG["p_grid"] if p_grid is None else p_grid
    row = fidelity_samples(protocol, layout, params, disorder, controls, p_grid, phi,
                           icc_position=icc_position, superposed_rows=superposed_rows)
    meta = {"protocol": str(Protocol.parse(protocol)), "epsilon": disorder.epsilon,
            "seed": disorder.seed, "mode": disorder.mode}
    meta.update(metadata or {})
    return FidelityReport.from_samples(row[None, :], p_grid, phi, meta)


def ensemble_fidelity(protocol, layout, params, disorders, controls, p_grid=None, phi=0.0, *,
                      icc_position, superposed_rows=None, threads=1, metadata=None):
    """
    Averaged fidelity over a list of disorder realizations.

    Realizations run in a thread pool; results are gathered in input order so
    the report does not depend on `threads`.
    """
    if not disorders:
        raise ValueError("At least one disorder realization is required.")
    p_grid = EXPERIMENT_CONFIG["p_grid"] if p_grid is None else p_grid
    pairs = icc_state_pairs(layout, protocol, p_grid, phi, icc_position=icc_position,
                            superposed_rows=superposed_rows, params=params)

    def evaluate(disorder):
        model = RotatingFrameModel(layout, params, disorder)
        return fidelity_samples(protocol, layout, params, disorder, controls, p_grid, phi,
                                icc_position=icc_position, model=model, pairs=pairs)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(evaluate, disorders))
    else:
        rows = [evaluate(d) for d in disorders]

    first = disorders[0]
    meta = {"protocol": str(Protocol.parse(protocol)), "epsilon": first.epsilon,
            "seed": first.seed, "mode": first.mode, "perturbation": first.perturbation}
    meta.update(metadata or {})
    return FidelityReport.from_samples(np.vstack(rows), p_grid, phi, meta)


def protocol_target_unitary(layout, protocol, params, duration, *, icc_position):
    """
    Ideal protocol unitary times the nominal ZZ phase exp(-i T zz) of a run
    lasting `duration` ns; the two commute in the blockade limit.
    """
    target_species = protocol_target_species(layout, protocol, icc_position)
    ideal = ideal_protocol_unitary(layout, protocol, params, target_species)
    return np.exp(-1j * zz_diagonal(layout, params) * duration)[:, None] * ideal


def ensemble_gate_fidelity(protocol, layout, params, disorders, controls, *, icc_position, threads=1, metadata=None):
    """
    |Tr(T^dagger U)| / d of the evolved protocol unitary against its
    blockade-limit target, over a list of disorder realizations.

    Unlike the ICC state metric, which only sees the phase disorder writes on
    the ICC column, this one is sensitive to the random phase of every basis
    state of the layout.

    Returns:
        FidelityReport: One entry with p = NaN; metadata['metric'] is 'gate'.
    """
    if not disorders:
        raise ValueError("At least one disorder realization is required.")
    limit = PROPAGATION_CONFIG["max_unitary_qubits"]
    if layout.n_qubits > limit:
        raise ResourceLimitError(f"Gate fidelity is limited to {limit} qubits; layout has {layout.n_qubits}.")
    target = protocol_target_unitary(layout, protocol, params, controls.duration, icc_position=icc_position)

    def evaluate(disorder):
        try:
            u = evolve_unitary(layout, params, disorder, controls)
        except PropagationError as e:
            logger.error(f"Propagation failed for protocol {protocol} (seed {disorder.seed}): {e}", exc_info=True)
            return np.array([np.nan])
        return np.array([1.0 - trace_cost(u, target)])

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(evaluate, disorders))
    else:
        rows = [evaluate(d) for d in disorders]

    first = disorders[0]
    meta = {"protocol": str(Protocol.parse(protocol)), "epsilon": first.epsilon, "seed": first.seed,
            "mode": first.mode, "perturbation": first.perturbation, "metric": "gate"}
    meta.update(metadata or {})
    return FidelityReport.from_samples(np.vstack(rows), [float("nan")], 0.0, meta)
