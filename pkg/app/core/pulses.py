"""
Global pulse schedules, the naive protocol tables and their discretization
into 6-channel control matrices.

A schedule is a sequence of windows. Inside a window each driven species has
one constant segment; segments start together at the window start and the
window lasts as long as its longest segment. Durations are in ns.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from app.config import PULSE_CONFIG
from app.core.hamiltonian import RAD_PER_S_TO_RAD_PER_NS
from app.core.lattice import SPECIES

CHANNELS = PULSE_CONFIG["channels"]
SLOT_FLOOR_NS = PULSE_CONFIG["slot_floor_ns"]
_PI = math.pi

# (phase, rotation angle) steps, applied in order
PI_A_STEPS = ((0.0, _PI / 2), (_PI / 2, _PI), (_PI, _PI / 2), (-_PI / 2, _PI))
PI_BC_STEPS = ((0.0, 3 * _PI / 4), (_PI / 2, _PI), (_PI, _PI / 4), (-_PI / 2, _PI))
HADAMARD_STEPS = ((0.0, _PI / 4), (_PI / 2, _PI / 2), (-_PI / 4, 3 * _PI / 4), (_PI / 4, 3 * _PI / 2))
CZ_STEPS = ((_PI / 2, _PI / 4), (0.0, _PI), (_PI / 2, _PI / 2), (0.0, _PI), (_PI / 2, _PI / 4))
A_FULL_TURN = (0.0, 2 * _PI)

logger = logging.getLogger(__name__)


def _wrap_phase(phi):
    """Maps a phase to (-pi, pi]."""
    wrapped = math.remainder(phi, 2 * _PI)
    return _PI if wrapped == -_PI else wrapped


@dataclass(frozen=True)
class PulseSegment:
    species: str
    amplitude: float
    phase: float
    duration: float  # ns

    def __post_init__(self):
        if self.species not in SPECIES:
            raise ValueError(f"Unknown species '{self.species}'.")
        if self.amplitude <= 0.0:
            raise ValueError(f"Segment amplitude must be positive, got {self.amplitude}.")
        if self.duration <= 0.0:
            raise ValueError(f"Segment duration must be positive, got {self.duration} ns.")


@dataclass(frozen=True)
class PulseWindow:
    segments: tuple
    gap: float = 0.0  # ns, length of an idle window

    @property
    def duration(self):
        return max((s.duration for s in self.segments), default=self.gap)

    @property
    def species(self):
        return tuple(s.species for s in self.segments)


@dataclass(frozen=True)
class PulseSchedule:
    """
    Ordered global pulse windows.

    Attributes:
        windows (tuple[PulseWindow]): Windows in time order.
        label (str): Protocol identifier.
        drive_headroom (float): Channel full scale used when discretizing.
        allow_overlap (bool): Permit A to be driven together with B or C
            (only for schedules reconstructed from optimized controls).
    """
    windows: tuple = ()
    label: str = ""
    drive_headroom: float = 1.0
    allow_overlap: bool = False
    metadata: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for k, window in enumerate(self.windows):
            species = window.species
            if len(set(species)) != len(species):
                raise ValueError(f"Window {k} drives a species twice: {species}.")
            if not self.allow_overlap and "A" in species and len(species) > 1:
                raise ValueError(f"Window {k} drives A together with {species}; activations must be disjoint.")

    @property
    def duration(self):
        return float(sum(w.duration for w in self.windows))

    def repeated(self, times):
        return PulseSchedule(self.windows * times, label=self.label, drive_headroom=self.drive_headroom,
                             allow_overlap=self.allow_overlap, metadata=dict(self.metadata))

    def to_dict(self):
        return {
            "label": self.label,
            "drive_headroom": self.drive_headroom,
            "allow_overlap": self.allow_overlap,
            "duration_ns": self.duration,
            "windows": [
                {
                    "gap_ns": w.gap,
                    "segments": [
                        {"species": s.species, "amplitude": s.amplitude, "phase": s.phase, "duration_ns": s.duration}
                        for s in w.segments
                    ],
                }
                for w in self.windows
            ],
        }


@dataclass(frozen=True, eq=False)
class ControlMatrix:
    """
    Piecewise-constant control amplitudes.

    Attributes:
        values (np.ndarray): (6, M) amplitudes in [-1, 1], rows ordered as CHANNELS.
        slot_durations (np.ndarray): (M,) slot lengths in ns, each >= 0.5 ns.
    """
    values: np.ndarray
    slot_durations: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float).reshape(len(CHANNELS), -1)
        durations = np.asarray(self.slot_durations, dtype=float).reshape(-1)
        if values.shape[1] != durations.shape[0]:
            raise ValueError(f"{values.shape[1]} control columns but {durations.shape[0]} slot durations.")
        if np.any(np.abs(values) > 1.0 + 1e-12):
            raise ValueError("Control amplitudes must lie in [-1, 1].")
        if np.any(durations < SLOT_FLOOR_NS - 1e-9):
            raise ValueError(f"Slot durations must be at least {SLOT_FLOOR_NS} ns, got min {durations.min()} ns.")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "slot_durations", durations)

    @property
    def n_slots(self):
        return self.values.shape[1]

    @property
    def duration(self):
        return float(np.sum(self.slot_durations))

    @property
    def uniform_slot(self):
        if self.n_slots and np.all(self.slot_durations == self.slot_durations[0]):
            return float(self.slot_durations[0])
        return None

    @classmethod
    def zeros(cls, n_slots, slot):
        return cls(np.zeros((len(CHANNELS), n_slots)), np.full(n_slots, float(slot)))

    def concatenate(self, other):
        return ControlMatrix(np.hstack([self.values, other.values]),
                             np.concatenate([self.slot_durations, other.slot_durations]))

    def to_dict(self):
        return {
            "channels": list(CHANNELS),
            "slot_ns": self.uniform_slot,
            "slot_durations_ns": [float(x) for x in self.slot_durations],
            "values": {ch: [float(x) for x in row] for ch, row in zip(CHANNELS, self.values)},
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, data):
        values = np.array([data["values"][ch] for ch in CHANNELS], dtype=float).reshape(len(CHANNELS), -1)
        return cls(values, np.asarray(data["slot_durations_ns"], dtype=float), data.get("metadata", {}))


@dataclass(frozen=True)
class Protocol:
    """Protocol identifier: 'shift' (power k, k may be negative), 'hadamard', 'cz' or 'identity'."""
    name: str
    power: int = 1

    @classmethod
    def parse(cls, text):
        if isinstance(text, Protocol):
            return text
        text = str(text).strip().lower()
        if text.startswith("shift"):
            power = int(text.split("^", 1)[1]) if "^" in text else 1
            return cls("shift", power)
        if text in ("hadamard", "cz", "identity"):
            return cls(text, 1)
        raise ValueError(f"Unknown protocol '{text}'.")

    def __str__(self):
        return f"shift^{self.power}" if self.name == "shift" and self.power != 1 else self.name


def _steps_to_windows(steps, species, params):
    windows = []
    for phase, angle in steps:
        segments = tuple(
            PulseSegment(s, 1.0, _wrap_phase(phase), angle / (params.rabi[s] * RAD_PER_S_TO_RAD_PER_NS))
            for s in species
        )
        windows.append(PulseWindow(segments))
    return windows


def _inverse_steps(steps):
    """Adjoint of a rotation sequence: reversed order, axes flipped."""
    return tuple((phase + _PI, angle) for phase, angle in reversed(steps))


def shift_sequence(params, direction="right", simultaneous=None):
    """
    Shift of the information-carrying column: Pi_Ar, then Pi_C and Pi_B, then Pi_Ar.

    The segment list does not depend on `direction`; the same sequence moves
    the column either way depending on its species.

    Args:
        params (PhysicalParams): Sets Omega and the drive headroom.
        direction (str): 'left' or 'right'; recorded in the metadata.
        simultaneous (bool | None): Drive B and C together (default from PULSE_CONFIG).

    Returns:
        PulseSchedule: Naive shift schedule.
    """
    if direction not in ("left", "right"):
        raise ValueError(f"Shift direction must be 'left' or 'right', got '{direction}'.")
    if simultaneous is None:
        simultaneous = PULSE_CONFIG["simultaneous_bc"]
    windows = _steps_to_windows(PI_A_STEPS, ("A",), params)
    if simultaneous:
        windows += _steps_to_windows(PI_BC_STEPS, ("B", "C"), params)
    else:
        windows += _steps_to_windows(PI_BC_STEPS, ("C",), params)
        windows += _steps_to_windows(PI_BC_STEPS, ("B",), params)
    windows += _steps_to_windows(PI_A_STEPS, ("A",), params)
    return PulseSchedule(tuple(windows), label="shift", drive_headroom=params.drive_headroom,
                         metadata={"direction": direction, "simultaneous_bc": simultaneous})


def hadamard_sequence(params, target_species="B"):
    """U_H on the target species, a full A turn, then U_H adjoint."""
    if target_species not in ("B", "C"):
        raise ValueError(f"Hadamard targets a B or C column, got '{target_species}'.")
    windows = _steps_to_windows(HADAMARD_STEPS, (target_species,), params)
    windows += _steps_to_windows((A_FULL_TURN,), ("A",), params)
    windows += _steps_to_windows(_inverse_steps(HADAMARD_STEPS), (target_species,), params)
    return PulseSchedule(tuple(windows), label="hadamard", drive_headroom=params.drive_headroom,
                         metadata={"target_species": target_species})


def cz_sequence(params):
    windows = _steps_to_windows(CZ_STEPS, ("A",), params)
    return PulseSchedule(tuple(windows), label="cz", drive_headroom=params.drive_headroom)


def protocol_schedule(protocol, params, target_species="B", simultaneous=None):
    """Naive schedule for any protocol id; shift^k repeats the shift |k| times."""
    protocol = Protocol.parse(protocol)
    if protocol.name == "identity":
        return PulseSchedule((), label="identity", drive_headroom=params.drive_headroom)
    if protocol.name == "hadamard":
        return hadamard_sequence(params, target_species)
    if protocol.name == "cz":
        return cz_sequence(params)
    direction = "right" if protocol.power >= 0 else "left"
    schedule = shift_sequence(params, direction, simultaneous).repeated(abs(protocol.power))
    return PulseSchedule(schedule.windows, label=str(protocol), drive_headroom=params.drive_headroom,
                         metadata=dict(schedule.metadata))


def _channel_rows(species):
    index = CHANNELS.index(f"{species}_x")
    return index, index + 1


def _fill(values, segment, headroom, start, stop):
    x_row, y_row = _channel_rows(segment.species)
    scale = segment.amplitude / headroom
    values[x_row, start:stop] = scale * math.cos(segment.phase)
    values[y_row, start:stop] = scale * math.sin(segment.phase)


def schedule_to_controls(schedule, slot=None):
    """
    Discretizes a schedule on a uniform slot grid.

    Each window and each of its segments is rounded to the nearest whole
    number of slots (at least one); the largest rounding error is recorded in
    the metadata.

    Args:
        schedule (PulseSchedule): Schedule to discretize.
        slot (float): Slot length in ns, at least the 0.5 ns hardware floor.

    Returns:
        ControlMatrix: (6, M) amplitudes with uniform slots.
    """
    slot = PULSE_CONFIG["slot_ns"] if slot is None else float(slot)
    if slot < SLOT_FLOOR_NS:
        raise ValueError(f"Slot {slot} ns is below the {SLOT_FLOOR_NS} ns hardware floor.")
    blocks, worst = [], 0.0
    for window in schedule.windows:
        n_window = max(1, int(round(window.duration / slot)))
        block = np.zeros((len(CHANNELS), n_window))
        worst = max(worst, abs(n_window * slot - window.duration))
        for segment in window.segments:
            n_segment = min(n_window, max(1, int(round(segment.duration / slot))))
            worst = max(worst, abs(n_segment * slot - segment.duration))
            _fill(block, segment, schedule.drive_headroom, 0, n_segment)
        blocks.append(block)
    values = np.hstack(blocks) if blocks else np.zeros((len(CHANNELS), 0))
    controls = ControlMatrix(values, np.full(values.shape[1], slot), {
        "label": schedule.label,
        "nominal_duration_ns": schedule.duration,
        "rounding_error_ns": worst,
    })
    if worst > 0:
        logger.debug(f"Discretized '{schedule.label}' on {slot} ns slots; worst rounding {worst:.3g} ns.")
    return controls


def schedule_to_exact_controls(schedule):
    """One column per constant sub-interval; slot lengths follow the segments exactly."""
    columns, durations = [], []
    for window in schedule.windows:
        edges = sorted({0.0, *(s.duration for s in window.segments)})
        merged = [edges[0]]
        for t in edges[1:]:
            if t - merged[-1] > 1e-9:
                merged.append(t)
        for start, stop in zip(merged[:-1], merged[1:]):
            column = np.zeros((len(CHANNELS), 1))
            for segment in window.segments:
                if segment.duration > start + 1e-9:
                    _fill(column, segment, schedule.drive_headroom, 0, 1)
            columns.append(column)
            durations.append(stop - start)
    values = np.hstack(columns) if columns else np.zeros((len(CHANNELS), 0))
    return ControlMatrix(values, np.asarray(durations, dtype=float), {
        "label": schedule.label,
        "nominal_duration_ns": schedule.duration,
        "rounding_error_ns": 0.0,
    })


def controls_to_schedule(controls, drive_headroom=1.0, label="reconstructed"):
    """
    Rebuilds a schedule from piecewise-constant controls: runs of identical
    columns become windows, each active species one segment.
    """
    windows, k = [], 0
    values, durations = controls.values, controls.slot_durations
    while k < controls.n_slots:
        stop = k + 1
        while stop < controls.n_slots and np.array_equal(values[:, stop], values[:, k]):
            stop += 1
        duration = float(np.sum(durations[k:stop]))
        segments = []
        for species in SPECIES:
            x_row, y_row = _channel_rows(species)
            ux, uy = values[x_row, k], values[y_row, k]
            if ux != 0.0 or uy != 0.0:
                amplitude = math.hypot(ux, uy) * drive_headroom
                segments.append(PulseSegment(species, amplitude, math.atan2(uy, ux), duration))
        if segments:
            windows.append(PulseWindow(tuple(segments)))
        else:
            windows.append(PulseWindow((), gap=duration))
        k = stop
    return PulseSchedule(tuple(windows), label=label, drive_headroom=drive_headroom, allow_overlap=True)
