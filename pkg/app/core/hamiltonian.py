"""
Lab-frame and rotating-frame Hamiltonians of the ladder, with static disorder.

Conventions:
- Parameters are angular frequencies in rad/s; operators are returned in
  rad/ns so that they pair with times in ns (hbar = 1).
- Computational basis index bits: qubit 0 is the most significant bit,
  bit 0 is |g>, bit 1 is |e>. sigma_z = |e><e| - |g><g| and
  cos(phi) sigma_x + sin(phi) sigma_y = e^{i phi}|g><e| + h.c.
"""

import logging
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from app.config import DISORDER_CONFIG, PHYSICS_CONFIG, PULSE_CONFIG
from app.core.lattice import SPECIES

RAD_PER_S_TO_RAD_PER_NS = 1e-9
CHANNELS = PULSE_CONFIG["channels"]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PhysicalParams:
    """
    Nominal device parameters.

    Attributes:
        omega_bar (dict): Nominal angular frequency per species (rad/s).
        zeta_bar (float): Nominal angular ZZ coupling (rad/s).
        eta_br (float): Blockade ratio |zeta / Omega|; sets the Rabi frequency.
        drive_headroom (float): Channel full scale in units of Omega. Naive
            segments of amplitude a map to control values a / drive_headroom.
    """
    omega_bar: dict
    zeta_bar: float
    eta_br: float
    drive_headroom: float = 1.0

    def __post_init__(self):
        missing = [s for s in SPECIES if s not in self.omega_bar]
        if missing:
            raise ValueError(f"omega_bar is missing species {missing}.")
        values = [*self.omega_bar.values(), self.zeta_bar, self.eta_br, self.drive_headroom]
        if any(v <= 0 for v in values):
            raise ValueError(f"All physical parameters must be strictly positive, got {values}.")

    @property
    def rabi(self):
        """Rabi frequency per species, Omega = zeta_bar / eta_br (rad/s)."""
        value = abs(self.zeta_bar / self.eta_br)
        return {s: value for s in SPECIES}

    @classmethod
    def from_dict(cls, config=None, **overrides):
        merged = dict(PHYSICS_CONFIG)
        merged.update(config or {})
        merged.update(overrides)
        omega_bar = merged["omega_bar"]
        if not isinstance(omega_bar, dict):
            omega_bar = {s: float(omega_bar) for s in SPECIES}
        return cls(
            omega_bar={s: float(omega_bar[s]) for s in SPECIES},
            zeta_bar=float(merged["zeta_bar"]),
            eta_br=float(merged["eta_br"]),
            drive_headroom=float(merged.get("drive_headroom", 1.0)),
        )

    def with_eta(self, eta_br):
        return replace(self, eta_br=float(eta_br))

    def to_dict(self):
        return {
            "omega_bar": dict(self.omega_bar),
            "zeta_bar": self.zeta_bar,
            "eta_br": self.eta_br,
            "rabi": self.rabi["A"],
            "drive_headroom": self.drive_headroom,
        }


@dataclass(frozen=True, eq=False)
class DisorderRealization:
    """Per-qubit frequency offsets and per-edge coupling offsets (rad/s)."""
    omega_offsets: np.ndarray
    zeta_offsets: np.ndarray
    epsilon: float = 0.0
    seed: int | None = None
    mode: str = "both"
    perturbation: float = 0.0
    metadata: dict = field(default_factory=dict)

    @classmethod
    def zero(cls, layout):
        return cls(np.zeros(layout.n_qubits), np.zeros(len(layout.edges)), mode="none")

    def check_layout(self, layout):
        if len(self.omega_offsets) != layout.n_qubits or len(self.zeta_offsets) != len(layout.edges):
            raise ValueError(
                f"Disorder has {len(self.omega_offsets)} qubit / {len(self.zeta_offsets)} edge offsets; "
                f"layout '{layout.name}' has {layout.n_qubits} qubits / {len(layout.edges)} edges."
            )

    def to_dict(self):
        return {
            "omega_offsets": [float(x) for x in self.omega_offsets],
            "zeta_offsets": [float(x) for x in self.zeta_offsets],
            "epsilon": self.epsilon,
            "seed": self.seed,
            "mode": self.mode,
            "perturbation": self.perturbation,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            omega_offsets=np.asarray(data["omega_offsets"], dtype=float),
            zeta_offsets=np.asarray(data["zeta_offsets"], dtype=float),
            epsilon=data.get("epsilon", 0.0),
            seed=data.get("seed"),
            mode=data.get("mode", "both"),
            perturbation=data.get("perturbation", 0.0),
        )


def sample_disorder(layout, epsilon, seed, mode="omega_only", params=None):
    """
    Draws a static disorder realization.

    Both Gaussian channels are always drawn in the same order, then the one
    suppressed by `mode` is zeroed, so that realizations with the same seed
    share their frequency offsets across modes.

    Args:
        layout (LadderLayout): Target layout.
        epsilon (float): Relative spread; offsets are N(0, eps*omega_bar) and N(0, eps*zeta_bar).
        seed (int): Realization seed.
        mode (str): 'omega_only', 'zeta_only' or 'both'.
        params (PhysicalParams): Nominal values; defaults to PHYSICS_CONFIG.

    Returns:
        DisorderRealization: Offsets in rad/s.
    """
    if epsilon < 0:
        raise ValueError(f"Disorder spread must be non-negative, got {epsilon}.")
    if mode not in DISORDER_CONFIG["modes"]:
        raise ValueError(f"Unknown disorder mode '{mode}'.")
    params = params or PhysicalParams.from_dict()
    rng = np.random.default_rng(seed)
    omega_scale = np.array([epsilon * params.omega_bar[q.species] for q in layout.qubits])
    omega = rng.standard_normal(layout.n_qubits) * omega_scale
    zeta = rng.standard_normal(len(layout.edges)) * (epsilon * params.zeta_bar)
    if mode == "zeta_only":
        omega = np.zeros_like(omega)
    if mode == "omega_only":
        zeta = np.zeros_like(zeta)
    return DisorderRealization(omega, zeta, epsilon=float(epsilon), seed=seed, mode=mode)


def perturb_disorder(base, spread, seed):
    """Adds N(0, spread) draws (rad/s) to the frequency offsets; couplings are untouched."""
    if spread < 0:
        raise ValueError(f"Perturbation spread must be non-negative, got {spread}.")
    rng = np.random.default_rng(seed)
    extra = rng.standard_normal(len(base.omega_offsets)) * spread
    return replace(
        base,
        omega_offsets=base.omega_offsets + extra,
        zeta_offsets=base.zeta_offsets.copy(),
        perturbation=float(spread),
        metadata={**base.metadata, "perturbation_seed": seed},
    )


def occupation_table(n_qubits):
    """(2^n, n) array of excitation numbers; column i is qubit i."""
    states = np.arange(2 ** n_qubits)
    shifts = n_qubits - 1 - np.arange(n_qubits)
    return ((states[:, None] >> shifts[None, :]) & 1).astype(np.int8)


def frame_frequencies(layout, params):
    """Per-qubit rotating-frame frequency (rad/s): transition frequency with all neighbours in |g>."""
    z = params.zeta_bar
    return np.array([params.omega_bar[q.species] + (q.freq_class - q.degree) * z for q in layout.qubits])


def _edge_arrays(layout):
    if not layout.edges:
        return np.zeros(0, dtype=int), np.zeros(0, dtype=int)
    edges = np.asarray(layout.edges, dtype=int)
    return edges[:, 0], edges[:, 1]


def build_h0_lab(layout, params, disorder):
    """
    Lab-frame static Hamiltonian
    H0 = sum_i omega_i/2 sz_i + sum_<ij> zeta_ij/2 sz_i sz_j, returned as a
    sparse diagonal matrix in rad/ns.
    """
    disorder.check_layout(layout)
    occ = occupation_table(layout.n_qubits)
    sz = 2.0 * occ - 1.0
    omega = np.array([params.omega_bar[q.species] + q.freq_class * params.zeta_bar for q in layout.qubits])
    omega = (omega + disorder.omega_offsets) * RAD_PER_S_TO_RAD_PER_NS
    zeta = (params.zeta_bar + disorder.zeta_offsets) * RAD_PER_S_TO_RAD_PER_NS
    left, right = _edge_arrays(layout)
    diagonal = sz @ (omega / 2.0)
    if len(left):
        diagonal = diagonal + (sz[:, left] * sz[:, right]) @ (zeta / 2.0)
    return sp.diags(diagonal).tocsr()


def zz_diagonal(layout, params, disorder=None):
    """Diagonal of sum_<ij> 2 zeta_ij n_i n_j in rad/ns."""
    occ = occupation_table(layout.n_qubits)
    left, right = _edge_arrays(layout)
    if not len(left):
        return np.zeros(layout.dimension)
    zeta = np.full(len(left), params.zeta_bar)
    if disorder is not None:
        zeta = zeta + disorder.zeta_offsets
    return (occ[:, left] * occ[:, right]) @ (2.0 * zeta * RAD_PER_S_TO_RAD_PER_NS)


def _flip_operator(n_qubits, qubit, kind):
    d = 2 ** n_qubits
    rows = np.arange(d)
    mask = 1 << (n_qubits - 1 - qubit)
    cols = rows ^ mask
    if kind == "x":
        data = np.ones(d, dtype=complex)
    else:
        # sigma_y: +i on <g|..|e>, -i on <e|..|g>
        data = np.where(rows & mask, -1j, 1j)
    return sp.csr_matrix((data, (rows, cols)), shape=(d, d))


class RotatingFrameModel:
    """
    RF+RWA operators of one (layout, params, disorder) triple.

    H(u) = static + sum_j u_j controls[j], with the channel order of
    PULSE_CONFIG['channels'].
    """

    def __init__(self, layout, params, disorder):
        disorder.check_layout(layout)
        self.layout = layout
        self.params = params
        self.disorder = disorder
        self.logger = logging.getLogger(__name__)
        self.static_diagonal = self._static_diagonal()
        self.controls = self._control_operators()
        self._dense_controls = None

    @property
    def dimension(self):
        return self.layout.dimension

    def _static_diagonal(self):
        layout, disorder = self.layout, self.disorder
        occ = occupation_table(layout.n_qubits)
        detuning = disorder.omega_offsets.astype(float).copy()
        for k, (i, j) in enumerate(layout.edges):
            detuning[i] -= disorder.zeta_offsets[k]
            detuning[j] -= disorder.zeta_offsets[k]
        diagonal = (2.0 * occ - 1.0) @ (detuning * RAD_PER_S_TO_RAD_PER_NS / 2.0)
        return diagonal + zz_diagonal(layout, self.params, disorder)

    def _control_operators(self):
        layout, params = self.layout, self.params
        n, d = layout.n_qubits, layout.dimension
        operators = []
        for channel in CHANNELS:
            species, axis = channel.split("_")
            scale = params.rabi[species] * params.drive_headroom * RAD_PER_S_TO_RAD_PER_NS / 2.0
            op = sp.csr_matrix((d, d), dtype=complex)
            for index in layout.species_indices(species):
                op = op + (layout.qubits[index].drive_multiplier * scale) * _flip_operator(n, index, axis)
            operators.append(op.tocsr())
        return tuple(operators)

    def static_hamiltonian(self):
        return sp.diags(self.static_diagonal.astype(complex)).tocsr()

    def dense_controls(self):
        if self._dense_controls is None:
            self._dense_controls = np.stack([op.toarray() for op in self.controls])
        return self._dense_controls

    def hamiltonian(self, column, dense=False):
        column = np.asarray(column, dtype=float)
        if dense:
            h = np.tensordot(column, self.dense_controls(), axes=1)
            h[np.diag_indices_from(h)] += self.static_diagonal
            return h
        h = self.static_hamiltonian()
        for u, op in zip(column, self.controls):
            if u != 0.0:
                h = h + u * op
        return h.tocsr()


def build_rwa_hamiltonian(layout, params, disorder, amplitudes):
    """
    RF+RWA Hamiltonian for one set of channel amplitudes.

    H = sum_i Delta_i/2 sz_i + sum_<ij> 2 zeta_ij |ee><ee|
        + sum_chi sum_{i in chi} m_i/2 (u_x Omega sx_i + u_y Omega sy_i),
    with Delta_i = d_omega_i - sum_j d_zeta_ij, the exact frame transform of
    build_h0_lab at the nominal frame frequencies.

    Args:
        amplitudes (sequence[float]): Six values (A_x, A_y, B_x, B_y, C_x, C_y) in [-1, 1].

    Returns:
        scipy.sparse.csr_matrix: Hamiltonian in rad/ns.
    """
    amplitudes = np.asarray(amplitudes, dtype=float)
    if amplitudes.shape != (len(CHANNELS),):
        raise ValueError(f"Expected {len(CHANNELS)} channel amplitudes, got shape {amplitudes.shape}.")
    if np.any(np.abs(amplitudes) > 1.0):
        raise ValueError(f"Channel amplitudes must lie in [-1, 1], got {amplitudes.tolist()}.")
    return RotatingFrameModel(layout, params, disorder).hamiltonian(amplitudes)


def hermiticity_error(h):
    diff = h - h.conj().T
    if sp.issparse(diff):
        return float(abs(diff).max()) if diff.nnz else 0.0
    return float(np.max(np.abs(diff))) if diff.size else 0.0
