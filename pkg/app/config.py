"""
Configuration for the ladder QPU pulse lab.

Frequencies are angular and given in rad/s, times in ns. Experiment files
(YAML, see docs/CONFIG_SCHEMA.md) are merged over these defaults section by
section.
"""

import math

# Physical constants of the globally driven ladder
PHYSICS_CONFIG = {
    "omega_bar": {"A": 7.0e9, "B": 7.0e9, "C": 7.0e9},  # rad/s, equal nominal frequencies
    "zeta_bar": 2.0e8,  # rad/s; gives Omega = 1e7 rad/s at eta_br = 20
    "eta_br": 20.0,
    "drive_headroom": 1.0,  # channel full scale in units of the naive Rabi frequency
}

# Static disorder defaults
DISORDER_CONFIG = {
    "epsilon": 0.02,
    "mode": "omega_only",
    "modes": ("omega_only", "zeta_only", "both"),
}

# Pulse discretization
PULSE_CONFIG = {
    "slot_floor_ns": 0.5,  # hardware update period
    "slot_ns": 0.5,
    "simultaneous_bc": True,
    "channels": ("A_x", "A_y", "B_x", "B_y", "C_x", "C_y"),
}

# Time evolution
PROPAGATION_CONFIG = {
    "dense_max_qubits": 10,
    "max_unitary_qubits": 12,
    "max_state_qubits": 15,
    "norm_tolerance": 1e-10,
    "hermiticity_tolerance": 1e-12,
}

# GRAPE and Adam
GRAPE_CONFIG = {
    "cost_mode": "state_set",
    "max_iters": 2000,
    "learning_rate": 1e-2,
    "beta1": 0.9,
    "beta2": 0.999,
    "adam_eps": 1e-8,
    "amplitude_bound": 1.0,
    "cost_tolerance": 1e-4,
    "init_jitter": 0.0,
    "seed": 1234,
    "divergence_window": 50,
    "warmup_iters": 20,
    "gradient_check_samples": 0,
    "log_every": 25,
    "threads": None,  # None: experiment.threads
    "slot_chunk": 64,  # slots per batched eigendecomposition
    "training_p": (0.0, 0.33, 0.66),
}

# Named problems: layout, ICC placement and protocol
PROBLEM_CONFIG = {
    "identity": {"layout": "row7", "icc_position": 2, "protocol": "identity"},
    "if_b": {"layout": "row7", "icc_position": 2, "protocol": "shift"},
    "if_a": {"layout": "row7", "icc_position": 3, "protocol": "shift"},
    "hadamard": {"layout": "row7", "icc_position": 2, "protocol": "hadamard"},
    "cz": {"layout": "reversed_h", "icc_position": 1, "protocol": "cz"},
    "if_b_ladder": {"layout": "ladder2", "icc_position": 2, "protocol": "shift", "superposed_rows": [0]},
}

# Experiment driver defaults
EXPERIMENT_CONFIG = {
    "kind": "disorder_sweep",
    "seed": 2024,
    "n_samples": 20,
    "threads": 1,
    "p_grid": tuple(round(0.1 * k, 10) for k in range(11)),
    "phi": 0.0,
    "epsilons": tuple([0.0] + [float(x) for x in (10 ** (-4 + 2.0 * k / 9) * 2 for k in range(10))]),
    "modes": ("omega_only", "zeta_only", "both"),
    "problems": ("if_b", "if_a"),
    "eta_values": (20.0, 5.0),
    "time_scale": 0.5,
    "spreads_mhz": (0.0, 0.1, 0.25, 0.5, 0.75, 1.0),
    "perturbation_samples": 20,
    "superposed_rows": None,
    "metrics": ("state",),  # disorder sweep: "state" (ICC pairs) and/or "gate" (trace fidelity)
}

# Output layout
DIR_CONFIG = {
    "output_dir": "results",
    "manifest_filename": "manifest.json",
    "controls_suffix": "_controls.json",
    "trajectory_suffix": "_cost.csv",
}

# Logging
LOG_CONFIG = {
    "log_dir_name": "logs",
    "log_filename": "ladder_pulse_lab.log",
    "level": "INFO",
    "backup_count": 7,
    "format": "%(asctime)s - %(name)s - %(levelname)s - %(message)s",
}

TWO_PI = 2.0 * math.pi
