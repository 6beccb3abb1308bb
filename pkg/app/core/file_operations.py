import csv
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from app.config import DIR_CONFIG, DISORDER_CONFIG, EXPERIMENT_CONFIG, GRAPE_CONFIG, PHYSICS_CONFIG, PROBLEM_CONFIG, PULSE_CONFIG

# sections of an experiment file and the defaults they are merged over
CONFIG_SECTIONS = {
    "experiment": EXPERIMENT_CONFIG,
    "physics": PHYSICS_CONFIG,
    "disorder": DISORDER_CONFIG,
    "pulse": PULSE_CONFIG,
    "grape": GRAPE_CONFIG,
    "problems": PROBLEM_CONFIG,
}


def load_experiment_config(path=None):
    """
    Loads a YAML experiment file and merges each section over the defaults.

    Args:
        path (str | None): YAML file; None returns the defaults.

    Returns:
        dict: One dict per section in CONFIG_SECTIONS.

    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If the file is not a mapping of known sections.
    """
    data = {}
    if path:
        logging.info(f"Loading experiment config from {path}")
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = yaml.safe_load(f) or {}
        except FileNotFoundError:
            logging.error(f"Experiment config not found: {path}")
            raise
        except yaml.YAMLError as e:
            logging.error(f"Could not parse {path}: {e}", exc_info=True)
            raise ValueError(f"Could not parse experiment config {path}: {e}") from e
    if not isinstance(data, dict):
        raise ValueError(f"Experiment config must be a mapping, got {type(data).__name__}.")
    unknown = sorted(set(data) - set(CONFIG_SECTIONS))
    if unknown:
        raise ValueError(f"Unknown config sections {unknown}; expected {sorted(CONFIG_SECTIONS)}.")

    merged = {}
    for section, defaults in CONFIG_SECTIONS.items():
        values = data.get(section) or {}
        if not isinstance(values, dict):
            raise ValueError(f"Config section '{section}' must be a mapping.")
        merged[section] = {**defaults, **values}
    merged["problems"] = {name: dict(settings) for name, settings in merged["problems"].items()}
    return merged


def _to_builtin(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, (set, frozenset)):
        return sorted(value)
    raise TypeError(f"Object of type {type(value).__name__} is not JSON serializable")


def canonical_json(data):
    """Sorted, compact JSON; the input of spec_hash."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), default=_to_builtin)


def spec_hash(data):
    return hashlib.sha256(canonical_json(data).encode("utf-8")).hexdigest()


def write_json(path, data):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(data, f, indent=2, sort_keys=True, default=_to_builtin)
        f.write("\n")
    logging.info(f"Wrote {path}")
    return path


def read_json(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


def write_csv(path, rows, fieldnames):
    """Writes dict rows; missing keys become empty cells, extra keys are ignored."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(fieldnames), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in fieldnames})
    logging.info(f"Wrote {len(rows)} rows to {path}")
    return path


@dataclass
class RunManifest:
    """
    Record of one experiment run: what was asked, with which seeds, and
    which files came out.
    """
    spec_hash: str
    version: str
    kind: str
    seeds: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    wall_clock: float = 0.0

    def add_output(self, path, out_dir):
        relative = os.path.relpath(path, out_dir)
        if relative not in self.outputs:
            self.outputs.append(relative)

    def to_dict(self):
        return {
            "spec_hash": self.spec_hash,
            "version": self.version,
            "kind": self.kind,
            "seeds": self.seeds,
            "outputs": sorted(self.outputs),
            "wall_clock_s": self.wall_clock,
        }

    def write(self, out_dir):
        path = os.path.join(out_dir, DIR_CONFIG["manifest_filename"])
        return write_json(path, self.to_dict())
