import logging
import math
import os
import time
from dataclasses import dataclass, field

from app import __version__
from app.config import DIR_CONFIG, TWO_PI
from app.core import file_operations
from app.core.fidelity import averaged_fidelity, ensemble_fidelity, ensemble_gate_fidelity
from app.core.hamiltonian import PhysicalParams, sample_disorder
from app.core.lattice import layout_by_name, layout_to_dict
from app.core.propagate import PropagationError, ResourceLimitError
from app.core.pulses import Protocol, controls_to_schedule, protocol_schedule, schedule_to_controls, schedule_to_exact_controls
from app.optimize.grape import GrapeConfig, GrapeDivergenceError, build_target, optimize_reduced_time, resilience_sweep
from app.utils.seeding import DISORDER_STREAM, derive_seed

KINDS = ("disorder_sweep", "grape_table", "resilience", "reduced_time")
METRICS = ("state", "gate")

SWEEP_FIELDS = ("problem", "icc_type", "metric", "mode", "eta_br", "epsilon", "p", "phi", "fidelity", "std", "stderr",
                "n_samples", "protocol", "seed", "status", "error")
SWEEP_SUMMARY_FIELDS = ("problem", "icc_type", "metric", "mode", "eta_br", "epsilon", "fidelity", "std", "stderr",
                        "n_samples", "n_failed", "status", "error")
GRAPE_FIELDS = ("problem", "protocol", "eta_br", "time_scale", "duration_ns", "n_slots", "epsilon", "disorder_seed",
                "fidelity_without", "fidelity_with", "stderr_with", "gate_fidelity_without", "gate_fidelity_with",
                "initial_cost", "final_cost", "iterations", "converged", "wall_clock_s", "status", "error")
RESILIENCE_FIELDS = ("problem", "eta_br", "spread_mhz", "spread_rad_s", "percent_of_static", "fidelity", "std",
                     "stderr", "n_samples")
TRAJECTORY_FIELDS = ("iteration", "cost")


class ExperimentError(RuntimeError):
    """Raised for an experiment spec that cannot be run."""


@dataclass(frozen=True)
class ProblemSpec:
    """Resolved protocol problem: layout, ICC placement and protocol."""
    name: str
    layout_name: str
    icc_position: int
    protocol: Protocol
    superposed_rows: tuple | None = None

    @classmethod
    def from_dict(cls, name, data):
        try:
            rows = data.get("superposed_rows")
            return cls(name, data["layout"], int(data["icc_position"]), Protocol.parse(data["protocol"]),
                       tuple(rows) if rows is not None else None)
        except (KeyError, ValueError) as e:
            raise ExperimentError(f"Problem '{name}' is incomplete or invalid: {e}") from e


@dataclass
class ExperimentSpec:
    """
    Validated experiment description built from the merged config sections.
    """
    kind: str
    seed: int
    n_samples: int
    threads: int
    p_grid: tuple
    phi: float
    epsilons: tuple
    modes: tuple
    problems: tuple
    eta_values: tuple
    time_scale: float
    spreads_mhz: tuple
    perturbation_samples: int
    physics: dict
    grape: dict
    disorder: dict
    slot_ns: float
    simultaneous_bc: bool
    metrics: tuple = ("state",)
    registry: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False)

    @classmethod
    def from_config(cls, config, kind=None, seed=None, n_samples=None, threads=None):
        """
        Args:
            config (dict): Output of file_operations.load_experiment_config().
            kind, seed, n_samples, threads: Command-line overrides.
        """
        exp = dict(config["experiment"])
        for key, value in (("kind", kind), ("seed", seed), ("n_samples", n_samples), ("threads", threads)):
            if value is not None:
                exp[key] = value
        if exp["kind"] not in KINDS:
            raise ExperimentError(f"Unknown experiment kind '{exp['kind']}'; expected one of {KINDS}.")
        if int(exp["n_samples"]) < 1 or int(exp["perturbation_samples"]) < 1:
            raise ExperimentError("Sample counts must be at least 1.")
        if int(exp["threads"]) < 1:
            raise ExperimentError(f"threads must be at least 1, got {exp['threads']}.")
        if not exp["p_grid"]:
            raise ExperimentError("p_grid must not be empty.")
        registry = {}
        for name in exp["problems"]:
            if name not in config["problems"]:
                raise ExperimentError(f"Unknown problem '{name}'; known: {sorted(config['problems'])}.")
            settings = dict(config["problems"][name])
            if exp.get("superposed_rows") is not None:
                settings["superposed_rows"] = exp["superposed_rows"]
            registry[name] = ProblemSpec.from_dict(name, settings)
        unknown_modes = [m for m in exp["modes"] if m not in config["disorder"]["modes"]]
        if unknown_modes:
            raise ExperimentError(f"Unknown disorder modes {unknown_modes}.")
        unknown_metrics = [m for m in exp["metrics"] if m not in METRICS]
        if not exp["metrics"] or unknown_metrics:
            raise ExperimentError(f"Sweep metrics must be a non-empty subset of {METRICS}, got {list(exp['metrics'])}.")
        raw = {section: dict(values) for section, values in config.items()}
        raw["experiment"] = exp
        return cls(
            kind=exp["kind"],
            seed=int(exp["seed"]),
            n_samples=int(exp["n_samples"]),
            threads=int(exp["threads"]),
            p_grid=tuple(float(p) for p in exp["p_grid"]),
            phi=float(exp["phi"]),
            epsilons=tuple(float(e) for e in exp["epsilons"]),
            modes=tuple(exp["modes"]),
            problems=tuple(exp["problems"]),
            eta_values=tuple(float(e) for e in exp["eta_values"]),
            time_scale=float(exp["time_scale"]),
            spreads_mhz=tuple(float(s) for s in exp["spreads_mhz"]),
            perturbation_samples=int(exp["perturbation_samples"]),
            physics=dict(config["physics"]),
            grape=dict(config["grape"]),
            disorder=dict(config["disorder"]),
            slot_ns=float(config["pulse"]["slot_ns"]),
            simultaneous_bc=bool(config["pulse"]["simultaneous_bc"]),
            metrics=tuple(exp["metrics"]),
            registry=registry,
            raw=raw,
        )


class ExperimentRunner:
    """
    Runs one experiment spec and writes its datasets, pulse files and manifest
    into the output directory.
    """

    def __init__(self, spec, out_dir=None):
        self.spec = spec
        self.out_dir = out_dir or DIR_CONFIG["output_dir"]
        self.logger = logging.getLogger(__name__)
        self.manifest = file_operations.RunManifest(
            spec_hash=file_operations.spec_hash(spec.raw),
            version=__version__,
            kind=spec.kind,
            seeds={"top_level": spec.seed, "grape": int(spec.grape["seed"])},
        )
        os.makedirs(self.out_dir, exist_ok=True)

    # --- helpers ---

    def _path(self, filename):
        return os.path.join(self.out_dir, filename)

    def _write_csv(self, filename, rows, fields):
        path = file_operations.write_csv(self._path(filename), rows, fields)
        self.manifest.add_output(path, self.out_dir)

    def _write_json(self, filename, data):
        path = file_operations.write_json(self._path(filename), data)
        self.manifest.add_output(path, self.out_dir)

    def _params(self, eta_br=None):
        params = PhysicalParams.from_dict(self.spec.physics)
        return params if eta_br is None else params.with_eta(eta_br)

    def _icc_type(self, problem, layout):
        qubits = layout.column_qubits(problem.icc_position)
        return layout.qubits[qubits[0]].species if qubits else ""

    def _naive_schedule(self, problem, params, layout):
        target = "B"
        qubits = layout.column_qubits(problem.icc_position)
        if problem.protocol.name == "hadamard" and qubits:
            target = layout.qubits[qubits[0]].species
        return protocol_schedule(problem.protocol, params, target_species=target, simultaneous=self.spec.simultaneous_bc)

    def _grape_disorder(self, problem_index, layout, params):
        seed = derive_seed(self.spec.seed, DISORDER_STREAM, problem_index, 0, 0)
        return sample_disorder(layout, float(self.spec.disorder["epsilon"]), seed, self.spec.disorder["mode"], params)

    def finish(self, started):
        self.manifest.wall_clock = time.perf_counter() - started
        path = self.manifest.write(self.out_dir)
        self.logger.info(f"Experiment '{self.spec.kind}' finished; manifest at {path}")
        return self.manifest

    # --- experiments ---

    def _sweep_report(self, metric, problem, layout, params, disorders, controls, mode):
        spec = self.spec
        metadata = {"seed": spec.seed, "mode": mode}
        if metric == "gate":
            return ensemble_gate_fidelity(problem.protocol, layout, params, disorders, controls,
                                          icc_position=problem.icc_position, threads=spec.threads, metadata=metadata)
        return ensemble_fidelity(
            problem.protocol, layout, params, disorders, controls, spec.p_grid, spec.phi,
            icc_position=problem.icc_position, superposed_rows=problem.superposed_rows,
            threads=spec.threads, metadata=metadata,
        )

    def run_disorder_sweep(self):
        """
        Naive-protocol fidelity vs disorder strength for every problem, metric
        and disorder mode; one CSV per (problem, mode, metric) curve plus a
        summary table.

        Realizations of one (problem, epsilon, sample) share their seed across
        modes and metrics, so omega-only and both-disorder curves see the same
        frequency offsets.
        """
        spec = self.spec
        params = self._params()
        summary = []
        for pi, name in enumerate(spec.problems):
            problem = spec.registry[name]
            layout = layout_by_name(problem.layout_name)
            icc_type = self._icc_type(problem, layout)
            controls = schedule_to_exact_controls(self._naive_schedule(problem, params, layout))
            for metric in spec.metrics:
                for mode in spec.modes:
                    rows = []
                    for ei, epsilon in enumerate(spec.epsilons):
                        base = {"problem": name, "icc_type": icc_type, "metric": metric, "mode": mode,
                                "eta_br": params.eta_br, "epsilon": epsilon}
                        try:
                            disorders = [
                                sample_disorder(layout, epsilon, derive_seed(spec.seed, DISORDER_STREAM, pi, ei, s), mode, params)
                                for s in range(spec.n_samples)
                            ]
                            report = self._sweep_report(metric, problem, layout, params, disorders, controls, mode)
                        except (ResourceLimitError, PropagationError, ValueError) as e:
                            self.logger.error(f"Sweep point {name}/{metric}/{mode}/eps={epsilon} failed: {e}", exc_info=True)
                            summary.append({**base, "status": "failed", "error": str(e)})
                            continue
                        status = "ok" if report.metadata["n_failed"] == 0 else "partial"
                        rows.extend({**row, **base, "status": status, "error": ""} for row in report.to_rows())
                        summary.append({**base, "fidelity": report.mean, "std": report.std, "stderr": report.stderr,
                                        "n_samples": report.n_samples, "n_failed": report.metadata["n_failed"],
                                        "status": status, "error": ""})
                        self.logger.info(f"Sweep {name}/{metric}/{mode} eps={epsilon:.2e}: "
                                         f"F = {report.mean:.4f} +- {report.stderr:.4f}")
                    suffix = "" if metric == "state" else f"_{metric}"
                    self._write_csv(f"sweep_{name}_{mode}{suffix}.csv", rows, SWEEP_FIELDS)
        self._write_csv("sweep_summary.csv", summary, SWEEP_SUMMARY_FIELDS)
        return summary

    def _gate_fidelity(self, problem, layout, params, disorder, controls):
        """Trace fidelity of `controls` on one realization; empty when the layout is too large for unitaries."""
        try:
            report = ensemble_gate_fidelity(problem.protocol, layout, params, [disorder], controls,
                                            icc_position=problem.icc_position)
        except ResourceLimitError as e:
            self.logger.warning(f"No gate fidelity for {problem.name}: {e}")
            return ""
        return report.mean

    def _grape_row(self, problem_index, name, eta_br, time_scale):
        """Naive vs GRAPE fidelity for one (problem, eta) on a fixed realization."""
        spec = self.spec
        problem = spec.registry[name]
        params = self._params(eta_br)
        layout = layout_by_name(problem.layout_name)
        disorder = self._grape_disorder(problem_index, layout, params)
        naive = schedule_to_controls(self._naive_schedule(problem, params, layout), spec.slot_ns)
        row = {"problem": name, "protocol": str(problem.protocol), "eta_br": eta_br, "time_scale": time_scale,
               "epsilon": disorder.epsilon, "disorder_seed": disorder.seed}
        evaluate = dict(icc_position=problem.icc_position, superposed_rows=problem.superposed_rows)

        without = averaged_fidelity(problem.protocol, layout, params, disorder, naive, spec.p_grid, spec.phi, **evaluate)
        row["fidelity_without"] = without.mean
        row["gate_fidelity_without"] = self._gate_fidelity(problem, layout, params, disorder, naive)

        config = GrapeConfig.from_dict(spec.grape, threads=spec.grape.get("threads") or spec.threads)
        target = build_target(layout, problem.protocol, params, config.cost_mode, config.training_p, spec.phi, **evaluate)
        config = config.with_target(target)
        status, error = "ok", ""
        try:
            result = optimize_reduced_time(layout, params, disorder, naive, config, time_scale)
        except GrapeDivergenceError as e:
            self.logger.error(f"GRAPE diverged for {name} at eta={eta_br}: {e}", exc_info=True)
            result, status, error = e.result, "diverged", str(e)
        except (ResourceLimitError, PropagationError) as e:
            self.logger.error(f"GRAPE failed for {name} at eta={eta_br}: {e}", exc_info=True)
            row.update(status="failed", error=str(e), duration_ns=naive.duration * time_scale)
            return row, None, None

        stem = f"grape_{name}_eta{eta_br:g}_t{time_scale:g}"
        with_grape = averaged_fidelity(problem.protocol, layout, params, disorder, result.controls,
                                       spec.p_grid, spec.phi, **evaluate)
        row.update(
            duration_ns=result.controls.duration,
            n_slots=result.controls.n_slots,
            fidelity_with=with_grape.mean,
            stderr_with=with_grape.stderr,
            gate_fidelity_with=self._gate_fidelity(problem, layout, params, disorder, result.controls),
            initial_cost=result.initial_cost,
            final_cost=result.final_cost,
            iterations=result.iterations,
            converged=result.converged,
            wall_clock_s=result.wall_clock,
            status=status,
            error=error,
        )
        self._write_json(stem + DIR_CONFIG["controls_suffix"], result.controls.to_dict())
        self._write_csv(stem + DIR_CONFIG["trajectory_suffix"],
                        [{"iteration": i, "cost": c} for i, c in enumerate(result.cost_trajectory)], TRAJECTORY_FIELDS)
        self._write_json(stem + "_summary.json", {
            **result.summary(),
            "problem": name,
            "layout": layout_to_dict(layout),
            "params": params.to_dict(),
            "disorder": disorder.to_dict(),
            "grape_config": config.to_dict(),
            "schedule": controls_to_schedule(result.controls, params.drive_headroom).to_dict(),
            "fidelity_without": without.to_dict(),
            "fidelity_with": with_grape.to_dict(),
        })
        self.logger.info(f"GRAPE {name} eta={eta_br:g}: F {without.mean:.4f} -> {with_grape.mean:.4f} ({status})")
        return row, result, (layout, params, disorder, problem)

    def run_grape_table(self):
        """Naive and optimized fidelity for every (problem, eta) pair at full duration."""
        rows = []
        for pi, name in enumerate(self.spec.problems):
            for eta_br in self.spec.eta_values:
                rows.append(self._grape_row(pi, name, eta_br, 1.0)[0])
        self._write_csv("grape_table.csv", rows, GRAPE_FIELDS)
        return rows

    def run_reduced_time(self):
        """As run_grape_table on controls compressed by `time_scale`; CZ problems are skipped."""
        rows = []
        for pi, name in enumerate(self.spec.problems):
            if self.spec.registry[name].protocol.name == "cz":
                self.logger.warning(f"Skipping '{name}': reduced-time runs exclude CZ.")
                continue
            for eta_br in self.spec.eta_values:
                rows.append(self._grape_row(pi, name, eta_br, self.spec.time_scale)[0])
        self._write_csv("reduced_time.csv", rows, GRAPE_FIELDS)
        return rows

    def run_resilience(self):
        """
        Optimizes the first problem at the first eta value, then re-evaluates
        the frozen controls under growing frequency perturbations.
        """
        spec = self.spec
        name, eta_br = spec.problems[0], spec.eta_values[0]
        row, result, context = self._grape_row(0, name, eta_br, 1.0)
        if result is None:
            raise ExperimentError(f"No optimized controls for '{name}': {row.get('error')}")
        layout, params, disorder, problem = context
        spreads = [TWO_PI * mhz * 1e6 for mhz in spec.spreads_mhz]
        reports = resilience_sweep(
            result, disorder, spreads, spec.perturbation_samples, spec.seed,
            layout=layout, params=params, protocol=problem.protocol, icc_position=problem.icc_position,
            p_grid=spec.p_grid, phi=spec.phi, superposed_rows=problem.superposed_rows, threads=spec.threads,
        )
        static = float(spec.disorder["epsilon"]) * params.omega_bar["A"]
        rows = []
        for mhz, spread, report in zip(spec.spreads_mhz, spreads, reports):
            rows.append({
                "problem": name,
                "eta_br": eta_br,
                "spread_mhz": mhz,
                "spread_rad_s": spread,
                "percent_of_static": 100.0 * spread / static if static > 0 else math.nan,
                "fidelity": report.mean,
                "std": report.std,
                "stderr": report.stderr,
                "n_samples": report.n_samples,
            })
        self._write_csv("resilience.csv", rows, RESILIENCE_FIELDS)
        return rows

    def run(self):
        started = time.perf_counter()
        self.logger.info(f"Experiment '{self.spec.kind}' starting; output in {self.out_dir}")
        handler = {
            "disorder_sweep": self.run_disorder_sweep,
            "grape_table": self.run_grape_table,
            "resilience": self.run_resilience,
            "reduced_time": self.run_reduced_time,
        }[self.spec.kind]
        rows = handler()
        self.finish(started)
        return rows


def _run(kind, spec, out_dir):
    if spec.kind != kind:
        spec = ExperimentSpec.from_config(spec.raw, kind=kind)
    return ExperimentRunner(spec, out_dir).run()


def run_disorder_sweep(spec, out_dir=None):
    return _run("disorder_sweep", spec, out_dir)


def run_grape_table(spec, out_dir=None):
    return _run("grape_table", spec, out_dir)


def run_resilience(spec, out_dir=None):
    return _run("resilience", spec, out_dir)


def run_reduced_time(spec, out_dir=None):
    return _run("reduced_time", spec, out_dir)
