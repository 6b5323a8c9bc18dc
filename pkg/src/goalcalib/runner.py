"""Experiment runner: builds model pairs from a RunConfig and writes artifacts.

Three experiment kinds exist. ``verify`` tabulates the error estimates under
every error source against the fine-solve reference. ``order-study`` drives
the estimators along a model-mismatch homotopy. ``calibrate`` runs the
Metropolis chains and dumps the chain, diagnostics, and summary artifacts.

Every run produces a manifest listing the config echo, a content hash of the
config, per-phase wall-clock seconds, and every file written. If a phase
fails, files written so far are renamed with a ``.partial`` suffix and the
raised ExperimentError names the phase.
"""

import csv
import hashlib
import json
import os
import time

import numpy as np

from .calibration import (
    CalibrationProblem,
    LognormalPrior,
    NoiseModel,
    QoIErrorEvaluator,
    diagnostics,
    run_chains,
)
from .config import RunConfig, load_config
from .elliptic import EllipticCoarseParams, EllipticFineParams, EllipticModelPair
from .goal_error import (
    ERROR_SOURCES,
    ErrorEstimateReport,
    OrderStudyResult,
    estimate_report,
    order_study,
    solve_errors_second_order,
)
from .mesh import build_mesh
from .tumor import TumorCoarseParams, TumorFineParams, TumorModelPair

EXPERIMENTS = ("verify", "order-study", "calibrate")


class ExperimentError(RuntimeError):
    """A run phase failed; ``phase`` identifies which one."""

    def __init__(self, phase, cause):
        super().__init__(f"experiment phase '{phase}' failed: {cause}")
        self.phase = phase
        self.cause = cause


def build_pair(config: RunConfig):
    """Construct the configured model pair (coarse params, fine test values)."""
    mesh = build_mesh(*config.mesh)
    if config.application == "elliptic":
        return EllipticModelPair(
            mesh,
            coarse=EllipticCoarseParams(**config.coarse),
            fine=EllipticFineParams(**config.fine),
        )
    return TumorModelPair(
        mesh,
        coarse=TumorCoarseParams(**config.coarse),
        fine=TumorFineParams(**config.fine),
        dt=config.time["dt"],
        t_final=config.time["t_final"],
    )


class SecondOrderEvaluator:
    """theta -> QoI of the quadratic-order error field.

    Slower than the first-order hot path (two linearized solves plus a
    correction sweep per call) but exposed for the estimator switch.
    """

    def __init__(self, pair):
        self.pair = pair

    def __call__(self, theta):
        pair = self.pair.with_fine_params(self.pair.params_from_array(np.asarray(theta, float)))
        u0 = pair.solve_coarse_forward()
        p0 = pair.solve_coarse_adjoint()
        e, _ = solve_errors_second_order(u0, p0, pair)
        return float(pair.qoi_derivative(u0, e))


def build_evaluator(pair, estimator: str):
    if estimator == "first-order":
        return QoIErrorEvaluator(pair)
    if estimator == "second-order":
        return SecondOrderEvaluator(pair)
    if estimator == "exact-fine-oracle":
        return QoIErrorEvaluator(pair, exact=True)
    raise ValueError(f"unknown estimator {estimator!r}")


def config_hash(config: RunConfig) -> str:
    canonical = json.dumps(config.as_dict(), sort_keys=True)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class RunManifest:
    """Accumulates phases and artifacts while an experiment runs."""

    def __init__(self, config: RunConfig, experiment: str):
        self.config = config
        self.experiment = experiment
        self.hash = config_hash(config)
        self.phases = {}
        self.artifacts = []
        self.failed_phase = None

    def as_dict(self):
        data = {
            "experiment": self.experiment,
            "config": self.config.as_dict(),
            "config_hash": self.hash,
            "phase_seconds": {k: round(v, 6) for k, v in self.phases.items()},
            "artifacts": sorted(self.artifacts),
        }
        if self.failed_phase is not None:
            data["failed_phase"] = self.failed_phase
        return data

    def write(self, directory):
        name = "manifest.json" if self.failed_phase is None else "manifest.partial.json"
        path = os.path.join(directory, name)
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(self.as_dict(), fh, indent=2)
            fh.write("\n")
        return path


def export_report(payload, path):
    """Serialize a report/summary (JSON) or a series mapping (CSV).

    JSON structures round-trip through their ``from_json``/constructor
    counterparts; CSV floats are printed with 17 significant digits so they
    parse back to bit-identical values. An empty series writes a header-only
    CSV.
    """
    if isinstance(payload, (ErrorEstimateReport, OrderStudyResult)):
        payload.to_json(path)
    elif hasattr(payload, "as_dict"):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload.as_dict(), fh, indent=2)
            fh.write("\n")
    elif isinstance(payload, dict):
        columns = {k: np.atleast_1d(np.asarray(v)) for k, v in payload.items()}
        lengths = {v.size for v in columns.values()}
        if len(lengths) > 1:
            raise ValueError(f"series columns have mismatched lengths {lengths}")
        write_csv(
            path,
            list(columns),
            zip(*columns.values()) if columns and lengths != {0} else [],
        )
    else:
        raise TypeError(f"cannot export {type(payload).__name__}")


def _format_cell(value):
    if isinstance(value, (float, np.floating)):
        return f"{value:.17g}"
    return str(value)


def write_csv(path, header, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(v) for v in row])


def read_csv(path):
    """Header and float-typed columns of a runner-written CSV."""
    with open(path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(cell) for cell in row] for row in reader]
    columns = list(map(np.asarray, zip(*rows))) if rows else [np.empty(0)] * len(header)
    return header, dict(zip(header, columns))


class _PhaseClock:
    def __init__(self, manifest):
        self.manifest = manifest

    def run(self, phase, fn):
        started = time.perf_counter()
        try:
            result = fn()
        except Exception as exc:
            self.manifest.phases[phase] = time.perf_counter() - started
            self.manifest.failed_phase = phase
            raise ExperimentError(phase, exc) from exc
        self.manifest.phases[phase] = time.perf_counter() - started
        return result


def _theta_names(dimension):
    return [f"theta_{i+1}" for i in range(dimension)]


def _run_verify(config, pair, manifest, clock, out):
    reports = []
    for source in ERROR_SOURCES:
        report = clock.run(
            source,
            lambda s=source: estimate_report(
                pair, error_source=s, provenance={"application": config.application}
            ),
        )
        name = f"verify_{source}.json"
        export_report(report, os.path.join(out, name))
        manifest.artifacts.append(name)
        reports.append(report)

    def _table():
        header = [
            "error_source", "qoi_coarse", "qoi_fine", "exact_error",
            "residual_estimate", "corrected_estimate", "error_qoi_estimate",
        ]
        rows = [
            [
                r.error_source,
                r.qoi_coarse,
                "" if r.qoi_fine is None else r.qoi_fine,
                "" if r.exact_error is None else r.exact_error,
                r.residual_estimate,
                r.corrected_estimate,
                r.error_qoi_estimate,
            ]
            for r in reports
        ]
        write_csv(os.path.join(out, "verify_table.csv"), header, rows)
        manifest.artifacts.append("verify_table.csv")

    clock.run("export", _table)


def _elliptic_family(pair, fine):
    def family(s):
        return pair.with_fine_params(
            EllipticFineParams(fine["kappa"], s * fine["alpha"])
        )

    return family


def _tumor_family(pair, config):
    # Scale every mismatch channel by s: both reaction rates, the gap
    # between the diffusivities, and the well barrier. At s -> 0 the two
    # models collapse onto the same pure-diffusion problem.
    coarse, fine = config.coarse, config.fine

    def family(s):
        return TumorModelPair(
            pair.mesh,
            coarse=TumorCoarseParams(
                coarse["lambda_p0"] * s, coarse["lambda_d0"] * s, coarse["D"]
            ),
            fine=TumorFineParams(
                fine["lambda_p"] * s,
                fine["lambda_d"] * s,
                coarse["D"] + s * (fine["epsilon"] - coarse["D"]),
                fine["C"] * s,
            ),
            dt=config.time["dt"],
            t_final=config.time["t_final"],
        )

    return family


def _run_order_study(config, pair, manifest, clock, out):
    if config.application == "elliptic":
        family = _elliptic_family(pair, config.fine)
    else:
        family = _tumor_family(pair, config)
    result = clock.run(
        "order-study", lambda: order_study(family, config.order_levels)
    )

    def _export():
        export_report(result, os.path.join(out, "order_study.json"))
        manifest.artifacts.append("order_study.json")
        header = ["level", "exact_error"]
        header += [f"estimate_{k}" for k in result.estimates]
        header += [f"deficit_{k}" for k in result.deficits]
        rows = []
        for i, level in enumerate(result.levels):
            row = [level, result.exact_errors[i]]
            row += [result.estimates[k][i] for k in result.estimates]
            row += [result.deficits[k][i] for k in result.deficits]
            rows.append(row)
        write_csv(os.path.join(out, "order_study.csv"), header, rows)
        manifest.artifacts.append("order_study.csv")

    clock.run("export", _export)
    return result


def _run_calibrate(config, pair, manifest, clock, out):
    prior = LognormalPrior(config.prior_ln_mean, config.prior_ln_std)
    problem = CalibrationProblem(
        prior, NoiseModel(config.sigma), build_evaluator(pair, config.estimator)
    )
    summary, records = clock.run(
        "sampling",
        lambda: run_chains(
            problem,
            n_chains=config.chains,
            max_samples=config.max_samples,
            burn_in_fraction=config.burn_in,
            seed=config.seed,
            proposal_scale=config.proposal_scale,
        ),
    )

    def _export():
        names = _theta_names(prior.dimension)
        for k, record in enumerate(records):
            chain_name = f"chain_{k}.csv"
            write_csv(
                os.path.join(out, chain_name),
                ["sample_index", *names, "cost", "qoi_error", "accepted_count"],
                record.rows(),
            )
            manifest.artifacts.append(chain_name)

            series = diagnostics(record)
            accepted_name = f"diagnostics_accepted_{k}.csv"
            write_csv(
                os.path.join(out, accepted_name),
                ["accepted_index", "cost", "qoi_error"],
                (
                    (i + 1, c, q)
                    for i, (c, q) in enumerate(
                        zip(series["accepted_cost"], series["accepted_qoi_error"])
                    )
                ),
            )
            manifest.artifacts.append(accepted_name)

            acceptance_name = f"diagnostics_acceptance_{k}.csv"
            write_csv(
                os.path.join(out, acceptance_name),
                ["proposal_index", "running_acceptance"],
                (
                    (i + 1, r)
                    for i, r in enumerate(series["running_acceptance"])
                ),
            )
            manifest.artifacts.append(acceptance_name)

        qoi_coarse = float(pair.qoi(pair.solve_coarse_forward()))
        payload = summary.as_dict()
        payload["qoi_coarse"] = qoi_coarse
        payload["error_ratio_at_mean"] = (
            abs(summary.qoi_error_at_mean) / abs(qoi_coarse)
        )
        payload["estimator"] = config.estimator
        payload["cost_definition"] = "qoi_error^2 / (2 sigma^2), no normalization term"
        path = os.path.join(out, "summary.json")
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(payload, fh, indent=2)
            fh.write("\n")
        manifest.artifacts.append("summary.json")

    clock.run("export", _export)
    return summary


def run_experiment(config, experiment: str, output_dir=None) -> RunManifest:
    """Dispatch one experiment kind and persist its artifacts.

    Parameters
    ----------
    config : RunConfig | str | dict
        Validated config, or a path/dict to validate first.
    experiment : str
        One of ``EXPERIMENTS``.
    output_dir : str, optional
        Overrides the config's output directory.

    Returns
    -------
    RunManifest
        With phases timed and every artifact listed; also written to
        ``manifest.json`` in the output directory.
    """
    if not isinstance(config, RunConfig):
        config = load_config(config)
    if experiment not in EXPERIMENTS:
        raise ValueError(f"experiment must be one of {EXPERIMENTS}, got {experiment!r}")
    out = output_dir if output_dir is not None else config.output
    os.makedirs(out, exist_ok=True)

    manifest = RunManifest(config, experiment)
    clock = _PhaseClock(manifest)
    try:
        pair = clock.run("setup", lambda: build_pair(config))
        if experiment == "verify":
            _run_verify(config, pair, manifest, clock, out)
        elif experiment == "order-study":
            _run_order_study(config, pair, manifest, clock, out)
        else:
            _run_calibrate(config, pair, manifest, clock, out)
    except ExperimentError:
        retained = []
        for name in manifest.artifacts:
            partial = name + ".partial"
            try:
                os.replace(os.path.join(out, name), os.path.join(out, partial))
                retained.append(partial)
            except OSError:
                continue
        manifest.artifacts = retained
        manifest.write(out)
        raise
    manifest.write(out)
    return manifest
