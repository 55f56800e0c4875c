"""Gaussian benchmark with closed-form evidence, plus the replication runner.

The model is x | theta ~ N(theta, I_d) with theta uniform on [-2, 2]^d and
the observation fixed at the origin, so the log evidence is exactly
d * (log erf(sqrt 2) - log 4). The runner repeats the full sequential
pipeline over dimensions and replications and computes every requested
(method, temperature) estimate from each replication's artifacts.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import __version__
from .errors import ConfigError
from .evidence import (
    EvidenceEstimate,
    HmSplit,
    fit_marginal_flow,
    hm_estimate,
    is_estimate,
    sis_estimate,
)
from .flows import FlowConfig
from .mcmc import ChainSpec
from .snle import PriorBox, phase_rng, run_snle
from .trainer import TrainConfig

__all__ = [
    "GaussModel",
    "ExperimentConfig",
    "PROFILES",
    "true_log_evidence",
    "run_experiment",
    "summarize",
    "write_results_csv",
    "read_results_csv",
    "write_summary_csv",
]

log = logging.getLogger(__name__)

PRIOR_HALF_WIDTH = 2.0

RESULT_COLUMNS = [
    "run_id",
    "d",
    "replication",
    "method",
    "temperature",
    "log_c",
    "true_log_c",
    "ess",
    "wallclock_s",
]

# Seed-derivation tags (see snle.phase_rng); fixed for artifact replay.
_TAG_SNLE = 21
_TAG_POSTERIOR_IS = 22
_TAG_PROPOSAL_FIT = 23
_TAG_IS_DRAWS = 24
_TAG_POSTERIOR_HM = 25
_TAG_PSI_FIT = 26


def true_log_evidence(d: int) -> float:
    """Exact log evidence; linear in d by the product form of the model."""
    if d < 1:
        raise ConfigError(f"dimension must be >= 1, got {d}")
    return d * (math.log(math.erf(math.sqrt(2.0))) - math.log(4.0))


@dataclass
class GaussModel:
    """x | theta ~ N(theta, I_d), theta ~ U[-2, 2]^d, observed x* = 0."""

    d: int

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError(f"dimension must be >= 1, got {self.d}")
        self.prior = PriorBox(
            np.full(self.d, -PRIOR_HALF_WIDTH), np.full(self.d, PRIOR_HALF_WIDTH)
        )
        self.x_star = np.zeros(self.d)

    def simulate(self, theta, rng) -> np.ndarray:
        return np.asarray(theta, dtype=np.float64) + rng.standard_normal(self.d)

    def log_likelihood(self, thetas) -> np.ndarray:
        """Exact log N(x*=0 | theta, I); the bypass-mode oracle."""
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        return -0.5 * (self.d * math.log(2.0 * math.pi) + (thetas * thetas).sum(axis=1))


@dataclass
class ExperimentConfig:
    dims: tuple = (1, 2, 5, 10)
    methods: tuple = ("sis", "is", "hm")
    replications: int = 25
    rounds: int = 5
    sims_per_round: int = 1000
    likelihood_transforms: int = 5
    likelihood_hidden: tuple = (64, 64)
    is_temperatures: tuple = (1.25,)
    is_transforms: int = 3
    is_hidden: tuple = (32, 32)
    is_n_draws: int = 1000
    is_n_posterior: int = 1000
    hm_temperatures: tuple = (0.8,)
    hm_layers: int = 6
    hm_hidden: tuple = (32, 32)
    hm_n_posterior: int = 2000
    hm_n_learn: int = 1000
    train: TrainConfig = field(default_factory=TrainConfig)
    mcmc: ChainSpec = field(default_factory=lambda: ChainSpec(width=PRIOR_HALF_WIDTH))
    master_seed: int = 20250810
    profile: str | None = None

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigError(f"replications must be >= 1, got {self.replications}")
        unknown = set(self.methods) - {"sis", "is", "hm"}
        if unknown:
            raise ConfigError(f"unknown methods: {sorted(unknown)}")
        if any(t < 1.0 for t in self.is_temperatures):
            raise ConfigError(f"IS temperatures must be >= 1, got {self.is_temperatures}")
        if any(not 0.0 < t <= 1.0 for t in self.hm_temperatures):
            raise ConfigError(f"HM temperatures must be in (0, 1], got {self.hm_temperatures}")
        if not 0 < self.hm_n_learn < self.hm_n_posterior:
            raise ConfigError(
                f"hm_n_learn must be in 1..{self.hm_n_posterior - 1}, got {self.hm_n_learn}"
            )


def _profile_configs() -> dict:
    return {
        "full": ExperimentConfig(profile="full"),
        "ci": ExperimentConfig(
            profile="ci",
            dims=(1, 2),
            replications=5,
            rounds=3,
            sims_per_round=500,
        ),
        "ci-highdim": ExperimentConfig(
            profile="ci-highdim",
            dims=(5,),
            replications=5,
            rounds=3,
            sims_per_round=500,
            is_temperatures=(1.0, 1.25, 2.0),
            hm_temperatures=(0.5, 0.8, 1.0),
        ),
        "smoke": ExperimentConfig(
            profile="smoke",
            dims=(1,),
            replications=1,
            rounds=2,
            sims_per_round=60,
            likelihood_transforms=2,
            likelihood_hidden=(16, 16),
            is_transforms=2,
            is_hidden=(8, 8),
            is_n_draws=200,
            is_n_posterior=200,
            hm_layers=2,
            hm_hidden=(8, 8),
            hm_n_posterior=200,
            hm_n_learn=100,
            train=TrainConfig(max_epochs=40, patience=5),
            mcmc=ChainSpec(n_chains=10, burn_in=30, width=PRIOR_HALF_WIDTH),
        ),
    }


PROFILES = _profile_configs()


def _run_id(config: ExperimentConfig) -> str:
    return f"{config.profile or 'custom'}-{config.master_seed}"


def _replication_rows(config: ExperimentConfig, d: int, rep: int, artifact_dir=None):
    """All requested estimates for one (dimension, replication) cell."""
    model = GaussModel(d)
    seed = config.master_seed
    mcmc_spec = config.mcmc
    t0 = time.perf_counter()
    rounds = run_snle(
        model.simulate,
        model.prior,
        model.x_star,
        config.rounds,
        config.sims_per_round,
        FlowConfig(
            dim=d,
            context_dim=d,
            transforms=config.likelihood_transforms,
            hidden=config.likelihood_hidden,
        ),
        config.train,
        mcmc_spec,
        seed=(seed, _TAG_SNLE, d, rep),
    )
    snle_s = time.perf_counter() - t0
    truth = true_log_evidence(d)
    base = {
        "run_id": _run_id(config),
        "d": d,
        "replication": rep,
        "true_log_c": truth,
    }
    loglik = rounds.loglik_fn(rounds.n_rounds)
    rows = []

    def emit(est: EvidenceEstimate, elapsed: float):
        rows.append(
            dict(
                base,
                method=est.method,
                temperature=est.temperature,
                log_c=est.log_c,
                ess=est.ess,
                wallclock_s=elapsed,
            )
        )

    if "sis" in config.methods:
        t0 = time.perf_counter()
        fns = [rounds.loglik_fn(k) for k in range(1, rounds.n_rounds + 1)]
        emit(sis_estimate(fns, rounds.proposals), snle_s + time.perf_counter() - t0)

    posterior_is = proposal = None
    if "is" in config.methods:
        t0 = time.perf_counter()
        posterior_is = rounds.sample_posterior(
            config.is_n_posterior, mcmc_spec, phase_rng(seed, _TAG_POSTERIOR_IS, d, rep)
        )
        proposal = fit_marginal_flow(
            posterior_is,
            FlowConfig(dim=d, transforms=config.is_transforms, hidden=config.is_hidden),
            config.train,
            phase_rng(seed, _TAG_PROPOSAL_FIT, d, rep),
        )
        setup_s = time.perf_counter() - t0
        for i, temp in enumerate(config.is_temperatures):
            t0 = time.perf_counter()
            est = is_estimate(
                loglik,
                model.prior,
                proposal=proposal,
                temperature=temp,
                n_draws=config.is_n_draws,
                rng=phase_rng(seed, _TAG_IS_DRAWS, d, rep, i),
            )
            emit(est, setup_s + time.perf_counter() - t0)
            setup_s = 0.0

    posterior_hm = None
    if "hm" in config.methods:
        t0 = time.perf_counter()
        posterior_hm = rounds.sample_posterior(
            config.hm_n_posterior, mcmc_spec, phase_rng(seed, _TAG_POSTERIOR_HM, d, rep)
        )
        split = HmSplit.contiguous(
            config.hm_n_posterior, config.hm_n_posterior - config.hm_n_learn
        )
        psi = fit_marginal_flow(
            posterior_hm[split.learn_idx],
            FlowConfig(
                dim=d, transforms=config.hm_layers, hidden=config.hm_hidden, arch="realnvp"
            ),
            config.train,
            phase_rng(seed, _TAG_PSI_FIT, d, rep),
        )
        setup_s = time.perf_counter() - t0
        for temp in config.hm_temperatures:
            t0 = time.perf_counter()
            est = hm_estimate(
                loglik,
                model.prior,
                posterior_hm,
                split=split,
                psi=psi,
                temperature=temp,
            )
            emit(est, setup_s + time.perf_counter() - t0)
            setup_s = 0.0

    if artifact_dir is not None:
        _save_artifacts(artifact_dir, rounds, posterior_is, posterior_hm, locals())
    return rows


def _save_artifacts(artifact_dir, rounds, posterior_is, posterior_hm, scope):
    os.makedirs(artifact_dir, exist_ok=True)
    rounds.save(artifact_dir)
    if posterior_is is not None:
        _write_draws(os.path.join(artifact_dir, "posterior_is.csv"), posterior_is)
        scope["proposal"].save(os.path.join(artifact_dir, "proposal_is.npz"))
    if posterior_hm is not None:
        _write_draws(os.path.join(artifact_dir, "posterior_hm.csv"), posterior_hm)
        scope["psi"].save(os.path.join(artifact_dir, "psi_hm.npz"))


def _write_draws(path, draws: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"theta{i}" for i in range(draws.shape[1])])
        for row in draws:
            w.writerow([repr(v) for v in row])


def read_draws(path) -> np.ndarray:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        return np.array([[float(v) for v in row] for row in reader])


def _task(args):
    config, d, rep, artifact_dir = args
    try:
        return (d, rep, _replication_rows(config, d, rep, artifact_dir), None)
    except Exception as exc:  # noqa: BLE001 - recorded, not fatal
        return (d, rep, [], f"{type(exc).__name__}: {exc}")


def run_experiment(config: ExperimentConfig, out_dir=None, jobs: int = 1):
    """Run every (dimension, replication) cell and collect result rows.

    Failures are recorded in the manifest and skipped. With ``out_dir``
    set, writes results.csv, manifest.json and per-cell artifact
    directories. Deterministic given the master seed, independent of
    ``jobs``.
    """
    tasks = []
    for d in config.dims:
        for rep in range(config.replications):
            artifact_dir = (
                None if out_dir is None else os.path.join(out_dir, "artifacts", f"d{d}_rep{rep}")
            )
            tasks.append((config, d, rep, artifact_dir))

    started = time.perf_counter()
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(_task, tasks))
    else:
        outcomes = [_task(t) for t in tasks]

    rows, failures = [], []
    for d, rep, cell_rows, error in sorted(outcomes, key=lambda o: (o[0], o[1])):
        if error is not None:
            log.warning("replication d=%d rep=%d failed: %s", d, rep, error)
            failures.append({"d": d, "replication": rep, "error": error})
        rows.extend(cell_rows)

    manifest = {
        "run_id": _run_id(config),
        "config": asdict(config),
        "master_seed": config.master_seed,
        "flowz_version": __version__,
        "numpy_version": np.__version__,
        "n_rows": len(rows),
        "n_failures": len(failures),
        "failures": failures,
        "total_wallclock_s": time.perf_counter() - started,
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_results_csv(rows, os.path.join(out_dir, "results.csv"))
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=2)
    return rows, manifest


def write_results_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS)
        for row in rows:
            w.writerow(_format_row(row))


def append_results_csv(rows, path) -> None:
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh)
        for row in rows:
            w.writerow(_format_row(row))


def _format_row(row: dict) -> list:
    out = []
    for col in RESULT_COLUMNS:
        v = row.get(col)
        if v is None:
            out.append("")
        elif isinstance(v, float):
            out.append(repr(v))
        else:
            out.append(v)
    return out


def read_results_csv(path) -> list:
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(
                {
                    "run_id": rec["run_id"],
                    "d": int(rec["d"]),
                    "replication": int(rec["replication"]),
                    "method": rec["method"],
                    "temperature": float(rec["temperature"]) if rec["temperature"] else None,
                    "log_c": float(rec["log_c"]),
                    "true_log_c": float(rec["true_log_c"]),
                    "ess": float(rec["ess"]) if rec["ess"] else None,
                    "wallclock_s": float(rec["wallclock_s"]),
                }
            )
    return rows


def summarize(rows) -> list:
    """Median, IQR and bias-vs-truth per (method, d, temperature) group."""
    if not rows:
        raise ValueError("summarize needs a nonempty results table")
    groups: dict = {}
    for row in rows:
        key = (row["method"], row["d"], row["temperature"])
        groups.setdefault(key, []).append(row)
    out = []
    for (method, d, temp), members in sorted(
        groups.items(), key=lambda kv: (kv[0][1], kv[0][0], kv[0][2] or 0.0)
    ):
        values = np.array([m["log_c"] for m in members if np.isfinite(m["log_c"])])
        if values.size == 0:
            log.warning("group (%s, d=%d, T=%s) has no finite estimates; omitted", method, d, temp)
            continue
        q25, q50, q75 = np.percentile(values, [25, 50, 75])
        truth = members[0]["true_log_c"]
        out.append(
            {
                "method": method,
                "d": d,
                "temperature": temp,
                "n": int(values.size),
                "median_log_c": float(q50),
                "iqr": float(q75 - q25),
                "bias": float(q50 - truth),
                "true_log_c": truth,
            }
        )
    return out


def write_summary_csv(summary_rows, path) -> None:
    cols = ["method", "d", "temperature", "n", "median_log_c", "iqr", "bias", "true_log_c"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in summary_rows:
            w.writerow(
                ["" if row[c] is None else (repr(row[c]) if isinstance(row[c], float) else row[c]) for c in cols]
            )
