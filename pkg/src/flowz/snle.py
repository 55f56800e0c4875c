"""Sequential neural likelihood estimation with retained per-round artifacts.

Each round draws parameters from the current posterior approximation
(the prior on round one, MCMC on the surrogate posterior afterwards),
simulates data at those parameters, appends to the accumulated dataset
and retrains the conditional flow from scratch on everything so far.
All per-round flows and proposal draws are retained because the evidence
estimators need them.

Randomness is keyed on ``(seed, round, phase, index)`` seed tuples, so
every phase is reproducible in isolation — including replaying the
simulator stream for any given round.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass

import numpy as np
from numpy.random import SeedSequence, default_rng

from .errors import ConfigError, SimulationError, TrainingDivergenceError
from .flows import Flow, FlowConfig
from .mcmc import ChainSpec, run_chains
from .trainer import TrainConfig, TrainReport, fit_mle

__all__ = ["PriorBox", "SnleRounds", "run_snle"]

# Phase tags for seed derivation; fixed forever for artifact replay.
_PH_PROPOSAL = 1
_PH_SIM = 2
_PH_INIT = 3
_PH_TRAIN = 4


def _seed_key(seed) -> tuple:
    if isinstance(seed, (tuple, list)):
        return tuple(int(s) for s in seed)
    return (int(seed),)


def phase_rng(seed, *tags):
    """Generator for a (seed, *tags) key; stable across runs and platforms."""
    return default_rng(SeedSequence(_seed_key(seed) + tuple(int(t) for t in tags)))


@dataclass
class PriorBox:
    """Uniform prior on an axis-aligned box."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ConfigError("prior bounds must be 1-d arrays of equal length")
        if not np.all(self.lower < self.upper):
            raise ConfigError("prior requires lower < upper in every coordinate")

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def half_width(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    @property
    def log_volume(self) -> float:
        return float(np.log(self.upper - self.lower).sum())

    def contains(self, thetas: np.ndarray) -> np.ndarray:
        thetas = np.asarray(thetas, dtype=np.float64)
        return np.all((thetas >= self.lower) & (thetas <= self.upper), axis=-1)

    def log_prob(self, thetas: np.ndarray) -> np.ndarray:
        inside = self.contains(thetas)
        out = np.full(inside.shape, -np.inf)
        out[inside] = -self.log_volume
        return out

    def sample(self, n: int, rng) -> np.ndarray:
        return rng.uniform(self.lower, self.upper, size=(n, self.dim))


class SnleRounds:
    """Everything the estimators need from a finished (or partial) run."""

    def __init__(self, prior: PriorBox, x_star: np.ndarray, n_per_round: int, seed):
        self.prior = prior
        self.x_star = np.asarray(x_star, dtype=np.float64)
        self.n_per_round = n_per_round
        self.seed = _seed_key(seed)
        self.flows: list[Flow] = []
        self.proposals: list[np.ndarray] = []
        self.sims: list[np.ndarray] = []
        self.train_reports: list[TrainReport] = []

    @property
    def n_rounds(self) -> int:
        return len(self.flows)

    @property
    def data_dim(self) -> int:
        return self.x_star.shape[0]

    def dataset(self) -> tuple:
        """Accumulated (thetas, xs) over all completed rounds."""
        return np.concatenate(self.proposals), np.concatenate(self.sims)

    def loglik_fn(self, level: int):
        """Batch callable theta -> log q^(level)(x* | theta); level 0 is log 1."""
        if not 0 <= level <= self.n_rounds:
            raise ValueError(f"level {level} out of range 0..{self.n_rounds}")
        if level == 0:
            return lambda thetas: np.zeros(np.asarray(thetas).shape[0])
        flow = self.flows[level - 1]
        x_star = self.x_star

        def loglik(thetas):
            thetas = np.asarray(thetas, dtype=np.float64)
            return flow.log_prob(np.broadcast_to(x_star, (thetas.shape[0], x_star.shape[0])), thetas)

        return loglik

    def posterior_log_density(self, level: int, thetas) -> np.ndarray:
        """Unnormalized log posterior at the given round; level 0 is the prior."""
        if not 0 <= level <= self.n_rounds:
            raise ValueError(f"level {level} out of range 0..{self.n_rounds}")
        thetas = np.atleast_2d(np.asarray(thetas, dtype=np.float64))
        out = self.prior.log_prob(thetas)
        if level > 0:
            inside = np.isfinite(out)
            if inside.any():
                out[inside] = out[inside] + self.loglik_fn(level)(thetas[inside])
        return out

    def posterior_target(self, level: int | None = None):
        lvl = self.n_rounds if level is None else level
        return lambda thetas: self.posterior_log_density(lvl, thetas)

    def sample_posterior(self, n: int, mcmc_spec: ChainSpec, rng) -> np.ndarray:
        """Pooled MCMC draws from the final-round posterior approximation."""
        if self.n_rounds == 0:
            raise ValueError("no trained rounds to sample from")
        draws, _ = run_chains(
            self.posterior_target(),
            n,
            self.prior.dim,
            mcmc_spec,
            rng,
            init_sampler=self.prior.sample,
        )
        return draws

    # -- run-directory artifacts -----------------------------------------

    def save(self, out_dir) -> None:
        os.makedirs(out_dir, exist_ok=True)
        for k, flow in enumerate(self.flows):
            flow.save(os.path.join(out_dir, f"round{k + 1}_flow.npz"))
        d = self.prior.dim
        with open(os.path.join(out_dir, "draws.csv"), "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(
                ["round", "index"]
                + [f"theta{i}" for i in range(d)]
                + [f"x{i}" for i in range(self.data_dim)]
            )
            for k, (thetas, xs) in enumerate(zip(self.proposals, self.sims)):
                for i in range(thetas.shape[0]):
                    w.writerow(
                        [k + 1, i]
                        + [repr(v) for v in thetas[i]]
                        + [repr(v) for v in xs[i]]
                    )
        meta = {
            "seed": list(self.seed),
            "n_rounds": self.n_rounds,
            "n_per_round": self.n_per_round,
            "prior_lower": self.prior.lower.tolist(),
            "prior_upper": self.prior.upper.tolist(),
            "x_star": self.x_star.tolist(),
        }
        with open(os.path.join(out_dir, "rounds.json"), "w") as fh:
            json.dump(meta, fh, indent=2)

    @classmethod
    def load(cls, out_dir) -> "SnleRounds":
        with open(os.path.join(out_dir, "rounds.json")) as fh:
            meta = json.load(fh)
        prior = PriorBox(np.array(meta["prior_lower"]), np.array(meta["prior_upper"]))
        rounds = cls(prior, np.array(meta["x_star"]), meta["n_per_round"], tuple(meta["seed"]))
        d = prior.dim
        per_round_thetas: dict[int, list] = {}
        per_round_xs: dict[int, list] = {}
        with open(os.path.join(out_dir, "draws.csv"), newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            n_x = sum(1 for c in header if c.startswith("x"))
            for row in reader:
                k = int(row[0])
                per_round_thetas.setdefault(k, []).append([float(v) for v in row[2 : 2 + d]])
                per_round_xs.setdefault(k, []).append([float(v) for v in row[2 + d : 2 + d + n_x]])
        for k in range(1, meta["n_rounds"] + 1):
            rounds.flows.append(Flow.load(os.path.join(out_dir, f"round{k}_flow.npz")))
            rounds.proposals.append(np.array(per_round_thetas[k]))
            rounds.sims.append(np.array(per_round_xs[k]))
        return rounds


def simulate_batch(simulator, thetas, seed, round_index: int) -> np.ndarray:
    """Run the simulator at each theta with its own replayable stream."""
    out = None
    for i in range(thetas.shape[0]):
        rng_i = phase_rng(seed, round_index, _PH_SIM, i)
        try:
            x = np.asarray(simulator(thetas[i], rng_i), dtype=np.float64)
        except Exception as exc:  # noqa: BLE001 - wrapped with context
            raise SimulationError(f"simulator failed at round {round_index}, draw {i}") from exc
        if out is None:
            out = np.empty((thetas.shape[0], x.shape[0]))
        out[i] = x
    return out


def run_snle(
    simulator,
    prior: PriorBox,
    x_star,
    n_rounds: int,
    n_per_round: int,
    flow_config: FlowConfig | None = None,
    train_config: TrainConfig | None = None,
    mcmc_spec: ChainSpec | None = None,
    seed=0,
    warm_start: bool = False,
) -> SnleRounds:
    """Run the full sequential loop and keep every per-round artifact.

    Round 1 proposes from the prior; later rounds run MCMC on
    ``log q(x*|theta) + log pi(theta)`` for the previous round's flow.
    Flows retrain from fresh initialization on the accumulated dataset
    unless ``warm_start`` carries the previous round's parameters over.
    """
    x_star = np.atleast_1d(np.asarray(x_star, dtype=np.float64))
    if n_rounds < 1:
        raise ConfigError(f"n_rounds must be >= 1, got {n_rounds}")
    if n_per_round < 10:
        raise ConfigError(f"n_per_round must be >= 10, got {n_per_round}")
    if train_config is None:
        train_config = TrainConfig()
    if mcmc_spec is None:
        mcmc_spec = ChainSpec(width=prior.half_width.copy())
    if flow_config is None:
        flow_config = FlowConfig(
            dim=x_star.shape[0], context_dim=prior.dim, transforms=5, hidden=(64, 64)
        )
    if flow_config.dim != x_star.shape[0] or flow_config.context_dim != prior.dim:
        raise ConfigError(
            f"flow_config dims ({flow_config.dim}, ctx {flow_config.context_dim}) do not "
            f"match data dim {x_star.shape[0]} and prior dim {prior.dim}"
        )

    rounds = SnleRounds(prior, x_star, n_per_round, seed)
    for k in range(1, n_rounds + 1):
        if k == 1:
            thetas = prior.sample(n_per_round, phase_rng(seed, k, _PH_PROPOSAL))
        else:
            thetas, _ = run_chains(
                rounds.posterior_target(k - 1),
                n_per_round,
                prior.dim,
                mcmc_spec,
                phase_rng(seed, k, _PH_PROPOSAL),
                init_sampler=prior.sample,
            )
        xs = simulate_batch(simulator, thetas, seed, k)
        if xs.shape[1] != x_star.shape[0]:
            raise ConfigError(
                f"simulator output dim {xs.shape[1]} != observation dim {x_star.shape[0]}"
            )
        rounds.proposals.append(thetas)
        rounds.sims.append(xs)

        flow = Flow(flow_config, phase_rng(seed, k, _PH_INIT))
        flow.set_context_standardization(prior.center, prior.half_width)
        if warm_start and k > 1:
            flow.params.load_arrays(rounds.flows[-1].params.copy_arrays())
        all_thetas, all_xs = rounds.dataset()
        try:
            report = fit_mle(flow, all_xs, all_thetas, train_config, phase_rng(seed, k, _PH_TRAIN))
        except TrainingDivergenceError as exc:
            raise TrainingDivergenceError(f"round {k}: {exc}") from exc
        rounds.flows.append(flow)
        rounds.train_reports.append(report)
    return rounds
