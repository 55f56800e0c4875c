"""Log-evidence estimators built on surrogate likelihoods.

Three routes to the marginal likelihood, all computed in log space:

* ``sis_estimate`` — telescoping product of per-round evidence ratios,
  each ratio a Monte Carlo average over that round's proposal draws.
* ``is_estimate`` — importance sampling with a proposal density fitted
  to posterior draws and tail-dilated by a temperature T >= 1.
* ``hm_estimate`` — retargeted harmonic mean of the inverse evidence,
  stabilized by a normalized density fitted to half the posterior draws
  and tail-concentrated by a temperature T <= 1.

Every estimator takes the surrogate likelihood as a batch callable
``thetas -> log q(x*|thetas)`` (see ``SnleRounds.loglik_fn``), so an
analytic likelihood can stand in for a trained flow when validating
against closed-form truth.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DegenerateProposalError
from .flows import Flow, FlowConfig
from .snle import PriorBox
from .trainer import TrainConfig, fit_mle

__all__ = [
    "EvidenceEstimate",
    "HmSplit",
    "log_mean_exp",
    "ess_from_log_weights",
    "sis_estimate",
    "is_estimate",
    "hm_estimate",
    "fit_marginal_flow",
    "write_estimates_csv",
]


def log_mean_exp(values) -> float:
    """log of the mean of exp(values), max-shifted; -inf entries allowed."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("log_mean_exp of an empty vector")
    m = values.max()
    if m == -np.inf:
        return -np.inf
    return float(m + np.log(np.mean(np.exp(values - m))))


def _log_sum_exp(values: np.ndarray) -> float:
    m = values.max()
    if m == -np.inf:
        return -np.inf
    return float(m + np.log(np.sum(np.exp(values - m))))


def ess_from_log_weights(log_weights) -> float:
    """(sum w)^2 / sum w^2 from unnormalized log-weights."""
    lw = np.asarray(log_weights, dtype=np.float64)
    denom = _log_sum_exp(2.0 * lw)
    if denom == -np.inf:
        return 0.0
    return float(np.exp(2.0 * _log_sum_exp(lw) - denom))


@dataclass
class EvidenceEstimate:
    method: str
    log_c: float
    dim: int
    n_used: int
    temperature: float | None = None
    ess: float | None = None
    log_ratios: list | None = None
    seed: int | None = None


@dataclass
class HmSplit:
    """Disjoint, exhaustive split of posterior draws into eval/learn sets."""

    eval_idx: np.ndarray
    learn_idx: np.ndarray

    def __post_init__(self):
        self.eval_idx = np.asarray(self.eval_idx, dtype=np.int64)
        self.learn_idx = np.asarray(self.learn_idx, dtype=np.int64)
        if self.eval_idx.size == 0:
            raise ValueError("evaluating set is empty")
        if self.learn_idx.size == 0:
            raise ValueError("learning set is empty")

    @property
    def n_eval(self) -> int:
        return self.eval_idx.size

    @property
    def n_learn(self) -> int:
        return self.learn_idx.size

    def validate_for(self, n_total: int) -> None:
        merged = np.sort(np.concatenate([self.eval_idx, self.learn_idx]))
        if merged.size != n_total or not np.array_equal(merged, np.arange(n_total)):
            raise ValueError(
                f"split must partition 0..{n_total - 1} "
                f"(got {self.n_eval} eval + {self.n_learn} learn)"
            )

    @classmethod
    def contiguous(cls, n_total: int, n_eval: int | None = None) -> "HmSplit":
        """First block evaluates, remainder learns (half/half by default)."""
        if n_eval is None:
            n_eval = n_total // 2
        if not 0 < n_eval < n_total:
            raise ValueError(f"n_eval must be in 1..{n_total - 1}, got {n_eval}")
        return cls(np.arange(n_eval), np.arange(n_eval, n_total))


def sis_estimate(loglik_fns, proposals) -> EvidenceEstimate:
    """Telescoped evidence across rounds.

    ``loglik_fns[k]`` evaluates the round-(k+1) surrogate log-likelihood at
    the observation; ``proposals[k]`` holds the draws used at round k+1,
    which came from the round-k posterior approximation. The round-1 ratio
    divides by the constant 1, so it is plain prior Monte Carlo.
    """
    loglik_fns = list(loglik_fns)
    proposals = [np.asarray(p, dtype=np.float64) for p in proposals]
    if len(loglik_fns) == 0:
        raise ValueError("sis_estimate needs at least one round")
    if len(loglik_fns) != len(proposals):
        raise ValueError(
            f"{len(loglik_fns)} likelihoods vs {len(proposals)} proposal sets"
        )
    log_ratios = []
    for k, thetas in enumerate(proposals):
        if thetas.ndim != 2 or thetas.shape[0] == 0:
            raise ValueError(f"round {k + 1}: proposals must be a nonempty (n, d) array")
        num = np.asarray(loglik_fns[k](thetas), dtype=np.float64)
        den = 0.0 if k == 0 else np.asarray(loglik_fns[k - 1](thetas), dtype=np.float64)
        log_ratios.append(log_mean_exp(num - den))
    return EvidenceEstimate(
        method="sis",
        log_c=float(sum(log_ratios)),
        dim=proposals[0].shape[1],
        n_used=int(sum(p.shape[0] for p in proposals)),
        log_ratios=log_ratios,
    )


def fit_marginal_flow(draws, config: FlowConfig, train_config: TrainConfig, rng) -> Flow:
    """Fit an unconditional flow to parameter draws (proposal / stabilizer)."""
    draws = np.asarray(draws, dtype=np.float64)
    if config.context_dim != 0:
        raise ConfigError("marginal flows must have context_dim 0")
    flow = Flow(config, rng)
    fit_mle(flow, draws, None, train_config, rng)
    return flow


def _default_is_config(dim: int) -> FlowConfig:
    return FlowConfig(dim=dim, context_dim=0, transforms=3, hidden=(32, 32), arch="maf")


def _default_hm_config(dim: int) -> FlowConfig:
    return FlowConfig(dim=dim, context_dim=0, transforms=6, hidden=(32, 32), arch="realnvp")


def _apply_temperature(density, temperature, lower_bound, upper_bound, label):
    """Temper a flow proposal; pass non-flow densities through untouched."""
    if isinstance(density, Flow):
        if temperature is None:
            return density, density.temperature
        if not lower_bound <= temperature <= upper_bound:
            raise ConfigError(
                f"{label} temperature must be in [{lower_bound}, {upper_bound}], "
                f"got {temperature}"
            )
        return density.with_temperature(temperature), float(temperature)
    if temperature is not None:
        raise ConfigError(f"{label}: temperature applies only to flow densities")
    return density, None


def is_estimate(
    loglik,
    prior: PriorBox,
    posterior_draws=None,
    *,
    temperature: float | None = 1.25,
    n_draws: int = 1000,
    rng=None,
    flow_config: FlowConfig | None = None,
    train_config: TrainConfig | None = None,
    proposal=None,
) -> EvidenceEstimate:
    """Importance sampling against a learned (or supplied) proposal.

    With ``proposal=None`` a flow is fitted to ``posterior_draws`` and its
    base variance is dilated by ``temperature`` (>= 1). Any density object
    with ``sample(n, rng)`` and ``log_prob(thetas)`` can be supplied
    instead — the prior itself, an oracle density, or a pre-fitted flow
    (tempered here when a temperature is given). Draws outside the prior
    support contribute zero weight.
    """
    if rng is None:
        raise ValueError("is_estimate requires an explicit rng")
    if n_draws < 1:
        raise ConfigError(f"n_draws must be >= 1, got {n_draws}")
    if proposal is None:
        if posterior_draws is None or len(posterior_draws) == 0:
            raise ValueError("is_estimate needs posterior draws to fit a proposal")
        if temperature is None or temperature < 1.0:
            raise ConfigError(f"IS temperature must be >= 1, got {temperature}")
        draws = np.asarray(posterior_draws, dtype=np.float64)
        proposal = fit_marginal_flow(
            draws,
            flow_config or _default_is_config(draws.shape[1]),
            train_config or TrainConfig(),
            rng,
        )
    proposal, temperature = _apply_temperature(proposal, temperature, 1.0, np.inf, "IS")

    thetas = np.asarray(proposal.sample(n_draws, rng=rng), dtype=np.float64)
    log_prior = prior.log_prob(thetas)
    log_w = np.full(n_draws, -np.inf)
    inside = np.isfinite(log_prior)
    if not inside.any():
        raise DegenerateProposalError(
            f"all {n_draws} proposal draws fell outside the prior support"
        )
    log_w[inside] = (
        np.asarray(loglik(thetas[inside]), dtype=np.float64)
        + log_prior[inside]
        - np.asarray(proposal.log_prob(thetas[inside]), dtype=np.float64)
    )
    return EvidenceEstimate(
        method="is",
        log_c=log_mean_exp(log_w),
        dim=thetas.shape[1],
        n_used=n_draws,
        temperature=temperature,
        ess=ess_from_log_weights(log_w),
    )


def hm_estimate(
    loglik,
    prior: PriorBox,
    posterior_draws,
    *,
    split: HmSplit | None = None,
    temperature: float | None = 0.8,
    rng=None,
    flow_config: FlowConfig | None = None,
    train_config: TrainConfig | None = None,
    psi=None,
) -> EvidenceEstimate:
    """Retargeted harmonic mean of the inverse evidence.

    The stabilizing density ``psi`` is fitted to the learning half of the
    posterior draws (or supplied directly) and concentrated by
    ``temperature`` (<= 1); the estimator averages
    ``psi(theta) / (q(x*|theta) pi(theta))`` over the evaluating half.
    The reported value is the plain negated log of that average — no
    correction is applied for the bias of inverting an unbiased estimate
    of 1/C.
    """
    draws = np.asarray(posterior_draws, dtype=np.float64)
    if draws.ndim != 2 or draws.shape[0] == 0:
        raise ValueError("posterior_draws must be a nonempty (n, d) array")
    if split is None:
        split = HmSplit.contiguous(draws.shape[0])
    split.validate_for(draws.shape[0])
    if psi is None:
        if rng is None:
            raise ValueError("hm_estimate requires an rng to fit the stabilizing density")
        if temperature is None or not 0.0 < temperature <= 1.0:
            raise ConfigError(f"HM temperature must be in (0, 1], got {temperature}")
        psi = fit_marginal_flow(
            draws[split.learn_idx],
            flow_config or _default_hm_config(draws.shape[1]),
            train_config or TrainConfig(),
            rng,
        )
    psi, temperature = _apply_temperature(psi, temperature, 0.0, 1.0, "HM")

    eval_draws = draws[split.eval_idx]
    terms = (
        np.asarray(psi.log_prob(eval_draws), dtype=np.float64)
        - np.asarray(loglik(eval_draws), dtype=np.float64)
        - prior.log_prob(eval_draws)
    )
    return EvidenceEstimate(
        method="hm",
        log_c=-log_mean_exp(terms),
        dim=draws.shape[1],
        n_used=split.n_eval,
        temperature=temperature,
        ess=ess_from_log_weights(terms),
    )


def write_estimates_csv(estimates, path) -> None:
    """One row per estimate: method, d, T, seed, log_C, ESS, per-round ratios."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "d", "temperature", "seed", "log_c", "ess", "log_ratios"])
        for est in estimates:
            w.writerow(
                [
                    est.method,
                    est.dim,
                    "" if est.temperature is None else repr(est.temperature),
                    "" if est.seed is None else est.seed,
                    repr(est.log_c),
                    "" if est.ess is None else repr(est.ess),
                    "" if est.log_ratios is None else ";".join(repr(r) for r in est.log_ratios),
                ]
            )
