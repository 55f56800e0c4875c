"""Axis-aligned slice sampling with stepping-out and shrinkage.

Targets are batch callables: ``log_target(thetas)`` maps an ``(m, d)``
array to ``(m,)`` unnormalized log-densities, returning ``-inf`` outside
the support. Chains run in lock step — each expansion or shrinkage round
evaluates the target once on the batch of still-active chains — but every
chain consumes its own deterministic random stream, so results are
identical to running the chains one at a time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ChainInitError, ConfigError, SliceSamplerStuck

__all__ = ["ChainSpec", "slice_step", "run_chains"]

_MAX_SHRINK = 1000


@dataclass
class ChainSpec:
    n_chains: int = 20
    burn_in: int = 200
    thin: int = 1
    width: float | np.ndarray = 1.0
    max_stepouts: int = 10

    def __post_init__(self):
        if self.n_chains < 1:
            raise ConfigError(f"n_chains must be >= 1, got {self.n_chains}")
        if self.burn_in < 0:
            raise ConfigError(f"burn_in must be >= 0, got {self.burn_in}")
        if self.thin < 1:
            raise ConfigError(f"thin must be >= 1, got {self.thin}")
        if np.any(np.asarray(self.width) <= 0):
            raise ConfigError("width must be positive")
        if self.max_stepouts < 1:
            raise ConfigError(f"max_stepouts must be >= 1, got {self.max_stepouts}")


def _width_vector(width, dim: int) -> np.ndarray:
    w = np.asarray(width, dtype=np.float64)
    if w.ndim == 0:
        return np.full(dim, float(w))
    if w.shape != (dim,):
        raise ConfigError(f"width must be scalar or shape ({dim},), got {w.shape}")
    return w


def _sweep(log_target, states, logps, rngs, width, max_stepouts, evals):
    """One full coordinate sweep of all chains, in place."""
    n, dim = states.shape
    for j in range(dim):
        levels = np.empty(n)
        lefts = np.empty(n)
        rights = np.empty(n)
        budget_l = np.empty(n, dtype=np.int64)
        budget_r = np.empty(n, dtype=np.int64)
        for i in range(n):
            # log(1 - U) maps U in [0, 1) to a strictly negative level offset
            levels[i] = logps[i] + math.log1p(-rngs[i].random())
            r = rngs[i].random()
            lefts[i] = states[i, j] - r * width[j]
            rights[i] = lefts[i] + width[j]
            split = int(max_stepouts * rngs[i].random())
            budget_l[i] = split
            budget_r[i] = max_stepouts - 1 - split

        # Stepping out, each side expanded while the bracket end stays
        # above the slice level and the side's budget lasts.
        for edge, budget, step in ((lefts, budget_l, -1.0), (rights, budget_r, 1.0)):
            active = budget > 0
            while active.any():
                idx = np.nonzero(active)[0]
                cand = states[idx].copy()
                cand[:, j] = edge[idx]
                lp = log_target(cand)
                evals[0] += len(idx)
                grow = lp > levels[idx]
                grew = idx[grow]
                edge[grew] += step * width[j]
                budget[grew] -= 1
                active[:] = False
                active[grew[budget[grew] > 0]] = True

        # Shrinkage: propose uniformly on the bracket, shrink toward the
        # current point on rejection.
        pending = np.ones(n, dtype=bool)
        for _ in range(_MAX_SHRINK):
            idx = np.nonzero(pending)[0]
            if len(idx) == 0:
                break
            proposals = np.empty(len(idx))
            for k, i in enumerate(idx):
                proposals[k] = lefts[i] + rngs[i].random() * (rights[i] - lefts[i])
            cand = states[idx].copy()
            cand[:, j] = proposals
            lp = log_target(cand)
            evals[0] += len(idx)
            for k, i in enumerate(idx):
                if lp[k] > levels[i]:
                    states[i, j] = proposals[k]
                    logps[i] = lp[k]
                    pending[i] = False
                elif proposals[k] > states[i, j]:
                    rights[i] = proposals[k]
                elif proposals[k] < states[i, j]:
                    lefts[i] = proposals[k]
                else:
                    raise SliceSamplerStuck(
                        f"shrinkage collapsed onto the current point "
                        f"(coordinate {j}, chain {i})"
                    )
        if pending.any():
            raise SliceSamplerStuck(
                f"no acceptable point after {_MAX_SHRINK} shrinkage rounds "
                f"(coordinate {j})"
            )


def slice_step(log_target, x, rng, width=1.0, max_stepouts: int = 10) -> np.ndarray:
    """One full slice-sampling sweep from state x; returns the new state.

    The target must be finite at x.
    """
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    dim = x.shape[0]
    states = x[None, :].copy()
    logps = np.asarray(log_target(states), dtype=np.float64).copy()
    if not np.isfinite(logps[0]):
        raise ConfigError("slice_step requires a starting point with finite log-target")
    evals = [0]
    _sweep(log_target, states, logps, [rng], _width_vector(width, dim), max_stepouts, evals)
    return states[0]


def _init_states(log_target, dim, n_chains, rngs, init, init_sampler):
    if init is not None:
        states = np.array(init, dtype=np.float64)
        if states.shape != (n_chains, dim):
            raise ConfigError(f"init must have shape ({n_chains}, {dim}), got {states.shape}")
        logps = np.asarray(log_target(states), dtype=np.float64)
        if not np.isfinite(logps).all():
            raise ChainInitError(
                f"explicit init has non-finite log-target for target {_name(log_target)}"
            )
        return states, logps.copy()
    if init_sampler is None:
        raise ConfigError("run_chains needs either init states or an init_sampler")
    states = np.empty((n_chains, dim))
    logps = np.empty(n_chains)
    for i in range(n_chains):
        for _ in range(1000):
            cand = np.asarray(init_sampler(1, rngs[i]), dtype=np.float64).reshape(1, dim)
            lp = float(log_target(cand)[0])
            if np.isfinite(lp):
                states[i] = cand[0]
                logps[i] = lp
                break
        else:
            raise ChainInitError(
                f"no finite-density init found in 1000 draws for target {_name(log_target)}"
            )
    return states, logps


def _name(fn) -> str:
    return getattr(fn, "__name__", None) or repr(fn)


def run_chains(log_target, n_samples, dim, spec, rng, init=None, init_sampler=None):
    """Pooled slice-sampling draws from parallel chains.

    Each chain gets its own random stream spawned from ``rng``, runs
    ``burn_in`` sweeps, then contributes ``ceil(n_samples / n_chains)``
    retained states (every ``thin``-th sweep). Retained draws are pooled
    round-robin by chain index and truncated to ``n_samples``.

    Returns ``(draws, info)`` where ``info`` carries evaluation counts and
    final per-chain log-targets.
    """
    if n_samples < 1:
        raise ConfigError(f"n_samples must be >= 1, got {n_samples}")
    rngs = rng.spawn(spec.n_chains)
    width = _width_vector(spec.width, dim)
    states, logps = _init_states(log_target, dim, spec.n_chains, rngs, init, init_sampler)

    evals = [0]
    for _ in range(spec.burn_in):
        _sweep(log_target, states, logps, rngs, width, spec.max_stepouts, evals)

    per_chain = -(-n_samples // spec.n_chains)
    kept = np.empty((per_chain, spec.n_chains, dim))
    for t in range(per_chain):
        for _ in range(spec.thin):
            _sweep(log_target, states, logps, rngs, width, spec.max_stepouts, evals)
        kept[t] = states
    draws = kept.reshape(per_chain * spec.n_chains, dim)[:n_samples]

    info = {
        "n_evals": evals[0],
        "per_chain": per_chain,
        "sweeps_per_chain": spec.burn_in + per_chain * spec.thin,
        "final_logp": logps.copy(),
    }
    return draws, info
