"""Normalizing-flow density estimators over dense real vectors.

Two architectures, one interface:

* ``maf`` — masked autoregressive affine transforms (MADE networks),
  density evaluated in a single pass, sampling coordinate-sequential.
* ``realnvp`` — affine coupling layers with alternating binary masks,
  one-pass in both directions.

A flow can be conditional (``context_dim > 0``); the context enters the
first layer of every transform with full connectivity. The Gaussian base
distribution carries a temperature ``T`` that rescales its variance
after training, leaving the transform layers untouched.

Inputs are standardized before entering the networks (context by prior
center/half-width, data by training-set mean/std) and the Jacobian of
the data standardization is folded into reported log-densities, so
densities and samples are always in original units.

Density evaluation has two implementations: a vectorized numpy path
(``log_prob``) used everywhere at inference time, and an adcore graph
path (``nll_graph``) used for training. They compute the same function
and are tested against each other.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import adcore as ad
from .adcore import ParamSet
from .errors import ConfigError, DomainError, ShapeError

__all__ = [
    "FlowConfig",
    "Flow",
    "build_masks",
    "set_temperature",
    "LOGSCALE_CAP",
]

# Smooth squashing bound for log-scale outputs; keeps exp() finite while
# training from random data.
LOGSCALE_CAP = 7.0

_LOG_2PI = float(np.log(2.0 * np.pi))

_SERIAL_VERSION = 1


@dataclass(frozen=True)
class FlowConfig:
    """Architecture description; everything needed to rebuild masks."""

    dim: int
    context_dim: int = 0
    transforms: int = 5
    hidden: tuple = (64, 64)
    arch: str = "maf"

    def __post_init__(self):
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")
        if self.context_dim < 0:
            raise ConfigError(f"context_dim must be >= 0, got {self.context_dim}")
        if self.transforms < 1:
            raise ConfigError(f"transforms must be >= 1, got {self.transforms}")
        if len(self.hidden) == 0 or any(h < 1 for h in self.hidden):
            raise ConfigError(f"hidden widths must be a nonempty list of >= 1, got {self.hidden}")
        if self.arch not in ("maf", "realnvp"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


def build_masks(dim: int, context_dim: int, hidden, order=None):
    """MADE masks enforcing the strict autoregressive property.

    Returns ``(masks, in_degrees, hidden_degrees)`` where ``masks`` is
    ``[data->h1, h1->h2, ..., hH->out]``. The output mask is shared by the
    shift and log-scale heads. Context inputs are not masked (they connect
    to every first-layer unit) and therefore have no mask here.

    ``order[i]`` gives the autoregressive rank of coordinate ``i``
    (default natural order): outputs for a coordinate may depend only on
    data coordinates of strictly lower rank, plus the full context.
    """
    hidden = tuple(int(h) for h in hidden)
    if len(hidden) == 0:
        raise ConfigError("hidden layer list is empty")
    if dim < 1 or any(h < 1 for h in hidden):
        raise ConfigError(f"invalid MADE dims: dim={dim}, hidden={hidden}")
    if order is None:
        order = np.arange(dim)
    order = np.asarray(order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(dim)):
        raise ConfigError(f"order must be a permutation of 0..{dim - 1}")
    in_degrees = order + 1

    # Hidden units of degree g pass information from data coordinates of
    # degree <= g. Conditional networks include degree-0 units (context
    # only) so that even the first coordinate's outputs can depend on the
    # context; unconditional networks start at degree 1.
    if context_dim > 0:
        lo, hi = 0, dim - 1
    else:
        lo, hi = 1, max(dim - 1, 1)
    span = hi - lo + 1
    hidden_degrees = [lo + (np.arange(h) % span) for h in hidden]

    masks = []
    prev = in_degrees
    for deg in hidden_degrees:
        masks.append((prev[:, None] <= deg[None, :]).astype(np.float64))
        prev = deg
    masks.append((prev[:, None] < in_degrees[None, :]).astype(np.float64))
    return masks, in_degrees, hidden_degrees


def _init_hidden(rng, n_in: int, n_out: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(n_in)
    return rng.uniform(-bound, bound, size=(n_in, n_out))


def _clamp_logscale(raw: np.ndarray) -> np.ndarray:
    return LOGSCALE_CAP * np.tanh(raw / LOGSCALE_CAP)


def _clamp_logscale_graph(raw: ad.Node) -> ad.Node:
    return LOGSCALE_CAP * ad.tanh(raw * (1.0 / LOGSCALE_CAP))


class _MadeTransform:
    """One masked autoregressive affine transform with its permutation."""

    def __init__(self, index: int, config: FlowConfig, params: ParamSet, rng):
        d, c = config.dim, config.context_dim
        self.dim = d
        self.context_dim = c
        self.perm = np.arange(d) if index % 2 == 0 else np.arange(d)[::-1].copy()
        self.inv_perm = np.argsort(self.perm)
        self.masks, self.in_degrees, self.hidden_degrees = build_masks(d, c, config.hidden)
        self.hidden = config.hidden
        p = f"t{index}"
        self.names = {}

        n_in = d
        for j, h in enumerate(config.hidden):
            self.names[f"w{j}"] = f"{p}.w{j}"
            self.names[f"b{j}"] = f"{p}.b{j}"
            params.add(f"{p}.w{j}", _init_hidden(rng, n_in, h))
            params.add(f"{p}.b{j}", np.zeros(h))
            if j == 0 and c > 0:
                self.names["wc"] = f"{p}.wc"
                params.add(f"{p}.wc", _init_hidden(rng, c, h))
            n_in = h
        # Identity start: zero heads make the transform the identity map.
        for head in ("shift", "logscale"):
            self.names[f"w_{head}"] = f"{p}.w_{head}"
            self.names[f"b_{head}"] = f"{p}.b_{head}"
            params.add(f"{p}.w_{head}", np.zeros((n_in, d)))
            params.add(f"{p}.b_{head}", np.zeros(d))

    def _heads(self, v: np.ndarray, ctx, arrays: dict):
        a = v @ (arrays[self.names["w0"]] * self.masks[0]) + arrays[self.names["b0"]]
        if self.context_dim > 0:
            a = a + ctx @ arrays[self.names["wc"]]
        a = np.tanh(a)
        for j in range(1, len(self.hidden)):
            a = np.tanh(
                a @ (arrays[self.names[f"w{j}"]] * self.masks[j]) + arrays[self.names[f"b{j}"]]
            )
        out_mask = self.masks[-1]
        shift = a @ (arrays[self.names["w_shift"]] * out_mask) + arrays[self.names["b_shift"]]
        raw = a @ (arrays[self.names["w_logscale"]] * out_mask) + arrays[self.names["b_logscale"]]
        return shift, _clamp_logscale(raw)

    def shift_logscale(self, v, ctx, arrays):
        """Autoregressive (shift, log-scale) heads for permuted input v."""
        return self._heads(v, ctx, arrays)

    def forward(self, t: np.ndarray, ctx, arrays: dict):
        """Data -> base direction; returns (u, per-row logdet)."""
        v = t[:, self.perm]
        shift, logscale = self._heads(v, ctx, arrays)
        u = (v - shift) * np.exp(-logscale)
        return u, -logscale.sum(axis=1)

    def inverse(self, u: np.ndarray, ctx, arrays: dict) -> np.ndarray:
        """Base -> data direction; coordinate-sequential."""
        v = np.zeros_like(u)
        for i in range(self.dim):
            shift, logscale = self._heads(v, ctx, arrays)
            v[:, i] = u[:, i] * np.exp(logscale[:, i]) + shift[:, i]
        return v[:, self.inv_perm]

    def forward_graph(self, t: ad.Node, ctx: ad.Node | None, params: ParamSet):
        """Graph twin of forward(); returns (u node, total-logscale scalar node)."""
        if (self.perm != np.arange(self.dim)).any():
            pmat = np.zeros((self.dim, self.dim))
            pmat[self.perm, np.arange(self.dim)] = 1.0
            v = ad.matmul(t, ad.constant(pmat))
        else:
            v = t
        a = ad.masked_matmul(v, params[self.names["w0"]], self.masks[0]) + params[self.names["b0"]]
        if self.context_dim > 0:
            a = a + ad.matmul(ctx, params[self.names["wc"]])
        a = ad.tanh(a)
        for j in range(1, len(self.hidden)):
            a = ad.tanh(
                ad.masked_matmul(a, params[self.names[f"w{j}"]], self.masks[j])
                + params[self.names[f"b{j}"]]
            )
        out_mask = self.masks[-1]
        shift = (
            ad.masked_matmul(a, params[self.names["w_shift"]], out_mask)
            + params[self.names["b_shift"]]
        )
        raw = (
            ad.masked_matmul(a, params[self.names["w_logscale"]], out_mask)
            + params[self.names["b_logscale"]]
        )
        logscale = _clamp_logscale_graph(raw)
        u = (v - shift) * ad.exp(-logscale)
        return u, ad.nsum(logscale)


class _CouplingTransform:
    """One affine coupling layer; pass-through coats alternate per layer."""

    def __init__(self, index: int, config: FlowConfig, params: ParamSet, rng):
        d, c = config.dim, config.context_dim
        self.dim = d
        self.context_dim = c
        keep = (np.arange(d) % 2 == index % 2).astype(np.float64)
        if d == 1:
            keep = np.array([float(index % 2)])
        self.keep = keep
        self.hidden = config.hidden
        p = f"t{index}"
        self.names = {}

        n_in = d
        for j, h in enumerate(config.hidden):
            self.names[f"w{j}"] = f"{p}.w{j}"
            self.names[f"b{j}"] = f"{p}.b{j}"
            params.add(f"{p}.w{j}", _init_hidden(rng, n_in, h))
            params.add(f"{p}.b{j}", np.zeros(h))
            if j == 0 and c > 0:
                self.names["wc"] = f"{p}.wc"
                params.add(f"{p}.wc", _init_hidden(rng, c, h))
            n_in = h
        for head in ("shift", "logscale"):
            self.names[f"w_{head}"] = f"{p}.w_{head}"
            self.names[f"b_{head}"] = f"{p}.b_{head}"
            params.add(f"{p}.w_{head}", np.zeros((n_in, d)))
            params.add(f"{p}.b_{head}", np.zeros(d))

    def _heads(self, kept: np.ndarray, ctx, arrays: dict):
        a = kept @ arrays[self.names["w0"]] + arrays[self.names["b0"]]
        if self.context_dim > 0:
            a = a + ctx @ arrays[self.names["wc"]]
        a = np.tanh(a)
        for j in range(1, len(self.hidden)):
            a = np.tanh(a @ arrays[self.names[f"w{j}"]] + arrays[self.names[f"b{j}"]])
        change = 1.0 - self.keep
        shift = (a @ arrays[self.names["w_shift"]] + arrays[self.names["b_shift"]]) * change
        raw = a @ arrays[self.names["w_logscale"]] + arrays[self.names["b_logscale"]]
        return shift, _clamp_logscale(raw) * change

    def forward(self, t: np.ndarray, ctx, arrays: dict):
        shift, logscale = self._heads(t * self.keep, ctx, arrays)
        # shift/logscale are zero on kept coordinates, so this is the
        # identity there and the affine map on the rest.
        u = (t - shift) * np.exp(-logscale)
        return u, -logscale.sum(axis=1)

    def inverse(self, u: np.ndarray, ctx, arrays: dict) -> np.ndarray:
        shift, logscale = self._heads(u * self.keep, ctx, arrays)
        return u * np.exp(logscale) + shift

    def forward_graph(self, t: ad.Node, ctx: ad.Node | None, params: ParamSet):
        kept = t * ad.constant(self.keep)
        a = ad.matmul(kept, params[self.names["w0"]]) + params[self.names["b0"]]
        if self.context_dim > 0:
            a = a + ad.matmul(ctx, params[self.names["wc"]])
        a = ad.tanh(a)
        for j in range(1, len(self.hidden)):
            a = ad.tanh(ad.matmul(a, params[self.names[f"w{j}"]]) + params[self.names[f"b{j}"]])
        change = ad.constant(1.0 - self.keep)
        shift = (
            ad.matmul(a, params[self.names["w_shift"]]) + params[self.names["b_shift"]]
        ) * change
        raw = ad.matmul(a, params[self.names["w_logscale"]]) + params[self.names["b_logscale"]]
        logscale = _clamp_logscale_graph(raw) * change
        u = (t - shift) * ad.exp(-logscale)
        return u, ad.nsum(logscale)


class Flow:
    """Conditional or unconditional normalizing flow with a Gaussian base.

    Use ``context_dim=0`` for a density over the parameter space itself
    (proposal / stabilizing densities); ``context_dim>0`` for a
    conditional surrogate likelihood.
    """

    def __init__(self, config: FlowConfig, rng):
        self.config = config
        self.params = ParamSet()
        cls = _MadeTransform if config.arch == "maf" else _CouplingTransform
        self.transforms = [cls(k, config, self.params, rng) for k in range(config.transforms)]
        self.temperature = 1.0
        self.x_shift = np.zeros(config.dim)
        self.x_scale = np.ones(config.dim)
        self.ctx_shift = np.zeros(config.context_dim)
        self.ctx_scale = np.ones(config.context_dim)

    # -- configuration ---------------------------------------------------

    @property
    def dim(self) -> int:
        return self.config.dim

    @property
    def context_dim(self) -> int:
        return self.config.context_dim

    def set_data_standardization(self, shift, scale) -> None:
        shift = np.asarray(shift, dtype=np.float64)
        scale = np.asarray(scale, dtype=np.float64)
        if shift.shape != (self.dim,) or scale.shape != (self.dim,):
            raise ShapeError(f"standardization vectors must have shape ({self.dim},)")
        if np.any(scale <= 0):
            raise ConfigError("standardization scale must be positive")
        self.x_shift, self.x_scale = shift, scale

    def set_context_standardization(self, shift, scale) -> None:
        shift = np.asarray(shift, dtype=np.float64)
        scale = np.asarray(scale, dtype=np.float64)
        if shift.shape != (self.context_dim,) or scale.shape != (self.context_dim,):
            raise ShapeError(f"context standardization must have shape ({self.context_dim},)")
        if np.any(scale <= 0):
            raise ConfigError("context standardization scale must be positive")
        self.ctx_shift, self.ctx_scale = shift, scale

    def with_temperature(self, temperature: float) -> "Flow":
        """Copy of this flow with the base variance rescaled to T.

        Transform layers and standardizers are shared, not copied, and are
        unchanged: only the base distribution widens (T > 1) or narrows
        (T < 1).
        """
        if not temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {temperature}")
        other = object.__new__(Flow)
        other.config = self.config
        other.params = self.params
        other.transforms = self.transforms
        other.temperature = float(temperature)
        other.x_shift, other.x_scale = self.x_shift, self.x_scale
        other.ctx_shift, other.ctx_scale = self.ctx_shift, self.ctx_scale
        return other

    # -- evaluation (numpy path) ------------------------------------------

    def _check_inputs(self, x, context):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ShapeError(f"x must have shape (n, {self.dim}), got {x.shape}")
        if not np.isfinite(x).all():
            raise DomainError("x contains non-finite entries")
        if self.context_dim == 0:
            if context is not None:
                raise ShapeError("flow is unconditional; context must be None")
            return x, None
        if context is None:
            raise ShapeError("flow is conditional; context is required")
        context = np.asarray(context, dtype=np.float64)
        if context.ndim == 1:
            context = np.broadcast_to(context, (x.shape[0], context.shape[0]))
        if context.shape != (x.shape[0], self.context_dim):
            raise ShapeError(
                f"context must have shape (n, {self.context_dim}), got {context.shape}"
            )
        if not np.isfinite(context).all():
            raise DomainError("context contains non-finite entries")
        return x, (context - self.ctx_shift) / self.ctx_scale

    def to_base(self, x, context=None):
        """Map data to base space; returns (z, per-row logdet).

        log_prob(x) = base_log_prob(z) + logdet, where logdet includes the
        data-standardization Jacobian.
        """
        x, ctx = self._check_inputs(x, context)
        arrays = self.params.arrays()
        t = (x - self.x_shift) / self.x_scale
        logdet = np.full(x.shape[0], -np.log(self.x_scale).sum())
        for tr in self.transforms:
            t, ld = tr.forward(t, ctx, arrays)
            logdet = logdet + ld
        return t, logdet

    def from_base(self, z, context=None):
        """Inverse of to_base; z is in base coordinates (already tempered)."""
        z, ctx = self._check_inputs(z, context)
        arrays = self.params.arrays()
        t = z
        for tr in reversed(self.transforms):
            t = tr.inverse(t, ctx, arrays)
        return t * self.x_scale + self.x_shift

    def base_log_prob(self, z: np.ndarray) -> np.ndarray:
        T = self.temperature
        return -0.5 * (self.dim * (_LOG_2PI + np.log(T)) + (z * z).sum(axis=1) / T)

    def log_prob(self, x, context=None) -> np.ndarray:
        z, logdet = self.to_base(x, context)
        return self.base_log_prob(z) + logdet

    def sample(self, n: int, context=None, rng=None) -> np.ndarray:
        if n < 1:
            raise ConfigError(f"sample count must be >= 1, got {n}")
        if rng is None:
            raise ValueError("sample requires an explicit rng")
        z = rng.standard_normal((n, self.dim)) * np.sqrt(self.temperature)
        if context is not None:
            context = np.asarray(context, dtype=np.float64)
            if context.ndim == 1:
                context = np.broadcast_to(context, (n, context.shape[0]))
        return self.from_base(z, context)

    # -- training path (adcore graph) -------------------------------------

    def nll_graph(self, x, context=None) -> ad.Node:
        """Scalar node: mean negative log-density of the batch.

        Built on the same parameters as log_prob; backward() through this
        node yields the maximum-likelihood gradient.
        """
        x, ctx = self._check_inputs(x, context)
        n = x.shape[0]
        ctx_node = None if ctx is None else ad.constant(ctx)
        t = ad.constant((x - self.x_shift) / self.x_scale)
        total_logscale = ad.constant(0.0)
        for tr in self.transforms:
            t, s = tr.forward_graph(t, ctx_node, self.params)
            total_logscale = total_logscale + s
        T = self.temperature
        quad = ad.nsum(t * t) * (0.5 / T)
        const = n * (0.5 * self.dim * (_LOG_2PI + np.log(T)) + np.log(self.x_scale).sum())
        return (quad + total_logscale + const) * (1.0 / n)

    # -- serialization -----------------------------------------------------

    def save(self, path) -> None:
        """Write architecture, masks, parameters and temperature to .npz."""
        meta = {
            "version": _SERIAL_VERSION,
            "arch": self.config.arch,
            "dim": self.config.dim,
            "context_dim": self.config.context_dim,
            "transforms": self.config.transforms,
            "hidden": list(self.config.hidden),
            "temperature": self.temperature,
        }
        payload = {
            "meta": np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
            "x_shift": self.x_shift,
            "x_scale": self.x_scale,
            "ctx_shift": self.ctx_shift,
            "ctx_scale": self.ctx_scale,
        }
        for name, arr in self.params.arrays().items():
            payload[f"param:{name}"] = arr
        for k, tr in enumerate(self.transforms):
            if isinstance(tr, _MadeTransform):
                for j, m in enumerate(tr.masks):
                    payload[f"mask:{k}:{j}"] = m
            else:
                payload[f"mask:{k}:keep"] = tr.keep
        with open(path, "wb") as fh:
            np.savez(fh, **payload)

    @classmethod
    def load(cls, path) -> "Flow":
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode())
            if meta["version"] != _SERIAL_VERSION:
                raise ConfigError(f"unsupported flow file version {meta['version']}")
            config = FlowConfig(
                dim=meta["dim"],
                context_dim=meta["context_dim"],
                transforms=meta["transforms"],
                hidden=tuple(meta["hidden"]),
                arch=meta["arch"],
            )
            flow = cls(config, np.random.default_rng(0))
            flow.params.load_arrays(
                {k[len("param:"):]: data[k] for k in data.files if k.startswith("param:")}
            )
            flow.temperature = float(meta["temperature"])
            flow.x_shift = data["x_shift"]
            flow.x_scale = data["x_scale"]
            flow.ctx_shift = data["ctx_shift"]
            flow.ctx_scale = data["ctx_scale"]
            # stored masks are derivable from the config; verify integrity.
            for k, tr in enumerate(flow.transforms):
                if isinstance(tr, _MadeTransform):
                    for j, m in enumerate(tr.masks):
                        if not np.array_equal(m, data[f"mask:{k}:{j}"]):
                            raise ConfigError(f"mask mismatch in stored flow (transform {k})")
                else:
                    if not np.array_equal(tr.keep, data[f"mask:{k}:keep"]):
                        raise ConfigError(f"coupling mask mismatch in stored flow (transform {k})")
        return flow


def set_temperature(flow: Flow, temperature: float) -> Flow:
    """Functional alias for Flow.with_temperature."""
    return flow.with_temperature(temperature)
