"""Neural-operator backbones and their training loop.

Both backbones map a batch of discretized inputs ``(n, m, C)`` to a batch of
grid functions ``(n, m)``.  The Fourier neural operator works channels-first
internally so the spectral transforms act on trailing axes.  All forward
passes are written against :mod:`dope.autodiff`, so the same code evaluates
plain arrays and records a tape when handed ``Var`` parameters.
"""
from __future__ import annotations

import hashlib
import json
import types
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .data import ObservationBatch, stream


class ConfigError(ValueError):
    pass


class CheckpointMismatchError(ValueError):
    """A checkpoint was written for a different backbone configuration."""


ACTIVATION = "gelu"


@dataclass(frozen=True)
class FnoConfig:
    in_channels: int
    hidden_channels: int
    out_channels: int
    n_layers: int
    modes: tuple
    spatial_shape: tuple

    def __post_init__(self):
        object.__setattr__(self, "modes", tuple(int(m) for m in self.modes))
        object.__setattr__(self, "spatial_shape", tuple(int(s) for s in self.spatial_shape))
        if min(self.in_channels, self.hidden_channels, self.out_channels, self.n_layers) < 1:
            raise ConfigError("channel and layer counts must be at least 1")
        if len(self.modes) != len(self.spatial_shape) or not self.modes:
            raise ConfigError("one mode count per spatial axis")
        for m, n in zip(self.modes, self.spatial_shape):
            if m < 1 or 2 * m > n:
                raise ConfigError(f"{m} retained modes need at least {2 * m} grid points, got {n}")


@dataclass(frozen=True)
class DeepONetConfig:
    in_channels: int
    n_points: int
    coord_channels: tuple
    branch_hidden: int = 32
    trunk_hidden: int = 32
    latent_dim: int = 32
    out_channels: int = 1

    def __post_init__(self):
        object.__setattr__(self, "coord_channels", tuple(int(c) for c in self.coord_channels))
        if self.latent_dim < 1:
            raise ConfigError("latent dimension must be at least 1")
        if min(self.in_channels, self.n_points, self.branch_hidden, self.trunk_hidden) < 1:
            raise ConfigError("widths must be positive")
        if self.out_channels != 1:
            raise ConfigError("only scalar-valued DeepONet outputs are supported")


def pk_fno_config(hidden: int = 32, n_layers: int = 3, modes: int = 12, n_points: int = 128) -> FnoConfig:
    return FnoConfig(4, hidden, 1, n_layers, (modes,), (n_points,))


def darcy_fno_config(hidden: int = 24, n_layers: int = 3, modes: int = 8, side: int = 17) -> FnoConfig:
    return FnoConfig(3, hidden, 1, n_layers, (modes, modes), (side, side))


def config_to_dict(cfg) -> dict:
    return {"type": type(cfg).__name__, **{k: list(v) if isinstance(v, tuple) else v
                                           for k, v in asdict(cfg).items()}}


def config_from_dict(d: dict):
    d = dict(d)
    cls = {"FnoConfig": FnoConfig, "DeepONetConfig": DeepONetConfig}[d.pop("type")]
    return cls(**d)


def config_hash(cfg) -> str:
    return hashlib.sha256(json.dumps(config_to_dict(cfg), sort_keys=True).encode()).hexdigest()[:16]


@dataclass(frozen=True)
class OperatorParams:
    """Read-only parameter arrays plus the configuration that shapes them."""

    config: object
    names: tuple
    arrays: tuple
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        frozen = []
        for name, a in zip(self.names, self.arrays):
            a = np.array(a, dtype=float, copy=True)
            if not np.all(np.isfinite(a)):
                raise ValueError(f"parameter {name} has non-finite entries")
            a.flags.writeable = False
            frozen.append(a)
        object.__setattr__(self, "arrays", tuple(frozen))
        object.__setattr__(self, "meta", types.MappingProxyType(dict(self.meta)))

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.arrays))

    def replace(self, arrays: Sequence[np.ndarray], **meta) -> "OperatorParams":
        return OperatorParams(self.config, self.names, tuple(arrays), {**self.meta, **meta})

    @property
    def n_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays))

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, a in zip(self.names, self.arrays):
            h.update(name.encode())
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# initialization
# --------------------------------------------------------------------------

def _dense(rng, fan_in, fan_out):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, (fan_in, fan_out)), rng.uniform(-bound, bound, fan_out)


def _spectral_shape(cfg: FnoConfig):
    *lead, last = cfg.modes
    return tuple(2 * m for m in lead) + (last,)


def init_params(cfg, seed) -> OperatorParams:
    """Fan-in uniform pointwise layers; complex-Gaussian spectral weights."""
    rng = seed if isinstance(seed, np.random.Generator) else stream(int(seed), "init")
    names, arrays = [], []

    def add(name, a):
        names.append(name)
        arrays.append(a)

    if isinstance(cfg, FnoConfig):
        w, b = _dense(rng, cfg.in_channels, cfg.hidden_channels)
        add("lift_w", w); add("lift_b", b)
        c = cfg.hidden_channels
        scale = 1.0 / (c * int(np.prod(cfg.modes)))
        sshape = _spectral_shape(cfg) + (c, c)
        for layer in range(cfg.n_layers):
            add(f"spec{layer}_re", scale * rng.standard_normal(sshape))
            add(f"spec{layer}_im", scale * rng.standard_normal(sshape))
            w, b = _dense(rng, c, c)
            add(f"skip{layer}_w", w); add(f"skip{layer}_b", b)
        w, b = _dense(rng, c, cfg.out_channels)
        add("proj_w", w); add("proj_b", b)
    elif isinstance(cfg, DeepONetConfig):
        widths = [cfg.in_channels * cfg.n_points, cfg.branch_hidden, cfg.branch_hidden, cfg.latent_dim]
        for i in range(3):
            w, b = _dense(rng, widths[i], widths[i + 1])
            add(f"branch{i}_w", w); add(f"branch{i}_b", b)
        widths = [len(cfg.coord_channels), cfg.trunk_hidden, cfg.trunk_hidden, cfg.latent_dim]
        for i in range(3):
            w, b = _dense(rng, widths[i], widths[i + 1])
            add(f"trunk{i}_w", w); add(f"trunk{i}_b", b)
        add("bias", np.zeros(1))
    else:
        raise ConfigError(f"unknown backbone config {type(cfg).__name__}")
    return OperatorParams(cfg, tuple(names), tuple(arrays), {"seed": None if isinstance(seed, np.random.Generator) else int(seed), "epochs": 0})


# --------------------------------------------------------------------------
# forward passes
# --------------------------------------------------------------------------

def _check_features(x, n_channels, n_points):
    x = np.asarray(x, dtype=float)
    if x.ndim != 3:
        raise ValueError("features must have shape (n, m, C)")
    if x.shape[2] != n_channels:
        raise ValueError(f"expected {n_channels} channels, got {x.shape[2]}")
    if x.shape[1] != n_points:
        raise ValueError(f"expected {n_points} grid points, got {x.shape[1]}")
    return x


def spectral_conv(h, w_re, w_im, modes, spatial_shape):
    """Truncated Fourier multiplier on channels-first ``(n, c, *spatial)``.

    Weights are stored mode-major, ``(*retained, in, out)``, so the per-mode
    channel mixing is one batched matmul.
    """
    ns = len(spatial_shape)
    weight = w_re + w_im * 1j
    z = ad.fft_trunc(h, modes)                                   # (n, i, *k)
    to_front = tuple(range(2, 2 + ns)) + (0, 1)
    z = ad.matmul(ad.transpose(z, to_front), weight)             # (*k, n, o)
    back = (ns, ns + 1) + tuple(range(ns))
    return ad.ifft_trunc(ad.transpose(z, back), spatial_shape)


def _pointwise(h, w, b, n_spatial):
    """Channel mixing ``(n, i, *sp) -> (n, o, *sp)`` shared across grid points."""
    shape = ad.value_of(h).shape
    flat = ad.reshape(h, shape[:2] + (-1,))
    out = ad.matmul(ad.transpose(w), flat) + ad.reshape(b, (-1, 1))
    return ad.reshape(out, (shape[0], -1) + shape[2:])


def fno_apply(cfg: FnoConfig, P: Mapping, x):
    """FNO on features ``(n, m, C)`` with parameters ``P`` (arrays or Vars); returns ``(n, m)``."""
    x = _check_features(x, cfg.in_channels, int(np.prod(cfg.spatial_shape)))
    n = x.shape[0]
    ns = len(cfg.spatial_shape)
    # channels-first input: (n, C, *spatial); a constant, so no tape needed
    xc = np.moveaxis(x.reshape((n,) + cfg.spatial_shape + (cfg.in_channels,)), -1, 1)
    h = _pointwise(xc, P["lift_w"], P["lift_b"], ns)
    for layer in range(cfg.n_layers):
        spec = spectral_conv(h, P[f"spec{layer}_re"], P[f"spec{layer}_im"], cfg.modes, cfg.spatial_shape)
        h = ad.gelu(spec + _pointwise(h, P[f"skip{layer}_w"], P[f"skip{layer}_b"], ns))
    out = _pointwise(h, P["proj_w"], P["proj_b"], ns)
    return ad.reshape(out, (n, cfg.out_channels, -1))[:, 0, :] if cfg.out_channels == 1 else \
        ad.reshape(out, (n, cfg.out_channels, -1))


def _mlp(z, P, prefix, n_layers=3):
    for i in range(n_layers):
        z = ad.matmul(z, P[f"{prefix}{i}_w"]) + P[f"{prefix}{i}_b"]
        if i < n_layers - 1:
            z = ad.gelu(z)
    return z


def deeponet_apply(cfg: DeepONetConfig, P: Mapping, x, queries):
    """Branch embedding of the flattened input dotted with the trunk embedding of each query.

    ``queries`` is ``(q, d)`` shared across the batch; returns ``(n, q)``.
    """
    x = _check_features(x, cfg.in_channels, cfg.n_points)
    queries = np.asarray(queries, dtype=float)
    if queries.ndim != 2 or queries.shape[1] != len(cfg.coord_channels):
        raise ValueError("queries must have shape (q, coordinate dimension)")
    branch = _mlp(x.reshape(x.shape[0], -1), P, "branch")       # (n, p)
    trunk = _mlp(queries, P, "trunk")                           # (q, p)
    return ad.matmul(branch, ad.transpose(trunk)) + P["bias"]


def grid_queries(cfg: DeepONetConfig, x) -> np.ndarray:
    """Coordinates of the canonical grid, read from the coordinate channels."""
    return np.asarray(x, dtype=float)[0][:, list(cfg.coord_channels)]


def apply_operator(cfg, P: Mapping, x):
    """Backbone output on the full canonical grid, ``(n, m)``."""
    if isinstance(cfg, FnoConfig):
        return fno_apply(cfg, P, x)
    return deeponet_apply(cfg, P, x, grid_queries(cfg, x))


def fno_forward(params: OperatorParams, channels) -> np.ndarray:
    return np.asarray(fno_apply(params.config, params.as_dict(), channels))


def deeponet_forward(params: OperatorParams, channels, query_points) -> np.ndarray:
    q = np.asarray(query_points, dtype=float)
    if np.any(q < -1e-12) or np.any(q > 1 + 1e-12):
        raise ValueError("query points must lie in the unit domain")
    return np.asarray(deeponet_apply(params.config, params.as_dict(), channels, q))


def predict(params: OperatorParams, features, chunk: int = 256) -> np.ndarray:
    """Grid predictions ``(n, m)``, evaluated in chunks to bound memory."""
    features = np.asarray(features, dtype=float)
    P = params.as_dict()
    outs = [np.asarray(apply_operator(params.config, P, features[i: i + chunk]))
            for i in range(0, len(features), chunk)]
    return np.concatenate(outs, axis=0)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------

def observed_mse(pred, batch: ObservationBatch):
    """(1/n) sum_i (1/K_i) sum_k (Y_ik - pred_i(X_ik))^2 over real observations."""
    at_obs = ad.take_along_axis(pred, batch.idx, axis=1)
    resid = (at_obs - batch.y) * batch.mask
    per = ad.sum(resid * resid, axis=1) * (1.0 / batch.K)
    return ad.mean(per)


def train_loop(params: OperatorParams, loss_fn: Callable, n: int, epochs: int, batch_size: int,
               seed, lr: float = 1e-3, weight_decay: float = 1e-5):
    """Minibatch Adam on ``loss_fn(P, rows)`` over a fixed epoch budget.

    Returns the trained parameters and the list of mean minibatch losses
    per epoch.
    """
    if n < 1:
        raise ValueError("no training samples")
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be nonnegative and batch size positive")
    rng = stream(int(seed), "shuffle")
    state = ad.AdamState(lr=lr, weight_decay=weight_decay)
    arrays = [np.array(a) for a in params.arrays]
    names = params.names
    history = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, batch_size):
            rows = order[start: start + batch_size]
            value, grads = ad.reverse_gradient(lambda *vs: loss_fn(dict(zip(names, vs)), rows), arrays)
            if not np.isfinite(value):
                raise ad.TrainingDivergedError(
                    f"non-finite loss at epoch {epoch + 1}, rows {rows.tolist()}")
            arrays, state = ad.adam_step(arrays, grads, state)
            losses.append(value)
        history.append(float(np.mean(losses)))
    return params.replace(arrays, epochs=epochs), history


def train_solution_operator(data: ObservationBatch, config, epochs: int = 20, batch: int = 8,
                            seed: int = 0) -> OperatorParams:
    """Fit S-hat by squared error at the observed locations only."""
    if len(data) == 0:
        raise ValueError("empty training data")
    params = init_params(config, stream(int(seed), "s_hat", "init"))

    def loss(P, rows):
        sub = data.subset(rows)
        return observed_mse(apply_operator(config, P, sub.features), sub)

    initial = float(observed_mse(predict(params, data.features), data))
    trained, history = train_loop(params, loss, len(data), epochs, batch, int(seed))
    final = float(observed_mse(predict(trained, data.features), data)) if epochs else initial
    return trained.replace(trained.arrays, seed=int(seed), initial_loss=initial, final_loss=final,
                           history=tuple(history))


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(params: OperatorParams, path) -> None:
    meta = {k: (list(v) if isinstance(v, tuple) else v) for k, v in params.meta.items()}
    doc = {
        "format": 1,
        "config": config_to_dict(params.config),
        "config_hash": config_hash(params.config),
        "meta": meta,
        "arrays": {n: {"shape": list(a.shape), "data": a.ravel().tolist()}
                   for n, a in zip(params.names, params.arrays)},
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path, expected_config=None) -> OperatorParams:
    with open(path) as fh:
        doc = json.load(fh)
    cfg = config_from_dict(doc["config"])
    if config_hash(cfg) != doc["config_hash"]:
        raise CheckpointMismatchError("checkpoint hash does not match its own configuration")
    if expected_config is not None and config_hash(expected_config) != doc["config_hash"]:
        raise CheckpointMismatchError(
            f"checkpoint config {doc['config_hash']} differs from expected {config_hash(expected_config)}")
    names = tuple(doc["arrays"])
    arrays = tuple(np.asarray(v["data"], float).reshape(v["shape"]) for v in doc["arrays"].values())
    return OperatorParams(cfg, names, arrays, doc.get("meta", {}))
