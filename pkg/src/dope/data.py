"""Observation records, design weights, random streams and dataset files.

The latent trajectory of a simulated sample is stored on the record but is
only reachable through :func:`oracle_trajectory`; estimators work from
``ObservationBatch`` objects, which never carry it.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np


class OverlapError(ValueError):
    """A design puts zero mass on part of the grid."""


class InvalidSampleSizeError(ValueError):
    pass


def stream(seed: int, *names: Any) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by a base seed and a role path.

    ``stream(7, "repeat", 3, "train")`` and ``stream(7, "repeat", 3, "test")``
    are independent, and each is reproducible on its own.
    """
    tag = "/".join(str(n) for n in names).encode()
    words = np.frombuffer(hashlib.sha256(tag).digest()[:16], dtype=np.uint32)
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(seed) >> 32, *map(int, words)])
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class DesignWeights:
    """Sampling distribution over grid points and the inverse design weight.

    ``xi = w / p`` relates the design to the quadrature measure ``w``.
    """

    p: np.ndarray
    xi: np.ndarray

    @classmethod
    def from_mass(cls, p, w) -> "DesignWeights":
        p = np.asarray(p, dtype=float)
        w = np.asarray(w, dtype=float)
        if p.shape != w.shape:
            raise ValueError("design and quadrature weights differ in shape")
        if np.any(p <= 0) or not np.all(np.isfinite(p)):
            raise OverlapError("design mass must be strictly positive on every grid point")
        p = p / p.sum()
        return cls(p=p, xi=w / p)


@dataclass(frozen=True)
class PKInput:
    r: np.ndarray
    log_cl: float
    log_v: float

    @property
    def cl(self) -> float:
        return float(np.exp(self.log_cl))

    @property
    def v(self) -> float:
        return float(np.exp(self.log_v))

    @property
    def channels(self) -> np.ndarray:
        """(m, 3) array [r, log CL, log V] with the scalars broadcast over the grid."""
        n = len(self.r)
        return np.stack([self.r, np.full(n, self.log_cl), np.full(n, self.log_v)], axis=1)


@dataclass(frozen=True)
class DarcyInput:
    a: np.ndarray
    H: int = 17
    W: int = 17

    @property
    def channels(self) -> np.ndarray:
        """(m, 3) array [a, x, y] in row-major flattened order."""
        x = np.linspace(0.0, 1.0, self.H)
        y = np.linspace(0.0, 1.0, self.W)
        xx, yy = np.meshgrid(x, y, indexing="ij")
        return np.stack([self.a, xx.ravel(), yy.ravel()], axis=1)


@dataclass(frozen=True)
class Observation:
    input: Any
    obs_indices: np.ndarray
    y: np.ndarray
    design: DesignWeights
    _latent_u: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        idx = np.asarray(self.obs_indices)
        if idx.ndim != 1 or len(idx) < 1:
            raise ValueError("need at least one observation index")
        if np.any(np.diff(idx) <= 0):
            raise ValueError("observation indices must be strictly increasing")
        if idx[0] < 0 or idx[-1] >= len(self.design.p):
            raise IndexError("observation index outside the grid")
        if len(self.y) != len(idx) or not np.all(np.isfinite(self.y)):
            raise ValueError("observed values must be finite, one per index")

    @property
    def K(self) -> int:
        return len(self.obs_indices)


def oracle_trajectory(obs: Observation) -> np.ndarray:
    """Latent solution on the grid; simulation-only, for oracle and corruption code."""
    if obs._latent_u is None:
        raise LookupError("this observation carries no latent trajectory")
    return obs._latent_u


@dataclass(frozen=True)
class ObservationBatch:
    """Stacked arrays for a list of observations (padded to the largest K)."""

    features: np.ndarray   # (n, m, C) operator input
    idx: np.ndarray        # (n, Kmax) grid indices, padded with 0
    y: np.ndarray          # (n, Kmax)
    mask: np.ndarray       # (n, Kmax) 1.0 for real observations
    p: np.ndarray          # (n, m)
    xi: np.ndarray         # (n, m)

    def __len__(self):
        return self.features.shape[0]

    @property
    def K(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def subset(self, rows) -> "ObservationBatch":
        rows = np.asarray(rows)
        return ObservationBatch(self.features[rows], self.idx[rows], self.y[rows],
                                self.mask[rows], self.p[rows], self.xi[rows])


def stack_observations(observations: Sequence[Observation], features_fn) -> ObservationBatch:
    if len(observations) == 0:
        raise ValueError("no observations")
    kmax = max(o.K for o in observations)
    n = len(observations)
    idx = np.zeros((n, kmax), dtype=np.int64)
    y = np.zeros((n, kmax))
    mask = np.zeros((n, kmax))
    for i, o in enumerate(observations):
        idx[i, : o.K] = o.obs_indices
        y[i, : o.K] = o.y
        mask[i, : o.K] = 1.0
    feats = features_fn([o.input for o in observations])
    p = np.stack([o.design.p for o in observations])
    xi = np.stack([o.design.xi for o in observations])
    return ObservationBatch(feats, idx, y, mask, p, xi)


def stack_latent(observations: Sequence[Observation]) -> np.ndarray:
    return np.stack([oracle_trajectory(o) for o in observations])


def sample_without_replacement(p: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    """K distinct sorted indices with successive (draw, remove, renormalize) sampling.

    Uses exponential race keys ``E_i / p_i``: the order statistics of the keys
    have exactly the successive-sampling distribution.
    """
    p = np.asarray(p, dtype=float)
    if K > len(p):
        raise InvalidSampleSizeError(f"K={K} exceeds grid size {len(p)}")
    if K < 1:
        raise InvalidSampleSizeError("K must be positive")
    keys = rng.standard_exponential(len(p)) / p
    return np.sort(np.argpartition(keys, K - 1)[:K]) if K < len(p) else np.arange(len(p))


def sample_observations(design: DesignWeights, u: np.ndarray, K: int, sigma_eps: float,
                        rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    if sigma_eps < 0:
        raise ValueError("noise level must be nonnegative")
    idx = sample_without_replacement(design.p, K, rng)
    noise = rng.normal(0.0, sigma_eps, size=K) if sigma_eps > 0 else np.zeros(K)
    return idx, u[idx] + noise


# --------------------------------------------------------------------------
# dataset files
# --------------------------------------------------------------------------

def _arr(x):
    return np.asarray(x).tolist()


def dataset_to_json(observations: Sequence[Observation], grid, with_oracle: bool = False) -> dict:
    from .grid import Grid1D

    samples = []
    if isinstance(grid, Grid1D):
        head = {"T": grid.T, "delta": grid.delta}
        for o in observations:
            s = {"r": _arr(o.input.r), "log_cl": float(o.input.log_cl), "log_v": float(o.input.log_v),
                 "obs_indices": _arr(o.obs_indices), "y": _arr(o.y), "p": _arr(o.design.p)}
            if with_oracle:
                s["latent_u"] = _arr(oracle_trajectory(o))
            samples.append(s)
    else:
        head = {"H": grid.H, "W": grid.W}
        for o in observations:
            s = {"a": _arr(o.input.a), "obs_indices": _arr(o.obs_indices), "y": _arr(o.y),
                 "q": _arr(o.design.p)}
            if with_oracle:
                s["latent_u"] = _arr(oracle_trajectory(o))
            samples.append(s)
    return {"grid": head, "samples": samples}


def dataset_from_json(doc: dict):
    """Inverse of :func:`dataset_to_json`; returns (grid, observations)."""
    from .grid import Grid1D, Grid2D

    g = doc["grid"]
    obs = []
    if "delta" in g:
        grid = Grid1D(float(g["T"]), int(g["delta"]))
        w = grid.weights()
        for s in doc["samples"]:
            inp = PKInput(np.asarray(s["r"], float), float(s["log_cl"]), float(s["log_v"]))
            lat = np.asarray(s["latent_u"], float) if "latent_u" in s else None
            obs.append(Observation(inp, np.asarray(s["obs_indices"], np.int64), np.asarray(s["y"], float),
                                   DesignWeights.from_mass(s["p"], w), lat))
    else:
        grid = Grid2D(int(g["H"]), int(g["W"]))
        w = grid.weights()
        for s in doc["samples"]:
            inp = DarcyInput(np.asarray(s["a"], float), grid.H, grid.W)
            lat = np.asarray(s["latent_u"], float) if "latent_u" in s else None
            obs.append(Observation(inp, np.asarray(s["obs_indices"], np.int64), np.asarray(s["y"], float),
                                   DesignWeights.from_mass(s["q"], w), lat))
    return grid, obs


def save_dataset(path, observations, grid, with_oracle=False):
    with open(path, "w") as fh:
        json.dump(dataset_to_json(observations, grid, with_oracle), fh)


def load_dataset(path):
    with open(path) as fh:
        return dataset_from_json(json.load(fh))
