"""One-compartment pharmacokinetics benchmark.

Subjects have correlated log-normal clearance and volume, receive one or two
rectangular infusion pulses, and are observed at K grid times drawn from a
mixture of uniform monitoring and a window around the concentration peak.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import DesignWeights, Observation, PKInput, sample_observations, stream
from .grid import Grid1D

T_HORIZON = 24.0
N_GRID = 128
K_OBS = 24
SIGMA_EPS = 0.002
PEAK_HALF_WIDTH = 5.0
LOG_MEAN = (0.0, 1.0)
LOG_SD = (0.25, 0.20)
LOG_CORR = 0.4


class InvalidParameterError(ValueError):
    pass


def default_grid() -> Grid1D:
    return Grid1D(T_HORIZON, N_GRID)


def sample_pk_params(rng: np.random.Generator, mean=LOG_MEAN, sd=LOG_SD,
                     corr: float = LOG_CORR) -> tuple[float, float]:
    """Draw (CL, V) with (log CL, log V) bivariate normal."""
    z = rng.standard_normal(2)
    s1, s2 = sd
    log_cl = mean[0] + s1 * z[0]
    log_v = mean[1] + s2 * (corr * z[0] + np.sqrt(1.0 - corr ** 2) * z[1])
    return float(np.exp(log_cl)), float(np.exp(log_v))


def dosing_profile(grid: Grid1D, pulses: Sequence[tuple[float, float, float]]) -> np.ndarray:
    """Sum of rectangular pulses given as (start, duration, amplitude)."""
    t = grid.points
    r = np.zeros(grid.size)
    for start, dur, amp in pulses:
        r += amp * ((t >= start) & (t <= min(grid.T, start + dur)))
    return r


def sample_pulses(rng: np.random.Generator, T: float = T_HORIZON) -> list[tuple[float, float, float]]:
    m = int(rng.integers(1, 3))
    pulses = []
    for _ in range(m):
        dur = rng.uniform(1.0, 4.0)
        start = rng.uniform(0.0, T - dur)
        amp = rng.uniform(0.5, 2.0)
        pulses.append((start, dur, amp))
    return pulses


def sample_dosing(rng: np.random.Generator, grid: Grid1D) -> np.ndarray:
    return dosing_profile(grid, sample_pulses(rng, grid.T))


def solve_pk(r, cl, v, grid: Grid1D) -> np.ndarray:
    """Exact exponential-integrator recursion for du/dt = -(CL/V) u + r/V, u(0)=0.

    The forcing is held at its left-endpoint value over each step.  Accepts a
    single profile ``(m,)`` or a batch ``(n, m)`` with matching CL, V arrays.
    """
    r = np.asarray(r, dtype=float)
    cl = np.asarray(cl, dtype=float)
    v = np.asarray(v, dtype=float)
    if np.any(cl <= 0) or np.any(v <= 0):
        raise InvalidParameterError("clearance and volume must be positive")
    batch = r.ndim == 2
    r2 = r if batch else r[None, :]
    cl = np.broadcast_to(cl, r2.shape[:1]).astype(float)
    v = np.broadcast_to(v, r2.shape[:1]).astype(float)
    k = cl / v
    dt = grid.dt
    kdt = k * dt
    small = kdt < 1e-10
    decay = np.exp(-kdt)
    gain = np.where(small, dt, -np.expm1(-kdt) / np.where(small, 1.0, k))
    decay = np.where(small, 1.0, decay)
    u = np.zeros_like(r2)
    for d in range(1, r2.shape[1]):
        u[:, d] = decay * u[:, d - 1] + r2[:, d - 1] / v * gain
    return u if batch else u[0]


def pk_design(u: np.ndarray, grid: Grid1D, rho: float, h: float = PEAK_HALF_WIDTH) -> DesignWeights:
    """Peak-window mixture (1 - rho/5)/m + (rho/5) * window mass."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    if h <= 0:
        raise ValueError("window half-width must be positive")
    t = grid.points
    tau = t[int(np.argmax(u))]
    window = (np.abs(t - tau) <= h).astype(float)
    q = window / window.sum()
    m = grid.size
    p = (1.0 - rho / 5.0) / m + (rho / 5.0) * q
    return DesignWeights.from_mass(p, grid.weights())


def pk_features(inputs: Sequence[PKInput], grid: Grid1D | None = None) -> np.ndarray:
    """Operator input (n, m, 4): the three input channels plus normalized time."""
    grid = grid or default_grid()
    tt = grid.points / grid.T
    return np.stack([np.column_stack([a.channels, tt]) for a in inputs])


def simulate_pk_subject(rng: np.random.Generator, grid: Grid1D, rho: float, K: int = K_OBS,
                        sigma_eps: float = SIGMA_EPS, h: float = PEAK_HALF_WIDTH) -> Observation:
    cl, v = sample_pk_params(rng)
    r = sample_dosing(rng, grid)
    u = solve_pk(r, cl, v, grid)
    design = pk_design(u, grid, rho, h)
    idx, y = sample_observations(design, u, K, sigma_eps, rng)
    return Observation(PKInput(r, float(np.log(cl)), float(np.log(v))), idx, y, design, u)


def generate_pk_dataset(n: int, rho: float, seed, grid: Grid1D | None = None, K: int = K_OBS,
                        sigma_eps: float = SIGMA_EPS, h: float = PEAK_HALF_WIDTH) -> list[Observation]:
    """n i.i.d. subjects; ``seed`` is an int or a ``numpy.random.Generator``."""
    if n < 1:
        raise ValueError("n must be positive")
    grid = grid or default_grid()
    rng = seed if isinstance(seed, np.random.Generator) else stream(int(seed), "pk")
    return [simulate_pk_subject(rng, grid, rho, K, sigma_eps, h) for _ in range(n)]


def sample_pk_inputs(n: int, rng: np.random.Generator, grid: Grid1D | None = None):
    """Inputs and latent trajectories only (no observation design), batched."""
    grid = grid or default_grid()
    inputs = []
    for _ in range(n):
        cl, v = sample_pk_params(rng)
        inputs.append(PKInput(sample_dosing(rng, grid), float(np.log(cl)), float(np.log(v))))
    r = np.stack([a.r for a in inputs])
    u = solve_pk(r, np.array([a.cl for a in inputs]), np.array([a.v for a in inputs]), grid)
    return inputs, u
