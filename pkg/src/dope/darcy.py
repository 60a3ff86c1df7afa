"""Two-dimensional Darcy-flow benchmark.

Coefficient fields are piecewise constant on a 5x5 partition of the unit
square, the state solves -div(a grad u) = 1 with zero Dirichlet data on a
17x17 finite-difference grid, and observation locations follow a saliency
driven design that favors low-permeability, steep regions.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .data import DarcyInput, DesignWeights, Observation, sample_observations, stream
from .grid import Grid2D

N_SIDE = 17
COARSE = 5
N_MODES = 3
LOG_SCALE = 0.65
A_MIN = 0.2
K_OBS = 24
SIGMA_EPS = 0.01
DESIGN_TEMPERATURE = 7.0
DESIGN_FLOOR = 1e-3


def default_grid() -> Grid2D:
    return Grid2D(N_SIDE, N_SIDE)


def _coarse_basis() -> np.ndarray:
    """(3, 3, 5, 5) tensor of sqrt(2)cos(pi mx x) sqrt(2)cos(pi my y) on the coarse nodes."""
    xs = np.arange(COARSE) / (COARSE - 1)
    m = np.arange(1, N_MODES + 1)
    c = np.sqrt(2.0) * np.cos(np.pi * m[:, None] * xs[None, :])  # (3, 5)
    return np.einsum("ar,bs->abrs", c, c)


_BASIS = _coarse_basis()


def _cell_index(n: int) -> np.ndarray:
    x = np.linspace(0.0, 1.0, n)
    return np.minimum((x * COARSE).astype(int), COARSE - 1)


def coefficient_from_modes(xi: np.ndarray, H: int = N_SIDE, W: int = N_SIDE) -> DarcyInput:
    """Map a (3, 3) array of mode coefficients to the fine piecewise-constant field."""
    z = LOG_SCALE / N_MODES * np.einsum("ab,abrs->rs", np.asarray(xi, dtype=float), _BASIS)
    coarse = np.maximum(np.exp(z), A_MIN)
    fine = coarse[np.ix_(_cell_index(H), _cell_index(W))]
    return DarcyInput(fine.ravel(), H, W)


def sample_coefficient(rng: np.random.Generator, H: int = N_SIDE, W: int = N_SIDE) -> DarcyInput:
    return coefficient_from_modes(rng.standard_normal((N_MODES, N_MODES)), H, W)


def harmonic_mean(a, b):
    return 2.0 * a * b / (a + b)


def solve_darcy(inp: DarcyInput) -> np.ndarray:
    """Finite-difference solve with harmonic-mean interface coefficients.

    Returns the flattened (H*W,) solution with zero boundary values.
    """
    H, W = inp.H, inp.W
    a = np.asarray(inp.a, dtype=float).reshape(H, W)
    if np.any(a <= 0):
        raise ValueError("coefficient must be positive")
    h = 1.0 / (H - 1)
    hy = 1.0 / (W - 1)
    ni, nj = H - 2, W - 2
    n = ni * nj
    ii, jj = np.meshgrid(np.arange(1, H - 1), np.arange(1, W - 1), indexing="ij")
    ii, jj = ii.ravel(), jj.ravel()
    row = (ii - 1) * nj + (jj - 1)
    A = np.zeros((n, n))
    for di, dj, scale in ((-1, 0, h), (1, 0, h), (0, -1, hy), (0, 1, hy)):
        coef = harmonic_mean(a[ii, jj], a[ii + di, jj + dj]) / scale ** 2
        A[row, row] += coef
        ni_, nj_ = ii + di, jj + dj
        inside = (ni_ >= 1) & (ni_ <= H - 2) & (nj_ >= 1) & (nj_ <= W - 2)
        A[row[inside], (ni_[inside] - 1) * nj + (nj_[inside] - 1)] -= coef[inside]
    sol = np.linalg.solve(A, np.ones(n))
    u = np.zeros((H, W))
    u[1:-1, 1:-1] = sol.reshape(ni, nj)
    return u.ravel()


def gradient_magnitude(u: np.ndarray) -> np.ndarray:
    """sqrt of squared two-cell differences; one-sided (doubled) at boundary nodes."""
    gx, gy = np.gradient(u)
    return 2.0 * np.sqrt(gx ** 2 + gy ** 2)


def darcy_design(inp: DarcyInput, u: np.ndarray, lambda_d: float = DESIGN_TEMPERATURE,
                 eps_floor: float = DESIGN_FLOOR) -> DesignWeights:
    """Inverse-energy saliency design q ~ exp(lambda |S~|) + eps."""
    H, W = inp.H, inp.W
    a = np.asarray(inp.a, dtype=float).reshape(H, W)
    uu = np.asarray(u, dtype=float).reshape(H, W)
    sal = (1.0 / np.maximum(a, 1e-8)) * (0.5 + np.abs(uu) + gradient_magnitude(uu))
    centered = sal - sal.mean()
    scale = np.abs(centered).max()
    s_tilde = centered / scale if scale > 0 else np.zeros_like(centered)
    q = np.exp(lambda_d * np.abs(s_tilde)) + eps_floor
    return DesignWeights.from_mass(q.ravel() / q.sum(), Grid2D(H, W).weights())


def darcy_features(inputs: Sequence[DarcyInput]) -> np.ndarray:
    """Operator input (n, H*W, 3): [a, x, y]."""
    return np.stack([a.channels for a in inputs])


def simulate_darcy_sample(rng: np.random.Generator, K: int = K_OBS, sigma_eps: float = SIGMA_EPS,
                          lambda_d: float = DESIGN_TEMPERATURE, eps_floor: float = DESIGN_FLOOR) -> Observation:
    inp = sample_coefficient(rng)
    u = solve_darcy(inp)
    design = darcy_design(inp, u, lambda_d, eps_floor)
    idx, y = sample_observations(design, u, K, sigma_eps, rng)
    return Observation(inp, idx, y, design, u)


def generate_darcy_dataset(n: int, seed, K: int = K_OBS, sigma_eps: float = SIGMA_EPS) -> list[Observation]:
    """n i.i.d. samples.  The functional sharpness sweep does not enter the data."""
    if n < 1:
        raise ValueError("n must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else stream(int(seed), "darcy")
    return [simulate_darcy_sample(rng, K, sigma_eps) for _ in range(n)]


def sample_darcy_inputs(n: int, rng: np.random.Generator):
    inputs = [sample_coefficient(rng) for _ in range(n)]
    return inputs, np.stack([solve_darcy(a) for a in inputs])
