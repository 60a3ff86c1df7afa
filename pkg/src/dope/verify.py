"""Self-contained invariant suites behind ``dope verify``.

Each suite returns a list of :class:`Check` records rather than raising, so
the command line can print every line before choosing its exit code.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import darcy, pk
from .data import stream
from .functionals import KINDS, FunctionalSpec, functional_jvp, functional_value, riesz_representer_wg
from .grid import Grid2D, inner_product
from .operators import (DeepONetConfig, FnoConfig, _pointwise, deeponet_apply, fno_apply, grid_queries, init_params,
                        spectral_conv)


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


def _rel(a, b, floor=1.0):
    return abs(a - b) / (floor + abs(b))


# --------------------------------------------------------------------------
# functionals
# --------------------------------------------------------------------------

def random_trajectory_pairs(n: int, seed: int):
    """PK-like trajectories with random directions on the PK grid."""
    rng = stream(seed, "verify", "pairs")
    grid = pk.default_grid()
    _, u = pk.sample_pk_inputs(n, rng, grid)
    b = rng.standard_normal(u.shape)
    return u, b, grid.weights()


def functional_suite(n_pairs: int = 100, seed: int = 0, rel_repr: float = 1e-10, rel_fd: float = 1e-6,
                     t: float = 1e-5) -> list[Check]:
    """Forward-mode JVP against the closed-form representer and central differences."""
    u, b, w = random_trajectory_pairs(n_pairs, seed)
    checks = []
    for kind in KINDS:
        spec = FunctionalSpec(kind)
        jvp = np.asarray(functional_jvp(spec, u, b, w))
        rep = np.array([inner_product(riesz_representer_wg(spec, u[i], w), b[i], w) for i in range(n_pairs)])
        fd = (functional_value(spec, u + t * b, w) - functional_value(spec, u - t * b, w)) / (2 * t)
        err_rep = float(np.max(np.abs(jvp - rep) / (1.0 + np.abs(jvp))))
        err_fd = float(np.max(np.abs(jvp - fd) / (1.0 + np.abs(jvp))))
        checks.append(Check(f"jvp-representer[{kind}]", err_rep <= rel_repr, f"max rel err {err_rep:.2e}"))
        checks.append(Check(f"jvp-finite-difference[{kind}]", err_fd <= rel_fd, f"max rel err {err_fd:.2e}"))
    return checks


# --------------------------------------------------------------------------
# gradients
# --------------------------------------------------------------------------

def directional_check(fn, params, seed: int, eps: float = 1e-6) -> float:
    """Relative gap between the taped gradient and a central difference along a random direction."""
    rng = stream(seed, "verify", "direction")
    dirs = [rng.standard_normal(np.shape(p)) for p in params]
    _, grads = ad.reverse_gradient(fn, params)
    analytic = sum(float(np.sum(g * d)) for g, d in zip(grads, dirs))
    plus = fn(*[p + eps * d for p, d in zip(params, dirs)])
    minus = fn(*[p - eps * d for p, d in zip(params, dirs)])
    numeric = (float(np.real(plus)) - float(np.real(minus))) / (2 * eps)
    return abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-12)


def _blocks(seed: int):
    rng = stream(seed, "verify", "blocks")
    n, c = 2, 3
    out = {}

    x1 = rng.standard_normal((n, c, 16))
    wr, wi = rng.standard_normal((2, 4, c, c)) * 0.3
    probe1 = rng.standard_normal((n, c, 16))
    out["spectral_conv_1d"] = (lambda h, a, b: ad.sum(spectral_conv(h, a, b, (4,), (16,)) * probe1), [x1, wr, wi])

    x2 = rng.standard_normal((n, c, 9, 9))
    wr2, wi2 = rng.standard_normal((2, 6, 3, c, c)) * 0.3
    probe2 = rng.standard_normal((n, c, 9, 9))
    out["spectral_conv_2d"] = (lambda h, a, b: ad.sum(spectral_conv(h, a, b, (3, 3), (9, 9)) * probe2),
                               [x2, wr2, wi2])

    w = rng.standard_normal((c, 5))
    bias = rng.standard_normal(5)
    probe3 = rng.standard_normal((n, 5, 16))
    out["pointwise"] = (lambda h, a, b: ad.sum(_pointwise(h, a, b, 1) * probe3), [x1, w, bias])

    z = rng.standard_normal((4, 7))
    probe4 = rng.standard_normal((4, 7))
    out["gelu"] = (lambda v: ad.sum(ad.gelu(v) * probe4), [z])

    cfg1 = FnoConfig(4, 6, 1, 2, (5,), (16,))
    P1 = init_params(cfg1, stream(seed, "fno1"))
    feats1 = rng.standard_normal((n, 16, 4))
    probe5 = rng.standard_normal((n, 16))
    names1 = P1.names
    out["fno_1d"] = (lambda *a: ad.sum(fno_apply(cfg1, dict(zip(names1, a)), feats1) * probe5), list(P1.arrays))

    cfg2 = FnoConfig(3, 5, 1, 2, (3, 3), (9, 9))
    P2 = init_params(cfg2, stream(seed, "fno2"))
    feats2 = rng.standard_normal((n, 81, 3))
    probe6 = rng.standard_normal((n, 81))
    names2 = P2.names
    out["fno_2d"] = (lambda *a: ad.sum(fno_apply(cfg2, dict(zip(names2, a)), feats2) * probe6), list(P2.arrays))

    cfg3 = DeepONetConfig(in_channels=2, n_points=10, coord_channels=(1,), branch_hidden=6, trunk_hidden=6,
                          latent_dim=4)
    P3 = init_params(cfg3, stream(seed, "don"))
    feats3 = np.concatenate([rng.standard_normal((n, 10, 1)),
                             np.broadcast_to(np.linspace(0, 1, 10)[None, :, None], (n, 10, 1))], axis=2)
    q = grid_queries(cfg3, feats3)
    probe7 = rng.standard_normal((n, 10))
    names3 = P3.names
    out["deeponet"] = (lambda *a: ad.sum(deeponet_apply(cfg3, dict(zip(names3, a)), feats3, q) * probe7),
                       list(P3.arrays))
    return out


def gradient_suite(seed: int = 0, rel_tol: float = 1e-5) -> list[Check]:
    """Reverse-mode gradients of every backbone block against central differences."""
    checks = []
    for name, (fn, params) in _blocks(seed).items():
        err = directional_check(fn, params, seed)
        checks.append(Check(f"gradient[{name}]", err <= rel_tol, f"rel err {err:.2e}"))
    return checks


# --------------------------------------------------------------------------
# solvers
# --------------------------------------------------------------------------

def rk4_pk(r, cl, v, grid, substeps: int = 20) -> np.ndarray:
    """Classical RK4 on a refined grid with the dosing rate held over each coarse step."""
    r = np.atleast_2d(np.asarray(r, dtype=float))
    k = np.asarray(cl, dtype=float) / np.asarray(v, dtype=float)
    v = np.asarray(v, dtype=float)
    h = grid.dt / substeps
    u = np.zeros_like(r)
    state = np.zeros(r.shape[0])
    for d in range(1, r.shape[1]):
        f = r[:, d - 1] / v

        def rhs(y):
            return -k * y + f

        for _ in range(substeps):
            k1 = rhs(state)
            k2 = rhs(state + 0.5 * h * k1)
            k3 = rhs(state + 0.5 * h * k2)
            k4 = rhs(state + h * k3)
            state = state + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        u[:, d] = state
    return u


def poisson_center_series(terms: int = 199) -> float:
    """u(1/2, 1/2) for -Laplace u = 1 on the unit square, zero boundary (double sine series)."""
    odd = np.arange(1, terms + 1, 2)
    m, n = np.meshgrid(odd, odd, indexing="ij")
    coef = 16.0 / (np.pi ** 4 * m * n * (m ** 2 + n ** 2))
    return float(np.sum(coef * np.sin(m * np.pi / 2) * np.sin(n * np.pi / 2)))


def solver_suite(n_inputs: int = 100, seed: int = 0, rel_l2: float = 1e-3, center_tol: float = 2e-3) -> list[Check]:
    grid = pk.default_grid()
    inputs, u = pk.sample_pk_inputs(n_inputs, stream(seed, "verify", "pk"), grid)
    cl = np.array([a.cl for a in inputs])
    vol = np.array([a.v for a in inputs])
    ref = rk4_pk(np.stack([a.r for a in inputs]), cl, vol, grid)
    w = grid.weights()
    err = np.sqrt(np.sum(w * (u - ref) ** 2, axis=1)) / np.sqrt(np.sum(w * ref ** 2, axis=1))
    checks = [Check("pk-vs-rk4", float(err.max()) < rel_l2, f"max rel L2 {err.max():.2e}")]

    n = darcy.N_SIDE
    from .data import DarcyInput
    u1 = darcy.solve_darcy(DarcyInput(np.ones(n * n), n, n)).reshape(n, n)
    center = u1[n // 2, n // 2]
    oracle = poisson_center_series()
    checks.append(Check("darcy-center", abs(center - oracle) <= center_tol,
                        f"|{center:.6f} - {oracle:.6f}| = {abs(center - oracle):.2e}"))

    rng = stream(seed, "verify", "darcy")
    field = darcy.sample_coefficient(rng).a.reshape(n, n)
    sym = 0.5 * (field + field.T)
    us = darcy.solve_darcy(DarcyInput(sym.ravel(), n, n)).reshape(n, n)
    asym = float(np.max(np.abs(us - us.T)))
    mirror = np.ascontiguousarray(field[::-1, :])
    um = darcy.solve_darcy(DarcyInput(mirror.ravel(), n, n)).reshape(n, n)
    uf = darcy.solve_darcy(DarcyInput(field.ravel(), n, n)).reshape(n, n)
    refl = float(np.max(np.abs(um - uf[::-1, :])))
    checks.append(Check("darcy-symmetry", max(asym, refl) <= 1e-12 * max(1.0, float(np.abs(uf).max())),
                        f"transpose {asym:.1e}, reflection {refl:.1e}"))
    return checks


SUITES = {"functionals": functional_suite, "gradients": gradient_suite, "solvers": solver_suite}


def run_all(seed: int = 0) -> list[Check]:
    out = []
    for fn in SUITES.values():
        out.extend(fn(seed=seed))
    return out
