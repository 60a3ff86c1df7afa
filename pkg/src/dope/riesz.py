"""Debiasing weights by Riesz regression.

The weight beta minimizes the population objective

    E[ (1/K) sum_k beta(A)(X_k)^2 - 2 Dg_{S(A)}[beta(A)] ],

whose unique minimizer is the design-space representer xi * w_g(S(A)).
Nothing here inverts an estimated design density: the representer is
learned from the observed locations and the functional's JVP alone.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .data import DesignWeights, ObservationBatch, OverlapError, stream
from .functionals import FunctionalSpec, functional_jvp, riesz_representer_wg
from .operators import OperatorParams, apply_operator, init_params, predict, train_loop

MODES = ("unstructured", "structured", "oracle")
LOG_XI_CLAMP = 10.0


@dataclass(frozen=True)
class BetaModel:
    """A debiasing weight operator.

    ``unstructured``: the backbone output is beta itself.
    ``structured``: the backbone outputs log xi-hat, and
    beta = exp(clip(log xi-hat, +-10)) * w_g(S-hat(A)).
    ``oracle``: beta_0 = xi_0 * w_g(S_0(A)) from the simulator's latent state.
    """

    mode: str
    spec: FunctionalSpec
    w: np.ndarray
    params: OperatorParams | None = None
    s_hat: OperatorParams | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown beta mode {self.mode!r}")
        if self.mode != "oracle" and self.params is None:
            raise ValueError("a learned beta needs backbone parameters")
        if self.mode == "structured" and self.s_hat is None:
            raise ValueError("structured beta needs the fitted solution operator")

    def xi_hat(self, features) -> np.ndarray:
        if self.mode != "structured":
            raise ValueError("xi-hat exists only in structured mode")
        return np.exp(np.clip(predict(self.params, features), -LOG_XI_CLAMP, LOG_XI_CLAMP))

    def on_grid(self, batch: ObservationBatch, latent=None, s_pred=None) -> np.ndarray:
        """beta(A_i)(x) for every grid point, shape ``(n, m)``.

        ``latent`` is required by the oracle; ``s_pred`` optionally reuses
        S-hat predictions in structured mode.
        """
        if self.mode == "oracle":
            if latent is None:
                raise LookupError("oracle beta needs the latent trajectories")
            return batch.xi * riesz_representer_wg(self.spec, latent, self.w)
        if self.mode == "unstructured":
            return predict(self.params, batch.features)
        if s_pred is None:
            s_pred = predict(self.s_hat, batch.features)
        return self.xi_hat(batch.features) * riesz_representer_wg(self.spec, s_pred, self.w)


def oracle_beta(design: DesignWeights, spec: FunctionalSpec, latent_u) -> np.ndarray:
    """beta_0 = xi_0 * w_g(S_0(A)) on the grid."""
    p = np.asarray(design.p)
    if np.any(p <= 0):
        raise OverlapError("design has zero mass somewhere; beta_0 is undefined")
    w = design.xi * p
    return design.xi * riesz_representer_wg(spec, latent_u, w)


def oracle_model(spec: FunctionalSpec, w) -> BetaModel:
    return BetaModel("oracle", spec, np.asarray(w, dtype=float))


def _objective(beta_grid, batch: ObservationBatch, spec, s_pred, w):
    """Data part of the empirical Riesz loss for ``beta_grid`` of shape (n, m)."""
    at_obs = ad.take_along_axis(beta_grid, batch.idx, axis=1) * batch.mask
    quad = ad.sum(at_obs * at_obs, axis=1) * (1.0 / batch.K)
    lin = functional_jvp(spec, s_pred, beta_grid, w)
    return ad.mean(quad - lin * 2.0)


def _sq_norm(arrays):
    total = 0.0
    for a in arrays:
        total = total + ad.sum(a * a)
    return total


def _beta_grid(mode, cfg, P, features, wg):
    out = apply_operator(cfg, P, features)
    if mode == "structured":
        return ad.exp(ad.clip(out, -LOG_XI_CLAMP, LOG_XI_CLAMP)) * wg
    return out


def riesz_loss(beta: BetaModel, batch: ObservationBatch, spec: FunctionalSpec, s_hat: OperatorParams,
               lambda_reg: float = 0.1, w=None, latent=None) -> float:
    """Penalized empirical Riesz loss of a fitted weight on ``batch``."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    w = beta.w if w is None else np.asarray(w, dtype=float)
    s_pred = predict(s_hat, batch.features)
    grid = beta.on_grid(batch, latent=latent, s_pred=s_pred)
    value = float(_objective(grid, batch, spec, s_pred, w))
    if beta.params is not None:
        value += lambda_reg * float(_sq_norm(beta.params.arrays))
    if not np.isfinite(value):
        raise ad.TrainingDivergedError("Riesz loss is not finite")
    return value


def train_riesz(data: ObservationBatch, mode: str, spec: FunctionalSpec, s_hat: OperatorParams | None,
                config, seed: int, w, epochs: int = 20, batch: int = 8, lambda_reg: float = 0.1) -> BetaModel:
    """Fit beta-hat by minibatch Adam on the penalized Riesz loss."""
    w = np.asarray(w, dtype=float)
    if mode == "oracle":
        return oracle_model(spec, w)
    if mode not in MODES:
        raise ValueError(f"unknown beta mode {mode!r}")
    if s_hat is None:
        raise ValueError("Riesz regression needs a fitted solution operator")
    if len(data) == 0:
        raise ValueError("empty training data")
    s_pred = predict(s_hat, data.features)
    wg = riesz_representer_wg(spec, s_pred, w)
    params = init_params(config, stream(int(seed), "beta", mode, "init"))
    names = params.names

    def loss(P, rows):
        sub = data.subset(rows)
        grid = _beta_grid(mode, config, P, sub.features, wg[rows])
        reg = _sq_norm([P[n] for n in names])
        return _objective(grid, sub, spec, s_pred[rows], w) + reg * lambda_reg

    trained, history = train_loop(params, loss, len(data), epochs, batch, int(seed) + 7919)
    trained = trained.replace(trained.arrays, seed=int(seed), history=tuple(history), mode=mode)
    return BetaModel(mode, spec, w, trained, s_hat if mode == "structured" else None)
