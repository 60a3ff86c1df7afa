"""Plug-in, one-step (DOPE) and PPI estimators of an averaged functional.

Notation: for an input A with fitted trajectory u-hat = S-hat(A) on the grid
and observations (X_k, Y_k), the pseudo-outcome is

    psi = g(u-hat) + (1/K) sum_k beta-hat(A)(X_k) * (Y_k - u-hat(X_k)),

the estimate is the mean of psi, and its variance estimate is
(1/n^2) sum (psi_i - theta-hat)^2.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Observation, ObservationBatch, stack_latent, stack_observations, stream
from .functionals import FunctionalSpec, functional_value
from .operators import OperatorParams, config_hash, predict, train_solution_operator
from .riesz import BetaModel, train_riesz

Z_95 = 1.959963984540054


class DegenerateVarianceError(ValueError):
    pass


@dataclass(frozen=True)
class FoldAssignment:
    folds: np.ndarray
    J: int

    def __post_init__(self):
        if self.J < 2:
            raise ValueError("cross-fitting needs at least two folds")
        counts = np.bincount(self.folds, minlength=self.J)
        if len(counts) != self.J or np.any(counts == 0):
            raise ValueError("every fold must be nonempty")

    @classmethod
    def balanced(cls, n: int, J: int, rng: np.random.Generator) -> "FoldAssignment":
        if J < 2:
            raise ValueError("cross-fitting needs at least two folds")
        if n < 2 * J:
            raise ValueError(f"need at least {2 * J} samples for {J} folds, got {n}")
        return cls(rng.permutation(np.arange(n) % J), J)

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.folds == j)

    def complement(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.folds != j)


@dataclass(frozen=True)
class EstimateReport:
    theta_hat: float
    pseudo_outcomes: np.ndarray
    variance_hat: float
    ci: tuple
    method: str
    meta: dict = field(default_factory=dict)
    plugin_values: np.ndarray | None = None
    corrections: np.ndarray | None = None

    def __post_init__(self):
        if not self.variance_hat >= 0:
            raise ValueError("variance estimate must be nonnegative")
        lo, hi = self.ci
        if not lo <= self.theta_hat <= hi:
            raise ValueError("confidence interval must contain the estimate")
        psi = np.asarray(self.pseudo_outcomes, dtype=float)
        if psi.size and abs(psi.mean() - self.theta_hat) > 1e-9 * (1.0 + abs(self.theta_hat)):
            raise ValueError("estimate must equal the pseudo-outcome mean")

    @property
    def se(self) -> float:
        return float(np.sqrt(self.variance_hat))

    def covers(self, truth: float) -> bool:
        return bool(self.ci[0] <= truth <= self.ci[1])

    def to_dict(self) -> dict:
        out = {"method": self.method, "theta_hat": self.theta_hat, "variance_hat": self.variance_hat,
               "se": self.se, "ci": list(self.ci), "pseudo_outcomes": np.asarray(self.pseudo_outcomes).tolist(),
               "meta": self.meta}
        if self.plugin_values is not None:
            out["plugin_values"] = np.asarray(self.plugin_values).tolist()
        if self.corrections is not None:
            out["corrections"] = np.asarray(self.corrections).tolist()
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), default=_jsonable)


def _jsonable(x):
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def variance_and_ci(pseudo_outcomes) -> tuple[float, tuple[float, float]]:
    """V-hat = (1/n^2) sum (psi_i - mean)^2 and the 95% normal interval."""
    psi = np.asarray(pseudo_outcomes, dtype=float)
    n = psi.size
    if n < 2:
        raise DegenerateVarianceError("variance needs at least two pseudo-outcomes")
    theta = psi.mean()
    v = float(np.sum((psi - theta) ** 2) / n ** 2)
    half = Z_95 * np.sqrt(v)
    return v, (float(theta - half), float(theta + half))


def _report(psi, method, meta, plugin_values=None, corrections=None) -> EstimateReport:
    psi = np.asarray(psi, dtype=float)
    theta = float(psi.mean())
    if psi.size < 2:
        return EstimateReport(theta, psi, 0.0, (theta, theta), method, {**meta, "degenerate_ci": True},
                              plugin_values, corrections)
    v, ci = variance_and_ci(psi)
    return EstimateReport(theta, psi, v, ci, method, meta, plugin_values, corrections)


# --------------------------------------------------------------------------
# pseudo-outcomes
# --------------------------------------------------------------------------

def weighted_residuals(s_pred, beta_grid, batch: ObservationBatch) -> np.ndarray:
    """(1/K_i) sum_k beta_i(X_ik) (Y_ik - u-hat_i(X_ik)) for each sample."""
    s_pred = np.asarray(s_pred, dtype=float)
    beta_grid = np.asarray(beta_grid, dtype=float)
    if np.any(batch.idx >= s_pred.shape[1]) or np.any(batch.idx < 0):
        raise IndexError("observation index outside the grid")
    u_obs = np.take_along_axis(s_pred, batch.idx, axis=1)
    b_obs = np.take_along_axis(beta_grid, batch.idx, axis=1)
    return np.sum(b_obs * (batch.y - u_obs) * batch.mask, axis=1) / batch.K


def pseudo_outcomes(s_pred, beta_grid, batch: ObservationBatch, spec: FunctionalSpec, w):
    """Return (plug-in values, corrections); their sum is the pseudo-outcome."""
    plug = np.atleast_1d(functional_value(spec, s_pred, w))
    return plug, weighted_residuals(s_pred, beta_grid, batch)


def pseudo_outcome(s_hat: OperatorParams, beta: BetaModel, obs: Observation, spec: FunctionalSpec,
                   w, features_fn: Callable, latent=None) -> float:
    """Pseudo-outcome of a single observation record."""
    batch = stack_observations([obs], features_fn)
    s_pred = predict(s_hat, batch.features)
    lat = None if latent is None else np.atleast_2d(latent)
    grid = beta.on_grid(batch, latent=lat, s_pred=s_pred)
    plug, corr = pseudo_outcomes(s_pred, grid, batch, spec, w)
    return float(plug[0] + corr[0])


# --------------------------------------------------------------------------
# estimators
# --------------------------------------------------------------------------

def plugin_from_values(vals, meta: dict | None = None) -> EstimateReport:
    """Plug-in report from per-input values g(S-hat(A_i)); variance = sample variance / n."""
    vals = np.atleast_1d(np.asarray(vals, dtype=float))
    n = vals.size
    if n == 0:
        raise ValueError("no inputs")
    theta = float(vals.mean())
    meta = dict(meta or {})
    if n < 2:
        return EstimateReport(theta, vals, 0.0, (theta, theta), "plugin", {**meta, "degenerate_ci": True}, vals)
    v = float(vals.var(ddof=1) / n)
    half = Z_95 * np.sqrt(v)
    return EstimateReport(theta, vals, v, (theta - half, theta + half), "plugin", meta, vals)


def plugin_from_predictions(preds, spec: FunctionalSpec, w, meta: dict | None = None) -> EstimateReport:
    """Mean of g over predicted trajectories ``(n, m)``."""
    preds = np.atleast_2d(np.asarray(preds, dtype=float))
    if preds.shape[0] == 0:
        raise ValueError("no inputs")
    return plugin_from_values(functional_value(spec, preds, w), meta)


def plugin_estimate(s_hat: OperatorParams, inputs, spec: FunctionalSpec, w) -> EstimateReport:
    """Plug-in estimate from a fitted operator and input features ``(n, m, C)``."""
    feats = np.asarray(inputs, dtype=float)
    if feats.ndim != 3 or feats.shape[0] == 0:
        raise ValueError("need a nonempty (n, m, C) feature array")
    return plugin_from_predictions(predict(s_hat, feats), spec, w, {"config_hash": config_hash(s_hat.config)})


def dope_from_nuisances(batch: ObservationBatch, s_pred, beta_grid, spec: FunctionalSpec, w,
                        method: str = "dope", meta: dict | None = None) -> EstimateReport:
    plug, corr = pseudo_outcomes(s_pred, beta_grid, batch, spec, w)
    return _report(plug + corr, method, dict(meta or {}), plug, corr)


@dataclass(frozen=True)
class FoldFit:
    """Nuisances fitted without one fold; ``betas`` is keyed by (functional json, mode)."""

    fold: int
    held: np.ndarray
    s_hat: OperatorParams
    betas: dict


def fit_crossfit(data: Sequence[Observation], specs: Sequence[FunctionalSpec], backbone,
                 beta_modes: Sequence[str], w, features_fn: Callable, J: int = 2, seed: int = 0,
                 s_hat: OperatorParams | None = None, aux_train: Sequence[Observation] = (),
                 epochs: int = 20, lambda_reg: float = 0.1) -> tuple[FoldAssignment, list[FoldFit]]:
    """Train S-hat, then beta-hat for every (functional, mode), on each fold's complement.

    A supplied ``s_hat`` replaces the per-fold solution operator, and
    ``aux_train`` records join every fold's training set.
    """
    data = list(data)
    if J < 2:
        raise ValueError("cross-fitting needs J >= 2")
    if len(data) < 2 * J:
        raise ValueError(f"need at least {2 * J} samples for {J}-fold cross-fitting")
    folds = FoldAssignment.balanced(len(data), J, stream(seed, "folds"))
    aux = list(aux_train)
    fits = []
    for j in range(J):
        train = [data[i] for i in folds.complement(j)] + aux
        train_batch = stack_observations(train, features_fn)
        s_j = s_hat if s_hat is not None else train_solution_operator(
            train_batch, backbone, epochs=epochs, seed=int(stream(seed, "fold", j, "s").integers(2 ** 31)))
        betas = {}
        for spec in specs:
            for mode in beta_modes:
                beta_seed = int(stream(seed, "fold", j, "beta", spec.to_json(), mode).integers(2 ** 31))
                betas[(spec.to_json(), mode)] = train_riesz(train_batch, mode, spec, s_j, backbone, beta_seed, w,
                                                            epochs=epochs, lambda_reg=lambda_reg)
        fits.append(FoldFit(j, folds.members(j), s_j, betas))
    return folds, fits


def crossfit_terms(batch: ObservationBatch, fits: Sequence[FoldFit], spec: FunctionalSpec, mode: str, w,
                   latent=None) -> tuple[np.ndarray, np.ndarray]:
    """Held-out plug-in values and corrections for every sample."""
    plug = np.empty(len(batch))
    corr = np.empty(len(batch))
    for fit in fits:
        sub = batch.subset(fit.held)
        s_pred = predict(fit.s_hat, sub.features)
        beta = fit.betas[(spec.to_json(), mode)]
        grid = beta.on_grid(sub, latent=None if latent is None else latent[fit.held], s_pred=s_pred)
        plug[fit.held], corr[fit.held] = pseudo_outcomes(s_pred, grid, sub, spec, w)
    return plug, corr


METHOD_OF_MODE = {"unstructured": "dope", "structured": "dope_structured", "oracle": "dope_oracle"}


def dope_crossfit(data: Sequence[Observation], spec: FunctionalSpec, backbone, beta_mode: str, w,
                  features_fn: Callable, J: int = 2, seed: int = 0, s_hat: OperatorParams | None = None,
                  aux_train: Sequence[Observation] = (), epochs: int = 20,
                  lambda_reg: float = 0.1) -> EstimateReport:
    """Cross-fitted one-step estimator.

    For each fold, S-hat (unless a pre-fitted ``s_hat`` is supplied) and then
    beta-hat are trained on the other folds, together with any ``aux_train``
    records, and pseudo-outcomes are evaluated on the held-out fold.
    """
    data = list(data)
    folds, fits = fit_crossfit(data, [spec], backbone, [beta_mode], w, features_fn, J, seed,
                               s_hat, aux_train, epochs, lambda_reg)
    batch = stack_observations(data, features_fn)
    latent = stack_latent(data) if beta_mode == "oracle" else None
    plug, corr = crossfit_terms(batch, fits, spec, beta_mode, w, latent)
    per_fold = [{"fold": f.fold, "n_eval": int(len(f.held)), "s_hat_final_loss": f.s_hat.meta.get("final_loss")}
                for f in fits]
    meta = {"seed": seed, "config_hash": config_hash(backbone), "J": J, "beta_mode": beta_mode,
            "folds": folds.folds.tolist(), "per_fold": per_fold}
    return _report(plug + corr, METHOD_OF_MODE[beta_mode], meta, plug, corr)


def ppi_estimate(labeled: ObservationBatch, unlabeled_inputs, s_hat: OperatorParams, beta: BetaModel,
                 spec: FunctionalSpec, w, latent=None) -> EstimateReport:
    """Plug-in average over labeled and unlabeled inputs plus the labeled correction.

    ``latent`` (labeled trajectories) is only needed for an oracle beta.
    """
    n1 = len(labeled)
    if n1 == 0:
        raise ValueError("PPI needs at least one labeled sample")
    s_lab = predict(s_hat, labeled.features)
    grid = beta.on_grid(labeled, latent=latent, s_pred=s_lab)
    g_lab, corr = pseudo_outcomes(s_lab, grid, labeled, spec, w)
    unl = np.asarray(unlabeled_inputs, dtype=float)
    g_unl = np.atleast_1d(functional_value(spec, predict(s_hat, unl), w)) if len(unl) else np.empty(0)
    return ppi_from_terms(g_lab, corr, g_unl)


def ppi_from_terms(g_lab, corr, g_unl, meta: dict | None = None) -> EstimateReport:
    """theta = mean(g over all N = n1 + n2 inputs) + mean(correction over n1 labeled).

    The variance keeps the covariance between the two means, so with no
    unlabeled inputs it reduces to the ordinary pseudo-outcome variance.
    """
    g_lab = np.asarray(g_lab, dtype=float)
    corr = np.asarray(corr, dtype=float)
    g_unl = np.asarray(g_unl, dtype=float)
    n1, n2 = len(g_lab), len(g_unl)
    if n1 == 0:
        raise ValueError("PPI needs at least one labeled sample")
    N = n1 + n2
    g_all = np.concatenate([g_lab, g_unl])
    theta = float(g_all.mean() + corr.mean())
    meta = {"n_labeled": n1, "n_unlabeled": n2, **(meta or {})}
    if n1 < 2:
        return EstimateReport(theta, g_lab + corr, 0.0, (theta, theta), "dope_ppi",
                              {**meta, "degenerate_ci": True}, g_all, corr)
    s_g = np.mean((g_all - g_all.mean()) ** 2)
    s_c = np.mean((corr - corr.mean()) ** 2)
    s_gc = np.mean((g_lab - g_all.mean()) * (corr - corr.mean()))
    v = float(max(s_g / N + s_c / n1 + 2.0 * s_gc * n1 / (N * n1), 0.0))
    half = Z_95 * np.sqrt(v)
    psi = g_lab + corr + (g_all.mean() - g_lab.mean())
    return EstimateReport(theta, psi, v, (theta - half, theta + half), "dope_ppi", meta, g_all, corr)


def corrupt_nuisance(which: str, fitted, oracle, delta: float) -> np.ndarray:
    """oracle + (1 + delta) * (fitted - oracle), pointwise on the grid."""
    if which not in ("S", "beta"):
        raise ValueError("which must be 'S' or 'beta'")
    if oracle is None:
        raise LookupError("corruption needs the oracle nuisance")
    if not 0.0 <= delta <= 0.5:
        raise ValueError("delta must lie in [0, 0.5]")
    fitted = np.asarray(fitted, dtype=float)
    oracle = np.asarray(oracle, dtype=float)
    return oracle + (1.0 + delta) * (fitted - oracle)


def truth_from_pool(latent_pool, spec: FunctionalSpec, w) -> float:
    """Ground-truth theta as the mean of g over a pool of latent trajectories."""
    return float(np.mean(functional_value(spec, np.atleast_2d(latent_pool), w)))
