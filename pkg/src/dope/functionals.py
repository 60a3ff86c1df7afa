"""Target functionals of a discretized trajectory.

Each functional is written once, in :func:`_evaluate`, against the
type-dispatching primitives of :mod:`dope.autodiff`; the value is that code on
arrays and the JVP is the same code on dual numbers.  The closed-form Riesz
representers in :func:`riesz_representer_wg` are an independent
implementation used for cross-checks and for the structured debiasing weight.

All functions accept a single grid function of shape ``(m,)`` or a batch of
shape ``(n, m)``; quadrature weights have shape ``(m,)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import expit

from . import autodiff as ad

KINDS = ("auc", "tat", "soft_cmax", "smooth_excess")


class NumericInputError(ValueError):
    """Non-finite trajectory values."""


@dataclass(frozen=True)
class FunctionalSpec:
    """Target functional and its hyperparameters.

    Only the fields relevant to ``kind`` are used: ``kappa`` and ``c_star``
    for ``tat``, ``lam`` for ``soft_cmax``, ``kappa_star`` and ``c`` for
    ``smooth_excess``.
    """

    kind: str
    kappa: float = 8.0
    c_star: float = 0.5
    lam: float = 6.0
    kappa_star: float = 7.5
    c: float = 0.5

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown functional kind {self.kind!r}; expected one of {KINDS}")
        for name in ("kappa", "lam", "kappa_star"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @classmethod
    def darcy_excess(cls, kappa: float, c: float = 0.5) -> "FunctionalSpec":
        """Smooth excess for the Darcy sweep: sharpness 7.5 + 2.5 * kappa."""
        return cls("smooth_excess", kappa_star=7.5 + 2.5 * float(kappa), c=c)

    def params(self) -> dict:
        keep = {"auc": (), "tat": ("kappa", "c_star"), "soft_cmax": ("lam",),
                "smooth_excess": ("kappa_star", "c")}[self.kind]
        return {k: v for k, v in asdict(self).items() if k in keep}

    def to_dict(self) -> dict:
        out = {"kind": self.kind}
        for k, v in self.params().items():
            out["lambda" if k == "lam" else k] = v
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "FunctionalSpec":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "FunctionalSpec":
        return cls.from_dict(json.loads(s))


def _check(u):
    arr = np.asarray(ad.value_of(u))
    if not np.all(np.isfinite(arr)):
        raise NumericInputError("trajectory contains NaN or Inf")


def _evaluate(spec: FunctionalSpec, u, w):
    """Discretized functional, summed over the last axis."""
    if spec.kind == "auc":
        return ad.sum(u * w, axis=-1)
    if spec.kind == "tat":
        return ad.sum(ad.sigmoid((u - spec.c_star) * spec.kappa) * w, axis=-1)
    if spec.kind == "soft_cmax":
        # shift is a constant of the primal; the expression is invariant to it
        shift = np.max(np.asarray(ad.value_of(u)), axis=-1, keepdims=True)
        s = ad.sum(ad.exp((u - shift) * spec.lam) * w, axis=-1)
        return ad.log(s) * (1.0 / spec.lam) + shift[..., 0]
    return ad.sum(ad.softplus((u - spec.c) * spec.kappa_star) * w, axis=-1) * (1.0 / spec.kappa_star)


def functional_value(spec: FunctionalSpec, u, w):
    u = np.asarray(u, dtype=float)
    _check(u)
    w = np.asarray(w, dtype=float)
    if u.shape[-1] != w.shape[-1]:
        raise ValueError(f"trajectory length {u.shape[-1]} does not match {w.shape[-1]} weights")
    out = _evaluate(spec, u, w)
    return float(out) if np.ndim(out) == 0 else np.asarray(out)


def functional_jvp(spec: FunctionalSpec, u, b, w):
    """d/dt g(u + t b) at t = 0 via forward-mode evaluation of the functional.

    ``b`` may be a taped :class:`~dope.autodiff.Var`, in which case the
    result is taped too and can be differentiated with respect to whatever
    produced ``b``.
    """
    u = np.asarray(u, dtype=float)
    _check(u)
    _check(b)
    if np.shape(ad.value_of(b)) != u.shape:
        raise ValueError("direction and trajectory differ in shape")
    out = ad.forward_jvp(lambda d: _evaluate(spec, d, np.asarray(w, dtype=float)), u, b)
    if isinstance(out, ad.Var):
        return out
    return float(out) if np.ndim(out) == 0 else np.asarray(out)


def riesz_representer_wg(spec: FunctionalSpec, u, w=None) -> np.ndarray:
    """Closed-form representer of the derivative under the quadrature measure.

    ``w`` is needed only by ``soft_cmax``, whose representer is normalized by
    the weighted mean of ``exp(lam * u)``.
    """
    u = np.asarray(u, dtype=float)
    _check(u)
    if spec.kind == "auc":
        return np.ones_like(u)
    if spec.kind == "tat":
        s = expit(spec.kappa * (u - spec.c_star))
        return spec.kappa * s * (1.0 - s)
    if spec.kind == "soft_cmax":
        if w is None:
            raise ValueError("soft_cmax representer needs quadrature weights")
        e = np.exp(spec.lam * (u - u.max(axis=-1, keepdims=True)))
        return e / np.sum(np.asarray(w) * e, axis=-1, keepdims=True)
    return expit(spec.kappa_star * (u - spec.c))
