"""Experiment configurations, the repeat loop, aggregation, CSV and plots.

Every repeat draws a fresh test split of 64 records, cross-fits the
nuisances over its two halves, and evaluates each requested method on the
held-out halves.  Ground truth comes from a disjoint pool of latent
trajectories and is cached on disk.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import tempfile
import time
import traceback
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Sequence

import numpy as np

from . import darcy, pk
from .data import stack_latent, stack_observations, stream
from .estimators import (METHOD_OF_MODE, EstimateReport, _report, corrupt_nuisance, crossfit_terms,
                         dope_from_nuisances, fit_crossfit, plugin_from_values, ppi_from_terms, truth_from_pool)
from .functionals import FunctionalSpec, functional_value, riesz_representer_wg
from .operators import DeepONetConfig, darcy_fno_config, pk_fno_config, predict

SWEEPS = ("rho", "kappa", "delta", "n2")
METHODS = ("plugin", "dope", "dope_structured", "dope_oracle")
RHO_GRID = tuple(np.round(np.arange(9) * 0.125, 3).tolist())
KAPPA_GRID = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0)
DELTA_GRID = (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)
N2_GRID = (0, 64, 128, 256, 512, 1024, 2048, 4096)


class ConfigValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    """One sweep of one benchmark.

    ``functionals`` lists functional specs as dicts; for the Darcy kappa
    sweep it is ignored and the smooth-excess spec is derived per kappa.
    ``rho`` fixes the PK design for sweeps other than ``rho``.
    """

    name: str
    dgp: str = "pk"
    sweep: str = "rho"
    sweep_values: tuple = RHO_GRID
    functionals: tuple = ({"kind": "auc"},)
    methods: tuple = ("plugin", "dope")
    repeats: int = 50
    splits: tuple = (256, 64, 64)
    seed: int = 20240501
    truth_pool: int = 2000
    truth_seed: int = 777001
    rho: float = 0.5
    backbone: str = "fno"
    epochs: int = 20
    folds: int = 2
    lambda_reg: float = 0.1
    out_dir: str = "results"
    workers: int = 1

    def __post_init__(self):
        for name in ("sweep_values", "functionals", "methods", "splits"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.dgp not in ("pk", "darcy"):
            raise ConfigValidationError(f"unknown dgp {self.dgp!r}")
        if self.sweep not in SWEEPS:
            raise ConfigValidationError(f"unknown sweep {self.sweep!r}")
        if self.repeats < 1:
            raise ConfigValidationError("repeats must be at least 1")
        if not self.sweep_values:
            raise ConfigValidationError("empty sweep")
        bad = [m for m in self.methods if m not in METHODS]
        if bad or not self.methods:
            raise ConfigValidationError(f"unknown methods {bad}")
        if self.backbone not in ("fno", "deeponet"):
            raise ConfigValidationError("backbone must be fno or deeponet")
        vals = np.asarray(self.sweep_values, dtype=float)
        limits = {"rho": (0.0, 1.0), "kappa": (0.0, 1.0), "delta": (0.0, 0.5), "n2": (0, np.inf)}[self.sweep]
        if np.any(vals < limits[0]) or np.any(vals > limits[1]):
            raise ConfigValidationError(f"{self.sweep} values outside {limits}")
        if self.sweep == "rho" and self.dgp != "pk":
            raise ConfigValidationError("the rho sweep applies to the PK benchmark")
        if self.sweep == "kappa" and self.dgp != "darcy":
            raise ConfigValidationError("the kappa sweep applies to the Darcy benchmark")
        if self.sweep in ("delta", "n2") and self.dgp != "pk":
            raise ConfigValidationError(f"the {self.sweep} sweep is defined for the PK benchmark")
        if self.folds < 2:
            raise ConfigValidationError("cross-fitting needs at least two folds")
        for d in self.functionals:
            FunctionalSpec.from_dict(d)

    def specs(self, sweep_value=None) -> list[FunctionalSpec]:
        if self.sweep == "kappa":
            return [FunctionalSpec.darcy_excess(sweep_value)]
        return [FunctionalSpec.from_dict(d) for d in self.functionals]

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = {k: v for k, v in d.items() if not k.startswith("_")}
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigValidationError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def hash(self) -> str:
        d = self.to_dict()
        for k in ("out_dir", "workers", "name"):
            d.pop(k)
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def csv_path(self) -> str:
        return os.path.join(self.out_dir, f"{self.name}-{self.hash()}.csv")


@dataclass(frozen=True)
class ResultRow:
    method: str
    functional: str
    sweep_value: float
    repeat: int
    theta_hat: float
    se: float
    ci_low: float
    ci_high: float
    truth: float
    covered: int
    wall_time_s: float
    error: str = ""

    def __post_init__(self):
        if not self.error:
            inside = int(self.ci_low <= self.truth <= self.ci_high)
            if inside != int(self.covered):
                raise ValueError("covered flag disagrees with the interval")


FIELDS = [f.name for f in fields(ResultRow)]


def functional_label(spec: FunctionalSpec) -> str:
    if spec.kind == "smooth_excess":
        return f"smooth_excess(k*={spec.kappa_star:g})"
    return spec.kind


# --------------------------------------------------------------------------
# benchmark plumbing
# --------------------------------------------------------------------------

def _grid(dgp):
    return pk.default_grid() if dgp == "pk" else darcy.default_grid()


def _features(dgp):
    return pk.pk_features if dgp == "pk" else darcy.darcy_features


def backbone_config(dgp: str, backbone: str = "fno"):
    if backbone == "fno":
        return pk_fno_config() if dgp == "pk" else darcy_fno_config()
    if dgp == "pk":
        return DeepONetConfig(in_channels=4, n_points=pk.N_GRID, coord_channels=(3,))
    return DeepONetConfig(in_channels=3, n_points=darcy.N_SIDE ** 2, coord_channels=(1, 2))


def _generate(dgp, n, rho, rng):
    if dgp == "pk":
        return pk.generate_pk_dataset(n, rho, rng)
    return darcy.generate_darcy_dataset(n, rng)


def truth_pool_latent(dgp: str, n: int, seed: int) -> np.ndarray:
    rng = stream(seed, "truth", dgp)
    if dgp == "pk":
        return pk.sample_pk_inputs(n, rng)[1]
    return darcy.sample_darcy_inputs(n, rng)[1]


def truth_value(config: ExperimentConfig, spec: FunctionalSpec, cache_dir: str | None = None) -> float:
    """Mean of g(S_0(A)) over the truth pool; cached per (dgp, functional, pool, seed)."""
    key = f"{config.dgp}|{spec.to_json()}|{config.truth_pool}|{config.truth_seed}"
    path = os.path.join(cache_dir or config.out_dir, "truth_cache.json")
    cache = {}
    if os.path.exists(path):
        with open(path) as fh:
            cache = json.load(fh)
    if key in cache:
        return float(cache[key])
    latent = truth_pool_latent(config.dgp, config.truth_pool, config.truth_seed)
    value = truth_from_pool(latent, spec, _grid(config.dgp).weights())
    cache[key] = value
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    _atomic_write_text(path, json.dumps(cache, indent=1, sort_keys=True))
    return value


def repeat_seed(config: ExperimentConfig, repeat: int, sweep_index: int) -> int:
    return int(config.seed + 1000 * repeat + sweep_index)


def _row(method, spec, sweep_value, repeat, rep: EstimateReport, truth, wall) -> ResultRow:
    lo, hi = rep.ci
    return ResultRow(method, functional_label(spec), float(sweep_value), int(repeat), rep.theta_hat, rep.se,
                     float(lo), float(hi), float(truth), int(lo <= truth <= hi), float(wall))


def _error_rows(config, specs, sweep_value, repeat, exc) -> list[ResultRow]:
    msg = f"{type(exc).__name__}: {exc}".replace("\n", " ")[:300]
    nan = float("nan")
    return [ResultRow(m, functional_label(s), float(sweep_value), int(repeat), nan, nan, nan, nan, nan, 0, 0.0, msg)
            for s in specs for m in config.methods]


def _beta_modes(methods):
    return [mode for mode, m in METHOD_OF_MODE.items() if m in methods]


def _fit(config, data, specs, seed):
    dgp = config.dgp
    return fit_crossfit(data, specs, backbone_config(dgp, config.backbone), _beta_modes(config.methods),
                        _grid(dgp).weights(), _features(dgp), J=config.folds, seed=seed,
                        epochs=config.epochs, lambda_reg=config.lambda_reg)


MODE_OF_METHOD = {m: k for k, m in METHOD_OF_MODE.items()}


def _standard_repeat(config, specs, sweep_value, seed, repeat, truths):
    """rho and kappa sweeps: plug-in and one-step estimates on the test split."""
    rho = sweep_value if config.sweep == "rho" else config.rho
    t0 = time.perf_counter()
    data = _generate(config.dgp, config.splits[2], rho, stream(seed, "test"))
    folds, fits = _fit(config, data, specs, seed)
    batch = stack_observations(data, _features(config.dgp))
    latent = stack_latent(data)
    w = _grid(config.dgp).weights()
    wall = time.perf_counter() - t0
    rows = []
    for spec in specs:
        truth = truths[spec.to_json()]
        plug = None
        for method in config.methods:
            if method == "plugin":
                continue
            mode = MODE_OF_METHOD[method]
            plug, corr = crossfit_terms(batch, fits, spec, mode, w, latent if mode == "oracle" else None)
            rows.append(_row(method, spec, sweep_value, repeat, _report(plug + corr, method, {}, plug, corr),
                             truth, wall))
        if "plugin" in config.methods:
            # the plug-in reuses the held-out S-hat values shared with the one-step estimators
            if plug is None:
                plug = _plugin_only(batch, fits, spec, w)
            rows.append(_row("plugin", spec, sweep_value, repeat, plugin_from_values(plug), truth, wall))
    return rows


def _plugin_only(batch, fits, spec, w):
    vals = np.empty(len(batch))
    for fit in fits:
        vals[fit.held] = np.atleast_1d(functional_value(spec, predict(fit.s_hat, batch.subset(fit.held).features), w))
    return vals


def _delta_repeat(config, specs, seed, repeat, truths):
    """Corruption sweep: inflate both nuisance errors by (1 + delta) around the oracle."""
    t0 = time.perf_counter()
    data = _generate(config.dgp, config.splits[2], config.rho, stream(seed, "test"))
    folds, fits = _fit(config, data, specs, seed)
    batch = stack_observations(data, _features(config.dgp))
    latent = stack_latent(data)
    w = _grid(config.dgp).weights()
    wall = time.perf_counter() - t0
    rows = []
    for spec in specs:
        truth = truths[spec.to_json()]
        beta0 = batch.xi * riesz_representer_wg(spec, latent, w)
        s_fit = np.empty_like(latent)
        b_fit = {m: np.empty_like(latent) for m in _beta_modes(config.methods) if m != "oracle"}
        for fit in fits:
            sub = batch.subset(fit.held)
            s_pred = predict(fit.s_hat, sub.features)
            s_fit[fit.held] = s_pred
            for mode in b_fit:
                b_fit[mode][fit.held] = fit.betas[(spec.to_json(), mode)].on_grid(sub, s_pred=s_pred)
        for delta in config.sweep_values:
            s_c = corrupt_nuisance("S", s_fit, latent, delta)
            for method in config.methods:
                if method == "plugin":
                    rep = plugin_from_values(functional_value(spec, s_c, w))
                else:
                    mode = MODE_OF_METHOD[method]
                    b_c = beta0 if mode == "oracle" else corrupt_nuisance("beta", b_fit[mode], beta0, delta)
                    rep = dope_from_nuisances(batch, s_c, b_c, spec, w, method)
                rows.append(_row(method, spec, delta, repeat, rep, truth, wall))
    return rows


def _n2_repeat(config, specs, seed, repeat, truths):
    """PPI sweep: nested pools of unlabeled inputs added to the plug-in average."""
    t0 = time.perf_counter()
    data = _generate(config.dgp, config.splits[2], config.rho, stream(seed, "test"))
    folds, fits = _fit(config, data, specs, seed)
    batch = stack_observations(data, _features(config.dgp))
    w = _grid(config.dgp).weights()
    n2_max = int(max(config.sweep_values))
    if n2_max:
        inputs, _ = pk.sample_pk_inputs(n2_max, stream(seed, "unlabeled"))
        feats_unl = pk.pk_features(inputs)
        preds_unl = [predict(fit.s_hat, feats_unl) for fit in fits]
    wall = time.perf_counter() - t0
    rows = []
    for spec in specs:
        truth = truths[spec.to_json()]
        # an unlabeled input is scored by every fold's S-hat and averaged
        g_unl = np.mean([functional_value(spec, p, w) for p in preds_unl], axis=0) if n2_max else np.empty(0)
        plug = corr = None
        for mode in _beta_modes(config.methods):
            plug, corr_m = crossfit_terms(batch, fits, spec, mode, w,
                                          stack_latent(data) if mode == "oracle" else None)
            for n2 in config.sweep_values:
                rep = ppi_from_terms(plug, corr_m, g_unl[: int(n2)])
                rows.append(_row(METHOD_OF_MODE[mode], spec, n2, repeat, rep, truth, wall))
        if "plugin" in config.methods:
            if plug is None:
                plug = _plugin_only(batch, fits, spec, w)
            for n2 in config.sweep_values:
                rep = plugin_from_values(np.concatenate([plug, g_unl[: int(n2)]]))
                rows.append(_row("plugin", spec, n2, repeat, rep, truth, wall))
    return rows


def _units(config: ExperimentConfig):
    """(sweep_index, sweep_value or None, repeat) work units; one unit per repeat when the
    sweep does not change the data."""
    if config.sweep == "rho":
        return [(i, v, r) for r in range(config.repeats) for i, v in enumerate(config.sweep_values)]
    return [(0, None, r) for r in range(config.repeats)]


def _run_unit(config: ExperimentConfig, unit, truths) -> list[ResultRow]:
    i, value, r = unit
    seed = repeat_seed(config, r, i)
    if config.sweep == "kappa":
        specs_all = [FunctionalSpec.darcy_excess(k) for k in config.sweep_values]
    else:
        specs_all = config.specs()
    try:
        if config.sweep == "rho":
            return _standard_repeat(config, specs_all, value, seed, r, truths)
        if config.sweep == "kappa":
            rows = _standard_repeat(config, specs_all, 0.0, seed, r, truths)
            kappa_of = {functional_label(s): k for s, k in zip(specs_all, config.sweep_values)}
            return [ResultRow(**{**asdict(row), "sweep_value": float(kappa_of[row.functional])}) for row in rows]
        if config.sweep == "delta":
            return _delta_repeat(config, specs_all, seed, r, truths)
        return _n2_repeat(config, specs_all, seed, r, truths)
    except Exception as exc:  # one failed repeat must not sink the sweep
        values = config.sweep_values if value is None else [value]
        out = []
        for v in values:
            specs = [s for s, k in zip(specs_all, config.sweep_values) if k == v] if config.sweep == "kappa" else specs_all
            out.extend(_error_rows(config, specs, v, r, exc))
        traceback.print_exc()
        return out


def _all_specs(config):
    if config.sweep == "kappa":
        return [FunctionalSpec.darcy_excess(k) for k in config.sweep_values]
    return config.specs()


def run_experiment(config: ExperimentConfig, reuse: bool = True, progress=None) -> list[ResultRow]:
    """Run every (sweep value, repeat) unit, write the CSV atomically and return the rows.

    With ``reuse`` an existing CSV for the same configuration hash is loaded
    instead of recomputed.
    """
    path = config.csv_path()
    if reuse and os.path.exists(path):
        return read_csv(path)
    os.makedirs(config.out_dir, exist_ok=True)
    truths = {s.to_json(): truth_value(config, s) for s in _all_specs(config)}
    units = _units(config)
    rows: list[ResultRow] = []
    if config.workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for k, part in enumerate(pool.map(_run_unit, [config] * len(units), units, [truths] * len(units))):
                rows.extend(part)
                if progress:
                    progress(k + 1, len(units))
    else:
        for k, unit in enumerate(units):
            rows.extend(_run_unit(config, unit, truths))
            if progress:
                progress(k + 1, len(units))
    rows.sort(key=lambda r: (r.functional, r.sweep_value, r.repeat, r.method))
    write_csv(rows, path)
    _atomic_write_text(path + ".config.json", config.to_json())
    return rows


# --------------------------------------------------------------------------
# aggregation
# --------------------------------------------------------------------------

def aggregate_rmse(rows: Sequence[ResultRow], truth: float | None = None) -> tuple[float, float]:
    """RMSE over repeats and its delta-method standard error.

    Returns ``(nan, nan)`` as the missing-cell marker when fewer than two
    valid rows are present.
    """
    ok = [r for r in rows if not r.error and np.isfinite(r.theta_hat)]
    if len(ok) < 2:
        return float("nan"), float("nan")
    est = np.array([r.theta_hat for r in ok])
    tru = np.full(len(ok), truth) if truth is not None else np.array([r.truth for r in ok])
    sq = (est - tru) ** 2
    mse = sq.mean()
    rmse = math.sqrt(mse)
    se_mse = sq.std(ddof=1) / math.sqrt(len(sq))
    return rmse, (se_mse / (2.0 * rmse) if rmse > 0 else 0.0)


def aggregate_coverage(rows: Sequence[ResultRow]) -> float:
    if len(rows) == 0:
        raise ValueError("no rows")
    return float(np.mean([r.covered for r in rows]))


def cells(rows: Iterable[ResultRow]) -> dict:
    out: dict = {}
    for r in rows:
        out.setdefault((r.method, r.functional, r.sweep_value), []).append(r)
    return out


def summarize(rows: Iterable[ResultRow]) -> list[dict]:
    """One record per (method, functional, sweep value) cell."""
    table = []
    for (method, functional, value), rs in sorted(cells(rows).items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0])):
        rmse, se = aggregate_rmse(rs)
        errs = np.array([r.theta_hat - r.truth for r in rs if not r.error])
        table.append({"method": method, "functional": functional, "sweep_value": value, "rmse": rmse, "rmse_se": se,
                      "bias": float(errs.mean()) if len(errs) else float("nan"),
                      "coverage": aggregate_coverage(rs), "n": len(rs),
                      "errors": sum(1 for r in rs if r.error)})
    return table


def format_summary(table: Sequence[dict], scale: float = 100.0) -> str:
    lines = [f"{'functional':<24}{'sweep':>8}  {'method':<16}{'RMSE':>9}{'SE':>8}{'cover':>7}{'n':>5}"]
    for t in table:
        lines.append(f"{t['functional']:<24}{t['sweep_value']:>8g}  {t['method']:<16}"
                     f"{scale * t['rmse']:>9.3f}{scale * t['rmse_se']:>8.3f}{t['coverage']:>7.2f}{t['n']:>5d}")
    return "\n".join(lines)


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------

def _atomic_write_text(path, text):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_csv(rows: Sequence[ResultRow], path) -> None:
    import io
    buf = io.StringIO()
    writer = csv.writer(buf, quoting=csv.QUOTE_MINIMAL, lineterminator="\r\n")
    writer.writerow(FIELDS)
    for r in rows:
        writer.writerow([_fmt(getattr(r, f)) for f in FIELDS])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    _atomic_write_text(path, buf.getvalue())


def read_csv(path) -> list[ResultRow]:
    types_ = {f.name: f.type for f in fields(ResultRow)}
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FIELDS:
            raise ValueError(f"unexpected CSV header {reader.fieldnames}")
        for rec in reader:
            kw = {}
            for k, v in rec.items():
                t = types_[k]
                kw[k] = int(v) if t in (int, "int") else float(v) if t in (float, "float") else v
            out.append(ResultRow(**kw))
    return out


def emit_plot(rows: Sequence[ResultRow], kind: str, path, methods: Sequence[str] | None = None,
              functional: str | None = None, scale: float = 100.0, xlabel: str = "sweep value") -> dict:
    """RMSE-versus-sweep line plot written as SVG; returns the plotted series.

    The series are also embedded in the SVG description metadata so a plot
    can be checked against the CSV it was drawn from.
    """
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if kind not in ("rmse", "rmse_increase"):
        raise ValueError("kind must be 'rmse' or 'rmse_increase'")
    if len(rows) == 0:
        raise ValueError("no rows to plot")
    if methods is not None and len(methods) == 0:
        raise ValueError("empty method filter")
    present = sorted({r.method for r in rows})
    methods = [m for m in (methods or present) if m in present]
    if not methods:
        raise ValueError("none of the requested methods is present")
    functional = functional or sorted({r.functional for r in rows})[0]
    grouped = cells(r for r in rows if r.functional == functional)
    series = {}
    for m in methods:
        xs = sorted(v for (mm, _, v) in grouped if mm == m)
        ys, es = [], []
        for x in xs:
            rmse, se = aggregate_rmse(grouped[(m, functional, x)])
            ys.append(rmse * scale)
            es.append(se * scale)
        if kind == "rmse_increase" and ys:
            ys = [y - ys[0] for y in ys]
        series[m] = {"x": xs, "y": ys, "se": es}
    fig, ax = plt.subplots(figsize=(5.0, 3.6))
    for m, s in series.items():
        line, = ax.plot(s["x"], s["y"], marker="o", label=m)
        line.set_gid(f"series-{m}")
    ax.set_xlabel(xlabel)
    ax.set_ylabel("RMSE increase (x100)" if kind == "rmse_increase" else "RMSE (x100)")
    ax.set_title(functional)
    ax.legend()
    fig.tight_layout()
    meta = json.dumps({"functional": functional, "kind": kind, "series": series})
    fig.savefig(path, format="svg", metadata={"Description": meta})
    plt.close(fig)
    return series


def read_plot_series(path) -> dict:
    """Recover the series embedded by :func:`emit_plot`."""
    import re
    import html

    with open(path) as fh:
        text = fh.read()
    m = re.search(r"<dc:description>(.*?)</dc:description>", text, re.S)
    if not m:
        raise ValueError("no embedded series")
    return json.loads(html.unescape(m.group(1)))
