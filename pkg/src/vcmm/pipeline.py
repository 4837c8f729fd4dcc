"""End-to-end analysis runs: screening, constant refits, bands and composed effects.

A run goes through named stages. Any package error raised inside a stage is
re-raised as :class:`~vcmm.errors.PipelineError` carrying the stage name, so
callers (the command line in particular) can report where a run stopped.

The varying-coefficient curves are fitted once; coefficients that pass the
constancy screen are re-estimated by averaging, and the remaining curves are
kept as fitted.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import io
from .errors import ConfigError, PipelineError, VCMMError
from .inference import (cluster_effect, confidence_band, estimate_bias, estimate_variance,
                        jackknife_se, test_constancy)
from .local import constant_estimates, fit_curves
from .simulation import SimConfig, calibration_study, mise_study, rmise_study
from .varcomp import estimate_variance_components

SUBCOMMANDS = ("fit", "varcomp", "bands", "test", "report", "simulate")
DEFAULT_LEVEL = 0.05


@dataclass(frozen=True)
class RunSpec:
    """One command-line invocation.

    ``level`` is the significance level of the constancy tests; bands use
    confidence ``1 - level``. ``grid`` overrides the number of grid points.
    """

    subcommand: str
    input: Path | None = None
    config: Path | None = None
    out: Path = Path("results")
    h: float | None = None
    level: float | None = None
    grid: int | None = None
    seed: int | None = None

    def __post_init__(self):
        if self.subcommand not in SUBCOMMANDS:
            raise ConfigError(f"unknown subcommand {self.subcommand!r}")
        for name in ("input", "config"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, Path(val))
                if not Path(val).is_file():
                    raise ConfigError(f"{name} file {val} does not exist")
        object.__setattr__(self, "out", Path(self.out))
        if self.subcommand != "simulate" and self.input is None:
            raise ConfigError(f"{self.subcommand} needs --input")
        if self.h is not None and not (np.isfinite(self.h) and self.h > 0):
            raise ConfigError("--h must be positive")
        if self.level is not None and not 0 < self.level < 1:
            raise ConfigError("--level must lie in (0, 1)")
        if self.grid is not None and self.grid < 2:
            raise ConfigError("--grid must be at least 2")
        if self.seed is not None and self.seed < 0:
            raise ConfigError("--seed must be nonnegative")

    def load_config(self):
        return io.read_config(self.config) if self.config is not None else {}


@dataclass(eq=False)
class AnalysisReport:
    """Everything a run produced; fields of stages that did not run stay empty."""

    subcommand: str
    data_shape: dict
    config: object
    level: float
    curves: object
    varcomp: object = None
    bias: object = None
    variance: object = None
    tests: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)
    bands: dict = field(default_factory=dict)
    effects: list = field(default_factory=list)
    cluster_ids: tuple = ()

    @property
    def names(self):
        return self.curves.layout.names

    @property
    def screened(self):
        return self.subcommand == "report"

    @property
    def constant_names(self):
        return tuple(n for n in self.names if n in self.constants)

    @property
    def varying_names(self):
        if not self.screened:
            return ()
        return tuple(n for n in self.names if n not in self.constants)

    def classification(self, name):
        if not self.screened:
            return None
        return "constant" if name in self.constants else "varying"

    @property
    def curve_names(self):
        """Coefficients written to the curve table."""
        return self.varying_names if self.screened else self.names


@dataclass(frozen=True, eq=False)
class SimulationReport:
    study: str
    seed: int
    settings: dict
    result: object

    def as_dict(self):
        return {"study": self.study, "seed": self.seed, "settings": self.settings,
                **self.result.as_dict()}


@contextmanager
def _stage(name):
    try:
        yield
    except PipelineError:
        raise
    except VCMMError as exc:
        raise PipelineError(name, exc) from exc


def run_pipeline(spec):
    """Run ``spec`` and return an :class:`AnalysisReport` (or a
    :class:`SimulationReport` for ``simulate``)."""
    with _stage("config"):
        doc = spec.load_config()
    if spec.subcommand == "simulate":
        return run_simulation(spec, doc)
    analysis = doc.get("analysis", {})
    level = spec.level if spec.level is not None else float(analysis.get("level", DEFAULT_LEVEL))
    if not 0 < level < 1:
        raise PipelineError("config", ConfigError("analysis level must lie in (0, 1)"))
    with _stage("config"):
        cfg = io.fit_config_from(doc.get("fit"), h=spec.h, grid_count=spec.grid)
    with _stage("load"):
        data = io.load_csv(spec.input)
    with _stage("config"):
        profiles = [np.asarray(z, dtype=float) for z in analysis.get("profiles", [])]
        for z in profiles:
            if z.shape != (data.q,):
                raise ConfigError(f"profile {z.tolist()} must have q={data.q} entries")
    return analyze(data, cfg, spec.subcommand, level, profiles)


def analyze(data, cfg, subcommand="report", level=DEFAULT_LEVEL, profiles=()):
    """Run the analysis stages required by ``subcommand`` on an in-memory dataset."""
    if subcommand not in SUBCOMMANDS[:-1]:
        raise ConfigError(f"unknown analysis subcommand {subcommand!r}")
    with _stage("fit"):
        cfg = cfg.resolved(data)
        curves = fit_curves(data, cfg)
    shape = {"n": data.n, "m": data.m, "p": data.p, "q": data.q}
    report = AnalysisReport(subcommand, shape, cfg, level, curves, cluster_ids=data.ids)
    if subcommand == "fit":
        return report
    with _stage("varcomp"):
        report.varcomp = estimate_variance_components(data, curves, cfg)
    if subcommand == "varcomp":
        return report
    with _stage("bias_variance"):
        report.bias = estimate_bias(data, cfg, curves.grid)
        report.variance = estimate_variance(data, cfg, report.varcomp, curves.grid,
                                            main_fits=curves.fits)
    names = curves.layout.names
    if subcommand in ("test", "report"):
        with _stage("test"):
            consts = constant_estimates(data, cfg)
            report.tests = {
                nm: test_constancy(curves, report.bias, report.variance, data, cfg, nm, level,
                                   constant=float(consts[i]))
                for i, nm in enumerate(names)}
    if subcommand == "report":
        accepted = [nm for nm in names if not report.tests[nm].reject]
        if accepted:
            with _stage("constants"):
                report.constants = {c.coef: c for c in jackknife_se(data, cfg, accepted)}
    if subcommand in ("bands", "report"):
        with _stage("bands"):
            report.bands = {nm: confidence_band(curves, report.bias, report.variance, nm,
                                                1 - level)
                            for nm in report.curve_names}
    if subcommand == "report" and profiles:
        with _stage("effects"):
            fixed = {nm: c.value for nm, c in report.constants.items()}
            report.effects = [(np.asarray(z, dtype=float), cluster_effect(curves, fixed, z))
                              for z in profiles]
    return report


# --------------------------------------------------------------------- simulate

_SIM_FIELDS = ("p", "q", "m", "cluster_size", "Sigma", "sigma", "intercept")


def _sim_config(section):
    kw = {k: section[k] for k in _SIM_FIELDS if k in section}
    try:
        sim = SimConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    const = section.get("constant_coefficients", [])
    if const:
        truth = sim.truth
        for name in const:
            try:
                truth = truth.with_constant(name, 0.5)
            except (KeyError, ValueError, IndexError) as exc:
                raise ConfigError(f"unknown coefficient {name!r}") from exc
        sim = replace(sim, truth=truth)
    return sim


def run_simulation(spec, doc):
    """Monte Carlo study described by the ``[simulate]`` table."""
    section = dict(doc.get("simulate", {}))
    seed = spec.seed if spec.seed is not None else int(doc.get("seed", 0))
    study = section.get("study", "mise")
    with _stage("config"):
        sim = _sim_config(section)
        fit = dict(doc.get("fit", {}))
        fit.setdefault("h", 0.15)
        cfg = io.fit_config_from(fit, h=spec.h, grid_count=spec.grid)
        reps = int(section.get("reps", {"mise": 100, "rmise": 20, "calibration": 200}.get(study, 0)))
        if study not in ("mise", "rmise", "calibration"):
            raise ConfigError(f"unknown study {study!r}; use mise, rmise or calibration")
    settings = {k: v for k, v in section.items()}
    settings.update({"reps": reps, "h": cfg.h})
    with _stage("simulate"):
        if study == "mise":
            result = mise_study(sim, cfg, reps=reps, seed=seed,
                                integrate=section.get("integrate", "full"))
        elif study == "rmise":
            bws = tuple(section.get("bandwidths", (0.1, 0.15, 0.2, 0.25, 0.3)))
            result = rmise_study(replace(sim, cluster_size=section.get("cluster_size", 50)),
                                 bws, reps=reps, seed=seed, kernel=cfg.kernel,
                                 integrate=section.get("integrate", "full"))
        else:
            level = spec.level if spec.level is not None else DEFAULT_LEVEL
            result = calibration_study(sim, cfg, section.get("coef", "alpha0_1"), level,
                                       reps=reps, seed=seed)
    return SimulationReport(study, seed, settings, result)


# --------------------------------------------------------------------- output

_CURVE_COLUMNS = ["coef", "u", "estimate", "bias", "center", "se", "band_lo", "band_hi"]
_TEST_COLUMNS = ["coef", "statistic", "p_value", "reject", "constant", "sup", "u_star",
                 "omega", "critical", "classification"]


def _config_dict(cfg):
    d = asdict(cfg)
    d["kernel"] = cfg.kernel.kind
    d.pop("cond_limit", None)
    return d


def _curve_rows(report):
    curves = report.curves
    se = report.variance.se if report.variance is not None else None
    for nm in report.curve_names:
        idx = curves.layout.index(nm)
        band = report.bands.get(nm)
        for g, u in enumerate(curves.grid):
            est = curves.theta[g, idx]
            b = report.bias.bias[g, idx] if report.bias is not None else None
            row = [nm, u, est, b, est - b if b is not None else None,
                   se[g, idx] if se is not None else None,
                   band.lower[g] if band else None, band.upper[g] if band else None]
            yield row


def _test_rows(report):
    for nm, t in report.tests.items():
        yield [nm, t.statistic, t.p_value, t.reject, t.constant, t.sup, t.u_star, t.omega,
               t.critical, report.classification(nm)]


def _varcomp_dict(report):
    vc = report.varcomp
    return {
        "sigma2": vc.sigma2,
        "Sigma": vc.Sigma,
        "Sigma_raw": vc.Sigma_raw,
        "df": vc.df,
        "excluded_clusters": [report.cluster_ids[i] for i in vc.excluded],
        "random_effects": {str(cid): (None if np.isnan(vc.e_hat[i]).any() else vc.e_hat[i])
                           for i, cid in enumerate(report.cluster_ids)},
    }


def report_dict(report):
    """Full JSON-ready view of an :class:`AnalysisReport`."""
    coefs = []
    for nm in report.names:
        entry = {"name": nm, "classification": report.classification(nm)}
        t = report.tests.get(nm)
        if t is not None:
            entry["test"] = {"statistic": t.statistic, "p_value": t.p_value, "reject": t.reject,
                             "constant": t.constant, "sup": t.sup, "u_star": t.u_star}
        c = report.constants.get(nm)
        if c is not None:
            entry["constant"] = {"value": c.value, "jackknife_se": c.se}
        coefs.append(entry)
    curves = {}
    for nm in report.curve_names:
        idx = report.curves.layout.index(nm)
        cur = {"estimate": report.curves.theta[:, idx]}
        if report.bias is not None:
            cur["bias"] = report.bias.bias[:, idx]
            cur["se"] = report.variance.se[:, idx]
        band = report.bands.get(nm)
        if band is not None:
            cur.update(band_lo=band.lower, band_hi=band.upper, multiplier=band.multiplier)
        curves[nm] = cur
    out = {
        "subcommand": report.subcommand,
        "data": report.data_shape,
        "config": _config_dict(report.config),
        "level": report.level,
        "interval": list(report.curves.interval),
        "grid": report.curves.grid,
        "coefficients": coefs,
        "curves": curves,
    }
    if report.varcomp is not None:
        out["variance_components"] = {k: v for k, v in _varcomp_dict(report).items()
                                      if k != "random_effects"}
    if report.effects:
        p = report.data_shape["p"]
        out["effects"] = [{"z": z, "loadings": {f"a{j + 1}": eff[:, j] for j in range(p)}}
                          for z, eff in report.effects]
    return out


def write_results(report, outdir):
    """Write the report files into ``outdir`` and return their paths.

    Analysis runs produce ``results.json`` and ``curves.csv``, plus
    ``varcomp.json`` once variance components exist and ``tests.csv`` once
    tests ran. Simulation runs produce ``simulation.json`` and a flat
    ``simulation.csv`` of the headline numbers.
    """
    outdir = Path(outdir)
    try:
        outdir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise io.IoError(f"cannot create {outdir}: {exc}") from exc
    written = []
    if isinstance(report, SimulationReport):
        d = report.as_dict()
        io.write_text(outdir / "simulation.json", io.to_json(d))
        io.write_table(outdir / "simulation.csv", ["quantity", "value"], _flatten(d))
        return [outdir / "simulation.json", outdir / "simulation.csv"]
    io.write_text(outdir / "results.json", io.to_json(report_dict(report)))
    written.append(outdir / "results.json")
    io.write_table(outdir / "curves.csv", _CURVE_COLUMNS, _curve_rows(report))
    written.append(outdir / "curves.csv")
    if report.varcomp is not None:
        io.write_text(outdir / "varcomp.json", io.to_json(_varcomp_dict(report)))
        written.append(outdir / "varcomp.json")
    if report.tests:
        io.write_table(outdir / "tests.csv", _TEST_COLUMNS, _test_rows(report))
        written.append(outdir / "tests.csv")
    return written


def _flatten(d, prefix=""):
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            yield from _flatten(v, key + ".")
        elif isinstance(v, (list, tuple, np.ndarray)):
            for i, item in enumerate(np.asarray(v).ravel().tolist()):
                yield [f"{key}[{i}]", item]
        else:
            yield [key, v]
