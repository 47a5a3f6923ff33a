"""Command-line surface: fit, simulate, sbc, predict and dist.

Datasets are CSV files with columns ``subject, time, state`` followed by
covariate columns; the state column uses 1-based indices with ``2|3`` for
censor sets and a ``!`` suffix for exactly-timed absorbing entries.  Model
configurations are single-file YAML documents (see the bundled examples).
All outputs are machine-readable CSV/JSON, written atomically.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import tempfile
from dataclasses import dataclass, field

import numpy as np
import yaml

from .errors import (
    BoundsError,
    ConvergenceError,
    DataError,
    LaplaceError,
    SpecError,
)
from .inference import (
    Posterior,
    coordinates,
    fit_laplace,
    fit_mcmc,
    fitresult_from_dict,
    fitresult_to_dict,
    natural_value,
    optimize_map,
    summarize_draws,
    thin_draws,
    untransform,
)
from .likelihood import Observation, PanelDataset, Subject
from .outputs import (
    expected_length_of_stay,
    mean_sojourn,
    next_state_distribution,
    observable_P,
)
from .phasetype import ShapeScaleSpec, pt_quantile, shapescale_to_rates
from .simulate import Population, SBCConfig, Schedule, prior_predictive_dataset, sbc_run
from .statespace import ModelSpec, NormalPrior, SojournModel, build_layout

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_INVALID_INPUT = 2
EXIT_NOT_CONVERGED = 3
EXIT_NUMERIC = 4

DIST_PROBS = (0.025, 0.25, 0.5, 0.75, 0.975)
#: Cap on posterior draws propagated through matrix exponentials in predict.
PREDICT_MAX_DRAWS = 200


@dataclass
class RunConfig:
    """One CLI invocation, parsed and validated."""

    command: str
    config: str = None
    data: str = None
    fit_dir: str = None
    out: str = None
    seed: int = None
    method: str = "map"
    draws: int = 1000
    iterations: int = 16000
    replicates: int = 200
    jobs: int = 1
    family: str = None
    shape: float = None
    scale: float = 1.0
    nphase: int = 5
    from_state: str = None
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    horizon: float = None
    at: dict = field(default_factory=dict)
    verbose: bool = False


# -- dataset ----------------------------------------------------------------

def _parse_state_token(token, line_no):
    token = token.strip()
    exact_entry = token.endswith("!")
    if exact_entry:
        token = token[:-1]
    parts = token.split("|")
    try:
        idxs = [int(p) - 1 for p in parts]
    except ValueError:
        raise DataError(f"line {line_no}: unknown state label {token!r}") from None
    if any(i < 0 for i in idxs):
        raise DataError(f"line {line_no}: state labels are 1-based, got {token!r}")
    if exact_entry:
        if len(idxs) != 1:
            raise DataError(f"line {line_no}: exact-entry sets are not allowed")
        return Observation.exact_absorbing(idxs[0])
    if len(idxs) == 1:
        return Observation.exact(idxs[0])
    return Observation.censored(idxs)


def parse_dataset(path):
    """Read a panel dataset CSV, grouping and sorting records per subject.

    Raises ``DataError`` with a line-number diagnostic for malformed state
    tokens, duplicate (subject, time) pairs, or non-increasing times.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(header) < 3 or header[:2] != ["subject", "time"] \
                or header[2] != "state":
            raise DataError(
                f"{path}: header must start with subject,time,state")
        cov_names = header[3:]
        rows = {}
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(f"line {line_no}: expected {len(header)} "
                                f"columns, got {len(row)}")
            sid = row[0].strip()
            try:
                t = float(row[1])
            except ValueError:
                raise DataError(f"line {line_no}: bad time {row[1]!r}") from None
            ob = _parse_state_token(row[2], line_no)
            try:
                covs = [float(c) for c in row[3:]]
            except ValueError:
                raise DataError(f"line {line_no}: bad covariate value") from None
            rows.setdefault(sid, []).append((t, ob, covs, line_no))
    subjects = []
    for sid, recs in rows.items():
        recs.sort(key=lambda r: r[0])
        for (t1, _, _, l1), (t2, _, _, l2) in zip(recs, recs[1:]):
            if t1 == t2:
                raise DataError(
                    f"line {l2}: duplicate time {t2} for subject {sid!r}")
        subjects.append(Subject(
            sid,
            np.array([r[0] for r in recs]),
            [r[1] for r in recs],
            np.array([r[2] for r in recs]).reshape(len(recs), len(cov_names))))
    return PanelDataset(cov_names, subjects)


def write_dataset(dataset, path):
    """Write a dataset in the same CSV schema ``parse_dataset`` reads."""
    rows = [["subject", "time", "state"] + list(dataset.covariate_names)]
    for s in dataset.subjects:
        for j, (t, ob) in enumerate(zip(s.times, s.obs)):
            idxs = sorted(ob.states)
            token = "|".join(str(i + 1) for i in idxs)
            if ob.exact_entry:
                token += "!"
            rows.append([s.id, repr(float(t)), token]
                        + [repr(float(c)) for c in s.covs[j]])
    _write_csv_atomic(path, rows)


# -- configuration ------------------------------------------------------------

def _parse_prior(entry, name):
    if entry == "flat":
        return NormalPrior(flat=True)
    if not isinstance(entry, dict):
        raise SpecError(f"prior {name!r}: expected a mapping or 'flat'")
    known = {"mean", "sd", "lower", "upper"}
    bad = set(entry) - known
    if bad:
        raise SpecError(f"prior {name!r}: unknown fields {sorted(bad)}")
    return NormalPrior(float(entry.get("mean", 0.0)),
                       float(entry.get("sd", 1.0)),
                       float(entry.get("lower", -math.inf)),
                       float(entry.get("upper", math.inf)))


def parse_config(path):
    """Build a validated ``ModelSpec`` from a YAML model configuration.

    Unlisted priors fall back to the documented weakly-informative
    defaults, with a warning naming each defaulted parameter.
    """
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict):
        raise SpecError(f"{path}: configuration must be a mapping")
    try:
        states = [str(s) for s in doc["states"]]
        transitions = doc["transitions"]
    except KeyError as exc:
        raise SpecError(f"{path}: missing required section {exc}") from None
    allowed, intensity_covs = [], {}
    for i, tr in enumerate(transitions):
        if not isinstance(tr, dict) or "from" not in tr or "to" not in tr:
            raise SpecError(f"transitions[{i}]: need 'from' and 'to'")
        pair = (str(tr["from"]), str(tr["to"]))
        allowed.append(pair)
        if tr.get("covariates"):
            intensity_covs[pair] = [str(c) for c in tr["covariates"]]
    sojourn, scale_covs, odds_covs = {}, {}, {}
    for r, block in (doc.get("sojourn") or {}).items():
        r = str(r)
        try:
            sojourn[r] = SojournModel(str(block["family"]),
                                      int(block["phases"]))
        except KeyError as exc:
            raise SpecError(f"sojourn.{r}: missing field {exc}") from None
        if block.get("scale_covariates"):
            scale_covs[r] = [str(c) for c in block["scale_covariates"]]
        if block.get("odds_covariates"):
            odds_covs[r] = [str(c) for c in block["odds_covariates"]]
    priors = {str(k): _parse_prior(v, k)
              for k, v in (doc.get("priors") or {}).items()}
    spec = ModelSpec(states, allowed, sojourn=sojourn,
                     intensity_covariates=intensity_covs,
                     scale_covariates=scale_covs,
                     odds_covariates=odds_covs, priors=priors)
    names = {c.name for c in coordinates(spec)}
    unknown = set(priors) - names
    if unknown:
        raise SpecError(f"{path}: priors for unknown parameters "
                        f"{sorted(unknown)}")
    defaulted = sorted(names - set(priors))
    if defaulted:
        log.warning("using default weakly-informative priors for: %s",
                    ", ".join(defaulted))
    return spec


@dataclass
class Study:
    """Model plus the simulation design blocks of a configuration file."""

    spec: ModelSpec
    population: Population = None
    schedule: Schedule = None
    exact_death: bool = False
    sbc: dict = field(default_factory=dict)


def parse_study(path):
    spec = parse_config(path)
    with open(path) as fh:
        doc = yaml.safe_load(fh)
    population = schedule = None
    if "population" in doc:
        pop = doc["population"]
        groups = [(int(g["n"]), {str(k): float(v)
                                 for k, v in (g.get("covariates") or {}).items()})
                  for g in pop["groups"]]
        population = Population(groups, pop.get("initial_state"))
    if "schedule" in doc:
        sc = doc["schedule"]
        if "times" in sc:
            schedule = Schedule(tuple(float(t) for t in sc["times"]))
        else:
            schedule = Schedule.regular(float(sc.get("start", 0.0)),
                                        float(sc["step"]), int(sc["count"]))
    exact_death = bool((doc.get("observation") or {}).get("exact_death", False))
    return Study(spec, population, schedule, exact_death,
                 dict(doc.get("sbc") or {}))


# -- atomic writers -----------------------------------------------------------

def _atomic(path, write_fn, mode="w"):
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, mode, newline="" if "csv" in path else None) as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _write_csv_atomic(path, rows):
    _atomic(path, lambda fh: csv.writer(fh).writerows(rows))


def _write_json_atomic(path, obj):
    _atomic(path, lambda fh: json.dump(obj, fh, indent=2, sort_keys=True))


# -- commands -----------------------------------------------------------------

def _summary_rows(fit, spec):
    """Long-format derived summaries at baseline covariates (x = 0)."""
    rows = [["quantity", "state", "covariates", "median", "lo", "hi"]]
    if fit.draws is None:
        return rows
    draws, _ = thin_draws(fit.draws, 2000)
    per_state = {r: {"sojourn": [], "next": None} for r in spec.states
                 if not spec.is_absorbing(r)}
    for r in per_state:
        per_state[r]["next"] = {s: [] for s in spec.destinations(r)}
    x0 = {c: 0.0 for c in spec.covariate_names}
    for v in draws:
        params = untransform(v, spec, fit.coords)
        for r, acc in per_state.items():
            acc["sojourn"].append(mean_sojourn(params, spec, r, x0))
            dests, p = next_state_distribution(params, spec, r, x0)
            for s, pj in zip(dests, p):
                acc["next"][s].append(pj)
    def q(vals):
        lo, med, hi = np.quantile(vals, [0.025, 0.5, 0.975])
        return [f"{med:.6g}", f"{lo:.6g}", f"{hi:.6g}"]
    for r, acc in per_state.items():
        rows.append(["mean_sojourn", r, "baseline"] + q(acc["sojourn"]))
        for s, vals in acc["next"].items():
            rows.append([f"p(next={s})", r, "baseline"] + q(vals))
    return rows


def _cmd_fit(cfg):
    spec = parse_config(cfg.config)
    dataset = parse_dataset(cfg.data)
    dataset.validate_against(spec)
    if cfg.method == "map":
        fit = optimize_map(dataset, spec, seed=cfg.seed)
    elif cfg.method == "laplace":
        fit = fit_laplace(dataset, spec, n_draws=cfg.draws, seed=cfg.seed)
    elif cfg.method == "mcmc":
        fit = fit_mcmc(dataset, spec, n_iter=cfg.iterations, seed=cfg.seed)
        fit.draws, _ = thin_draws(fit.draws, cfg.draws)
    else:
        raise SpecError(f"unknown fit method {cfg.method!r}")
    out = cfg.out
    _write_json_atomic(os.path.join(out, "fit.json"),
                       fitresult_to_dict(fit, spec))
    if fit.draws is not None:
        _write_csv_atomic(os.path.join(out, "draws.csv"),
                          [fit.names] + [[repr(float(x)) for x in row]
                                         for row in fit.draws])
    _write_csv_atomic(os.path.join(out, "summary.csv"), _summary_rows(fit, spec))
    print(f"log posterior at mode: {fit.log_posterior_at_map:.4f}  "
          f"(converged: {fit.converged})")
    return EXIT_OK if fit.converged or cfg.method == "mcmc" \
        else EXIT_NOT_CONVERGED


def _cmd_simulate(cfg):
    study = parse_study(cfg.config)
    if study.population is None or study.schedule is None:
        raise SpecError("simulate needs population and schedule sections")
    params, dataset = prior_predictive_dataset(
        study.spec, study.population, study.schedule, cfg.seed,
        exact_absorbing=study.exact_death)
    write_dataset(dataset, os.path.join(cfg.out, "dataset.csv"))
    coords = coordinates(study.spec)
    true_natural = {c.name: natural_value(c, params, study.spec)
                    for c in coords}
    post = Posterior(None, study.spec)
    _write_json_atomic(os.path.join(cfg.out, "true_params.json"), {
        "natural": {k: float(v) for k, v in true_natural.items()},
        "transformed": [float(x) for x in post.transform(params)],
        "coordinates": post.names,
        "seed": cfg.seed,
    })
    print(f"simulated {len(dataset.subjects)} subjects, "
          f"{sum(len(s.times) for s in dataset.subjects)} records")
    return EXIT_OK


def _cmd_sbc(cfg):
    study = parse_study(cfg.config)
    if study.population is None or study.schedule is None:
        raise SpecError("sbc needs population and schedule sections")
    blk = study.sbc
    config = SBCConfig(
        study.spec, cfg.replicates, study.population, study.schedule,
        estimands=blk.get("estimands"), method=cfg.method,
        n_draws=int(blk.get("draws", 100)),
        mcmc_iter=cfg.iterations, seed=cfg.seed,
        exact_absorbing=study.exact_death, n_jobs=cfg.jobs)
    result = sbc_run(config)
    rows = [["replicate", "estimand", "rank", "converged"]]
    rows += [[str(i), name, str(rank), str(conv).lower()]
             for (i, name, rank, conv) in result.rank_rows()]
    _write_csv_atomic(os.path.join(cfg.out, "ranks.csv"), rows)
    _write_json_atomic(os.path.join(cfg.out, "uniformity.json"), {
        "n_replicates": cfg.replicates,
        "n_draws": result.n_draws,
        "method": cfg.method,
        "seed": cfg.seed,
        "statuses": {s: result.statuses.count(s) for s in set(result.statuses)},
        "uniformity": result.uniformity,
    })
    worst = min((u["chi2_pvalue"] for u in result.uniformity.values()
                 if not math.isnan(u["chi2_pvalue"])), default=float("nan"))
    print(f"sbc: {sum(result.converged)}/{cfg.replicates} converged, "
          f"smallest chi-squared p-value {worst:.4f}")
    return EXIT_OK


def _load_fit(cfg, spec):
    with open(os.path.join(cfg.fit_dir, "fit.json")) as fh:
        doc = json.load(fh)
    draws = None
    draws_path = os.path.join(cfg.fit_dir, "draws.csv")
    if os.path.exists(draws_path):
        with open(draws_path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            draws = np.array([[float(x) for x in row] for row in reader])
        if header != [c.name for c in coordinates(spec)]:
            raise SpecError("draws.csv does not match the configuration")
    return fitresult_from_dict(doc, spec, draws=draws)


def _cmd_predict(cfg):
    spec = parse_config(cfg.config)
    layout = build_layout(spec)
    fit = _load_fit(cfg, spec)
    if fit.draws is not None:
        draws, _ = thin_draws(fit.draws, PREDICT_MAX_DRAWS)
    else:
        draws = fit.map_point[None, :]
    x = {c: 0.0 for c in spec.covariate_names}  # baseline unless overridden
    x.update(cfg.at)
    from_state = cfg.from_state or spec.states[0]
    wrote = []
    if cfg.times:
        rows = [["time", "state", "median", "lo", "hi"]]
        for t in cfg.times:
            vals = np.stack([
                observable_P(untransform(v, spec, fit.coords), spec, layout,
                             t, x, from_state) for v in draws])
            lo, med, hi = np.quantile(vals, [0.025, 0.5, 0.975], axis=0)
            for k, s in enumerate(spec.states):
                rows.append([f"{t:g}", s, f"{med[k]:.6g}", f"{lo[k]:.6g}",
                             f"{hi[k]:.6g}"])
        _write_csv_atomic(os.path.join(cfg.out, "occupancy.csv"), rows)
        wrote.append("occupancy.csv")
    if cfg.states and cfg.horizon:
        vals = np.array([
            expected_length_of_stay(
                untransform(v, spec, fit.coords), spec, layout, cfg.states,
                cfg.horizon, x, from_state) for v in draws])
        lo, med, hi = np.quantile(vals, [0.025, 0.5, 0.975])
        rows = [["states", "horizon", "from", "median", "lo", "hi"],
                ["|".join(cfg.states), f"{cfg.horizon:g}", from_state,
                 f"{med:.6g}", f"{lo:.6g}", f"{hi:.6g}"]]
        _write_csv_atomic(os.path.join(cfg.out, "length_of_stay.csv"), rows)
        wrote.append("length_of_stay.csv")
    if not wrote:
        raise SpecError("predict needs --times and/or --states with --horizon")
    print("wrote " + ", ".join(wrote))
    return EXIT_OK


def _cmd_dist(cfg):
    from scipy import stats as sstats
    s = ShapeScaleSpec(cfg.family, cfg.shape, cfg.scale, cfg.nphase)
    rates = shapescale_to_rates(s)
    target = (sstats.gamma(cfg.shape, scale=cfg.scale)
              if cfg.family == "gamma"
              else sstats.weibull_min(cfg.shape, scale=cfg.scale))
    rows = [["family", "shape", "scale", "nphase", "prob", "target",
             "phasetype"]]
    for p in DIST_PROBS:
        rows.append([cfg.family, f"{cfg.shape:g}", f"{cfg.scale:g}",
                     str(cfg.nphase), f"{p:g}", f"{target.ppf(p):.8g}",
                     f"{pt_quantile(rates, p):.8g}"])
    if cfg.out:
        _write_csv_atomic(os.path.join(cfg.out, "dist.csv"), rows)
    writer = csv.writer(sys.stdout)
    writer.writerows(rows)
    return EXIT_OK


def run(cfg):
    """Dispatch one parsed invocation; returns the process exit status."""
    handlers = {"fit": _cmd_fit, "simulate": _cmd_simulate, "sbc": _cmd_sbc,
                "predict": _cmd_predict, "dist": _cmd_dist}
    try:
        return handlers[cfg.command](cfg)
    except (SpecError, DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    except (LaplaceError, BoundsError, ConvergenceError, ArithmeticError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except Exception as exc:  # pragma: no cover - last resort
        log.exception("unexpected failure")
        print(f"unexpected error: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


def _parse_at(pairs):
    out = {}
    for item in pairs or []:
        if "=" not in item:
            raise SpecError(f"--at expects name=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = float(v)
    return out


def build_parser():
    p = argparse.ArgumentParser(
        prog="panelmsm",
        description="Markov and phase-type semi-Markov multi-state models "
                    "for panel data")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a model to a dataset")
    f.add_argument("--data", required=True)
    f.add_argument("--config", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--method", choices=["map", "laplace", "mcmc"],
                   default="map")
    f.add_argument("--seed", type=int)
    f.add_argument("--draws", type=int, default=1000)
    f.add_argument("--iterations", type=int, default=16000)

    s = sub.add_parser("simulate", help="simulate a dataset from the prior")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, required=True)

    b = sub.add_parser("sbc", help="simulation-based calibration study")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--seed", type=int, required=True)
    b.add_argument("--replicates", type=int, default=200)
    b.add_argument("--method", choices=["mcmc", "laplace", "prior"],
                   default="mcmc")
    b.add_argument("--iterations", type=int, default=16000)
    b.add_argument("--jobs", type=int, default=1)

    r = sub.add_parser("predict", help="derived predictions from a fit")
    r.add_argument("--config", required=True)
    r.add_argument("--fit", dest="fit_dir", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--from", dest="from_state")
    r.add_argument("--times", type=float, nargs="*", default=[])
    r.add_argument("--states", nargs="*", default=[])
    r.add_argument("--horizon", type=float)
    r.add_argument("--at", nargs="*", default=[],
                   help="covariate values, name=value")

    d = sub.add_parser("dist", help="phase-type approximation quantiles")
    d.add_argument("--family", choices=["gamma", "weibull"], required=True)
    d.add_argument("--shape", type=float, required=True)
    d.add_argument("--scale", type=float, default=1.0)
    d.add_argument("--nphase", type=int, default=5)
    d.add_argument("--out")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    seed = getattr(args, "seed", None)
    if args.command == "fit" and args.method in ("laplace", "mcmc") \
            and seed is None:
        print("error: --seed is required for stochastic fits",
              file=sys.stderr)
        return EXIT_INVALID_INPUT
    try:
        at = _parse_at(getattr(args, "at", []))
    except (SpecError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID_INPUT
    cfg = RunConfig(
        command=args.command,
        config=getattr(args, "config", None),
        data=getattr(args, "data", None),
        fit_dir=getattr(args, "fit_dir", None),
        out=getattr(args, "out", None),
        seed=seed,
        method=getattr(args, "method", "map"),
        draws=getattr(args, "draws", 1000),
        iterations=getattr(args, "iterations", 16000),
        replicates=getattr(args, "replicates", 200),
        jobs=getattr(args, "jobs", 1),
        family=getattr(args, "family", None),
        shape=getattr(args, "shape", None),
        scale=getattr(args, "scale", 1.0),
        nphase=getattr(args, "nphase", 5),
        from_state=getattr(args, "from_state", None),
        times=list(getattr(args, "times", []) or []),
        states=list(getattr(args, "states", []) or []),
        horizon=getattr(args, "horizon", None),
        at=at,
        verbose=args.verbose,
    )
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
