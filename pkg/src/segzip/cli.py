"""Command line interface: ``segzip simulate | fit | bench | diagnose``.

Settings come from an optional TOML or JSON config file (``--config``)
with flags overriding it.  Exit codes: 0 success, 2 parse or config
error, 3 non-convergence under ``--strict``, 1 for a fit that fails
outright.
"""

import argparse
import csv
import json
import logging
import sys
import warnings

import numpy as np

from .bench import FitRecipe, diagnose, qq_slope, run_replicates, summarize
from .design import Known, ModelSpec, Random, ZetaMode
from .errors import DomainError, ParseError, SegZipError, StructuralError
from .io import CsvSchema, export, ingest_csv
from .segfit import AlgorithmOptions, GridOptions, fit_known, fit_random
from .segfun import ChangepointBounds, SegKind
from .simulate import CrbsiConfig, ScenarioConfig, gen_crbsi, gen_scenario

log = logging.getLogger("segzip")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NONCONVERGED = 3
EXIT_FAILED = 1

SCENARIO_SCHEMA = CsvSchema(id="id", time="x", count="y", exposure="offset", type_col=None,
                            count_covariates=("1", "time"), zero_covariates=("1",),
                            re_covariates=("1", "time"))
PRESETS = {"crbsi": CsvSchema(), "scenario": SCENARIO_SCHEMA}


def _load_config(path):
    if path is None:
        return {}
    try:
        if str(path).endswith(".toml"):
            try:
                import tomllib
            except ImportError:
                import tomli as tomllib
            with open(path, "rb") as fh:
                return tomllib.load(fh)
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except (OSError, ValueError) as exc:
        raise ParseError(f"cannot read config {path}: {exc}")


def _pick(args, name, cfg, key, default=None):
    v = getattr(args, name, None)
    if v is not None:
        return v
    return cfg.get(key, default)


def _scenario_config(args, cfg):
    sim = dict(cfg.get("simulate", {}))
    kind = _pick(args, "scenario", sim, "scenario", "1")
    sim.pop("scenario", None)
    if args.n_clusters is not None:
        sim["n_clusters" if kind != "crbsi" else "n_hospitals"] = args.n_clusters
    if getattr(args, "m", None) is not None:
        sim["m_per_cluster" if kind != "crbsi" else "n_months"] = args.m
    if args.seed is not None:
        sim["master_seed"] = args.seed
    try:
        if kind == "1":
            return kind, ScenarioConfig.scenario1(**sim)
        if kind == "2":
            return kind, ScenarioConfig.scenario2(**sim)
        if kind == "crbsi":
            return kind, CrbsiConfig(**sim)
    except TypeError as exc:
        raise ParseError(f"bad simulate settings: {exc}")
    raise ParseError(f"unknown scenario {kind!r}")


def _write_dataset(data, path, kind):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        if kind == "crbsi":
            w.writerow(["id", "month", "BSI", "CVC", "NAT"])
            for c in data.clusters:
                for o in c.observations:
                    nat = "Private" if o.x_row[2] == 1.0 else "Public"
                    w.writerow([c.id, repr(o.t), o.y, repr(o.offset), nat])
        else:
            w.writerow(["id", "x", "y", "offset"])
            for c in data.clusters:
                for o in c.observations:
                    w.writerow([c.id, repr(o.t), o.y, repr(o.offset)])


def cmd_simulate(args, cfg):
    kind, scfg = _scenario_config(args, cfg)
    gen = gen_crbsi if kind == "crbsi" else gen_scenario
    data, truth = gen(scfg, args.replicate)
    _write_dataset(data, args.output, kind)
    if args.truth:
        from .io import _clean
        with open(args.truth, "w", encoding="utf-8") as fh:
            json.dump(_clean({"config": scfg.to_dict() if hasattr(scfg, "to_dict") else
                              {k: getattr(scfg, k) for k in scfg.__dataclass_fields__},
                              "replicate": args.replicate, **truth}), fh, indent=1)
    print(f"wrote {data.n_obs} observations in {len(data)} clusters to {args.output}")
    return EXIT_OK


def _schema(args, cfg):
    preset = _pick(args, "preset", cfg, "preset", "crbsi")
    if preset not in PRESETS:
        raise ParseError(f"unknown preset {preset!r}")
    base = PRESETS[preset]
    over = cfg.get("schema")
    if over:
        from dataclasses import asdict
        return CsvSchema.from_dict({**asdict(base), **over})
    return base


def _model_spec(schema, cfg, args):
    m = dict(cfg.get("model", {}))
    kind = SegKind(_pick(args, "seg_kind", m, "seg_kind", "linear"))
    psi = _pick(args, "psi", m, "psi")
    bounds = _pick(args, "bounds", m, "bounds")
    zeta = ZetaMode(_pick(args, "zeta_mode", m, "zeta_mode", "none"))
    if psi is not None:
        mode = Known(float(psi))
    else:
        mode = Random(None if bounds is None else ChangepointBounds(*bounds))
    random_delta = bool(m.get("random_delta", True))
    random_lambda = bool(m.get("random_lambda", isinstance(mode, Random)))
    try:
        return ModelSpec(p_count=len(schema.count_covariates), p_zero=len(schema.zero_covariates),
                         q_cluster=len(schema.re_covariates), seg_kind=kind, cp_mode=mode,
                         random_delta=random_delta, random_lambda=random_lambda, zeta_mode=zeta,
                         count_names=tuple(m.get("count_names", _names("beta", schema.count_covariates))),
                         zero_names=tuple(m.get("zero_names", _names("gamma", schema.zero_covariates))),
                         re_names=tuple(m.get("re_names", _names("b", schema.re_covariates))))
    except (TypeError, ValueError) as exc:
        raise ParseError(f"bad model settings: {exc}")


def _names(prefix, covs):
    return [f"{prefix}{k}" for k in range(len(covs))]


def _fit(data, spec, args, cfg):
    f = cfg.get("fit", {})
    if isinstance(spec.cp_mode, Known):
        return fit_known(data, spec)
    opts = AlgorithmOptions(tol=float(f.get("tol", 1e-5)), max_iter=int(f.get("max_iter", 50)))
    grid = GridOptions(step=float(_pick(args, "grid_step", f, "grid_step", 0.25)))
    init = _pick(args, "init_psi", f, "init_psi")
    return fit_random(data, spec, init_psi=init, opts=opts, grid=grid)


def _print_fit(res):
    print(f"loglik {res.loglik:.4f}  iterations {res.iterations}  converged {res.converged}")
    for name, est, se, p in res.fixed_table():
        print(f"  {name:>12s} {est: .5f}  se {se:.5f}  p {p:.3g}")
    if res.population_changepoint is not None:
        print(f"  changepoint {res.population_changepoint:.4f}")
    elif res.spec.has_lambda:
        # per-cluster bounds: no single population value, report the cluster average
        print(f"  mean cluster changepoint {np.mean(res.cluster_changepoints):.4f}")
    crit = res.criteria
    print(f"  deviance {crit['deviance']:.1f}  AIC {crit['aic']:.1f}  BIC {crit['bic']:.1f}")


def cmd_fit(args, cfg):
    schema = _schema(args, cfg)
    ing = ingest_csv(args.data, schema)
    spec = _model_spec(schema, cfg, args)
    res = _fit(ing.dataset, spec, args, cfg)
    _print_fit(res)
    if args.output:
        export(res, args.output)
    if args.strict and not res.converged:
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_diagnose(args, cfg):
    schema = _schema(args, cfg)
    ing = ingest_csv(args.data, schema)
    spec = _model_spec(schema, cfg, args)
    res = _fit(ing.dataset, spec, args, cfg)
    bundle = diagnose(res, ing.dataset)
    print(f"pearson mean {np.mean(bundle.pearson):.4f}  sd {np.std(bundle.pearson):.4f}")
    if bundle.mahalanobis is not None:
        print(f"mahalanobis QQ slope {qq_slope(bundle.mahalanobis, bundle.chi2_quantiles):.3f}")
    for k, v in bundle.flags.items():
        print(f"  flag {k}: {v}")
    if args.output:
        export(bundle, args.output)
    if args.strict and not res.converged:
        return EXIT_NONCONVERGED
    return EXIT_OK


def cmd_bench(args, cfg):
    kind, scfg = _scenario_config(args, cfg)
    if kind == "crbsi":
        raise ParseError("bench runs the simulation scenarios 1 and 2")
    b = cfg.get("bench", {})
    recipe = FitRecipe(grid_step=float(_pick(args, "grid_step", b, "grid_step", 0.25)),
                       init_psi=_pick(args, "init_psi", b, "init_psi"),
                       tol=float(b.get("tol", 1e-5)), max_iter=int(b.get("max_iter", 50)),
                       se=bool(b.get("se", True)))
    R = int(_pick(args, "replicates", b, "replicates", 50))
    workers = int(_pick(args, "workers", b, "workers", 1))

    def progress(info):
        log.info("replicate %d: converged %s after %d iterations", info.replicate,
                 info.converged, info.iterations)

    table = run_replicates(scfg, R, recipe, workers=workers, deterministic=args.deterministic,
                           checkpoint=args.checkpoint, progress=progress)
    if args.output:
        export(table, args.output)
    try:
        summ = summarize(table)
    except DomainError as exc:
        summ = {}
        print(f"no summary: {exc}")
    if summ:
        print(f"{'param':>8s} {'truth':>8s} {'mean':>9s} {'median':>9s} {'sd':>8s} {'ARB%':>7s} {'n':>4s}")
    for s in summ.values():
        arb = "n/a" if s.arb_percent is None else f"{s.arb_percent:.1f}"
        print(f"{s.param:>8s} {s.truth:8.3f} {s.mean:9.4f} {s.median:9.4f} {s.sd:8.4f} "
              f"{arb:>7s} {s.n_used:4d}")
    n_conv = sum(i.converged for i in table.infos)
    print(f"converged {n_conv}/{table.n_replicates}")
    if args.strict and n_conv < table.n_replicates:
        return EXIT_NONCONVERGED
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="segzip", description="Segmented ZIP mixed models")
    p.add_argument("--config", help="TOML or JSON settings file")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int)
        sp.add_argument("--deterministic", action="store_true",
                        help="zero the wall-time column so exports are bit-identical")
        sp.add_argument("--strict", action="store_true", help="exit 3 on non-convergence")

    s = sub.add_parser("simulate", help="write a simulated panel as CSV")
    common(s)
    s.add_argument("--scenario", choices=["1", "2", "crbsi"])
    s.add_argument("--n-clusters", type=int)
    s.add_argument("--m", type=int, help="observations per cluster (months for crbsi)")
    s.add_argument("--replicate", type=int, default=0)
    s.add_argument("--truth", help="also write the generator truth as JSON")
    s.add_argument("-o", "--output", required=True)

    for name, helptext in (("fit", "fit a model to a CSV panel"),
                           ("diagnose", "fit then export residual diagnostics")):
        f = sub.add_parser(name, help=helptext)
        common(f)
        f.add_argument("data")
        f.add_argument("--preset", choices=sorted(PRESETS))
        f.add_argument("--seg-kind", choices=[k.value for k in SegKind])
        f.add_argument("--psi", type=float, help="known changepoint (omit for random)")
        f.add_argument("--bounds", type=float, nargs=2, metavar=("L1", "L2"))
        f.add_argument("--zeta-mode", choices=[z.value for z in ZetaMode])
        f.add_argument("--grid-step", type=float)
        f.add_argument("--init-psi", type=float)
        f.add_argument("-o", "--output", help="export path (.json or .csv)")

    b = sub.add_parser("bench", help="replicate study with Table-style summary")
    common(b)
    b.add_argument("--scenario", choices=["1", "2"])
    b.add_argument("--n-clusters", type=int)
    b.add_argument("--m", type=int)
    b.add_argument("--replicates", type=int)
    b.add_argument("--grid-step", type=float)
    b.add_argument("--init-psi", type=float)
    b.add_argument("--workers", type=int)
    b.add_argument("--checkpoint", help="JSON-lines file for resumable runs")
    b.add_argument("-o", "--output", help="export path (.json or .csv)")
    return p


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "bench": cmd_bench, "diagnose": cmd_diagnose}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.verbose == 0:
        warnings.filterwarnings("ignore", category=RuntimeWarning)
    try:
        cfg = _load_config(args.config)
        return COMMANDS[args.command](args, cfg)
    except (ParseError, DomainError, StructuralError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SegZipError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
