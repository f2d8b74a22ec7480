"""Command-line interface: ``lifespan-gamm <command> [options]``.

Every option may also be given in a ``--config`` file of ``key = value``
lines (keys are option names without the leading dashes, ``-`` or ``_``);
options on the command line win.  Tables are CSV at full precision; human
summaries print 4 significant digits.  Errors are reported as one JSON object
on stderr with a nonzero exit status, and files written by the failed command
are removed.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import inference, sim
from .data import load_dataset, parse_date
from .errors import ConfigError, GammError
from .model import (VARIANTS, ModelSpec, canonical_spec, cross_sectional_effect, cross_sectional_grid,
                    fit_model, load_model, longitudinal_effect, parametric_table, predict, save_model,
                    uses_cohort, write_curves)

log = logging.getLogger("lifespan_gamm")

DEFAULTS = {
    "out": ".",
    "seed": 0,
    "level": 0.95,
    "draws": None,
    "grid_min": None,
    "grid_max": None,
    "grid_step": 0.1,
    "baselines": "10,30,50,70",
    "horizon": 15.0,
    "outcome": "outcome",
    "workers": 1,
    "preset": "desk",
}


def sig4(v) -> str:
    return f"{v:.4g}" if isinstance(v, (float, int, np.floating)) else str(v)


class Outputs:
    """Paths written by a command, removed again if the command fails."""

    def __init__(self, out_dir):
        self.dir = Path(out_dir)
        self.created_dir = not self.dir.exists()
        self.paths = []

    def path(self, name) -> Path:
        self.dir.mkdir(parents=True, exist_ok=True)
        p = self.dir / name
        self.paths.append(p)
        return p

    def discard(self):
        for p in self.paths:
            p.unlink(missing_ok=True)
        if self.created_dir and self.dir.exists() and not any(self.dir.iterdir()):
            self.dir.rmdir()


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in r])


def _print_table(header, rows, file=None):
    cells = [[str(h) for h in header]] + [[sig4(v) for v in r] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    for c in cells:
        print("  ".join(s.rjust(w) for s, w in zip(c, widths)), file=file or sys.stdout)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise ConfigError(f"--{n.replace('_', '-')} is required for '{args.command}'")


def _dataset(args):
    _require(args, "data")
    schema = {"outcome": args.outcome}
    if args.schema:
        schema = json.loads(Path(args.schema).read_text())
    return load_dataset(args.data, schema)


def _spec(args) -> ModelSpec:
    if args.spec and args.variant:
        raise ConfigError("give either --spec or --variant, not both")
    if args.spec:
        return ModelSpec.load(args.spec)
    if args.variant:
        return replace(canonical_spec(args.variant), outcome=args.outcome)
    raise ConfigError("a model is needed: --spec FILE or --variant {%s}" % ",".join(VARIANTS))


def _date(args):
    return None if args.date is None else parse_date(str(args.date))


def _age_grid(args, fitted):
    lo, hi = fitted.design.ranges.get("age", fitted.design.ranges.get("baseline_age", (None, None)))
    lo = lo if args.grid_min is None else float(args.grid_min)
    hi = hi if args.grid_max is None else float(args.grid_max)
    if lo is None or hi is None:
        raise ConfigError("--grid-min and --grid-max are required for this model")
    step = float(args.grid_step)
    if not step > 0 or hi < lo:
        raise ConfigError("grid needs step > 0 and max >= min")
    n = int(math.floor((hi - lo) / step + 1e-9))
    return np.round(lo + np.arange(n + 1) * step, 10)


def _baselines(args):
    try:
        return [float(b) for b in str(args.baselines).split(",") if b.strip()]
    except ValueError:
        raise ConfigError(f"--baselines must be comma-separated numbers, got {args.baselines!r}") from None


def _smooth_table(fitted):
    rows = []
    for t in fitted.smooth_terms:
        test = inference.wald_term_test(fitted, t.label)
        rows.append((t.label, test.edf, test.ref_df, test.statistic, test.p_value))
    return rows


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_fit(args, outs: Outputs):
    data = _dataset(args)
    spec = _spec(args)
    fitted = fit_model(spec, data)
    save_model(fitted, outs.path("model.json"))
    ptab = parametric_table(fitted, args.level)
    stab = _smooth_table(fitted)
    vrows = fitted.variance_components.as_rows()
    pct = f"{100 * args.level:g}"
    _write_rows(outs.path("p_table.csv"), ("term", "estimate", "se", "t", "p", "lower", "upper"), ptab)
    _write_rows(outs.path("s_table.csv"), ("term", "edf", "ref_df", "F", "p"), stab)
    _write_rows(outs.path("variance_components.csv"), ("group", "name", "sd"), vrows)
    lam = fitted.variance_components.lambdas
    _write_rows(outs.path("smoothing_parameters.csv"), ("penalty", "lambda"), list(lam.items()))
    print(f"model: {spec.variant or 'custom'}  n = {fitted.n_obs}  REML = {sig4(fitted.reml_value)}")
    print(f"\nParametric coefficients ({pct}% CI):")
    _print_table(("term", "Estimate", "Std.Error", "t", "p", "lower", "upper"), ptab)
    if stab:
        print("\nSmooth terms:")
        _print_table(("term", "edf", "Ref.df", "F", "p"), stab)
    else:
        print("\nNo smooth terms: plain regression fit.")
    print("\nVariance components:")
    _print_table(("Groups", "Name", "Std.Dev."), vrows)
    return fitted


def _load(args):
    _require(args, "model")
    return load_model(args.model)


def cmd_predict(args, outs: Outputs):
    fitted = _load(args)
    ages = _age_grid(args, fitted)
    date = _date(args)
    g = cross_sectional_grid(ages, date if uses_cohort(fitted.spec) else None)
    if uses_cohort(fitted.spec) and date is None:
        raise ConfigError("--date is required to predict from a cohort model")
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        pred = predict(fitted, g)
    for w in caught:
        log.warning("%s", w.message)
    z = inference.normal_multiplier(args.level)
    rows = [(a, e, s, e - z * s, e + z * s) for a, e, s in zip(ages, pred.estimate, pred.se)]
    _write_rows(outs.path("predictions.csv"), ("age", "estimate", "se", "lower", "upper"), rows)
    print(f"wrote {len(rows)} predictions")


def cmd_effects(args, outs: Outputs):
    fitted = _load(args)
    cohort_model = uses_cohort(fitted.spec)
    date = _date(args)
    if cohort_model and date is None:
        raise ConfigError("--date is required for the effects of a cohort model")
    ages = _age_grid(args, fitted)
    cs = cross_sectional_effect(fitted, ages, date)
    cs.to_csv(outs.path("cross_sectional.csv"), args.level)
    curves, extras = [], []
    for a1 in _baselines(args):
        cohort = date - a1 if cohort_model else None
        curves.append(longitudinal_effect(fitted, a1, cohort, float(args.horizon), float(args.grid_step)))
        extras.append({"baseline_age": repr(a1)})
    write_curves(curves, outs.path("longitudinal.csv"), args.level, extras)
    for c in [cs] + curves:
        for m in c.warnings:
            log.warning("%s: %s", c.label or c.kind, m)
    print(f"wrote cross-sectional curve ({ages.size} ages) and {len(curves)} longitudinal curves")


def cmd_sample(args, outs: Outputs):
    fitted = _load(args)
    date = _date(args)
    if uses_cohort(fitted.spec) and date is None:
        raise ConfigError("--date is required to sample curves of a cohort model")
    ages = _age_grid(args, fitted)
    n = int(args.draws or inference.DRAWS_HDI)
    grid = cross_sectional_grid(ages, date if uses_cohort(fitted.spec) else None)
    sample = inference.sample_posterior_curves(fitted, grid, n, int(args.seed), int(args.workers),
                                               abscissa=ages)
    pw = inference.pointwise_band(sample, args.level)
    sb = inference.simultaneous_band(fitted, level=args.level, sample=sample)
    inference.write_bands(outs.path("bands.csv"), ages, [pw, sb])
    inference.write_draws(outs.path("draws.csv"), sample)
    peak, iv = inference.age_at_max_distribution(sample, args.level)
    _write_rows(outs.path("age_at_max.csv"), ("draw", "age_at_max"), list(enumerate(peak.tolist())))
    inference.write_hdi_summary(outs.path("age_at_max_summary.csv"), [("age_at_max", peak.mean(), iv)])
    print(f"{n} draws; simultaneous multiplier {sig4(sb.multiplier)} (pointwise {sig4(pw.multiplier)})")
    print(f"age at maximum: mean {sig4(peak.mean())}, {100 * args.level:g}% HDI "
          f"[{sig4(iv.lower)}, {sig4(iv.upper)}]")


def cmd_simulate(args, outs: Outputs):
    exp = sim.load_preset(args.preset)
    if args.seed_given:
        exp = replace(exp, master_seed=int(args.seed))
    if args.replicates is not None:
        exp = replace(exp, n_replicates=int(args.replicates))
    for name in ("cells.csv", "averages.csv", "failures.csv", "run.json") + (
            ("cross_sectional.csv",) if exp.cross_sectional else ()):
        outs.path(name)
    report = sim.run_experiment(exp, workers=int(args.workers))
    report.write(outs.dir)
    _summarize(report)


def _summarize(report):
    print(f"preset {report.experiment.name}: {report.experiment.n_replicates} replicates, "
          f"seed {report.experiment.master_seed}, {len(report.failures)} failed fits")
    _print_table(("region", "regime", "variant", "RMSE", "bias", "variance", "sd", "n_ok"), report.averages)
    rows = sim.check_rows(report)
    if rows:
        print()
        _print_table(("check", "region", "passed"), rows)
    return rows


def cmd_report(args, outs: Outputs):
    src = args.results or args.out
    report = sim.read_report(src)
    rows = _summarize(report)
    outs.dir, outs.created_dir = Path(src), False
    _write_rows(outs.path("checks.csv"), ("check", "region", "passed"), rows)


def cmd_check(args, outs: Outputs):
    fitted = _load(args)
    data = _dataset(args)
    rows = []
    for t in fitted.smooth_terms:
        test = inference.wald_term_test(fitted, t.label)
        try:
            bc = inference.basis_dimension_check(fitted, t.label, data, seed=int(args.seed))
            k = (bc.k_prime, bc.k_index, bc.p_value)
        except GammError:
            k = ("", "", "")
        rows.append((t.label, k[0], test.edf, k[1], k[2], test.statistic, test.p_value))
    _write_rows(outs.path("check.csv"), ("term", "k_prime", "edf", "k_index", "k_p_value", "F", "p"), rows)
    _print_table(("term", "k'", "edf", "k-index", "p-value", "F", "p(F)"), rows)


COMMANDS = {"fit": cmd_fit, "predict": cmd_predict, "effects": cmd_effects, "sample": cmd_sample,
            "simulate": cmd_simulate, "report": cmd_report, "check": cmd_check}


# ---------------------------------------------------------------------------
# argument handling
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=None)
    a = common.add_argument
    a("--config", help="file of 'key = value' lines supplying any option")
    a("--data", help="long-format CSV dataset")
    a("--schema", help="JSON file mapping CSV columns to roles")
    a("--outcome", help="outcome column (default 'outcome')")
    a("--spec", help="model spec JSON file")
    a("--variant", choices=VARIANTS, help="one of the six built-in model variants")
    a("--model", help="fitted model JSON written by 'fit'")
    a("--seed", type=int, help="random seed")
    a("--out", help="output directory (default '.')")
    a("--grid-min", type=float, help="smallest age of the prediction grid")
    a("--grid-max", type=float, help="largest age of the prediction grid")
    a("--grid-step", type=float, help="grid spacing in years (default 0.1)")
    a("--level", type=float, help="interval level (default 0.95)")
    a("--draws", type=int, help="posterior draws (default 20000)")
    a("--date", help="calendar date (ISO or decimal years since 1970)")
    a("--baselines", help="comma-separated baseline ages (default 10,30,50,70)")
    a("--horizon", type=float, help="longitudinal horizon in years (default 15)")
    a("--preset", help="simulation preset name or JSON file (default desk)")
    a("--replicates", type=int, help="override the preset's replicate count")
    a("--results", help="directory of simulation results for 'report'")
    a("--workers", type=int, help="parallel workers (default 1)")
    a("-v", "--verbose", action="store_true", default=False, help="log progress to stderr")
    p = argparse.ArgumentParser(prog="lifespan-gamm", description=__doc__.splitlines()[0])
    p.set_defaults(option_types={act.dest: act.type for act in common._actions})
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"fit": "fit a model and write coefficient tables",
             "predict": "population predictions on an age grid",
             "effects": "cross-sectional and longitudinal effect curves",
             "sample": "posterior curve draws, bands and age at maximum",
             "simulate": "run a simulation-study preset",
             "report": "summarize and check simulation results",
             "check": "term tests and basis-dimension diagnostics"}
    for name, h in helps.items():
        sub.add_parser(name, parents=[common], help=h)
    return p


def read_config(path) -> dict:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from None
    try:
        cp.read_string("[options]\n" + text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config file: {exc}") from None
    return {k.replace("-", "_"): v for k, v in cp["options"].items()}


def _boolean(v: str) -> bool:
    if v.strip().lower() in ("1", "true", "yes", "on"):
        return True
    if v.strip().lower() in ("0", "false", "no", "off"):
        return False
    raise ValueError(v)


def resolve(args, parser) -> argparse.Namespace:
    """Merge config-file values under command-line flags, then defaults."""
    given = {k for k, v in vars(args).items() if v is not None}
    if args.config:
        conf = read_config(args.config)
        types = args.option_types
        for k, v in conf.items():
            if k not in types or k in ("config", "help", "command"):
                raise ConfigError(f"unknown config key {k!r}")
            if k in given and not (k == "verbose" and not args.verbose):
                continue
            conv = types[k] or (_boolean if k == "verbose" else str)
            try:
                setattr(args, k, conv(v))
            except ValueError:
                raise ConfigError(f"config key {k!r}: bad value {v!r}") from None
    args.seed_given = args.seed is not None
    for k, v in DEFAULTS.items():
        if getattr(args, k, None) is None:
            setattr(args, k, v)
    if not 0 < args.level < 1:
        raise ConfigError("--level must lie in (0, 1)")
    return args


def _error(exc) -> dict:
    kind = exc.kind if isinstance(exc, GammError) else ("io" if isinstance(exc, OSError) else "error")
    return {"error": kind, "type": type(exc).__name__, "message": str(exc)}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    outs = None
    try:
        args = resolve(args, parser)
        outs = Outputs(args.out)
        COMMANDS[args.command](args, outs)
    except (GammError, OSError, ValueError, np.linalg.LinAlgError) as exc:
        if outs is not None:
            outs.discard()
        print(json.dumps(_error(exc)), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
