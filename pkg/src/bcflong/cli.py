"""Command-line interface: ``bcflong <subcommand> [options]``.

Every subcommand writes into one output directory containing a
``manifest.json`` with the fully resolved options.  Options may also come
from a flat ``key = value`` file passed with ``--config``; flags given on
the command line win.  Exit status is 0 on success, 2 for bad input or
configuration and 1 for failures during computation, with a JSON error
record on stderr.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import traceback
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pandas as pd

from . import __version__
from . import estimands as est
from . import svg
from .evaluation import ReplicationPlan, interval, run_replication_study
from .forests import ForestConfig
from .panel_data import PanelDataError, PanelDataset, load_panel
from .sampler import PosteriorDraws, SamplerConfig, SamplerError, run_gibbs, summarize_chain
from .simgen import (
    SemiSyntheticConfig,
    SyntheticConfig,
    gen_fully_synthetic,
    gen_semi_synthetic,
    write_simulation,
)

log = logging.getLogger("bcflong")

SCHEDULES = {
    "synthetic": {"max_iter": 5000, "burn_in": 1000, "thin": 1},
    "semi-synthetic": {"max_iter": 10000, "burn_in": 3000, "thin": 1},
    "clinical": {"max_iter": 100000, "burn_in": 3000, "thin": 10},
}
MODEL_PRESETS = {
    # one prognostic forest over every covariate, no treatment forest
    "synthetic": {"mu_trees": 100, "tau_trees": 0, "propensity": "none"},
    "semi-synthetic": {"mu_trees": 200, "tau_trees": 50},
    "clinical": {"mu_trees": 200, "tau_trees": 50},
}


class ConfigError(ValueError):
    """Invalid options or configuration file."""


# -- config handling -------------------------------------------------------------

def read_config(path) -> dict:
    """Parse a flat ``key = value`` file (``#`` comments, no sections)."""
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                   inline_comment_prefixes=("#",))
    try:
        cp.read_string("[run]\n" + p.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return {k.replace("-", "_"): v for k, v in cp["run"].items()}


def write_config(opts: dict, path):
    """Inverse of :func:`read_config` for the scalar/list options of a run."""
    lines = []
    for k in sorted(opts):
        v = opts[k]
        if v is None or k == "config":
            continue
        if isinstance(v, (list, tuple)):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n")


def _bool(s) -> bool:
    if isinstance(s, bool):
        return s
    v = str(s).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"not a boolean: {s!r}")


def _float_list(s):
    if isinstance(s, (list, tuple)):
        return [float(x) for x in s]
    return [float(x) for x in str(s).split(",") if x.strip()]


def _str_list(s):
    if isinstance(s, (list, tuple)):
        return list(s)
    return [x.strip() for x in str(s).split(",") if x.strip()]


# -- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bcflong", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value options file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--verbose", "-v", action="store_true")

    p = sub.add_parser("simulate", help="generate a synthetic panel with ground truth")
    common(p)
    p.add_argument("--preset", choices=["fully-synthetic", "semi-synthetic"])
    p.add_argument("--sparsity", type=float, default=0.0)
    p.add_argument("--n-subjects", type=int, default=200)
    p.add_argument("--rows", type=int, default=2583)
    p.add_argument("--friedman-scale", type=float, default=SyntheticConfig.friedman_scale)
    p.add_argument("--noise-factor", type=float, default=0.10)

    p = sub.add_parser("fit", help="run the Gibbs sampler and store posterior draws")
    common(p)
    p.add_argument("--data", help="panel CSV")
    p.add_argument("--preset", choices=sorted(SCHEDULES), default="semi-synthetic")
    p.add_argument("--re-prior", choices=["none", "base", "horseshoe"], default="horseshoe")
    p.add_argument("--a-rho-mode", choices=["unit", "sigma", "rho0"], default="sigma")
    p.add_argument("--n0", type=float)
    p.add_argument("--propensity", choices=["auto", "none", "constant", "logistic", "supplied"])
    p.add_argument("--max-iter", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--thin", type=int)
    p.add_argument("--mu-trees", type=int)
    p.add_argument("--tau-trees", type=int)
    p.add_argument("--hard-trees", type=_bool, default=False)
    p.add_argument("--store-lambda", type=_bool, default=False)
    p.add_argument("--keep-mu-forests", type=_bool, default=False)
    p.add_argument("--checkpoint-every", type=int, default=1000)
    p.add_argument("--resume", type=_bool, default=False)
    p.add_argument("--plots", type=_bool, default=True)

    p = sub.add_parser("predict", help="posterior predictions for new visits of fitted subjects")
    common(p)
    p.add_argument("--draws", help="draws directory written by fit")
    p.add_argument("--data", help="panel CSV with the rows to predict")

    p = sub.add_parser("effects", help="CATE, longitudinal and individual effect tables")
    common(p)
    p.add_argument("--draws")
    p.add_argument("--data", help="training panel CSV")
    p.add_argument("--t", type=float, action="append", dest="t",
                   help="evaluation time (repeatable; default 1 and 2)")
    p.add_argument("--grid-points", type=int, default=9)
    p.add_argument("--plots", type=_bool, default=True)

    p = sub.add_parser("harmonize", help="remove the estimated scanner component")
    common(p)
    p.add_argument("--draws")
    p.add_argument("--data", help="training panel CSV")
    p.add_argument("--plots", type=_bool, default=True)

    p = sub.add_parser("replicate", help="replication study over simulated realizations")
    common(p)
    p.add_argument("--preset", choices=["fully-synthetic", "semi-synthetic"],
                   default="fully-synthetic")
    p.add_argument("--sparsity", type=_float_list, default=[0.0])
    p.add_argument("--variants", type=_str_list)
    p.add_argument("--reps", type=int, default=20)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--burn-in", type=int)
    p.add_argument("--holdout-fraction", type=float, default=0.10)
    p.add_argument("--friedman-scale", type=float, default=SyntheticConfig.friedman_scale)

    p = sub.add_parser("diagnostics", help="trace, running-mean and ESS summaries of a chain")
    common(p)
    p.add_argument("--draws")
    p.add_argument("--plots", type=_bool, default=True)
    return ap


def parse_args(argv) -> argparse.Namespace:
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config:
        conf = read_config(args.config)
        sp = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sp._actions}
        unknown = set(conf) - set(known)
        if unknown:
            raise ConfigError(f"unknown keys in {args.config}: {sorted(unknown)}")
        given = set()
        for tok in argv:
            if tok.startswith("--"):
                given.add(tok[2:].split("=")[0].replace("-", "_"))
        for k, raw in conf.items():
            if k in given or k == "config":
                continue
            act = known[k]
            try:
                if isinstance(act, argparse._AppendAction):
                    val = [act.type(x) if act.type else x for x in _str_list(raw)]
                elif act.type is not None:
                    val = act.type(raw)
                else:
                    val = raw
            except (ValueError, argparse.ArgumentTypeError) as exc:
                raise ConfigError(f"bad value for {k}: {raw!r}") from exc
            if act.choices is not None and val not in act.choices:
                raise ConfigError(f"{k} must be one of {sorted(act.choices)}")
            setattr(args, k, val)
    return args


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) in (None, ""):
            raise ConfigError(f"--{n.replace('_', '-')} is required for {args.command}")


def _outdir(args) -> Path:
    out = Path(args.out or f"bcflong-{args.command}")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _manifest(out: Path, args, extra=None):
    opts = {k: v for k, v in vars(args).items() if k not in ("verbose",)}
    man = {"command": args.command, "version": __version__, "options": opts}
    if extra:
        man.update(extra)
    (out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=str))
    write_config({k: v for k, v in opts.items() if k != "command"}, out / "run.conf")


def _csv(df: pd.DataFrame, path):
    df.to_csv(path, index=False, float_format="%.10g")


def _load_draws(args) -> PosteriorDraws:
    _need(args, "draws")
    p = Path(args.draws)
    if not (p / "manifest.json").is_file():
        raise ConfigError(f"{p} is not a draws directory")
    return PosteriorDraws.load(p)


def _load_data(args) -> PanelDataset:
    _need(args, "data")
    if not Path(args.data).is_file():
        raise ConfigError(f"data file not found: {args.data}")
    return load_panel(args.data)


# -- subcommands -------------------------------------------------------------------

def cmd_simulate(args):
    _need(args, "preset")
    out = _outdir(args)
    if args.preset == "fully-synthetic":
        cfg = SyntheticConfig(N=args.n_subjects, sparsity=args.sparsity, seed=args.seed,
                              friedman_scale=args.friedman_scale, noise_factor=args.noise_factor)
        d, g = gen_fully_synthetic(cfg)
    else:
        cfg = SemiSyntheticConfig(L=args.rows, sparsity=args.sparsity, seed=args.seed,
                                  noise_factor=args.noise_factor)
        d, g = gen_semi_synthetic(cfg)
    write_simulation(d, g, out / "panel.csv", out / "truth.csv")
    _manifest(out, args, {"generator_config": asdict(cfg), "rows": d.L, "subjects": d.N})
    log.info("wrote %d rows for %d subjects to %s", d.L, d.N, out)


def sampler_config(args) -> SamplerConfig:
    sched = dict(SCHEDULES[args.preset])
    model = dict(MODEL_PRESETS[args.preset])
    for k in ("max_iter", "burn_in", "thin"):
        if getattr(args, k) is not None:
            sched[k] = getattr(args, k)
    mu_m = args.mu_trees if args.mu_trees is not None else model["mu_trees"]
    tau_m = args.tau_trees if args.tau_trees is not None else model["tau_trees"]
    soft = not args.hard_trees
    try:
        return SamplerConfig(
            **sched, seed=args.seed, re_prior=args.re_prior,
            mu=ForestConfig.mu_default(m=mu_m, soft=soft),
            tau=ForestConfig.tau_default(m=tau_m, soft=soft),
            a_rho_mode=args.a_rho_mode, N0=args.n0,
            propensity=args.propensity or model.get("propensity", "auto"),
            store_lambda=args.store_lambda, keep_mu_forests=args.keep_mu_forests,
            keep_tau_forests=tau_m > 0, checkpoint_every=args.checkpoint_every,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def write_diagnostics(draws: PosteriorDraws, out: Path, plots: bool):
    out.mkdir(parents=True, exist_ok=True)
    s = summarize_chain(draws)
    _csv(s.traces, out / "traces.csv")
    _csv(s.running_means, out / "running_means.csv")
    _csv(s.table(), out / "ess.csv")
    if plots:
        keep = {k: s.traces[k].to_numpy() for k in s.traces.columns if k != "draw"}
        (out / "trace.svg").write_text(svg.trace_plot(dict(list(keep.items())[:4]), "traces"))
    return s


def cmd_fit(args):
    d = _load_data(args)
    cfg = sampler_config(args)
    out = _outdir(args)
    cfg.checkpoint_dir = str(out / "checkpoint")
    draws = run_gibbs(d, cfg, resume=args.resume)
    draws.save(out / "draws")
    write_diagnostics(draws, out / "diagnostics", args.plots)
    _manifest(out, args, {"sampler": cfg.to_dict(), "n_draws": draws.n_draws})


def cmd_predict(args):
    draws = _load_draws(args)
    d = _load_data(args)
    if draws.mu_trace is None:
        raise ConfigError("these draws were fitted without --keep-mu-forests true; "
                          "prognostic predictions at new rows are unavailable")
    out = _outdir(args)
    try:
        pi = draws.subject_propensity(d)
    except (ValueError, PanelDataError) as exc:
        raise ConfigError(str(exc)) from exc
    mu = draws.predict_mu(d.K, pi)
    tau = draws.predict_tau(d.W, d.t) if draws.tau_trace is not None else np.zeros_like(mu)
    g = draws.gamma(d)
    mean = mu + tau * d.z + g
    rng = np.random.default_rng(args.seed)
    ypred = mean + rng.standard_normal(mean.shape) * np.sqrt(draws.sigma2)[:, None]
    lo, hi = interval(ypred)
    df = pd.DataFrame({"subject": d.subject_id, "time": d.t, "mu": mu.mean(0),
                       "tau": tau.mean(0), "gamma": g.mean(0), "y_mean": mean.mean(0),
                       "y_lo95": lo, "y_hi95": hi})
    _csv(df, out / "predictions.csv")
    _manifest(out, args)


def cmd_effects(args):
    draws = _load_draws(args)
    d = _load_data(args)
    out = _outdir(args)
    times = args.t or [1.0, 2.0]
    W = d.subject_W()
    _csv(est.effects_table(draws, W, times), out / "cate.csv")
    for t in times:
        ic = est.icate_summary(draws, d, t)
        _csv(ic, out / f"icate_t{t:g}.csv")
        if args.plots:
            (out / f"icate_t{t:g}.svg").write_text(svg.interval_plot(
                ic["mean"], ic["lo95"], ic["hi95"], list(ic["treatment"]),
                f"individual effects at t={t:g}", "effect"))
    # group-average trajectories under each treatment code
    grid = np.linspace(0.0, float(d.t.max()), args.grid_points)
    last = d.last_rows()
    mu_last = draws.mu[:, last] if draws.mu.shape[1] == d.L else None
    if mu_last is None:
        raise ConfigError("effects needs the training panel the draws were fitted on")
    pos = d.align_subjects(draws)[last]
    alpha = draws.alpha[:, pos, :]
    groups = {"treated": d.subject_z() > 0, "control": d.subject_z() < 0}
    rows, lines = [], {}
    for gname, sel in groups.items():
        if not sel.any():
            continue
        for z_cf in (0.5, -0.5):
            traj = np.empty((draws.n_draws, len(grid)))
            for j, t in enumerate(grid):
                tau = draws.predict_tau(W[sel], np.full(sel.sum(), t))
                cf = mu_last[:, sel] + tau * z_cf + alpha[:, sel, 0] + alpha[:, sel, 1] * t
                traj[:, j] = cf.mean(axis=1)
            lo, hi = interval(traj)
            label = f"{gname} subjects, z={'+' if z_cf > 0 else '-'}0.5"
            lines[label] = (traj.mean(0), lo, hi)
            for j, t in enumerate(grid):
                rows.append({"group": gname, "z_cf": z_cf, "time": t, "mean": traj[:, j].mean(),
                             "lo95": lo[j], "hi95": hi[j]})
    _csv(pd.DataFrame(rows), out / "trajectories.csv")
    if args.plots and lines:
        (out / "trajectories.svg").write_text(svg.trajectories(
            grid, lines, "counterfactual trajectories", "time", "outcome"))
    _manifest(out, args, {"times": times})


def cmd_harmonize(args):
    draws = _load_draws(args)
    d = _load_data(args)
    out = _outdir(args)
    h = est.harmonize(draws, d)
    df = pd.DataFrame({"subject": d.subject_id, "time": d.t, "y": h.y, "mu_hat": h.mu_hat,
                       "y_harm": h.y_harm})
    _csv(df, out / "harmonized.csv")
    kb = pd.DataFrame(h.K_bar, columns=list(d.K_names) or None)
    kb.insert(0, "subject", d.subjects)
    _csv(kb, out / "K_bar.csv")
    summary = {"slope_before": est.ls_slope(h.mu_hat, h.y),
               "slope_after": est.ls_slope(h.mu_hat, h.y_harm)}
    _csv(pd.DataFrame([summary]), out / "slopes.csv")
    if args.plots:
        (out / "harmonization.svg").write_text(svg.scatter_pair(
            h.mu_hat, h.y, h.y_harm, ("before", "after"), "estimated scanner effect",
            "outcome"))
    _manifest(out, args)


def cmd_replicate(args):
    out = _outdir(args)
    sched = SCHEDULES["synthetic" if args.preset == "fully-synthetic" else "semi-synthetic"]
    sampler = {"max_iter": args.max_iter or sched["max_iter"],
               "burn_in": args.burn_in if args.burn_in is not None else sched["burn_in"]}
    variants = args.variants or (["B", "S"] if args.preset == "fully-synthetic"
                                 else ["vanilla-BCF", "B", "S"])
    gen = {"friedman_scale": args.friedman_scale} if args.preset == "fully-synthetic" else {}
    try:
        plan = ReplicationPlan(generator=args.preset, generator_config=gen,
                               sparsity=tuple(args.sparsity), variants=tuple(variants),
                               n_reps=args.reps, sampler=sampler,
                               holdout_fraction=args.holdout_fraction, seed=args.seed,
                               workers=args.workers)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    rep = run_replication_study(
        plan, progress=lambda k, n: log.info("replication task %d/%d done", k, n))
    rep.table.to_csv(out / "report.csv", index=False, float_format="%.10g")
    rep.raw.drop(columns="seconds").to_csv(out / "raw.csv", index=False, float_format="%.10g")
    _manifest(out, args, {"plan": plan.to_dict(), "n_failed": rep.n_failed})


def cmd_diagnostics(args):
    draws = _load_draws(args)
    out = _outdir(args)
    write_diagnostics(draws, out, args.plots)
    _manifest(out, args)


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "predict": cmd_predict,
            "effects": cmd_effects, "harmonize": cmd_harmonize, "replicate": cmd_replicate,
            "diagnostics": cmd_diagnostics}


def _error_record(exc: BaseException, code: int) -> dict:
    tb = traceback.extract_tb(exc.__traceback__)
    module = Path(tb[-1].filename).stem if tb else ""
    return {"status": "error", "exit_code": code, "type": type(exc).__name__,
            "module": module, "message": str(exc)}


def run_command(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except ConfigError as exc:
        print(json.dumps(_error_record(exc, 2)), file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (ConfigError, PanelDataError, FileNotFoundError) as exc:
        print(json.dumps(_error_record(exc, 2)), file=sys.stderr)
        return 2
    except (SamplerError, Exception) as exc:  # noqa: BLE001
        rec = _error_record(exc, 1)
        print(json.dumps(rec), file=sys.stderr)
        log.debug("traceback", exc_info=exc)
        return 1
    return 0


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
