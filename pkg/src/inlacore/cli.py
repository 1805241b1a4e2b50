"""Command line front end.

Exit codes: 0 success, 2 invalid input, 3 numerical failure, 4 file I/O.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import traceback

import numpy as np

from .errors import InlaError, NumericalError, ValidationError

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_VALIDATION", "EXIT_NUMERICAL", "EXIT_IO"]

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4
THREADS_ENV = "INLACORE_THREADS"


def _default_threads() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _add_engine_flags(p):
    p.add_argument("--data", help="CSV file (defaults to the model file's 'data' entry)")
    p.add_argument("--strategy", choices=("auto", "grid", "ccd", "eb"), default="auto",
                   help="hyperparameter integration strategy (auto: grid up to 2 dimensions, else ccd)")
    p.add_argument("--latent", choices=("gaussian", "laplace"), default="gaussian",
                   help="approximation for the conditional latent marginals")
    p.add_argument("--grid-step", type=float, default=1.0)
    p.add_argument("--grid-cutoff", type=float, default=2.5)
    p.add_argument("--threads", type=int, default=_default_threads(),
                   help=f"worker threads (default from ${THREADS_ENV}, else 1)")
    p.add_argument("--seed", type=int, default=1)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="inlacore", description="Integrated nested Laplace approximations.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a model spec to data and write a result directory")
    p.add_argument("spec")
    _add_engine_flags(p)
    p.add_argument("--out", default="inla_result")
    p.add_argument("--plots", action="store_true", help="also render PNG figures under OUT/plots")
    p.add_argument("--quiet", action="store_true", help="do not print the summary")

    p = sub.add_parser("summary", help="print the summary table of a result")
    p.add_argument("result")
    p.add_argument("--predictor", action="store_true", help="include the linear predictor")
    p.add_argument("--random", action="store_true", help="include random-effect elements")

    p = sub.add_parser("predict", help="posterior predictive for a (held-out) observation")
    p.add_argument("result")
    p.add_argument("--index", type=int, required=True, help="observation number, 1-based (as in Predictor.07)")
    p.add_argument("--samples", type=int, default=0)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--kmax", type=int, default=None)
    p.add_argument("--out", default=None)
    p.add_argument("--plots", action="store_true")

    p = sub.add_parser("mcmc", help="Metropolis-Hastings over a conditioning parameter")
    p.add_argument("spec")
    _add_engine_flags(p)
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--burn-in", type=int, default=None)
    p.add_argument("--thin", type=int, default=1)
    p.add_argument("--scale", type=float, required=True)
    p.add_argument("--track", default="", help="comma-separated latent labels or 0-based indices")
    p.add_argument("--out", default="inla_mcmc")
    p.add_argument("--plots", action="store_true")

    p = sub.add_parser("marginal", help="operate on a two-column marginal file")
    p.add_argument("op", choices=("density", "cdf", "quantile", "sample", "hpd", "expect", "mode",
                                  "summary", "smooth", "transform"))
    p.add_argument("file")
    p.add_argument("args", nargs="*", help="values, a count, a probability or an expression in x")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", default=None, help="output file for smooth/transform/sample")

    p = sub.add_parser("plotdata", help="write two-column files for marginals and conditional curves")
    p.add_argument("result")
    p.add_argument("which", help="a marginal label, a section name (fixed, random, hyper, ...) or 'all'")
    p.add_argument("--out", default=None)
    p.add_argument("--plots", action="store_true")
    return ap


# -- commands ----------------------------------------------------------------------


def _load_model(args, offset_extra=None):
    from .io import build_model, load_spec, read_csv

    spec = load_spec(args.spec)
    data = args.data or spec.data_path()
    if data is None:
        raise ValidationError("no data file: pass --data or set 'data' in the model file")
    cols = read_csv(data)
    return spec, cols, build_model(spec, cols, offset_extra)


def _options(args):
    from .fit import FitOptions

    return FitOptions(strategy=args.strategy, latent=args.latent, grid_step=args.grid_step,
                      grid_cutoff=args.grid_cutoff, threads=args.threads)


def cmd_fit(args) -> int:
    from .fit import fit_model, render_summary

    _, _, model = _load_model(args)
    result = fit_model(model, _options(args))
    result.meta["seed"] = args.seed
    path = result.save(args.out)
    if args.plots:
        from .plotting import plot_fit

        plot_fit(result, os.path.join(args.out, "plots"))
    if not args.quiet:
        sys.stdout.write(render_summary(result))
        sys.stdout.write(f"Result written to {path}\n")
    return EXIT_OK


def cmd_summary(args) -> int:
    from .fit import FitResult, render_summary

    sys.stdout.write(render_summary(FitResult.load(args.result), predictor=args.predictor, random=args.random))
    return EXIT_OK


def _fmt_row(label, s):
    q = s["quantiles"]
    return (f"{label} mean={s['mean']:.6g} sd={s['sd']:.6g} 0.025quant={q['0.025quant']:.6g} "
            f"0.5quant={q['0.5quant']:.6g} 0.975quant={q['0.975quant']:.6g} mode={s['mode']:.6g}")


def cmd_predict(args) -> int:
    from .fit import FitResult
    from .likelihood import gaussian, poisson
    from .marginal_utils import summarize
    from .prediction import fitted_value_marginal, predictive_by_quadrature, predictive_by_sampling

    res = FitResult.load(args.result)
    i = args.index - 1
    labels = res.predictor_labels()
    if not 0 <= i < len(labels):
        raise ValidationError(f"--index must lie in 1..{len(labels)}")
    if res.meta["observed"][i]:
        sys.stderr.write(f"note: observation {args.index} was used in the fit\n")
    if res.meta["family"] == "poisson":
        fam = poisson()
    else:
        if res.meta.get("likelihood_has_hyper"):
            raise ValidationError("predictive for a gaussian likelihood with an unknown precision "
                                  "needs joint (eta, theta) sampling, which is not supported")
        fam = gaussian(res.meta.get("tau_obs", 1.0))
    eta = res.predictor_marginal(i)
    fv = fitted_value_marginal(res, i, res.meta["link"])
    sys.stdout.write(_fmt_row(labels[i], summarize(eta)) + "\n")
    sys.stdout.write(_fmt_row("fitted." + labels[i], summarize(fv)) + "\n")
    pred = predictive_by_quadrature(fv, fam, args.kmax)
    draws = None
    if args.samples > 0:
        draws = predictive_by_sampling(fv, fam, args.samples, args.seed)
    out = args.out
    if out:
        os.makedirs(out, exist_ok=True)
    if pred.kind == "poisson":
        sys.stdout.write(f"predictive mean={pred.mean():.6g} var={pred.variance():.6g} mass={pred.total_mass:.6f}\n")
        if draws is not None:
            sys.stdout.write(f"sampling n={draws.size} mean={draws.mean():.6g} TV={pred.tv_distance(draws):.4f}\n")
        sys.stdout.write("y\tprobability\n")
        for k, p in zip(pred.support, pred.probs):
            if p >= 1e-6:
                sys.stdout.write(f"{k}\t{p:.6g}\n")
        if out:
            with open(os.path.join(out, "predictive.dat"), "w") as fh:
                for k, p in zip(pred.support, pred.probs):
                    fh.write(f"{int(k)} {float(p)!r}\n")
    else:
        sys.stdout.write(f"predictive mean={pred.mean():.6g} var={pred.variance():.6g}\n")
        if out:
            pred.density.save(os.path.join(out, "predictive.dat"))
    if out:
        fv.save(os.path.join(out, "fitted.dat"))
        if draws is not None:
            np.savetxt(os.path.join(out, "samples.txt"), draws, fmt="%.17g")
        if args.plots:
            from .plotting import plot_predictive

            plot_predictive(pred, os.path.join(out, "predictive.png"), draws, title=labels[i])
    return EXIT_OK


def _parse_track(text, model):
    out = []
    labels = model.latent_labels
    for tok in [t.strip() for t in text.split(",") if t.strip()]:
        if tok.lstrip("-").isdigit():
            j = int(tok)
        elif tok in labels:
            j = labels.index(tok)
        else:
            raise ValidationError(f"--track: unknown latent element {tok!r}")
        if not 0 <= j < model.n_latent:
            raise ValidationError(f"--track: index {j} outside [0, {model.n_latent})")
        out.append(j)
    return out


def cmd_mcmc(args) -> int:
    from scipy.stats import norm

    from .io import build_model, evaluate_expression, load_spec, read_csv
    from .marginal_utils import summarize
    from .mcmc import ConditionedModel, GaussianRandomWalk, bma_marginal, run_chain

    spec = load_spec(args.spec)
    cond = spec.raw.get("conditioning")
    if not isinstance(cond, dict) or "covariate" not in cond:
        raise ValidationError("mcmc needs a 'conditioning' block with a 'covariate' expression")
    data = args.data or spec.data_path()
    if data is None:
        raise ValidationError("no data file: pass --data or set 'data' in the model file")
    cols = read_csv(data)
    t = evaluate_expression(cond["covariate"], cols)
    prior = cond.get("prior") or {}
    mean, sd = float(prior.get("mean", 0.0)), float(prior.get("sd", 1.0))
    if not sd > 0:
        raise ValidationError("conditioning prior sd must be positive")
    cm = ConditionedModel(build=lambda z: build_model(spec, cols, offset_extra=z[0] * t),
                          prior_zc=lambda z: float(norm.logpdf(z[0], mean, sd)), dim_zc=1,
                          options=_options(args))
    base = cm.build(np.zeros(1))
    track = _parse_track(args.track, base)
    rec = run_chain(cm, args.iters, GaussianRandomWalk(args.scale), seed=args.seed, burn_in=args.burn_in,
                    thin=args.thin, track=track, z0=[float(cond.get("start", mean))])
    os.makedirs(args.out, exist_ok=True)
    rec.to_csv(os.path.join(args.out, "chain.csv"))
    name = str(cond.get("name", "z_c"))
    zs = rec.samples[:, 0]
    sys.stdout.write(f"{name}: mean={zs.mean():.6g} sd={zs.std(ddof=1) if zs.size > 1 else 0.0:.6g} "
                     f"acceptance={rec.acceptance_rate:.3f} kept={zs.size}\n")
    for w in rec.warnings:
        sys.stderr.write(f"warning: {w}\n")
    labels = base.latent_labels
    for j in track:
        m = bma_marginal(rec, j)
        m.save(os.path.join(args.out, f"bma_{j}.dat"))
        sys.stdout.write(_fmt_row(labels[j], summarize(m)) + "\n")
    if args.plots:
        from .plotting import plot_chain

        plot_chain(rec, os.path.join(args.out, "chain.png"))
    return EXIT_OK


def _floats(vals, what):
    try:
        return np.array([float(v) for v in vals])
    except ValueError:
        raise ValidationError(f"{what} must be numbers") from None


def cmd_marginal(args) -> int:
    from . import marginal_utils as mu
    from .io import evaluate_expression
    from .marginal import Marginal

    m = Marginal.load(args.file)
    op, a = args.op, args.args
    w = sys.stdout.write

    def expr_fn(text):
        return lambda x: evaluate_expression(text, {"x": np.asarray(x, dtype=float)})

    if op in ("density", "cdf", "quantile"):
        vals = _floats(a, "arguments")
        if vals.size == 0:
            raise ValidationError(f"{op} needs at least one value")
        fn = {"density": mu.density_at, "cdf": mu.cdf_at, "quantile": mu.quantile_at}[op]
        for v, r in zip(vals, np.atleast_1d(fn(m, vals))):
            w(f"{v:.10g}\t{r:.10g}\n")
    elif op == "sample":
        n = int(a[0]) if a else 1
        draws = mu.sample(m, n, args.seed)
        if args.out:
            np.savetxt(args.out, draws, fmt="%.17g")
        else:
            for d in draws:
                w(f"{float(d)!r}\n")
    elif op == "hpd":
        p = float(a[0]) if a else 0.95
        lo, hi = mu.hpd_interval(m, p)
        w(f"{lo:.10g}\t{hi:.10g}\n")
    elif op == "expect":
        if not a:
            raise ValidationError("expect needs one or more expressions in x")
        for text in a:
            w(f"{text}\t{mu.expect(m, expr_fn(text)):.10g}\n")
    elif op == "mode":
        w(f"{mu.mode_of(m):.10g}\n")
    elif op == "summary":
        s = mu.summarize(m)
        w(f"mean\t{s['mean']:.10g}\nsd\t{s['sd']:.10g}\n")
        for k, v in s["quantiles"].items():
            w(f"{k}\t{v:.10g}\n")
        w(f"mode\t{s['mode']:.10g}\n")
    else:
        if op == "smooth":
            res = mu.smooth(m, int(a[0]) if a else 301)
        else:
            if not a:
                raise ValidationError("transform needs an expression in x, e.g. '1/sqrt(x)'")
            res = mu.transform(m, expr_fn(a[0]))
        if args.out:
            res.save(args.out)
        else:
            for x, d in zip(res.xs, res.ds):
                w(f"{float(x)!r} {float(d)!r}\n")
    return EXIT_OK


def cmd_plotdata(args) -> int:
    from .fit import SECTIONS, FitResult, _safe_name
    from .marginal_utils import density_at

    res = FitResult.load(args.result)
    out = args.out or os.path.join(args.result if os.path.isdir(args.result) else os.path.dirname(args.result),
                                   "plotdata")
    os.makedirs(out, exist_ok=True)
    if args.which == "all":
        targets = [(sec, lab) for sec in SECTIONS for lab in res.marginals[sec]]
    elif args.which in SECTIONS:
        targets = [(args.which, lab) for lab in res.marginals[args.which]]
    else:
        targets = [(sec, args.which) for sec in SECTIONS if args.which in res.marginals[sec]]
        if not targets:
            raise ValidationError(f"unknown plot target {args.which!r}")
    weights = np.array([p["normalized_weight"] for p in res.support])
    names: set = set()
    written = 0
    for sec, lab in targets:
        m = res.marginals[sec][lab]
        base = _safe_name(f"{sec}.{lab}", names)
        m.save(os.path.join(out, base + ".dat"))
        written += 1
        parts = res.conditionals.get(lab)
        if parts:
            raw = [w * np.asarray(density_at(c, m.xs)) for c, w in zip(parts, weights)]
            z = np.trapezoid(np.sum(raw, axis=0), m.xs)
            for k, (c, r) in enumerate(zip(parts, raw)):
                c.save(os.path.join(out, f"{base}.cond.k{k:03d}.dat"))
                with open(os.path.join(out, f"{base}.wcond.k{k:03d}.dat"), "w") as fh:
                    for x, d in zip(m.xs, r / z):
                        fh.write(f"{float(x)!r} {float(d)!r}\n")
                written += 2
            if args.plots:
                from .plotting import plot_conditionals

                plot_conditionals(parts, weights, m, os.path.join(out, base + ".png"), title=lab)
        elif args.plots:
            from .plotting import plot_marginal

            plot_marginal(m, os.path.join(out, base + ".png"), title=lab, xlabel=lab)
    sys.stdout.write(f"wrote {written} files to {out}\n")
    return EXIT_OK


COMMANDS = {"fit": cmd_fit, "summary": cmd_summary, "predict": cmd_predict, "mcmc": cmd_mcmc,
            "marginal": cmd_marginal, "plotdata": cmd_plotdata}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_VALIDATION
    except (NumericalError, InlaError) as exc:
        frames = traceback.extract_tb(exc.__traceback__)
        where = os.path.splitext(os.path.basename(frames[-1].filename))[0] if frames else "engine"
        sys.stderr.write(f"numerical failure in {where}: {exc}\n")
        return EXIT_NUMERICAL
    except OSError as exc:
        sys.stderr.write(f"I/O error: {exc}\n")
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
