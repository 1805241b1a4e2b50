"""End-to-end fitting: mode search over theta, integration points, latent and
hyperparameter marginals, and the persisted result document."""

from __future__ import annotations

import json
import os
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import InlaError, ValidationError
from .hyper_posterior import ThetaTarget, find_mode_theta, log_marginal_likelihood, normalized_theta_marginal
from .integration import integration_points, normalized_weights
from .latent_marginals import gaussian_latent_marginal, laplace_latent_marginal, mix_marginals
from .marginal import Marginal
from .marginal_utils import SUMMARY_QUANTILES, summarize, transform
from .model import LatentGaussianModel

__all__ = ["FitOptions", "InlaRun", "run_inla", "FitResult", "fit_model", "render_summary", "RESULT_FILE"]

RESULT_FILE = "result.json"
TIMINGS_FILE = "timings.json"
FORMAT_NAME = "inlacore-result"
FORMAT_VERSION = 1
LATENT_STRATEGIES = ("gaussian", "laplace")


@dataclass(frozen=True)
class FitOptions:
    strategy: str = "auto"
    latent: str = "gaussian"
    grid_step: float = 1.0
    grid_cutoff: float = 2.5
    threads: int = 1

    def __post_init__(self):
        if self.latent not in LATENT_STRATEGIES:
            raise ValidationError(f"unknown latent strategy {self.latent!r}; use gaussian or laplace")
        if self.threads < 1:
            raise ValidationError("threads must be at least 1")


@dataclass(eq=False)
class InlaRun:
    """Everything computed for one model, before any labelling or persistence."""

    model: LatentGaussianModel
    target: ThetaTarget
    theta_post: object
    support: list
    weights: np.ndarray
    log_mlik: float
    marginals: dict
    conditionals: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)


def _pmap(fn, items, threads):
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, items))
    return [fn(it) for it in items]


def run_inla(model: LatentGaussianModel, options: FitOptions = FitOptions(), indices: Optional[Sequence[int]] = None,
             init=None, keep_conditionals: bool = False) -> InlaRun:
    """The four steps: theta mode, support points, conditional latent marginals, mixtures.

    ``indices`` restricts the latent marginals computed (default: all).
    """
    clock = time.perf_counter
    t0 = clock()
    target = ThetaTarget(model)
    tp = find_mode_theta(target, model.initial_theta() if init is None else init)
    t1 = clock()
    support = integration_points(tp, options.strategy, options.grid_step, options.grid_cutoff, options.threads)
    weights = normalized_weights(support)
    mlik = log_marginal_likelihood(support)
    t2 = clock()
    conds = [target.conditional(p.theta) for p in support]
    idx = list(range(model.n_latent)) if indices is None else [int(i) for i in indices]
    for i in idx:
        if not 0 <= i < model.n_latent:
            raise ValidationError(f"latent index {i} outside [0, {model.n_latent})")
    for g in conds:
        g.marginal_variances  # computed once, before any threads share it
    one = gaussian_latent_marginal if options.latent == "gaussian" else laplace_latent_marginal

    def work(i):
        parts = [one(g, i) for g in conds]
        return parts, mix_marginals(list(zip(parts, weights)))

    results = _pmap(work, idx, options.threads)
    t3 = clock()
    marginals = {i: r[1] for i, r in zip(idx, results)}
    conditionals = {i: r[0] for i, r in zip(idx, results)} if keep_conditionals else {}
    timings = {"mode": t1 - t0, "integration": t2 - t1, "latent": t3 - t2}
    return InlaRun(model, target, tp, support, weights, mlik, marginals, conditionals, timings)


# -- result document -------------------------------------------------------------


def _summary_row(m: Marginal) -> dict:
    s = summarize(m)
    row = {"mean": s["mean"], "sd": s["sd"], "mode": s["mode"]}
    row.update(s["quantiles"])
    return row


def _safe_name(label: str, taken: set) -> str:
    base = re.sub(r"[^A-Za-z0-9._-]+", "_", label).strip("_") or "m"
    name, k = base, 1
    while name in taken:
        k += 1
        name = f"{base}_{k}"
    taken.add(name)
    return name


SECTIONS = ("fixed", "random", "hyper", "hyper_internal", "predictor", "fitted")


@dataclass(eq=False)
class FitResult:
    """Labelled marginals, summaries and metadata of a fit.

    ``marginals[section][label]`` holds a :class:`Marginal` for each section
    in ``fixed`` (intercept and fixed effects), ``random`` (iid/rw2
    elements), ``hyper`` (precision scale), ``hyper_internal`` (log
    precision), ``predictor`` (linear predictor) and ``fitted``
    (predictor through the inverse link).
    """

    meta: dict
    theta: dict
    support: list
    log_mlik: float
    marginals: dict
    conditionals: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def predictor_labels(self) -> list:
        return list(self.marginals["predictor"])

    def predictor_marginal(self, i: int) -> Marginal:
        labels = self.predictor_labels()
        if not 0 <= i < len(labels):
            raise ValidationError(f"predictor index {i} outside [0, {len(labels)})")
        return self.marginals["predictor"][labels[i]]

    def marginal(self, label: str) -> Marginal:
        for sec in SECTIONS:
            if label in self.marginals.get(sec, {}):
                return self.marginals[sec][label]
        raise ValidationError(f"no marginal labelled {label!r}")

    def summaries(self) -> dict:
        return {sec: {lab: _summary_row(m) for lab, m in self.marginals.get(sec, {}).items()} for sec in SECTIONS}

    # persistence

    def save(self, out_dir) -> str:
        """Write ``result.json``, two-column marginal files and ``timings.json``."""
        os.makedirs(out_dir, exist_ok=True)
        taken: dict = {}
        files: dict = {}
        for sec in SECTIONS:
            files[sec] = {}
            sec_dir = os.path.join(out_dir, "marginals", sec)
            os.makedirs(sec_dir, exist_ok=True)
            names: set = set()
            for lab, m in self.marginals.get(sec, {}).items():
                rel = os.path.join("marginals", sec, _safe_name(lab, names) + ".dat")
                m.save(os.path.join(out_dir, rel))
                files[sec][lab] = rel
        cond_files: dict = {}
        names = set()
        for lab, parts in self.conditionals.items():
            d = _safe_name(lab, names)
            os.makedirs(os.path.join(out_dir, "conditionals", d), exist_ok=True)
            rels = []
            for k, m in enumerate(parts):
                rel = os.path.join("conditionals", d, f"k{k:03d}.dat")
                m.save(os.path.join(out_dir, rel))
                rels.append(rel)
            cond_files[lab] = rels
        doc = {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "meta": self.meta,
            "theta": self.theta,
            "support": self.support,
            "log_marginal_likelihood": self.log_mlik,
            "summaries": self.summaries(),
            "order": {sec: list(self.marginals.get(sec, {})) for sec in SECTIONS},
            "marginal_files": files,
            "conditional_files": cond_files,
        }
        path = os.path.join(out_dir, RESULT_FILE)
        with open(path, "w") as fh:
            json.dump(_plain(doc), fh, sort_keys=True, indent=1)
            fh.write("\n")
        with open(os.path.join(out_dir, TIMINGS_FILE), "w") as fh:
            json.dump(_plain(self.timings), fh, sort_keys=True, indent=1)
            fh.write("\n")
        return path

    @classmethod
    def load(cls, path) -> "FitResult":
        """Read a result directory (or its ``result.json``)."""
        out_dir = path if os.path.isdir(path) else os.path.dirname(os.path.abspath(path))
        doc_path = os.path.join(out_dir, RESULT_FILE)
        try:
            with open(doc_path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise ValidationError(f"corrupt result document {doc_path}: {exc}") from None
        if not isinstance(doc, dict) or doc.get("format") != FORMAT_NAME:
            raise ValidationError(f"{doc_path} is not a result document")
        try:
            marginals = {}
            for sec in SECTIONS:
                marginals[sec] = {lab: Marginal.load(os.path.join(out_dir, doc["marginal_files"][sec][lab]))
                                  for lab in doc["order"][sec]}
            conditionals = {lab: [Marginal.load(os.path.join(out_dir, r)) for r in rels]
                            for lab, rels in doc.get("conditional_files", {}).items()}
            timings = {}
            tpath = os.path.join(out_dir, TIMINGS_FILE)
            if os.path.exists(tpath):
                with open(tpath) as fh:
                    timings = json.load(fh)
            return cls(doc["meta"], doc["theta"], doc["support"], float(doc["log_marginal_likelihood"]),
                       marginals, conditionals, timings)
        except KeyError as exc:
            raise ValidationError(f"result document {doc_path} lacks field {exc}") from None


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else str(v)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    return obj


def fit_model(model: LatentGaussianModel, options: FitOptions = FitOptions(), link: str = "auto",
              keep_conditionals: bool = True) -> FitResult:
    """Fit ``model`` and label every marginal."""
    from .prediction import LINKS

    run = run_inla(model, options, keep_conditionals=keep_conditionals)
    t0 = time.perf_counter()
    labels = model.latent_labels
    m = model.n_obs
    fixed, random_, predictor = {}, {}, {}
    for i in range(m):
        predictor[labels[i]] = run.marginals[i]
    comp_rows = []
    for c in model.components:
        sl = model.latent_slice(c.name)
        for i in range(sl.start, sl.stop):
            (fixed if c.kind in ("intercept", "fixed") else random_)[labels[i]] = run.marginals[i]
        entry = {"name": c.name, "kind": c.kind, "model": c.model_label, "size": c.size}
        if c.kind in ("intercept", "fixed"):
            entry["prior_precision"] = model.prior_precision_of(c)
        else:
            entry["hyper"] = model.hyper[c.hyper_slot].name
        comp_rows.append(entry)
    if link == "auto":
        link = "exp" if model.likelihood.kind == "poisson" else "identity"
    inv = LINKS[link]
    fitted = {}
    for lab, mg in predictor.items():
        fitted["fitted." + lab] = mg if link == "identity" else transform(mg, inv)
    hyper, hyper_internal = {}, {}
    tp = run.theta_post
    for j, slot in enumerate(model.free_slots):
        name = model.hyper[slot].name
        mt = normalized_theta_marginal(tp, j, run.support)
        hyper_internal["log(" + name + ")"] = mt
        hyper[name] = transform(mt, np.exp)
    cond = {}
    for i, parts in run.conditionals.items():
        cond[labels[i]] = parts
    meta = {
        "family": model.likelihood.kind,
        "link": link,
        "tau_obs": model.likelihood.tau_obs,
        "likelihood_has_hyper": model.likelihood.has_hyper,
        "n_obs": m,
        "n_latent": model.n_latent,
        "observed": model.observed.astype(int).tolist(),
        "components": comp_rows,
        "hyper": [{"name": h.name, "prior": h.prior.kind, "params": list(h.prior.params),
                   "fixed": h.prior.is_fixed} for h in model.hyper],
        "free_slots": model.free_slots.tolist(),
        "strategy": options.strategy if options.strategy != "auto" else
        ("grid" if tp.dim <= 2 else "ccd"),
        "latent_strategy": options.latent,
        "grid_step": options.grid_step,
        "grid_cutoff": options.grid_cutoff,
        "predictor_noise_log_precision": model.predictor_noise_log_precision,
        "fixed_effect_prior_precision": model.fixed_effect_prior_precision,
        "summary_quantiles": list(SUMMARY_QUANTILES),
    }
    theta = {
        "mode": tp.mode.tolist(),
        "log_post_mode": tp.log_post_mode,
        "hessian": tp.hessian.tolist(),
        "standardizer": tp.V.tolist(),
        "hessian_ok": tp.hessian_ok,
        "n_evaluations": len(run.target.evaluations),
    }
    support = [{"theta": p.theta.tolist(), "z": p.z.tolist(), "log_post": p.log_post, "weight": p.weight,
                "normalized_weight": float(w)} for p, w in zip(run.support, run.weights)]
    timings = dict(run.timings)
    timings["labelling"] = time.perf_counter() - t0
    marginals = {"fixed": fixed, "random": random_, "hyper": hyper, "hyper_internal": hyper_internal,
                 "predictor": predictor, "fitted": fitted}
    return FitResult(meta, theta, support, run.log_mlik, marginals, cond, timings)


# -- text summary ----------------------------------------------------------------

_COLS = ("mean", "sd", "0.025quant", "0.5quant", "0.975quant", "mode")


def _num(v) -> str:
    return f"{float(v):.4g}"


def _table(rows: dict) -> list:
    if not rows:
        return []
    cells = [[lab] + [_num(r[c]) for c in _COLS] for lab, r in rows.items()]
    head = [""] + list(_COLS)
    widths = [max(len(row[k]) for row in cells + [head]) for k in range(len(head))]
    out = [" ".join([head[0].ljust(widths[0])] + [h.rjust(w) for h, w in zip(head[1:], widths[1:])]).rstrip()]
    for row in cells:
        out.append(" ".join([row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]))
    return out


def render_summary(result: FitResult, predictor: bool = False, random: bool = False) -> str:
    """Fixed-width text summary: fixed effects, random effects, hyperparameters,
    marginal log-likelihood (and optionally the linear predictor)."""
    s = result.summaries()
    lines = []
    lines.append("Fixed effects:")
    lines.extend(_table(s["fixed"]) or ["  (none)"])
    lines.append("")
    rand = [c for c in result.meta["components"] if c["kind"] in ("iid", "rw2")]
    if rand:
        lines.append("Random effects:")
        width = max(4, max(len(c["name"]) for c in rand))
        lines.append(f"{'Name'.rjust(width)}   Model")
        for c in rand:
            lines.append(f"{c['name'].rjust(width)}   {c['model']}")
        lines.append("")
        if random:
            lines.extend(_table(s["random"]))
            lines.append("")
    if s["hyper"]:
        lines.append("Model hyperparameters:")
        lines.extend(_table(s["hyper"]))
        lines.append("")
    else:
        lines.append("The model has no random effects hyperparameters")
        lines.append("")
    if predictor:
        lines.append("Linear predictor:")
        lines.extend(_table(s["predictor"]))
        lines.append("")
    lines.append(f"Marginal log-Likelihood:  {result.log_mlik:.2f}")
    lines.append(f"Integration strategy: {result.meta['strategy']}  Latent strategy: {result.meta['latent_strategy']}")
    return "\n".join(lines) + "\n"
