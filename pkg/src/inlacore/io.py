"""Model-spec files (YAML) and CSV data.

A spec looks like::

    response: y
    likelihood:
      family: poisson
    components:
      - {name: (Intercept), kind: intercept, prior: {precision: 0}}
      - {name: log(x + 10), kind: fixed, covariate: log(x + 10)}
      - {name: x, kind: fixed, covariate: x}
      - {name: u, kind: iid, group: u, prior: pc_u}
    priors:
      pc_u: {kind: pc.prec, u: 1, alpha: 0.01}
    options:
      fixed_effect_prior_precision: 0.001

Covariates may be arithmetic expressions over column names using
``+ - * / **`` and the functions ``log exp sqrt abs log10 log1p``.
"""

from __future__ import annotations

import ast
import csv
import os
from dataclasses import dataclass
from typing import Optional

import numpy as np
import yaml

from .errors import ValidationError
from .likelihood import family_from_name
from .model import HyperPrior, HyperSlot, LatentComponent, LatentGaussianModel

__all__ = ["read_csv", "evaluate_expression", "load_spec", "build_model", "ModelSpec", "NA_TOKENS"]

NA_TOKENS = ("", "NA", "na", "NaN", "nan")

_FUNCS = {"log": np.log, "exp": np.exp, "sqrt": np.sqrt, "abs": np.abs, "log10": np.log10, "log1p": np.log1p}
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply, ast.Div: np.divide, ast.Pow: np.power}


def read_csv(path) -> dict:
    """Columns of a comma-separated file with a header row, as float arrays.

    Empty cells and ``NA`` become ``NaN``.  Non-numeric columns are kept as
    string arrays (usable as group labels).
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except UnicodeDecodeError as exc:
        raise ValidationError(f"{path}: not a text file ({exc})") from None
    rows = [r for r in rows if any(cell.strip() for cell in r)]
    if not rows:
        raise ValidationError(f"{path}: empty data file")
    header = [h.strip() for h in rows[0]]
    if len(set(header)) != len(header) or any(not h for h in header):
        raise ValidationError(f"{path}: header must hold unique, nonempty column names")
    body = rows[1:]
    if not body:
        raise ValidationError(f"{path}: data file has a header but no rows")
    cols = {}
    for j, name in enumerate(header):
        raw = []
        for ln, r in enumerate(body, start=2):
            if len(r) != len(header):
                raise ValidationError(f"{path}, line {ln}: expected {len(header)} fields, found {len(r)}")
            raw.append(r[j].strip())
        try:
            cols[name] = np.array([np.nan if v in NA_TOKENS else float(v) for v in raw])
        except ValueError:
            cols[name] = np.array(raw, dtype=object)
    return cols


def evaluate_expression(expr: str, columns: dict) -> np.ndarray:
    """Evaluate an arithmetic expression over numeric columns without ``eval``."""
    try:
        tree = ast.parse(str(expr), mode="eval")
    except SyntaxError as exc:
        raise ValidationError(f"cannot parse expression {expr!r}: {exc.msg}") from None

    def ev(node):
        if isinstance(node, ast.Expression):
            return ev(node.body)
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            return float(node.value)
        if isinstance(node, ast.Name):
            if node.id not in columns:
                raise ValidationError(f"expression {expr!r}: unknown column {node.id!r}")
            col = columns[node.id]
            if col.dtype == object:
                raise ValidationError(f"expression {expr!r}: column {node.id!r} is not numeric")
            return col
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left), ev(node.right))
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            v = ev(node.operand)
            return -v if isinstance(node.op, ast.USub) else v
        if (isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and node.func.id in _FUNCS
                and len(node.args) == 1 and not node.keywords):
            return _FUNCS[node.func.id](ev(node.args[0]))
        raise ValidationError(f"expression {expr!r}: unsupported construct {ast.dump(node)[:40]}")

    with np.errstate(all="ignore"):
        out = ev(tree)
    n = len(next(iter(columns.values()))) if columns else 0
    return np.broadcast_to(np.asarray(out, dtype=float), (n,)).copy()


@dataclass
class ModelSpec:
    raw: dict
    path: Optional[str]

    def data_path(self) -> Optional[str]:
        d = self.raw.get("data")
        if d is None:
            return None
        if self.path and not os.path.isabs(d):
            return os.path.join(os.path.dirname(os.path.abspath(self.path)), d)
        return d


def load_spec(path) -> ModelSpec:
    with open(path) as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            raise ValidationError(f"{path}: invalid YAML: {exc}") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: model spec must be a mapping")
    return ModelSpec(raw, str(path))


def _prior(spec, priors: dict, where: str) -> HyperPrior:
    if spec is None:
        return HyperPrior.log_gamma()
    if isinstance(spec, str):
        if spec not in priors:
            raise ValidationError(f"{where}: unknown prior {spec!r}")
        spec = priors[spec]
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ValidationError(f"{where}: prior needs a 'kind' field")
    kind = str(spec["kind"]).lower().replace("_", ".")
    try:
        if kind in ("pc.prec", "pc"):
            return HyperPrior.pc_precision(float(spec.get("u", 1.0)), float(spec.get("alpha", 0.01)))
        if kind in ("loggamma", "log.gamma"):
            return HyperPrior.log_gamma(float(spec.get("a", 1.0)), float(spec.get("b", 5e-5)))
        if kind == "fixed":
            return HyperPrior.fixed(float(spec["value"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"{where}: bad prior parameters ({exc})") from None
    raise ValidationError(f"{where}: unknown prior kind {spec['kind']!r}")


def _group_index(values, kind: str, where: str, size=None):
    if values.dtype != object and np.any(np.isnan(values)):
        raise ValidationError(f"{where}: group column has missing values")
    if kind == "rw2":
        if values.dtype == object or np.any(values != np.round(values)):
            raise ValidationError(f"{where}: rw2 group column must hold integers")
        lo = int(values.min())
        hi = int(values.max()) if size is None else lo + int(size) - 1
        if hi < values.max():
            raise ValidationError(f"{where}: size smaller than the group range")
        labels = tuple(range(lo, hi + 1))
        return (values - lo).astype(np.int64), len(labels), labels
    uniq = sorted(set(values.tolist()), key=lambda v: (isinstance(v, str), v))
    pos = {v: k for k, v in enumerate(uniq)}
    labels = tuple(int(v) if isinstance(v, float) and v.is_integer() else v for v in uniq)
    n = len(uniq) if size is None else int(size)
    if n < len(uniq):
        raise ValidationError(f"{where}: size smaller than the number of groups")
    return np.array([pos[v] for v in values.tolist()], dtype=np.int64), n, labels


def build_model(spec: ModelSpec, columns: dict, offset_extra=None) -> LatentGaussianModel:
    """Turn a parsed spec and data columns into a :class:`LatentGaussianModel`."""
    raw = spec.raw
    where = spec.path or "model spec"
    resp = raw.get("response")
    if resp is None:
        raise ValidationError(f"{where}: missing 'response'")
    if resp not in columns:
        raise ValidationError(f"{where}: response column {resp!r} not in data")
    y = columns[resp]
    if y.dtype == object:
        raise ValidationError(f"{where}: response column {resp!r} is not numeric")
    priors = raw.get("priors") or {}
    if not isinstance(priors, dict):
        raise ValidationError(f"{where}: 'priors' must be a mapping")
    hyper = []
    lik = raw.get("likelihood") or {}
    if not isinstance(lik, dict) or "family" not in lik:
        raise ValidationError(f"{where}: likelihood block needs a 'family'")
    family = str(lik["family"])
    if family.lower() in ("gaussian", "normal") and lik.get("precision") is None:
        hyper.append(HyperSlot(lik.get("hyper_name", "Precision for the Gaussian observations"),
                               _prior(lik.get("prior"), priors, f"{where}: likelihood")))
        fam = family_from_name(family, hyper_slot=0)
    else:
        fam = family_from_name(family, tau_obs=lik.get("precision"))
    comps = []
    items = raw.get("components")
    if not isinstance(items, list) or not items:
        raise ValidationError(f"{where}: 'components' must be a nonempty list")
    for k, c in enumerate(items):
        cw = f"{where}: components[{k}]"
        if not isinstance(c, dict) or "kind" not in c:
            raise ValidationError(f"{cw}: needs a 'kind'")
        kind = str(c["kind"]).lower()
        name = str(c.get("name", c.get("covariate", c.get("group", kind))))
        prior = c.get("prior")
        if isinstance(prior, str) and prior in priors:
            prior = priors[prior]
        if kind == "intercept":
            prec = None if not isinstance(prior, dict) else prior.get("precision")
            comps.append(LatentComponent.intercept(name if "name" in c else "(Intercept)",
                                                   None if prec is None else float(prec)))
        elif kind in ("fixed", "linear"):
            if "covariate" not in c:
                raise ValidationError(f"{cw}: fixed effect needs 'covariate'")
            z = evaluate_expression(c["covariate"], columns)
            if not np.all(np.isfinite(z)):
                raise ValidationError(f"{cw}: covariate {c['covariate']!r} has missing or non-finite values")
            prec = None if not isinstance(prior, dict) else prior.get("precision")
            comps.append(LatentComponent.fixed(name, z, None if prec is None else float(prec)))
        elif kind in ("iid", "rw2"):
            g = c.get("group")
            if g is None or g not in columns:
                raise ValidationError(f"{cw}: group column {g!r} not in data")
            idx, size, labels = _group_index(columns[g], kind, cw, c.get("size"))
            w = None
            if c.get("weights") is not None:
                w = evaluate_expression(c["weights"], columns)
            hyper.append(HyperSlot(c.get("hyper_name", f"Precision for {name}"), _prior(c.get("prior"), priors, cw),
                                   float(c.get("initial", 4.0))))
            ctor = LatentComponent.iid if kind == "iid" else LatentComponent.rw2
            comps.append(ctor(name, idx, len(hyper) - 1, size=size, weights=w, labels=labels))
        else:
            raise ValidationError(f"{cw}: unknown kind {kind!r}")
    opts = raw.get("options") or {}
    offset = None
    if raw.get("offset") is not None:
        offset = evaluate_expression(raw["offset"], columns)
    if offset_extra is not None:
        offset = (0.0 if offset is None else offset) + np.asarray(offset_extra, dtype=float)
    try:
        return LatentGaussianModel(
            tuple(comps), fam, y, tuple(hyper),
            predictor_noise_log_precision=float(opts.get("predictor_noise_log_precision", 15.0)),
            fixed_effect_prior_precision=float(opts.get("fixed_effect_prior_precision", 0.001)),
            rw2_diagonal=float(opts.get("rw2_diagonal", 1e-5)),
            offset=offset,
        )
    except ValidationError as exc:
        raise ValidationError(f"{where}: {exc}") from None
