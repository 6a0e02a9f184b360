"""Command-line front end.

Sub-commands ``fit``, ``predict``, ``tree``, ``forest``, ``importance`` and
``simulate`` read CSV data and write JSON models and CSV tables into an
output directory.  Every output embeds a run manifest (command, formula,
data path and hash, options, seed, version and timestamp); reruns with an
equal manifest produce byte-identical files.

Exit codes: 0 success, 2 user error (bad flags, formula, data), 3
numerical failure (non-convergence, infeasible parameters).
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .data import DataError, Dataset, load_csv, write_csv
from .fit import FitError, FittedModel, SpecificationError, confint, mle
from .forest import ForestControl, ForestError, TransformationForest, fit_forest, forest_loglik, partial_dependence, var_importance
from .formula import FormulaError, LoweringError, lower, parse
from .model import NonMonotoneError
from .predict import DECILES, cdf, density, ecdf_overlay, quantile
from .simulate import simulate_survey
from .tree import RoutingError, TransformationTree, TreeControl, fit_tree

__all__ = ["main", "build_parser", "RunManifest", "UserError", "NumericalError"]

log = logging.getLogger("transmod")

EXIT_USER = 2
EXIT_NUMERIC = 3
SCHEMA_VERSION = 1
_NOT_OPTIONS = {"command", "formula", "data", "seed", "threads", "out", "handler"}


class UserError(Exception):
    """Invalid input supplied on the command line or in a file."""


class NumericalError(Exception):
    """A numerical procedure failed."""


@dataclass(frozen=True)
class RunManifest:
    command: str
    formula: str | None
    data_path: str | None
    data_sha256: str | None
    options: dict = field(default_factory=dict)
    seed: int = 1
    version: str = __version__
    timestamp: str = ""

    def to_dict(self):
        return {
            "schema": SCHEMA_VERSION,
            "command": self.command,
            "formula": self.formula,
            "data": {"path": self.data_path, "sha256": self.data_sha256},
            "options": self.options,
            "seed": self.seed,
            "version": self.version,
            "timestamp": self.timestamp,
        }

    def line(self) -> str:
        return "manifest " + json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp(path) -> str:
    """``SOURCE_DATE_EPOCH`` if set, else the modification time of ``path`` (else the epoch)."""
    env = os.environ.get("SOURCE_DATE_EPOCH")
    if env is not None:
        try:
            t = int(env)
        except ValueError:
            raise UserError(f"SOURCE_DATE_EPOCH must be an integer, got {env!r}") from None
    elif path is not None:
        t = int(os.stat(path).st_mtime)
    else:
        t = 0
    return _dt.datetime.fromtimestamp(t, _dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _manifest(args) -> RunManifest:
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in _NOT_OPTIONS}
    data = getattr(args, "data", None)
    if data and not os.path.isfile(data):
        raise UserError(f"data file {data!r} not found")
    return RunManifest(
        args.command,
        getattr(args, "formula", None),
        data,
        _sha256(data) if data else None,
        opts,
        args.seed,
        __version__,
        _timestamp(data),
    )


# ------------------------------------------------------------------ output


def _write_json(path: Path, manifest: RunManifest, payload: dict):
    doc = {"manifest": manifest.to_dict(), **payload}
    path.write_text(json.dumps(doc, indent=1) + "\n", encoding="utf-8")


def _num(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return "" if v is None else str(v)


def _write_table(path: Path, manifest: RunManifest, header, rows):
    buf = io.StringIO()
    buf.write(f"# {manifest.line()}\n")
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(header)
    for r in rows:
        wr.writerow([_num(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8")


def _outdir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UserError(f"cannot create output directory {out}: {e.strerror}") from None
    return out


# ------------------------------------------------------------------- input


def _key_list(value, key):
    """``key=a,b`` or ``a,b`` -> ``["a", "b"]``."""
    if value is None:
        return []
    text = value
    if "=" in text:
        k, text = text.split("=", 1)
        if k.strip() != key:
            raise UserError(f"expected '{key}=...', got {value!r}")
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise UserError(f"empty list in {value!r}")
    return items


def _schema(args) -> dict:
    schema = {}
    for name in _key_list(getattr(args, "categorical", None), "categorical"):
        schema[name] = "categorical"
    for name in _key_list(getattr(args, "numeric", None), "numeric"):
        schema[name] = "numeric"
    for spec in getattr(args, "levels", None) or []:
        if "=" not in spec:
            raise UserError(f"--levels expects VAR=L1,L2,..., got {spec!r}")
        var, levs = spec.split("=", 1)
        schema[var.strip()] = [s.strip() for s in levs.split(",") if s.strip()]
    return schema


def _read(args, response) -> Dataset:
    if not args.data:
        raise UserError("--data is required")
    if not os.path.isfile(args.data):
        raise UserError(f"data file {args.data!r} not found")
    return load_csv(args.data, response, getattr(args, "weights", None), _schema(args))


def _complete(d: Dataset, required) -> Dataset:
    """Rows without missing values in the response and the ``required`` columns."""
    names = [v for v in required if v in d.covariates]
    out = d.complete_cases(names)
    if out.n < d.n:
        log.warning("dropped %d rows with missing values", d.n - out.n)
    if np.any(~np.isfinite(out.response)):
        keep = np.flatnonzero(np.isfinite(out.response))
        log.warning("dropped %d rows with missing response", out.n - keep.size)
        out = out.subset(keep)
    if out.n == 0:
        raise UserError("no complete observations")
    return out


def _threads(args) -> int:
    t = args.threads
    if t is None:
        env = os.environ.get("TRANSMOD_THREADS")
        if env is None:
            return 1
        try:
            t = int(env)
        except ValueError:
            raise UserError(f"TRANSMOD_THREADS must be an integer, got {env!r}") from None
    if t < 1:
        raise UserError("--threads must be positive")
    return t


# ----------------------------------------------------------------- commands


def _normal_summary(fm: FittedModel):
    """Per-cell mean and standard deviation of linear probit models without shifts."""
    spec = fm.spec
    if spec.link.kind != "probit" or spec.trafo.kind != "linear" or spec.shifts is not None:
        return []
    names = spec.strata.cell_names() if spec.strata is not None else ["all"]
    out = []
    for c, name in enumerate(names):
        a, b = fm.theta[2 * c : 2 * c + 2]
        out.append({"cell": name, "mean": float(-a / b), "sd": float(1.0 / b)})
    return out


def _summary_text(manifest, fm: FittedModel, intervals, level, normal):
    lines = [f"# {manifest.line()}", ""]
    lines.append(f"formula: {fm.spec.formula}")
    lines.append(f"link: {fm.spec.link.kind}")
    lines.append(f"observations: {fm.n_obs}")
    lines.append(f"weight sum: {fm.weight_sum:.6f}")
    lines.append(f"parameters: {fm.n_params}")
    lines.append(f"log-likelihood: {fm.loglik:.6f}")
    lines.append(f"iterations: {fm.report.iterations}")
    lines.append(f"max |score| / weight sum: {fm.report.grad_norm:.3e}")
    lines.append(f"intervals: Wald, level {level:g}")
    if fm.report.active:
        lines.append("active monotonicity constraints: " + ", ".join(fm.names[j] for j in fm.report.active))
    lines.append("")
    width = max(len(iv.name) for iv in intervals)
    has_or = any(iv.odds_ratio is not None for iv in intervals)
    head = f"{'parameter':<{width}}  {'estimate':>12}  {'se':>10}  {'lower':>12}  {'upper':>12}"
    if has_or:
        head += f"  {'OR':>9}  {'OR lower':>9}  {'OR upper':>9}"
    lines.append(head)
    for iv in intervals:
        row = f"{iv.name:<{width}}  {iv.estimate:12.6f}  {iv.se:10.6f}  {iv.lower:12.6f}  {iv.upper:12.6f}"
        if iv.odds_ratio is not None:
            row += "  " + "  ".join(f"{v:9.4f}" for v in iv.odds_ratio)
        if not iv.reliable:
            row += "  (at constraint)"
        lines.append(row.rstrip())
    if normal:
        lines.append("")
        lines.append("normal parameters per cell:")
        for r in normal:
            lines.append(f"  {r['cell'] or 'all'}: mean {r['mean']:.10g}, sd {r['sd']:.10g}")
    return "\n".join(lines) + "\n"


def _fit_model(args):
    f = parse(args.formula)
    d = _complete(_read(args, f.response), f.variables)
    spec = lower(f, d)
    return d, mle(spec, d)


def cmd_fit(args):
    if not 0.0 < args.level < 1.0:
        raise UserError(f"--level must lie in (0, 1), got {args.level}")
    overlay = _key_list(args.overlay, "strata") if args.overlay else []
    manifest = _manifest(args)
    d, fm = _fit_model(args)
    out = _outdir(args)
    intervals = confint(fm, args.level)
    normal = _normal_summary(fm)
    payload = {
        "model": fm.to_dict(),
        "intervals": {
            "method": "wald",
            "level": args.level,
            "rows": [
                {
                    "name": iv.name,
                    "estimate": iv.estimate,
                    "se": iv.se,
                    "lower": iv.lower,
                    "upper": iv.upper,
                    "odds_ratio": None if iv.odds_ratio is None else list(iv.odds_ratio),
                    "reliable": iv.reliable,
                }
                for iv in intervals
            ],
        },
    }
    if normal:
        payload["normal"] = normal
    _write_json(out / "params.json", manifest, payload)
    (out / "summary.txt").write_text(_summary_text(manifest, fm, intervals, args.level, normal), encoding="utf-8")
    for v in overlay:
        if v not in d.covariates or not d.column(v).is_categorical:
            raise UserError(f"overlay variable {v!r} must be a categorical column")
    rows = []
    for cell in ecdf_overlay(fm, d, overlay):
        for y, e, m in zip(cell.y, cell.ecdf, cell.model_cdf):
            rows.append((cell.cell, y, e, m, cell.sup_distance))
    _write_table(out / "curves.csv", manifest, ["cell", "y", "ecdf", "model_cdf", "sup_distance"], rows)
    print(f"log-likelihood {fm.loglik:.6f} with {fm.n_params} parameters; outputs in {out}")
    return 0


def _variables(args, d: Dataset, f):
    if args.variables:
        names = _key_list(args.variables, "variables")
    else:
        names = [v for v in d.covariates if v not in f.variables]
    for v in names:
        if v not in d.covariates:
            raise UserError(f"unknown partitioning variable {v!r}")
    if not names:
        raise UserError("no partitioning variables")
    return names


def _tree_control(args, default: TreeControl) -> TreeControl:
    kw = {}
    for flag, key in (("alpha", "alpha"), ("min_split", "min_split"), ("min_leaf", "min_leaf"), ("max_depth", "max_depth"), ("permutations", "n_perm"), ("test", "test")):
        v = getattr(args, flag, None)
        if v is not None:
            kw[key] = v
    d = default.to_dict()
    d.update(kw)
    d["seed"] = args.seed
    try:
        return TreeControl.from_dict(d)
    except (TypeError, ValueError) as e:
        raise UserError(str(e)) from None


def _ensemble_outputs(args, manifest, out: Path, model, d: Dataset, doc: dict):
    _write_json(out / "model.json", manifest, doc)
    imp = var_importance(model, d, repeats=args.repeats, seed=args.seed, oob=False)
    _write_table(out / "importance.csv", manifest, ["variable", "importance"], sorted(imp.items(), key=lambda kv: (-kv[1], kv[0])))
    if args.pdp:
        vars_ = _key_list(args.pdp, "vars")
        try:
            rows = partial_dependence(model, vars_, data=d)
        except ValueError as e:
            raise UserError(str(e)) from None
        _write_table(out / "pdp.csv", manifest, [*vars_, "p", "quantile"], [[r[v] for v in vars_] + [r["p"], r["quantile"]] for r in rows])
    return imp


def _base_and_data(args):
    f = parse(args.formula)
    if f.strata or f.shifts or f.trafo.kind in ("tensor", "varying"):
        raise UserError("trees and forests need an unconditional formula such as 'bmi ~ bernstein(5)'")
    d = _read(args, f.response)
    variables = _variables(args, d, f)
    d = _complete(d, variables)
    return f, d, lower(f, d), variables


def cmd_tree(args):
    manifest = _manifest(args)
    f, d, spec, variables = _base_and_data(args)
    ctrl = _tree_control(args, TreeControl())
    t = fit_tree(d, spec, ctrl, variables)
    out = _outdir(args)
    ll = t.loglik(d)
    doc = {"kind": "tree", "loglik": ll, "tree": t.to_dict()}
    _ensemble_outputs(args, manifest, out, t, d, doc)
    print(f"tree with {len(t.leaves)} leaves, log-likelihood {ll:.6f}; outputs in {out}")
    return 0


def _mtry(value):
    if value is None or value == "all":
        return value
    try:
        m = int(value)
    except ValueError:
        raise UserError(f"--mtry must be a positive integer or 'all', got {value!r}") from None
    if m < 1:
        raise UserError("--mtry must be positive")
    return m


def cmd_forest(args):
    manifest = _manifest(args)
    threads = _threads(args)
    f, d, spec, variables = _base_and_data(args)
    tctrl = _tree_control(args, ForestControl().tree)
    try:
        ctrl = ForestControl(args.trees, args.fraction, _mtry(args.mtry), tctrl, args.seed, threads)
    except ValueError as e:
        raise UserError(str(e)) from None
    forest = fit_forest(d, spec, ctrl, variables)
    out = _outdir(args)
    ll = forest_loglik(forest)
    doc = {"kind": "forest", "loglik": ll, "forest": forest.to_dict()}
    _ensemble_outputs(args, manifest, out, forest, d, doc)
    print(f"forest of {forest.n_trees} trees, in-sample log-likelihood {ll:.6f}; outputs in {out}")
    return 0


def _read_model(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as e:
        raise UserError(f"cannot read model {path!r}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise UserError(f"{path}: invalid JSON ({e.msg} at line {e.lineno})") from None
    if not isinstance(doc, dict) or "manifest" not in doc:
        raise UserError(f"{path}: not a transmod output")
    return doc


def _training_data(doc, args, response):
    """Training data of a tree or forest: ``--train`` or the path recorded in the manifest."""
    m = doc["manifest"]
    path = args.train or m["data"]["path"]
    if not path or not os.path.isfile(path):
        raise UserError("training data not found; pass --train")
    if _sha256(path) != m["data"]["sha256"]:
        raise UserError(f"training data {path!r} differ from the data the model was grown on")
    opts = m["options"]
    ns = argparse.Namespace(data=path, weights=opts.get("weights"), categorical=opts.get("categorical"), numeric=opts.get("numeric"), levels=opts.get("levels"))
    variables = list(doc["forest"]["variables"] if doc["kind"] == "forest" else doc["tree"]["variables"])
    return _complete(_read(ns, response), variables)


def _load_any(doc, args):
    """Rebuild a fitted model, tree or forest with the data it needs."""
    if "model" in doc:
        return "fit", FittedModel.from_dict(doc["model"]), None
    kind = doc.get("kind")
    if kind == "tree":
        t = TransformationTree.from_dict(doc["tree"])
        return "tree", t, None
    if kind == "forest":
        spec_resp = doc["forest"]["spec"]["response"]
        d = _training_data(doc, args, spec_resp)
        forest = TransformationForest.from_dict(doc["forest"], d)
        return "forest", forest, d
    raise UserError("unrecognised model file")


def cmd_predict(args):
    manifest = _manifest(args)
    doc = _read_model(args.model)
    probs = [float(p) for p in _key_list(args.probs, "probs")] if args.probs else list(DECILES)
    if any(not 0.0 < p < 1.0 for p in probs):
        raise UserError("--probs must lie strictly between 0 and 1")
    kind, model, _ = _load_any(doc, args)
    spec = model.spec
    if not args.data:
        raise UserError("--data is required")
    d = load_csv(args.data, spec.response, args.weights, _schema(args)) if _has_column(args.data, spec.response) else None
    x = d if d is not None else _covariates_only(args)
    n = x.n if isinstance(x, Dataset) else len(next(iter(x.values()), []))
    if kind == "fit":
        models = [model] * n
    else:
        models = model.params(x, n, _threads(args))
    rows = []
    for i in range(n):
        prof = {v: x[v][i] for v in (spec.covariates if kind == "fit" else ())}
        m = models[i]
        q = quantile(m, probs, prof)
        rec = [i]
        if d is not None:
            y = d.response[i]
            rec += [float(cdf(m, y, prof)[0]), float(density(m, y, prof)[0])]
        rows.append(rec + [float(v) for v in q])
    header = ["row"] + (["cdf", "density"] if d is not None else []) + [f"q{p:g}" for p in probs]
    out = _outdir(args)
    _write_table(out / "predictions.csv", manifest, header, rows)
    print(f"predictions for {n} rows written to {out / 'predictions.csv'}")
    return 0


def _has_column(path, name):
    with open(path, newline="", encoding="utf-8") as fh:
        for line in fh:
            if not line.startswith("#"):
                return name in [h.strip() for h in next(csv.reader([line]))]
    return False


def _covariates_only(args):
    """Covariate profiles from a CSV without response column."""
    with open(args.data, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(line for line in fh if not line.startswith("#")))
    if not rows:
        raise UserError(f"{args.data}: empty file")
    header = [h.strip() for h in rows[0]]
    cols = {h: [] for h in header}
    for r in rows[1:]:
        if len(r) != len(header):
            raise UserError(f"{args.data}: ragged row")
        for h, v in zip(header, r):
            cols[h].append(v.strip())
    out = {}
    for h, vals in cols.items():
        try:
            out[h] = np.array([float(v) for v in vals])
        except ValueError:
            out[h] = np.array(vals, dtype=object)
    return out


def cmd_importance(args):
    manifest = _manifest(args)
    doc = _read_model(args.model)
    kind, model, d = _load_any(doc, args)
    if kind == "fit":
        raise UserError("variable importance needs a tree or forest model")
    if d is None:
        d = _training_data(doc, args, model.spec.response)
    imp = var_importance(model, d, repeats=args.repeats, seed=args.seed, oob=args.oob and kind == "forest")
    out = _outdir(args)
    _write_table(out / "importance.csv", manifest, ["variable", "importance"], sorted(imp.items(), key=lambda kv: (-kv[1], kv[0])))
    if args.pdp:
        vars_ = _key_list(args.pdp, "vars")
        try:
            rows = partial_dependence(model, vars_, data=d)
        except ValueError as e:
            raise UserError(str(e)) from None
        _write_table(out / "pdp.csv", manifest, [*vars_, "p", "quantile"], [[r[v] for v in vars_] + [r["p"], r["quantile"]] for r in rows])
    print(f"importance of {len(imp)} variables written to {out}")
    return 0


def cmd_simulate(args):
    if args.n <= 0:
        raise UserError("--n must be positive")
    if args.effects < 0:
        raise UserError("--effects must be non-negative")
    manifest = _manifest(args)
    d = simulate_survey(args.n, args.seed, args.effects, args.weighted)
    out = _outdir(args)
    path = out / "survey.csv"
    write_csv(d, path, [manifest.line()])
    print(f"{args.n} synthetic observations written to {path}")
    return 0


# ------------------------------------------------------------------ parser


def _add_common(p, data=True, formula=True):
    if data:
        p.add_argument("--data", help="input CSV file")
        p.add_argument("--weights", help="sampling-weight column")
        p.add_argument("--categorical", help="comma-separated columns read as categorical")
        p.add_argument("--numeric", help="comma-separated columns read as numeric")
        p.add_argument("--levels", action="append", metavar="VAR=L1,L2,...", help="declared level order (first is the reference)")
    if formula:
        p.add_argument("--formula", required=True, help="model formula, e.g. 'bmi ~ bernstein(5) | strata(sex)'")
    p.add_argument("--seed", type=int, default=1, help="seed for all randomness (default 1)")
    p.add_argument("--threads", type=int, default=None, help="worker threads (default $TRANSMOD_THREADS or 1)")
    p.add_argument("--out", default=".", help="output directory")


def _add_partition(p, forest):
    p.add_argument("--variables", help="comma-separated partitioning covariates (default: all other columns)")
    p.add_argument("--alpha", type=float, help="significance level of the split test")
    p.add_argument("--min-split", dest="min_split", type=float, help="minimum node weight to attempt a split")
    p.add_argument("--min-leaf", dest="min_leaf", type=float, help="minimum leaf weight")
    p.add_argument("--max-depth", dest="max_depth", type=int, help="maximum tree depth")
    p.add_argument("--permutations", type=int, help="Monte-Carlo permutations of the split test")
    p.add_argument("--test", choices=("permutation", "asymptotic"), help="split test p-values")
    p.add_argument("--repeats", type=int, default=5, help="permutations per variable for the importance")
    p.add_argument("--pdp", metavar="vars=V1,V2", help="partial-dependence decile table for these variables")
    if forest:
        p.add_argument("--trees", type=int, default=100, help="number of trees")
        p.add_argument("--fraction", type=float, default=0.632, help="subsample fraction")
        p.add_argument("--mtry", help="variables tried per node (integer or 'all')")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transmod", description="Conditional transformation models, trees and forests.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="maximum-likelihood fit of a formula")
    _add_common(p)
    p.add_argument("--level", type=float, default=0.95, help="confidence level of the Wald intervals")
    p.add_argument("--overlay", metavar="strata=V1,V2", help="empirical vs model CDF per cell of these variables")
    p.set_defaults(handler=cmd_fit)

    p = sub.add_parser("tree", help="grow a transformation tree")
    _add_common(p)
    _add_partition(p, forest=False)
    p.set_defaults(handler=cmd_tree)

    p = sub.add_parser("forest", help="grow a transformation forest")
    _add_common(p)
    _add_partition(p, forest=True)
    p.set_defaults(handler=cmd_forest)

    p = sub.add_parser("predict", help="conditional quantiles (and CDF, density at observed responses)")
    _add_common(p, formula=False)
    p.add_argument("--model", required=True, help="params.json or model.json")
    p.add_argument("--train", help="training data of a forest (default: path in its manifest)")
    p.add_argument("--probs", metavar="probs=P1,P2", help="quantile probabilities (default deciles)")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("importance", help="permutation variable importance of a tree or forest")
    _add_common(p, data=False, formula=False)
    p.add_argument("--model", required=True, help="model.json of a tree or forest")
    p.add_argument("--train", help="training data (default: path in the model manifest)")
    p.add_argument("--repeats", type=int, default=5, help="permutations per variable")
    p.add_argument("--oob", action="store_true", help="evaluate forest trees out of bag")
    p.add_argument("--pdp", metavar="vars=V1,V2", help="partial-dependence decile table for these variables")
    p.set_defaults(handler=cmd_importance)

    p = sub.add_parser("simulate", help="write a synthetic survey data set")
    p.add_argument("--n", type=int, default=2000, help="number of observations")
    p.add_argument("--effects", type=float, default=1.0, help="multiplier of all covariate effects")
    p.add_argument("--weighted", action="store_true", help="draw non-unit sampling weights")
    _add_common(p, data=False, formula=False)
    p.set_defaults(handler=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USER if e.code not in (0, None) else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s", stream=sys.stderr)
    if getattr(args, "repeats", 1) is not None and getattr(args, "repeats", 1) < 1:
        print("error: --repeats must be positive", file=sys.stderr)
        return EXIT_USER
    try:
        return args.handler(args)
    except FormulaError as e:
        print(f"error: formula: {e}", file=sys.stderr)
        return EXIT_USER
    except (UserError, LoweringError, DataError, SpecificationError, RoutingError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except (FitError, NonMonotoneError, NumericalError, ForestError, ArithmeticError, np.linalg.LinAlgError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USER


if __name__ == "__main__":
    sys.exit(main())
