"""Command-line front end.

Subcommands: ``fit``, ``predict``, ``aic``, ``sample``, ``simulate``.
Input tables are strict CSV (header required, UTF-8, '.' decimal, no
missing-value tokens); the model is described by a JSON spec document
holding the response column and the term list.  Fits are persisted as a
versioned JSON artifact plus an optional binary factor sidecar that lets
``predict`` produce credible intervals without touching the training data.

Exit codes: 0 success, 1 numeric/convergence failure, 2 input error.
"""

import argparse
import csv
import json
import sys

import numpy as np

from . import kernels, sparsela
from .design import ModelSpec, PenalizedDesign, TermSpec, build_design, \
    _term_rows, _table_length, TermArtifact
from .efs import EFSControl, FitState, fit_additive, fit_gam, fit_gsmm
from .errors import NumericError, SmoothfitError, SpecError
from .families import CoxphFamily, GamlssFamily, get_family, get_link
from .lqefs import LqefsControl, lqefs_fit
from .simulate import STUDIES, run_study
from .uncertainty import caic, credible_intervals, sample_beta_conditional

ARTIFACT_SCHEMA = "smoothfit-fit/1"
NA_TOKENS = {"", "na", "n/a", "nan", "null", "none"}
GSMM_FAMILIES = ("coxph", "gaussian_ls", "gamma_ls")


# ---------------------------------------------------------------------------
# CSV I/O
# ---------------------------------------------------------------------------

def read_table(path):
    """Strict CSV reader: header required, rectangular, no NA tokens.

    Columns in which every value parses as a float become numeric; all
    others are kept as string factors.  Errors name the offending line.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise SpecError(f"cannot read {path}: {exc}") from None
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SpecError(f"{path}: empty file (header required)") from None
        if len(set(header)) != len(header) or any(h == "" for h in header):
            raise SpecError(f"{path}: header must have unique non-empty names")
        cols = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise SpecError(f"{path}: line {lineno}: expected "
                                f"{len(header)} fields, got {len(row)}")
            for h, val in zip(header, row):
                if val.strip().lower() in NA_TOKENS:
                    raise SpecError(f"{path}: line {lineno}: missing value "
                                    f"in column {h!r} (NA tokens rejected)")
                cols[h].append(val)
    out = {}
    for h, vals in cols.items():
        try:
            out[h] = np.array([float(v) for v in vals])
        except ValueError:
            out[h] = np.array(vals)
    return out


def write_table(path, rows, columns=None):
    if columns is None:
        columns = sorted({k for row in rows for k in row})
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in columns])


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


# ---------------------------------------------------------------------------
# spec document and artifact
# ---------------------------------------------------------------------------

def read_spec_doc(path):
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise SpecError(f"cannot read {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"{path}: invalid JSON ({exc})") from None
    if "terms" not in doc or "response" not in doc:
        raise SpecError(f"{path}: spec document needs 'response' and 'terms'")
    return doc


def _arr(a):
    return None if a is None else np.asarray(a).tolist()


def _terms_payload(design):
    out = []
    for art in design.terms:
        out.append({
            "spec": art.spec.to_dict(),
            "col_start": art.col_start,
            "col_count": art.col_count,
            "knots": None if art.knots is None else [_arr(k)
                                                     for k in art.knots],
            "degrees": art.degrees,
            "constraint": _arr(art.constraint),
            "reparam": _arr(art.reparam),
            "levels": art.levels,
        })
    return out


def _terms_from_payload(payload):
    arts = []
    for td in payload:
        arts.append(TermArtifact(
            spec=TermSpec.from_dict(td["spec"]),
            col_start=td["col_start"], col_count=td["col_count"],
            knots=None if td["knots"] is None else [np.asarray(k)
                                                    for k in td["knots"]],
            degrees=td["degrees"],
            constraint=None if td["constraint"] is None
            else np.asarray(td["constraint"]),
            reparam=None if td["reparam"] is None
            else np.asarray(td["reparam"]),
            levels=td["levels"]))
    return arts


def build_artifact(doc, config, fit, design):
    diag = {k: v for k, v in fit.diagnostics.items()
            if isinstance(v, (int, float, str, bool, list))}
    return {
        "schema": ARTIFACT_SCHEMA,
        "spec_doc": doc,
        "engine": config["engine"],
        "family": config["family"],
        "link": config["link"],
        "options": {"nv": config.get("nv"), "max_inner": config.get("max_inner"),
                    "tol": config.get("tol"), "seed": config.get("seed"),
                    "method": config.get("method", "cholesky")},
        "n_obs": design.N,
        "n_coef": design.N_p,
        "n_lambda": design.n_lambda,
        "coefficients": fit.beta.tolist(),
        "lambda": fit.lam.tolist(),
        "rho": fit.rho.tolist(),
        "phi": fit.phi,
        "edf": fit.edf,
        "term_edf": fit.term_edf,
        "reml": fit.reml,
        "llk": fit.llk,
        "penalized_llk": fit.penalized_llk,
        "converged": bool(fit.converged),
        "iterations": fit.iterations,
        "eps_H": fit.eps_H,
        "dropped": sorted(fit.dropped),
        "diagnostics": diag,
        "terms": _terms_payload(design),
    }


def save_artifact(path, artifact, fit=None, sidecar=True):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(artifact, fh, sort_keys=True, indent=1)
        fh.write("\n")
    if sidecar and fit is not None:
        _save_sidecar(path + ".cache.npz", fit)


def _save_sidecar(path, fit):
    payload = {"engine": np.array(fit.engine), "phi": np.array(fit.phi)}
    factor = fit._factor
    if isinstance(factor, sparsela.CholeskyFactor):
        payload.update(Lp=factor.Lp, Li=factor.Li, Lx=factor.Lx,
                       perm=factor.perm, kind=np.array("cholesky"))
        if factor.dscale is not None:
            payload["dscale"] = factor.dscale
    elif hasattr(factor, "R"):
        R = factor.R
        payload.update(R=np.asarray(R.todense()) if hasattr(R, "todense")
                       else np.asarray(R), kind=np.array("dense_r"))
        if hasattr(factor, "perm"):
            payload["perm"] = factor.perm
            payload["kept"] = factor._keep
    if fit._transform is not None:
        T = fit._transform.tocoo()
        payload.update(T_row=T.row, T_col=T.col, T_val=T.data,
                       T_shape=np.array(T.shape))
    keep = fit.diagnostics.get("keep")
    if keep is not None:
        payload["keep"] = keep
    np.savez(path, **payload)


class RestoredFit:
    """Just enough of a fit state to rebuild predictions with intervals."""

    def __init__(self, artifact, sidecar_path=None):
        self.artifact = artifact
        self.beta = np.asarray(artifact["coefficients"])
        self.engine = artifact["engine"]
        self.phi = artifact["phi"]
        self.terms = _terms_from_payload(artifact["terms"])
        self.param_count = 1 + max(t.spec.parameter_index for t in self.terms)
        self._solver = None
        if sidecar_path is not None:
            try:
                self._load_sidecar(sidecar_path)
            except OSError:
                self._solver = None

    def _load_sidecar(self, path):
        data = np.load(path, allow_pickle=False)
        kind = str(data["kind"])
        self._T = None
        self._keep = data["keep"] if "keep" in data else None
        if "T_row" in data:
            import scipy.sparse as sp
            shape = tuple(data["T_shape"])
            self._T = sp.csc_array((data["T_val"],
                                    (data["T_row"], data["T_col"])),
                                   shape=shape)
        if kind == "cholesky":
            Lp, Li, Lx = data["Lp"], data["Li"], data["Lx"]
            perm = data["perm"]
            dscale = data["dscale"] if "dscale" in data else None
            n = perm.size

            def solve(b):
                x = b if dscale is None else b * dscale
                x = x[perm].copy()
                kernels.lower_solve(n, Lp, Li, Lx, x)
                kernels.lower_tsolve(n, Lp, Li, Lx, x)
                out = np.empty_like(x)
                out[perm] = x
                return out if dscale is None else out * dscale
        else:
            from scipy.linalg import solve_triangular
            R = data["R"]
            kept = data["kept"] if "kept" in data else None
            perm = data["perm"] if "perm" in data else None

            def solve(b):
                bp = b if perm is None else b[perm]
                if kept is not None:
                    Rk = R[np.ix_(kept, kept)]
                    y = solve_triangular(Rk, bp[kept], trans="T", lower=False)
                    y = solve_triangular(Rk, y, lower=False)
                    out = np.zeros_like(bp)
                    out[kept] = y
                else:
                    y = solve_triangular(R, bp, trans="T", lower=False)
                    out = solve_triangular(R, y, lower=False)
                if perm is not None:
                    res = np.empty_like(out)
                    res[perm] = out
                    return res
                return out
        self._solver = solve

    def covariance_scale(self):
        return self.phi if self.engine in ("am", "gam") else 1.0

    def solve_H(self, b):
        if self._solver is None:
            raise NumericError("factor cache sidecar missing; cannot form "
                               "intervals")
        b = np.asarray(b, dtype=float)
        if self._T is not None:
            bw = np.asarray(self._T.T @ b)
            if self._keep is not None and self._keep.size != bw.size:
                bw = bw[self._keep]
            xw = self._solver(bw)
            if self._keep is not None and self._keep.size != self.beta.size:
                full = np.zeros(self._T.shape[0])
                full[self._keep] = xw
                xw = full
            return np.asarray(self._T @ xw)
        return self._solver(b)

    def predict_rows(self, data, clamp=True):
        import scipy.sparse as sp
        n = _table_length(data)
        mats = [_term_rows(t, data, n, clamp=clamp) for t in self.terms]
        return sp.csc_array(sp.hstack(mats, format="csc"))

    def param_slices(self):
        out = []
        start = 0
        for m in range(self.param_count):
            cols = sum(t.col_count for t in self.terms
                       if t.spec.parameter_index == m)
            out.append(slice(start, start + cols))
            start += cols
        return out


# ---------------------------------------------------------------------------
# model construction shared by fit/aic/sample
# ---------------------------------------------------------------------------

def _control_from(args_like):
    return EFSControl(max_inner=args_like.get("max_inner", 1),
                      tol=args_like.get("tol", 1e-7),
                      method=args_like.get("method", "cholesky"))


def fit_from_config(doc, data, config):
    """Build the design and run the configured engine; returns (fit, design,
    response vector)."""
    spec = ModelSpec.from_dict(doc)
    engine = config["engine"]
    family = config["family"]
    link = config["link"]
    resp = doc["response"]
    if resp not in data:
        raise SpecError(f"response column {resp!r} not in the data")
    design = build_design(spec, data)
    opts = {k: config[k] for k in ("max_inner", "tol", "method")
            if config.get(k) is not None}
    if engine == "am":
        if family != "gaussian" or link not in (None, "identity"):
            raise SpecError("engine 'am' requires the gaussian family with "
                            "the identity link")
        y = np.asarray(data[resp], dtype=float)
        return fit_additive(design, y, _control_from(opts)), design, y
    if engine == "gam":
        y = np.asarray(data[resp], dtype=float)
        fam = get_family(family)
        lnk = get_link(link) if link else get_link(fam.default_link)
        return fit_gam(design, y, fam, lnk, _control_from(opts)), design, y
    if engine in ("gsmm", "lqefs"):
        if family not in GSMM_FAMILIES:
            raise SpecError(f"engine {engine!r} supports families "
                            f"{GSMM_FAMILIES}")
        if family == "coxph":
            event = doc.get("event")
            if event is None or event not in data:
                raise SpecError("coxph needs an 'event' column in the spec "
                                "document")
            y = np.asarray(data[resp], dtype=float)
            fam = CoxphFamily(y, np.asarray(data[event], dtype=float))
        else:
            y = np.asarray(data[resp], dtype=float)
            fam = GamlssFamily(family, y)
        if engine == "gsmm":
            return fit_gsmm(design, fam, _control_from(opts)), design, y
        ctl = LqefsControl(n_v=config.get("nv") or 30,
                           tol=config.get("tol") or 1e-7,
                           seed=config.get("seed") or 0)
        return lqefs_fit(design, fam, ctl), design, y
    raise SpecError(f"unknown engine {engine!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_fit(args):
    data = read_table(args.data)
    doc = read_spec_doc(args.spec)
    config = {"engine": args.engine, "family": args.family,
              "link": args.link, "nv": args.nv, "max_inner": args.max_inner,
              "tol": args.tol, "seed": args.seed, "method": args.method}
    fit, design, _ = fit_from_config(doc, data, config)
    artifact = build_artifact(doc, config, fit, design)
    save_artifact(args.out, artifact, fit=fit, sidecar=not args.no_cache)
    print(f"engine={fit.engine} converged={fit.converged} "
          f"iterations={fit.iterations}")
    print(f"edf={fit.edf:.3f} phi={fit.phi:.5g} reml={fit.reml:.6g}")
    for name, edf in fit.term_edf.items():
        print(f"  {name}: edf={edf:.3f}")
    if fit.dropped:
        print(f"dropped coefficients: {sorted(fit.dropped)}")
    if not fit.converged:
        print("warning: fit did not converge", file=sys.stderr)
        return 1
    return 0


def cmd_predict(args):
    with open(args.artifact, encoding="utf-8") as fh:
        artifact = json.load(fh)
    if artifact.get("schema") != ARTIFACT_SCHEMA:
        raise SpecError(f"{args.artifact}: unknown artifact schema")
    restored = RestoredFit(artifact, sidecar_path=args.artifact + ".cache.npz")
    data = read_table(args.data)
    n = _table_length(data)
    columns = ["row"]
    rows = [{"row": i} for i in range(n)]
    if n:
        X = restored.predict_rows(data, clamp=True)
        slices = restored.param_slices()
        link = get_link(artifact["link"] or "identity") \
            if artifact["family"] in ("gaussian", "gamma", "binomial",
                                      "poisson", "inverse_gaussian") \
            else get_link("identity")
        for m, sl in enumerate(slices):
            eta = np.asarray(X[:, sl.start:sl.stop]
                             @ restored.beta[sl.start:sl.stop])
            for i in range(n):
                rows[i][f"eta_{m}"] = eta[i]
            if m == 0:
                mu = link.inverse(eta)
                se = _prediction_se(restored, X, sl)
                from scipy.stats import norm
                zq = norm.ppf(0.975)
                for i in range(n):
                    rows[i]["mu"] = mu[i]
                    if se is not None:
                        rows[i]["eta_0_lo"] = eta[i] - zq * se[i]
                        rows[i]["eta_0_hi"] = eta[i] + zq * se[i]
        columns += [f"eta_{m}" for m in range(len(slices))] + ["mu"]
        if restored._solver is not None:
            columns += ["eta_0_lo", "eta_0_hi"]
    write_table(args.out, rows, columns)
    print(f"wrote {n} prediction rows to {args.out}")
    return 0


def _prediction_se(restored, X, sl):
    if restored._solver is None:
        return None
    import scipy.sparse as sp
    n = X.shape[0]
    var = np.zeros(n)
    scale = restored.covariance_scale()
    n_p = restored.beta.size
    for start in range(0, n, 512):
        stop = min(start + 512, n)
        B = np.zeros((n_p, stop - start))
        blk = np.asarray(X[start:stop, :].todense()).T
        B[:blk.shape[0], :] = blk
        sol = np.column_stack([restored.solve_H(B[:, j])
                               for j in range(B.shape[1])])
        var[start:stop] = scale * np.einsum("ij,ij->j", B, sol)
    return np.sqrt(np.maximum(var, 0.0))


def cmd_aic(args):
    data = read_table(args.data)
    variants = [v.strip() for v in args.aic_variant.split(",") if v.strip()]
    rows = []
    fits = []
    ref = None
    for path in args.artifacts:
        with open(path, encoding="utf-8") as fh:
            artifact = json.load(fh)
        doc = artifact["spec_doc"]
        if ref is None:
            ref = (doc["response"], artifact["n_obs"])
        elif doc["response"] != ref[0] or artifact["n_obs"] != ref[1]:
            raise SpecError("artifacts disagree on the response vector")
        config = {"engine": artifact["engine"], "family": artifact["family"],
                  "link": artifact["link"], **artifact["options"]}
        fit, design, _ = fit_from_config(doc, data, config)
        fits.append((path, fit))
    for path, fit in fits:
        row = {"model": path, "llk": fit.llk, "tau": fit.edf}
        for variant in variants:
            rep = caic(fit, variant, n_r=args.nr, seed=args.seed)
            row[f"caic_{variant}"] = rep.caic
            row[f"tau_prime_{variant}"] = rep.tau_prime
        rows.append(row)
    for variant in variants:
        key = f"caic_{variant}"
        best = min(range(len(rows)), key=lambda i: rows[i][key])
        for i, row in enumerate(rows):
            row[f"preferred_{variant}"] = int(i == best)
    columns = (["model", "llk", "tau"]
               + [f"tau_prime_{v}" for v in variants]
               + [f"caic_{v}" for v in variants]
               + [f"preferred_{v}" for v in variants])
    write_table(args.out, rows, columns)
    print(f"wrote comparison of {len(rows)} models to {args.out}")
    return 0


def cmd_sample(args):
    data = read_table(args.data)
    with open(args.artifact, encoding="utf-8") as fh:
        artifact = json.load(fh)
    config = {"engine": artifact["engine"], "family": artifact["family"],
              "link": artifact["link"], **artifact["options"]}
    fit, design, _ = fit_from_config(artifact["spec_doc"], data, config)
    draws = sample_beta_conditional(fit, args.n, seed=args.seed)
    rows = [{"draw": i, **{f"b{j}": draws[j, i]
                           for j in range(draws.shape[0])}}
            for i in range(draws.shape[1])]
    write_table(args.out, rows,
                ["draw"] + [f"b{j}" for j in range(draws.shape[0])])
    print(f"wrote {args.n} posterior draws to {args.out}")
    return 0


def cmd_simulate(args):
    rows = run_study(args.study, args.replicates, args.seed, n=args.n,
                     effect=args.effect, n_r=args.nr, nv=args.nv)
    write_table(args.out, rows)
    print(f"wrote {len(rows)} metric rows to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(
        prog="smoothfit",
        description="estimation, regularization, and selection of mixed "
                    "sparse smooth models")
    sub = p.add_subparsers(dest="command", required=True)

    fit = sub.add_parser("fit", help="estimate a model and save an artifact")
    fit.add_argument("--data", required=True)
    fit.add_argument("--spec", required=True)
    fit.add_argument("--engine", default="am",
                     choices=["am", "gam", "gsmm", "lqefs"])
    fit.add_argument("--family", default="gaussian")
    fit.add_argument("--link", default=None)
    fit.add_argument("--nv", type=int, default=30)
    fit.add_argument("--max-inner", dest="max_inner", type=int, default=1)
    fit.add_argument("--tol", type=float, default=1e-7)
    fit.add_argument("--seed", type=int, default=0)
    fit.add_argument("--method", default="cholesky",
                     choices=["cholesky", "qr"])
    fit.add_argument("--out", required=True)
    fit.add_argument("--no-cache", action="store_true",
                     help="skip the binary factor sidecar")
    fit.set_defaults(func=cmd_fit)

    pred = sub.add_parser("predict", help="predictions from a fit artifact")
    pred.add_argument("--artifact", required=True)
    pred.add_argument("--data", required=True)
    pred.add_argument("--out", required=True)
    pred.set_defaults(func=cmd_predict)

    aic = sub.add_parser("aic", help="compare fit artifacts by cAIC")
    aic.add_argument("artifacts", nargs="+")
    aic.add_argument("--data", required=True)
    aic.add_argument("--aic-variant", dest="aic_variant",
                     default="conventional,pql_corrected")
    aic.add_argument("--nr", type=int, default=250)
    aic.add_argument("--seed", type=int, default=0)
    aic.add_argument("--out", required=True)
    aic.set_defaults(func=cmd_aic)

    samp = sub.add_parser("sample", help="draws from the coefficient "
                                         "posterior approximation")
    samp.add_argument("--artifact", required=True)
    samp.add_argument("--data", required=True)
    samp.add_argument("--n", type=int, default=1000)
    samp.add_argument("--seed", type=int, default=0)
    samp.add_argument("--out", required=True)
    samp.set_defaults(func=cmd_sample)

    sim = sub.add_parser("simulate", help="run a desk-scale study")
    sim.add_argument("--study", required=True, choices=list(STUDIES))
    sim.add_argument("--replicates", type=int, default=5)
    sim.add_argument("--n", type=int, default=None)
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--effect", type=float, default=None)
    sim.add_argument("--nr", type=int, default=250)
    sim.add_argument("--nv", type=int, default=30)
    sim.add_argument("--out", required=True)
    sim.set_defaults(func=cmd_simulate)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except SpecError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return 2
    except SmoothfitError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
