"""Command-line interface: ``eivslope {estimate, simulate, exact, verify}``.

Exit codes: 0 success, 1 verification failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import json
import math
import re
import sys
import warnings

import numpy as np

from . import estimators as est
from . import moments as mo
from . import montecarlo as mc
from .canonical import DataError, DegenerateStatsError, load_csv, stats_from_sample
from .fixtures import preset_fixture

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2

DEFAULT_ESTIMATE = ("LS", "BR1", "BR2", "BR3", "ML", "IR", "MM")
DEFAULT_EXACT = ("LS", "BR1")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _fmt(full: bool):
    def f(x) -> str:
        if isinstance(x, str):
            return x
        if x is None or not math.isfinite(x):
            return "NA"
        return repr(float(x)) if full else format(float(x), ".6g")

    return f


def render(header: list[str], rows: list[list], fmt: str, full: bool, notes=()) -> str:
    f = _fmt(full)
    cells = [[f(c) for c in row] for row in rows]
    lines = [f"# {n}" for n in notes]
    if fmt == "pretty":
        widths = [max(len(h), *(len(r[i]) for r in cells)) if cells else len(h) for i, h in enumerate(header)]
        lines.append("  ".join(h.ljust(w) if i == 0 else h.rjust(w) for i, (h, w) in enumerate(zip(header, widths))))
        lines.append("  ".join("-" * w for w in widths))
        for r in cells:
            lines.append("  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))))
    else:
        sep = "\t" if fmt == "tsv" else ","
        lines.append(sep.join(header))
        lines += [sep.join(r) for r in cells]
    return "\n".join(lines) + "\n"


def _emit(text: str, out: str | None):
    if out:
        with open(out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _split_ids(raw: str | None, default) -> list[str]:
    if not raw:
        return list(default)
    return [s.strip() for s in raw.split(",") if s.strip()]


def _seed(value: int) -> int:
    """0 means: draw a fresh 64-bit seed from OS entropy (echoed to stderr)."""
    if value < 0 or value >= 2**64:
        raise UsageError("seed must be a 64-bit unsigned integer")
    if value == 0:
        value = int(np.random.SeedSequence().entropy) % (2**64 - 1) + 1
        print(f"# seed = {value}", file=sys.stderr)
    return value


# -- estimate ------------------------------------------------------------------------


def cmd_estimate(args) -> int:
    if bool(args.input) == bool(args.fixture):
        raise UsageError("give exactly one of --input or --fixture")
    ids = _split_ids(args.estimators, DEFAULT_ESTIMATE)
    for e in ids:
        try:
            est.resolve(e)
        except est.UnknownEstimatorError:
            raise UsageError(f"unknown estimator {e!r}") from None
    try:
        sample = load_csv(args.input) if args.input else preset_fixture(args.fixture)
        st = stats_from_sample(sample)
    except (DataError, DegenerateStatsError) as exc:
        raise UsageError(str(exc)) from None
    if st.m == 0:
        ids_bad = [e for e in ids if e not in ("LS", "IR")]
        if ids_bad:
            raise UsageError(f"single replicate (m = 0): {', '.join(ids_bad)} need S")
    rows, notes = [], []
    root_n = math.sqrt(st.p + 1)
    for e in ids:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            try:
                r = est.estimate(st, e)
                rows.append([e, r.slope, r.intercept, r.intercept / root_n])
            except est.SingularEstimateError:
                rows.append([e, "undefined", "undefined", "undefined"])
        for w in caught:
            notes.append(f"{e}: {w.message}")
        if e in ("MM", "W", "ML", "IR"):
            notes.append(f"{e}: {est.NO_FINITE_MOMENTS}")
    notes.insert(0, f"n = {st.p + 1}, r = {st.r}, p = {st.p}, m = {st.m}, S/||U||^2 = {_fmt(args.full_precision)(st.s / st.u_sq)}")
    notes.insert(1, "intercept = Z0 - slope*U0; intercept_raw = intercept/sqrt(n) (original y scale)")
    _emit(render(["estimator", "slope", "intercept", "intercept_raw"], rows, args.format, args.full_precision, notes), args.out)
    return EXIT_OK


# -- simulate ------------------------------------------------------------------------


def _suite_text(results: list[mc.SimResult], fmt: str, full: bool) -> str:
    if fmt == "pretty":
        return _table4_pretty(results, full)
    header = ["sigma_xi2", "sigma2", "n", "lambda", "estimator", "bias", "se_bias", "mse", "se_mse", "failures"]
    rows = []
    for res in results:
        cfg = res.config
        sx = cfg.xi[0] ** 2
        for name, rec in res.records.items():
            rows.append([sx, cfg.sigma2, str(cfg.n), res.lam, name, rec.bias, rec.se_bias, rec.mse, rec.se_mse, str(rec.failures)])
    c0 = results[0].config
    notes = [f"preset table4: beta={c0.beta:g} tau2={c0.tau2:g} r={c0.r} reps={c0.reps} seed={c0.seed}"]
    for res in results:
        for (a, b), pr in res.pairs.items():
            notes.append(f"{res.label}: paired {a}-{b} mean_diff={_fmt(full)(pr.mean_diff)} se={_fmt(full)(pr.se_diff)}")
    return render(header, rows, fmt, full, notes)


def _table4_pretty(results: list[mc.SimResult], full: bool) -> str:
    f = _fmt(full)
    by_block: dict[tuple, dict[int, mc.SimResult]] = {}
    for res in results:
        cfg = res.config
        by_block.setdefault((round(cfg.xi[0] ** 2, 12), cfg.sigma2), {})[cfg.n] = res
    ns = sorted({res.config.n for res in results})
    header = ["sigma_xi2", "sigma2", "estimator"] + [f"{k}_n={n}" for n in ns for k in ("bias", "mse")]
    rows = []
    for (sx, s2), cells in by_block.items():
        names = list(dict.fromkeys(name for n in ns for name in cells[n].records))
        for i, name in enumerate(names):
            row = [f(sx) if i == 0 else "", f(s2) if i == 0 else "", name]
            for n in ns:
                rec = cells[n].records.get(name)
                row += ["", ""] if rec is None else [format(rec.bias, ".2f"), format(rec.mse, ".2f")]
            rows.append(row)
    return render(header, rows, "pretty", full)


def cmd_simulate(args) -> int:
    if bool(args.config) == bool(args.preset):
        raise UsageError("give exactly one of --config or --preset")
    if args.workers is not None and args.workers < 1:
        raise UsageError("--workers must be >= 1")
    try:
        if args.preset:
            if args.preset != "table4":
                raise UsageError(f"unknown preset {args.preset!r}")
            reps = args.reps if args.reps is not None else 100_000
            seed = _seed(args.seed if args.seed is not None else 20240601)
            results = mc.table4_suite(reps, seed, workers=args.workers)
            _emit(_suite_text(results, args.format, args.full_precision), args.out)
            return EXIT_OK
        cfg = mc.load_config(args.config)
        overrides = {}
        if args.reps is not None:
            overrides["reps"] = args.reps
        if args.seed is not None:
            overrides["seed"] = args.seed
        if overrides or cfg.seed == 0:
            d = cfg.to_dict()
            d.update(overrides)
            d["seed"] = _seed(int(d["seed"]))
            cfg = mc.SimConfig.from_dict(d)
        res = mc.run_study(cfg, workers=args.workers)
    except (mc.ConfigError, est.UnknownEstimatorError) as exc:
        raise UsageError(str(exc)) from None
    except mc.AllReplicationsFailedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    if args.format == "csv":
        text = res.to_csv(args.full_precision)
    elif args.format == "tsv":
        text = res.to_csv(args.full_precision, sep="\t")
    else:
        rows = [[k, r.bias, r.se_bias, r.mse, r.se_mse, str(r.failures)] for k, r in res.records.items()]
        text = render(["estimator", "bias", "se_bias", "mse", "se_mse", "failures"], rows, "pretty", args.full_precision, [f"lambda = {res.lam:g}"])
    _emit(text, args.out)
    return EXIT_OK


# -- exact ---------------------------------------------------------------------------

_ID = re.compile(r"^([A-Z]+?)_?(\d+)?$")


def exact_row(eid: str, mp: mo.MixtureParams, beta: float, tau2: float, sigma2: float):
    """``(bias, mse)`` for one estimator id; MSE is None where not implemented."""
    m_ = _ID.match(eid.upper())
    if not m_:
        raise UsageError(f"unknown estimator {eid!r}")
    fam, ell = m_.group(1), m_.group(2)
    ell = int(ell) if ell is not None else None
    p, m = mp.p, mp.m
    if fam == "LS" and ell is None:
        return mo.bias_ls_exact(mp, beta), mo.mse_ls_exact(mp, beta, tau2, sigma2)
    if fam == "BR" and ell is not None:
        bias = mo.bias_br_exact(mp, ell, beta)
        if ell == 0:
            return bias, mo.mse_ls_exact(mp, beta, tau2, sigma2)
        return bias, mo.mse_phi_exact(mp, est.PhiPolySpec.br(p, m, ell), beta, tau2, sigma2)
    if fam == "ST" and ell is not None and ell >= 1:
        phi = est.PhiPolySpec.stefanski(p, m, ell)
        return mo.bias_phi_exact(mp, phi, beta), mo.mse_phi_exact(mp, phi, beta, tau2, sigma2)
    psi = {
        ("TLS", None): est.PsiSpec.tls(),
        ("TLS", 2): est.PsiSpec.kr(),
        ("GG", None): est.PsiSpec.gg(),
        ("TGG", None): est.PsiSpec.tgg(),
        ("KR", None): est.PsiSpec.kr(),
    }.get((fam, ell))
    if psi is None and fam == "TBR" and ell is not None and ell >= 1:
        psi = est.PsiSpec.tbr(ell)
    if psi is None:
        raise UsageError(f"no exact-moment route for estimator {eid!r}")
    return mo.bias_psi_exact(psi, mp, beta), mo.mse_psi_exact(psi, mp, beta, tau2, sigma2)


def cmd_exact(args) -> int:
    if args.p is None and args.n is None:
        raise UsageError("give --p (with --m) or --n (with --r)")
    p = args.p if args.p is not None else args.n - 1
    m = args.m if args.m is not None else (p + 1) * (args.r - 1)
    if args.lam is not None:
        lam = args.lam
    elif args.sigma_xi2 is not None:
        lam = p * args.sigma_xi2 / (2.0 * args.sigma2)
    else:
        raise UsageError("give --lam or --sigma-xi2")
    try:
        mp = mo.MixtureParams(p, m, lam)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    rows = []
    for eid in _split_ids(args.estimators, DEFAULT_EXACT):
        try:
            bias, mse = exact_row(eid, mp, args.beta, args.tau2, args.sigma2)
        except mo.MomentWindowError as exc:
            raise UsageError(f"{eid}: {exc}") from None
        rows.append([eid, bias, mse])
    notes = [
        f"p = {p}, m = {m}, lambda = {_fmt(args.full_precision)(lam)}, beta = {args.beta:g}, tau2 = {args.tau2:g}, sigma2 = {args.sigma2:g}",
        f"series truncated with tail bound < {mo.DEFAULT_SERIES.abs_tol:g}; Beta quadrature abs_tol {mo.DEFAULT_QUAD.abs_tol:g}",
    ]
    _emit(render(["estimator", "bias", "mse"], rows, args.format, args.full_precision, notes), args.out)
    return EXIT_OK


# -- verify --------------------------------------------------------------------------


def cmd_verify(args) -> int:
    from .verification import SUITES, run_suite

    if args.suite != "all" and args.suite not in SUITES:
        raise UsageError(f"unknown suite {args.suite!r}; choose from all, {', '.join(SUITES)}")
    checks = run_suite(args.suite, inject_bad=args.inject_bad_psi)
    failed = [c for c in checks if not c.passed]
    if args.format == "json":
        text = json.dumps(
            {"suite": args.suite, "passed": not failed, "n_checks": len(checks), "n_failed": len(failed), "checks": [c.to_dict() for c in checks]},
            indent=2,
        ) + "\n"
    else:
        rows = [[c.suite, c.name, "PASS" if c.passed else "FAIL", c.detail] for c in checks]
        fmt = args.format if args.format in ("csv", "tsv", "pretty") else "csv"
        if fmt == "csv":
            rows = [[cell.replace(",", ";") for cell in r] for r in rows]
        notes = [f"{len(checks) - len(failed)}/{len(checks)} checks passed"]
        text = render(["suite", "check", "status", "detail"], rows, fmt, False, notes)
    _emit(text, args.out)
    return EXIT_FAIL if failed else EXIT_OK


# -- entry point -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="eivslope", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, formats=("csv", "tsv", "pretty")):
        sp.add_argument("--out", help="write output here instead of stdout")
        sp.add_argument("--format", choices=formats, default="csv")
        sp.add_argument("--full-precision", action="store_true", help="print floats with repr precision")

    sp = sub.add_parser("estimate", help="slope and intercept estimates from a data CSV")
    sp.add_argument("--input", help="CSV with header y,x1,...,xr")
    sp.add_argument("--fixture", choices=["table1", "table2"], help="use a bundled fixture instead of --input")
    sp.add_argument("--estimators", help=f"comma-separated ids (default {','.join(DEFAULT_ESTIMATE)})")
    common(sp)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("simulate", help="Monte Carlo bias and MSE")
    sp.add_argument("--config", help="JSON study configuration")
    sp.add_argument("--preset", help="'table4' runs the 12-cell design")
    sp.add_argument("--reps", type=int)
    sp.add_argument("--seed", type=int, help="64-bit seed; 0 draws one from OS entropy")
    sp.add_argument("--workers", type=int, help=f"worker processes (default ${mc.WORKERS_ENV} or 1)")
    common(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("exact", help="exact bias and MSE from the Poisson-mixture series")
    sp.add_argument("--p", type=int)
    sp.add_argument("--m", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--r", type=int, default=2)
    sp.add_argument("--lam", type=float)
    sp.add_argument("--sigma-xi2", type=float)
    sp.add_argument("--beta", type=float, default=-5.0)
    sp.add_argument("--tau2", type=float, default=10.0)
    sp.add_argument("--sigma2", type=float, default=1.0)
    sp.add_argument("--estimators", help="ids such as LS,BR1,ST2,TLS,TBR1,GG,TGG,KR (default LS,BR1)")
    common(sp)
    sp.set_defaults(func=cmd_exact)

    sp = sub.add_parser("verify", help="numerical verification suites")
    sp.add_argument("--suite", default="all", help="all, domination, hudson, identities, bias, canonical, ordering")
    sp.add_argument("--inject-bad-psi", action="store_true", help="add a psi that must fail the domination check")
    common(sp, formats=("csv", "tsv", "pretty", "json"))
    sp.set_defaults(func=cmd_verify)
    return ap


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
