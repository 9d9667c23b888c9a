"""Command-line harness for the experiments.

Every command writes one CSV or JSON file plus ``<out>.manifest.json``
holding the command, its full parameter set and seed. ``replay`` re-runs a
manifest; identical parameters give byte-identical output.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import limits, logunif_kl, qkl_gauss, truncprior, vgd_fit

PCA_DISTANCE_TOL = 1e-6

CLAIMS = {
    "kl-curve": "kl-monotone-with-dawson-gradient",
    "qkl-pca": "qkl-optimum-is-pca",
    "tau-sweep": "convolved-optimum-approaches-pca",
    "limit-conv": "convolution-limit-equals-qkl",
    "limit-disc": "discretisation-limit-equals-qkl",
    "limit-degenerate": "degenerate-gaussian-limit",
    "trunc-moments": "truncated-posterior-moments",
    "trunc-sequences": "truncation-sequence-dependent-limits",
    "improper-scan": "improper-posterior-origin-mass",
    "tail-scan": "improper-posterior-tail-mass",
    "vgd-fit": "penalised-ml-reading",
    "vgd-sweep": "penalty-drives-u-to-zero",
}


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        # one line instead of usage plus message
        self.exit(2, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# serialisation


def fmt_float(x) -> str:
    return format(float(x), ".17g")


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _json_safe(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        # JSON has no inf or nan
        return x if math.isfinite(x) else repr(x)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_json_safe(obj), indent=2, sort_keys=True, allow_nan=False) + "\n"


def dumps_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([v if isinstance(v, str) else fmt_float(v) for v in row])
    return buf.getvalue()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def manifest_path(out: Path) -> Path:
    return out.with_name(out.name + ".manifest.json")


def _params(args: argparse.Namespace) -> dict:
    return {
        k: v for k, v in sorted(vars(args).items()) if k not in ("command", "out", "handler") and not k.startswith("_")
    }


def write_manifest(args: argparse.Namespace) -> Path:
    params = _params(args)
    manifest = {
        "command": args.command,
        "params": params,
        "seed": params.get("seed"),
        "version": __version__,
        "claim": CLAIMS[args.command],
        "output": str(args.out),
    }
    path = manifest_path(Path(args.out))
    _write(path, dumps_json(manifest))
    return path


# ---------------------------------------------------------------------------
# argument parsing helpers


def _floats(text: str) -> list:
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise CliError(f"cannot parse number list {text!r}") from exc
    if not vals:
        raise CliError(f"empty number list {text!r}")
    return vals


def _points(text: str) -> np.ndarray:
    """'x1,y1;x2,y2' -> 2 x 2 array; '-1;0;1' -> 3 x 1."""
    rows = [_floats(p) for p in text.split(";") if p.strip()]
    if not rows or len({len(r) for r in rows}) != 1:
        raise CliError(f"atoms {text!r} must all have the same dimension")
    return np.array(rows, dtype=float)


def _ints(text: str) -> list:
    vals = _floats(text)
    if any(v != int(v) for v in vals):
        raise CliError(f"expected integers, got {text!r}")
    return [int(v) for v in vals]


# ---------------------------------------------------------------------------
# commands


def cmd_kl_curve(args) -> str:
    if args.points < 1:
        raise CliError("--points must be >= 1")
    if not (0 <= args.u_min <= args.u_max and math.isfinite(args.u_max)):
        raise CliError(f"need 0 <= u-min <= u-max, got [{args.u_min}, {args.u_max}]")
    if args.points > 1 and not args.u_min < args.u_max:
        raise CliError("u-min must be below u-max when more than one point is requested")
    us = np.linspace(args.u_min, args.u_max, args.points) if args.points > 1 else [args.u_min]
    rows = [(u, logunif_kl.kl_up_to_const(float(u)), logunif_kl.kl_grad_u(float(u))) for u in us]
    return dumps_csv(["u", "kl", "grad"], rows)


def _optim_cfg(args) -> qkl_gauss.OptimConfig:
    return qkl_gauss.OptimConfig(restarts=args.restarts, seed=args.seed, max_iters=args.max_iters)


def _spd_problem(args):
    if not 1 <= args.rank <= args.dim <= 16:
        raise CliError(f"need 1 <= rank <= dim <= 16, got rank={args.rank}, dim={args.dim}")
    rng = np.random.default_rng(args.seed)
    return qkl_gauss.random_spd(args.dim, rng)


def _gaussian_json(g: qkl_gauss.DegenerateGaussian, target) -> dict:
    return {"factor": g.factor, "diag": g.diag, "qkl": qkl_gauss.qkl_value(g, target)}


def cmd_qkl_pca(args) -> str:
    target, lam = _spd_problem(args)
    found = qkl_gauss.optimize_qkl(target, args.rank, _optim_cfg(args))
    oracle = qkl_gauss.pca_oracle(target, args.rank)
    dist = qkl_gauss.alignment_distance(found, oracle)
    args._failure = None
    if not dist <= PCA_DISTANCE_TOL:
        args._failure = f"aligned distance {dist:.3g} exceeds {PCA_DISTANCE_TOL:g}"
    return dumps_json(
        {
            "target": target.entries,
            "spectrum": lam,
            "optimizer": _gaussian_json(qkl_gauss.align(found, oracle), target),
            "oracle": _gaussian_json(oracle, target),
            "distance": dist,
        }
    )


def cmd_tau_sweep(args) -> str:
    target, _ = _spd_problem(args)
    sched = qkl_gauss.TauSchedule(tuple(_floats(args.taus)))
    recs = qkl_gauss.tau_sweep(target, args.rank, sched, _optim_cfg(args))
    oracle = qkl_gauss.pca_oracle(target, args.rank)
    header = ["tau", "distance"] + [f"v{k + 1}" for k in range(args.rank)] + [f"gamma{k + 1}_minus_tau" for k in range(args.rank)]
    rows = []
    for r in recs:
        v = qkl_gauss.align(r.solution, oracle).diag
        rows.append([r.tau, r.distance, *v, *(oracle.diag - r.tau)])
    return dumps_csv(header, rows)


def _measure(args) -> limits.DiscreteMeasure:
    atoms = _points(args.atoms)
    weights = _floats(args.weights)
    return limits.DiscreteMeasure(atoms, np.array(weights) / math.fsum(weights))


def _limit_csv(q, target, recs, first: str) -> str:
    oracle = limits.qkl_discrete(q, target)
    return dumps_csv([first, "kl", "offset", "gap", "qkl"], [(r.n, r.kl, r.offset, r.gap, oracle) for r in recs])


def cmd_limit_conv(args) -> str:
    q = _measure(args)
    target = limits.DiagonalGaussianTarget.standard(q.dim)
    return _limit_csv(q, target, limits.convolved_gap_sequence(q, target, _floats(args.ns)), "n")


def cmd_limit_disc(args) -> str:
    q = _measure(args)
    target = limits.DiagonalGaussianTarget.standard(q.dim)
    deltas = limits.default_deltas(args.levels, args.first)
    return _limit_csv(q, target, limits.discretised_gap_sequence(q, target, deltas), "delta")


def cmd_limit_degenerate(args) -> str:
    v = _floats(args.v)
    var = _floats(args.target_var) if args.target_var else [1.0] * args.dim
    if len(var) != args.dim:
        raise CliError(f"--target-var needs {args.dim} entries")
    target = qkl_gauss.SpdMatrix(np.diag(var))
    recs = limits.degenerate_gaussian_gap(args.dim, args.k_s, v, target, _floats(args.ns))
    lim = limits.degenerate_gaussian_limit(args.dim, args.k_s, v, target)
    return dumps_csv(["n", "kl", "offset", "gap", "limit"], [(r.n, r.kl, r.offset, r.gap, lim) for r in recs])


def cmd_trunc_moments(args) -> str:
    iv = truncprior.TruncInterval(args.a, args.b)
    m = truncprior.posterior_moments(iv)
    out = {"a": iv.a, "b": iv.b, "closed_form": vars(m)}
    if args.check:
        out["quadrature"] = vars(truncprior.posterior_moments_quadrature(iv))
    return dumps_json(out)


_DEFAULT_NS = {"zero-mean": "100,10000,1000000", "const-mean": "5,10,20,40", "symmetric": "5,10,20"}


def cmd_trunc_sequences(args) -> str:
    if args.kind == "zero-mean":
        kind = truncprior.ZeroMean()
    elif args.kind == "const-mean":
        kind = truncprior.ConstMean(args.c)
    else:
        kind = truncprior.SymmetricGrowth()
    ns = _ints(args.ns if args.ns else _DEFAULT_NS[args.kind])
    rep = truncprior.sequence_diagnostics(kind, ns)
    header = ["n", "a", "b", "normalizer", "mean", "second_moment", "variance", "scaled_mean", "second_moment_ratio"]
    ratios = [math.nan] + list(rep.second_moment_ratios)
    rows = [
        (r.n, r.a, r.b, r.normalizer, r.mean, r.second_moment, r.variance, r.scaled_mean, q)
        for r, q in zip(rep.rows, ratios)
    ]
    return dumps_csv(header, rows)


def _likelihood(name: str):
    if name == "sigmoid":
        return truncprior.sigmoid
    if name == "one":
        return lambda w: np.ones_like(np.asarray(w, dtype=float))
    if name == "gaussian":
        # one regression observation y = 1 at x = 1 with unit noise
        return lambda w: np.exp(-0.5 * (1.0 - np.asarray(w, dtype=float)) ** 2) / math.sqrt(2.0 * math.pi)
    raise CliError(f"unknown likelihood {name!r}")


def _scan_csv(res, first: str) -> str:
    return dumps_csv([first, "mass", "slope", "bound"], [(r.x, r.mass, r.slope, r.bound) for r in res.rows])


def cmd_improper_scan(args) -> str:
    res = truncprior.improper_mass_scan(_likelihood(args.likelihood), args.delta0, _floats(args.deltas), args.eps)
    return _scan_csv(res, "delta")


def cmd_tail_scan(args) -> str:
    return _scan_csv(truncprior.tail_mass_scan(args.k, _floats(args.uppers)), "K")


def _dataset(args) -> vgd_fit.Dataset:
    if args.data:
        return vgd_fit.load_dataset(args.data, args.noise_var)
    return vgd_fit.make_synthetic(args.n, args.dim, args.noise_var, args.data_seed)


def _train_cfg(args, lam: float) -> vgd_fit.TrainConfig:
    return vgd_fit.TrainConfig(kl_weight=lam, max_iters=args.max_iters, grad_tol=args.grad_tol, seed=args.seed)


def cmd_vgd_fit(args) -> str:
    d = _dataset(args)
    cfg = _train_cfg(args, args.kl_weight)
    res = vgd_fit.fit_with_trace(d, cfg)
    p = res.params
    ls = vgd_fit.least_squares(d)
    return dumps_json(
        {
            "lambda": cfg.kl_weight,
            "mu": p.mu,
            "sigma2": p.sigma2,
            "u": p.u,
            "objective": vgd_fit.objective(p, d, cfg),
            "grad_norm": res.grad_norm,
            "iterations": res.iterations,
            "least_squares": ls,
            "max_abs_error_vs_least_squares": float(np.max(np.abs(p.mu - ls))),
        }
    )


def cmd_vgd_sweep(args) -> str:
    d = _dataset(args)
    lams = _floats(args.lambdas)
    header = ["lambda", "objective"]
    header += [f"u{j + 1}" for j in range(d.dim)] + [f"mu{j + 1}" for j in range(d.dim)]
    header += [f"sigma2_{j + 1}" for j in range(d.dim)]
    rows = []
    for lam in lams:
        cfg = _train_cfg(args, lam)
        p = vgd_fit.fit(d, cfg)
        rows.append([lam, vgd_fit.objective(p, d, cfg), *p.u, *p.mu, *p.sigma2])
    return dumps_csv(header, rows)


# ---------------------------------------------------------------------------
# parser


def _add_qkl_flags(sp, default_rank: int) -> None:
    sp.add_argument("--dim", type=int, default=4)
    sp.add_argument("--rank", type=int, default=default_rank)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--restarts", type=int, default=3)
    sp.add_argument("--max-iters", type=int, default=20_000)


def _add_vgd_flags(sp) -> None:
    sp.add_argument("--data", default=None, help="CSV with header; last column is the target")
    sp.add_argument("--noise-var", type=float, default=0.25)
    sp.add_argument("--n", type=int, default=40, help="synthetic sample count")
    sp.add_argument("--dim", type=int, default=3, help="synthetic input dimension")
    sp.add_argument("--data-seed", type=int, default=0)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--max-iters", type=int, default=20_000)
    sp.add_argument("--grad-tol", type=float, default=1e-9)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vbdropout", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, handler, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--out", required=name != "replay", type=Path)
        sp.set_defaults(handler=handler)
        return sp

    sp = add("kl-curve", cmd_kl_curve, "log-uniform KL and its gradient on a u grid (CSV)")
    sp.add_argument("--u-min", type=float, default=0.0)
    sp.add_argument("--u-max", type=float, default=10.0)
    sp.add_argument("--points", type=int, default=101)

    sp = add("qkl-pca", cmd_qkl_pca, "QKL optimiser against the eigensolver on a random SPD target (JSON)")
    _add_qkl_flags(sp, 2)

    sp = add("tau-sweep", cmd_tau_sweep, "noise-convolved optimum along a decreasing tau schedule (CSV)")
    _add_qkl_flags(sp, 2)
    sp.add_argument("--taus", default="0.5,0.1,0.01,0.001,0.0001,1e-05,1e-06")

    sp = add("limit-conv", cmd_limit_conv, "convolution gap sequence for atoms vs N(0, I) (CSV)")
    sp.add_argument("--atoms", default="0", help="points separated by ';', coordinates by ','")
    sp.add_argument("--weights", default="1")
    sp.add_argument("--ns", default="10,100,1000,10000")

    sp = add("limit-disc", cmd_limit_disc, "discretisation gap sequence for atoms vs N(0, I) (CSV)")
    sp.add_argument("--atoms", default="-1;0;1")
    sp.add_argument("--weights", default="0.25,0.5,0.25")
    sp.add_argument("--levels", type=int, default=8)
    sp.add_argument("--first", type=float, default=0.5)

    sp = add("limit-degenerate", cmd_limit_degenerate, "closed-form gaps for a Gaussian on an axis subspace (CSV)")
    sp.add_argument("--dim", type=int, default=2)
    sp.add_argument("--k-s", type=int, default=1)
    sp.add_argument("--v", default="1")
    sp.add_argument("--target-var", default=None, help="diagonal of the target covariance (default identity)")
    sp.add_argument("--ns", default="10,100,1000,10000")

    sp = add("trunc-moments", cmd_trunc_moments, "truncated log-uniform posterior moments (JSON)")
    sp.add_argument("--a", type=float, default=0.0)
    sp.add_argument("--b", type=float, default=1.0)
    sp.add_argument("--check", action="store_true", help="also integrate numerically")

    sp = add("trunc-sequences", cmd_trunc_sequences, "moments along a truncation sequence (CSV)")
    sp.add_argument("--kind", choices=sorted(_DEFAULT_NS), default="const-mean")
    sp.add_argument("--c", type=float, default=2.0)
    sp.add_argument("--ns", default=None, help="schedule (default depends on --kind)")

    sp = add("improper-scan", cmd_improper_scan, "posterior mass near the origin as the hole shrinks (CSV)")
    sp.add_argument("--likelihood", choices=["sigmoid", "one", "gaussian"], default="sigmoid")
    sp.add_argument("--delta0", type=float, default=1.0)
    sp.add_argument("--deltas", default="1e-2,1e-3,1e-4,1e-5,1e-6,1e-7,1e-8")
    sp.add_argument("--eps", type=float, default=0.05)

    sp = add("tail-scan", cmd_tail_scan, "posterior mass in the right tail as the cut-off grows (CSV)")
    sp.add_argument("--k", type=float, default=1.0)
    sp.add_argument("--uppers", default="10,100,1000")

    sp = add("vgd-fit", cmd_vgd_fit, "fit penalised linear regression at one lambda (JSON)")
    _add_vgd_flags(sp)
    sp.add_argument("--lambda", dest="kl_weight", type=float, default=0.0)

    sp = add("vgd-sweep", cmd_vgd_sweep, "fit over a list of lambdas (CSV)")
    _add_vgd_flags(sp)
    sp.add_argument("--lambdas", default="0,0.1,1,10")

    sp = add("replay", None, "re-run the command recorded in a manifest")
    sp.add_argument("manifest", type=Path)
    return parser


def _replay_args(parser, manifest: Path, out) -> argparse.Namespace:
    try:
        with open(manifest, encoding="utf-8") as fh:
            data = json.load(fh)
        command, params = data["command"], data["params"]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise CliError(f"cannot read manifest {manifest}: {exc}") from exc
    if command not in CLAIMS:
        raise CliError(f"manifest names unknown command {command!r}")
    target = Path(out) if out is not None else Path(data["output"])
    args = parser.parse_args([command, "--out", str(target)])
    known = vars(args)
    for key, value in params.items():
        if key not in known:
            raise CliError(f"manifest parameter {key!r} is not a flag of {command}")
        setattr(args, key, value)
    return args


def run(args: argparse.Namespace, parser) -> int:
    if args.command == "replay":
        args = _replay_args(parser, args.manifest, args.out)
    text = args.handler(args)
    _write(Path(args.out), text)
    write_manifest(args)
    failure = getattr(args, "_failure", None)
    if failure:
        raise CliError(failure)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return run(args, parser)
    except (CliError, ValueError, RuntimeError, OSError, NotImplementedError) as exc:
        msg = " ".join(str(exc).split())
        print(f"vbdropout {args.command}: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
