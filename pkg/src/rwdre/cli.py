"""Command-line entry point.

Every output starts with a header recording the program version, the output
schema version, the fully resolved configuration and its hash.  CSV headers
are ``#`` comment lines; JSON outputs carry the same fields under ``meta``.

Exit codes: 0 success, 2 usage, 3 precondition or parameter error,
4 resource guard, 5 verification failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from importlib import metadata

import numpy as np

from .errors import RwdreError

SCHEMA_VERSION = 1
EXIT_USAGE = 2
EXIT_VERIFY = 5


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0.1.0"


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.floating):
        return float(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def _meta(config: dict) -> dict:
    blob = json.dumps(_jsonable(config), sort_keys=True, separators=(",", ":"))
    return {"program": "rwdre", "version": _version(), "schema_version": SCHEMA_VERSION,
            "config": json.loads(blob), "config_hash": hashlib.sha256(blob.encode()).hexdigest()[:16]}


class Output:
    def __init__(self, path: str | None):
        self.path = path

    def _write(self, text: str) -> None:
        if self.path in (None, "-"):
            sys.stdout.write(text)
        else:
            with open(self.path, "w", newline="") as fh:
                fh.write(text)

    def csv(self, config: dict, columns, rows) -> None:
        buf = io.StringIO()
        m = _meta(config)
        buf.write(f"# program={m['program']} version={m['version']} schema_version={m['schema_version']}"
                  f" config_hash={m['config_hash']}\n")
        buf.write("# config=" + json.dumps(m["config"], sort_keys=True) + "\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_cell(v) for v in r])
        self._write(buf.getvalue())

    def json(self, config: dict, payload) -> None:
        doc = {"meta": _meta(config), "result": _jsonable(payload)}
        self._write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return v


def _config(args, drop=("func", "out", "dump", "grid", "threads", "command", "sub")) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in drop}


# --------------------------------------------------------------------------
# subcommands

def cmd_kernel(args):
    from .kernel import heat_kernel, kernel_bound_report
    out = Output(args.out)
    if args.bounds:
        out.json(_config(args), kernel_bound_report(args.q, args.n))
        return 0
    k = heat_kernel(args.q, args.n, exact=args.exact)
    rows = [(int(x), str(v) if args.exact else float(v)) for x, v in zip(k.support, k.values)]
    out.csv(_config(args), ["x", "p"], rows)
    return 0


def cmd_env(args):
    from .env import EnvConfig, sample_environment
    cfg = EnvConfig(args.rho, args.q, args.xmin, args.xmax, args.tmax, args.tmin, args.seed)
    env = sample_environment(cfg)
    if args.grid:
        grid = env.occupancy_grid(cfg.t_min, cfg.t_max)
        rows = [(int(n), *map(int, grid[n - cfg.t_min])) for n in range(cfg.t_min, cfg.t_max + 1)]
        cols = ["n"] + [str(x) for x in range(cfg.x_min, cfg.x_max + 1)]
        Output(args.grid).csv(_config(args), cols, rows)
    target = args.dump if args.dump else (None if args.grid else "-")
    if target:
        times = np.arange(cfg.t_min, cfg.t_max + 1)

        def rows():
            for p in range(env.zs.size):
                for j, n in enumerate(times):
                    yield int(env.zs[p]), int(env.idx[p]), int(n), int(env.paths[p, j])

        Output(target).csv(_config(args), ["z", "i", "n", "position"], rows())
    return 0


def cmd_walk(args):
    from .walker import WalkParams, walk_ensemble
    paths = walk_ensemble(WalkParams(args.pcirc, args.pbullet), args.rho, args.q, args.steps,
                          args.paths, args.seed, keep_paths=True, threads=args.threads)

    def rows():
        for r in range(paths.shape[0]):
            for i in range(paths.shape[1]):
                yield r, i, int(paths[r, i])

    Output(args.out).csv(_config(args), ["replica", "i", "x"], rows())
    return 0


def cmd_regen(args):
    from .regen import RegenConfig, regen_ensemble
    from .walker import WalkParams
    params = WalkParams(args.pcirc, args.pbullet)
    cfg = RegenConfig.for_walk(params, args.vstar, args.T, cert_tol=args.cert_tol)
    seqs = regen_ensemble(params, args.rho, args.q, cfg, args.horizon, args.seeds, args.seed,
                          count=args.count, threads=args.threads)
    rows = []
    for r, s in enumerate(seqs):
        last = s.reports[-1]
        if s.taus:
            for j, (t, x) in enumerate(zip(s.taus, s.sites)):
                rows.append((r, j + 1, t, x, True, s.reports[j].residual))
        if not s.complete:
            rows.append((r, len(s.taus) + 1, last.tau, last.x_tau, False,
                         None if last.tau is None else last.residual))
    Output(args.out).csv(_config(args), ["seed", "index", "tau", "x_tau", "certified", "residual"], rows)
    return 0


def cmd_renorm(args):
    from . import renorm
    out = Output(args.out)
    if args.sub == "ladder":
        lad = renorm.build_ladder(args.L0, args.v, args.vbullet, args.rho0, args.kmax)
        payload = lad.as_dict()
        payload["k0"] = renorm.k0_threshold(lad.delta, lad)
        payload["k0"]["holds"] = {str(k): v for k, v in payload["k0"]["holds"].items()}
        payload["L"] = [None if x is None else (x if x < 2 ** 53 else str(x)) for x in payload["L"]]
        out.json(_config(args), payload)
    elif args.sub == "pk":
        from .walker import WalkParams
        lad = renorm.build_ladder(args.L0, args.v, args.vbullet, args.rho0, max(args.k, 1))
        r = renorm.bad_event_monte_carlo(lad, args.k, args.rho, WalkParams(args.pcirc, args.pbullet),
                                         args.q, args.replicas, args.seed, speed=args.speed,
                                         threads=args.threads)
        out.csv(_config(args), ["k", "p_hat", "ci_lo", "ci_hi"], [(r["k"], r["p_hat"], r["ci_lo"], r["ci_hi"])])
    elif args.sub == "claim":
        from .walker import WalkParams
        lad = renorm.build_ladder(args.L0, args.v, args.vbullet, args.rho0, args.k + 1)
        rows = []
        for r in range(args.replicas):
            res = renorm.three_slow_boxes_check(lad, args.k, WalkParams(args.pcirc, args.pbullet),
                                                args.rho, args.q, args.seed, replica=r)
            rows.append((r, res["big_slow"], len(res["slow_boxes"]), len(res["layers"]), res["verdict"]))
        out.csv(_config(args), ["replica", "big_slow", "slow_boxes", "slow_layers", "verdict"], rows)
        if not all(r[-1] for r in rows):
            print("verification failed: three-slow-boxes claim violated", file=sys.stderr)
            return EXIT_VERIFY
    elif args.sub == "tailsum":
        r = renorm.tail_sum_check(args.beta, args.a, args.cutoff)
        out.json(_config(args), r)
        if not r["holds"]:
            return EXIT_VERIFY
    return 0


def _floats(text: str):
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str):
    return [int(t) for t in text.split(",") if t.strip()]


def cmd_slt(args):
    from . import slt
    out = Output(args.out)
    sigma = _ints(args.sigma)
    mu = _floats(args.mu) if args.mu else None
    if args.sub == "sample":
        p = slt.sample_point_process(sigma, mu, args.cap, args.seed)
        rows = [(int(p.sigma[s]), float(h)) for s, h in zip(p.site, p.height)]
        out.csv(_config(args), ["z", "v"], rows)
    elif args.sub == "simulate":
        gs = [np.array(_floats(g)) for g in args.g]
        rows = []
        for r in range(args.draws):
            p = slt.sample_point_process(sigma, mu, args.cap, slt.rng.substream_seed(args.seed, r))
            sites, lt, _, _ = slt.simulate_sequence(p, gs)
            for j, (z, xi) in enumerate(zip(sites, lt.xis)):
                rows.append((r, j + 1, z, xi))
        out.csv(_config(args), ["seed", "j", "z", "xi"], rows)
    elif args.sub == "dominate":
        gs = [np.array(_floats(g)) for g in args.g]
        r = slt.domination_check(sigma, gs, args.rho, args.draws, args.seed, mu=mu)
        out.json(_config(args), r)
        if not r["holds_within_error"]:
            return EXIT_VERIFY
    elif args.sub == "couple":
        starts = np.arange(args.lo, args.hi + 1)
        r = slt.endpoint_coupling(starts, args.L, args.rho, args.rho_prime, args.n, args.seed,
                                  (args.hp_lo, args.hp_hi), replicas=args.draws, q=args.q)
        out.json(_config(args), r)
    return 0


def cmd_stats(args):
    from . import stats
    from .walker import WalkParams, walk_ensemble
    out = Output(args.out)
    if args.sub == "speed":
        e = stats.estimate_speed(WalkParams(args.pcirc, args.pbullet), args.rho, args.q, args.n,
                                 args.replicas, args.seed, threads=args.threads)
        out.csv(_config(args), ["seed", "n", "replicas", "v_hat", "se", "ci_lo", "ci_hi"],
                [(args.seed, e.n, e.replicas, e.v_hat, e.se, e.ci[0], e.ci[1])])
    elif args.sub == "clt":
        ends = walk_ensemble(WalkParams(args.pcirc, args.pbullet), args.rho, args.q, args.n,
                             args.replicas, args.seed, threads=args.threads)
        r = stats.clt_test(ends, args.n, args.v, args.sigma)
        out.csv(_config(args), ["seed", "n", "replicas", "ks_stat", "p_value"],
                [(args.seed, args.n, r["replicas"], r["ks_stat"], r["p_value"])])
    elif args.sub == "ld":
        r = stats.ballisticity_probe(WalkParams(args.pcirc, args.pbullet), args.rho, args.q, args.vstar,
                                     _ints(args.L), args.horizon, args.replicas, args.seed,
                                     threads=args.threads)
        out.csv(_config(args), ["seed", "L", "p_hat", "se"],
                [(args.seed, row["L"], row["p_hat"], row["se"]) for row in r["rows"]])
    elif args.sub == "cov":
        rows = []
        for n in _ints(args.n):
            r = stats.covariance_empirical(args.rho, args.q, n, args.envs, stats.rng.substream_seed(args.seed, n))
            rows.append((args.seed, n, r["cov"], r["se"], r["theory"]))
        out.csv(_config(args), ["seed", "n", "cov", "se", "theory"], rows)
    elif args.sub == "decouple":
        r = stats.decoupling_probe(args.rho, args.q, _ints(args.n), args.envs, args.seed)
        out.csv(_config(args), ["seed", "n", "cov", "cov_se", "lhs", "rhs", "gap", "gap_se"],
                [(args.seed, row["n"], row["cov"], row["cov_se"], row["lhs"], row["rhs"], row["gap"],
                  row["gap_se"]) for row in r["rows"]])
    return 0


def cmd_verify(args):
    from .acceptance import run_battery
    only = _ints(args.only) if args.only else None

    def progress(v):
        print(v.line(), file=sys.stderr, flush=True)

    verdicts = run_battery(args.level, args.seed, only, args.inject, progress)
    payload = {"level": args.level, "criteria": [
        {"number": v.number, "title": v.title, "passed": v.passed, "details": v.details} for v in verdicts]}
    failed = [v.number for v in verdicts if not v.passed]
    payload["failed"] = failed
    Output(args.out).json(_config(args), payload)
    if failed:
        print("verification failed: criteria " + ",".join(map(str, failed)), file=sys.stderr)
        return EXIT_VERIFY
    return 0


# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rwdre", description="Random walk among a cloud of lazy walkers.")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: RWRW_THREADS or 1); results do not depend on it")
    sub = p.add_subparsers(dest="command")

    def common(sp, seed=True, out=True):
        if seed:
            sp.add_argument("--seed", type=int, default=0)
        if out:
            sp.add_argument("--out", default=None, help="output path (default stdout)")

    k = sub.add_parser("kernel", help="n-step law of the lazy walk")
    k.add_argument("--q", type=float, required=True)
    k.add_argument("--n", type=int, required=True)
    k.add_argument("--exact", action="store_true", help="rational arithmetic (n <= 64)")
    k.add_argument("--bounds", action="store_true", help="emit the kernel bound report as JSON")
    common(k, seed=False)
    k.set_defaults(func=cmd_kernel)

    e = sub.add_parser("env", help="sample a particle cloud window")
    e.add_argument("--rho", type=float, required=True)
    e.add_argument("--q", type=float, required=True)
    e.add_argument("--xmin", type=int, required=True)
    e.add_argument("--xmax", type=int, required=True)
    e.add_argument("--tmax", type=int, required=True)
    e.add_argument("--tmin", type=int, default=None)
    e.add_argument("--dump", default=None, help="CSV of z,i,n,position")
    e.add_argument("--grid", default=None, help="CSV occupancy grid, one row per time")
    common(e, out=False)
    e.set_defaults(func=cmd_env)

    w = sub.add_parser("walk", help="walker paths")
    for name in ("rho", "q", "pcirc", "pbullet"):
        w.add_argument(f"--{name}", type=float, required=True)
    w.add_argument("--steps", type=int, required=True)
    w.add_argument("--paths", type=int, default=1)
    common(w)
    w.set_defaults(func=cmd_walk)

    r = sub.add_parser("regen", help="certified regeneration times")
    r.add_argument("--rho", type=float, required=True)
    r.add_argument("--q", type=float, default=0.5)
    r.add_argument("--pcirc", type=float, required=True)
    r.add_argument("--pbullet", type=float, required=True)
    r.add_argument("--vstar", type=float, required=True)
    r.add_argument("--T", type=int, default=200)
    r.add_argument("--horizon", type=int, default=20000)
    r.add_argument("--seeds", type=int, default=1)
    r.add_argument("--count", type=int, default=1, help="regenerations per seed")
    r.add_argument("--cert-tol", dest="cert_tol", type=float, default=1e-3)
    common(r)
    r.set_defaults(func=cmd_regen)

    rn = sub.add_parser("renorm", help="scale ladder and box events")
    rsub = rn.add_subparsers(dest="sub", required=True)

    def ladder_args(sp, L0=100, v=0.2, vb=0.6):
        sp.add_argument("--L0", type=int, default=L0)
        sp.add_argument("--v", type=float, default=v)
        sp.add_argument("--vbullet", type=float, default=vb)
        sp.add_argument("--rho0", type=float, default=1.0)

    lad = rsub.add_parser("ladder")
    ladder_args(lad)
    lad.add_argument("--kmax", type=int, default=12)
    common(lad, seed=False)
    pk = rsub.add_parser("pk")
    ladder_args(pk, L0=16)
    pk.add_argument("--k", type=int, default=1)
    pk.add_argument("--rho", type=float, default=1.0)
    pk.add_argument("--q", type=float, default=0.5)
    pk.add_argument("--pcirc", type=float, default=0.3)
    pk.add_argument("--pbullet", type=float, default=0.8)
    pk.add_argument("--speed", type=float, default=None, help="override the ladder speed v_k")
    pk.add_argument("--replicas", type=int, default=1000)
    common(pk)
    cl = rsub.add_parser("claim")
    ladder_args(cl, L0=16, v=-1.4, vb=1.0)
    cl.add_argument("--k", type=int, default=1)
    cl.add_argument("--rho", type=float, default=0.03)
    cl.add_argument("--q", type=float, default=0.5)
    cl.add_argument("--pcirc", type=float, default=0.02)
    cl.add_argument("--pbullet", type=float, default=1.0)
    cl.add_argument("--replicas", type=int, default=20)
    common(cl)
    ts = rsub.add_parser("tailsum")
    ts.add_argument("--beta", type=float, required=True)
    ts.add_argument("--a", type=float, required=True)
    ts.add_argument("--cutoff", type=int, default=None)
    common(ts, seed=False)
    for sp, fn in ((lad, cmd_renorm), (pk, cmd_renorm), (cl, cmd_renorm), (ts, cmd_renorm)):
        sp.set_defaults(func=fn)

    s = sub.add_parser("slt", help="soft local times")
    ssub = s.add_subparsers(dest="sub", required=True)
    for name in ("sample", "simulate", "dominate", "couple"):
        sp = ssub.add_parser(name)
        sp.add_argument("--sigma", default="0,1,2,3,4", help="comma-separated sites")
        sp.add_argument("--mu", default=None, help="comma-separated site weights")
        sp.add_argument("--cap", type=float, default=1.0)
        sp.add_argument("--draws", type=int, default=1000)
        if name in ("simulate", "dominate"):
            sp.add_argument("--g", action="append", required=True,
                            help="comma-separated density; repeat for a sequence")
        if name in ("dominate", "couple"):
            sp.add_argument("--rho", type=float, default=1.0)
        if name == "couple":
            sp.add_argument("--rho-prime", dest="rho_prime", type=float, default=0.5)
            sp.add_argument("--L", type=int, default=4)
            sp.add_argument("--n", type=int, default=400)
            sp.add_argument("--q", type=float, default=0.5)
            sp.add_argument("--lo", type=int, default=0)
            sp.add_argument("--hi", type=int, default=803)
            sp.add_argument("--hp-lo", dest="hp_lo", type=int, default=400)
            sp.add_argument("--hp-hi", dest="hp_hi", type=int, default=403)
        common(sp)
        sp.set_defaults(func=cmd_slt)

    st = sub.add_parser("stats", help="ensemble estimators")
    stsub = st.add_subparsers(dest="sub", required=True)
    for name in ("speed", "clt", "ld", "cov", "decouple"):
        sp = stsub.add_parser(name)
        sp.add_argument("--rho", type=float, default=1.0)
        sp.add_argument("--q", type=float, default=0.5)
        if name in ("speed", "clt", "ld"):
            sp.add_argument("--pcirc", type=float, required=True)
            sp.add_argument("--pbullet", type=float, required=True)
            sp.add_argument("--replicas", type=int, default=400)
        if name in ("speed", "clt"):
            sp.add_argument("--n", type=int, default=5000)
        if name == "clt":
            sp.add_argument("--v", type=float, required=True, help="centering speed")
            sp.add_argument("--sigma", type=float, required=True, help="diffusivity")
        if name == "ld":
            sp.add_argument("--vstar", type=float, required=True)
            sp.add_argument("--L", default="5,10,20,40")
            sp.add_argument("--horizon", type=int, default=10_000)
        if name in ("cov", "decouple"):
            sp.add_argument("--n", default="2,8,32" if name == "cov" else "16,64,256")
            sp.add_argument("--envs", type=int, default=100_000)
        common(sp)
        sp.set_defaults(func=cmd_stats)

    v = sub.add_parser("verify", help="run the acceptance battery")
    v.add_argument("--level", choices=("quick", "full"), default="quick")
    v.add_argument("--seed", type=int, default=2024)
    v.add_argument("--only", default=None, help="comma-separated criterion numbers")
    v.add_argument("--inject", default=None, help="deliberate fault: kernel-norm or kernel-symmetry")
    common(v, seed=False)
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    if args.threads is not None:
        os.environ["RWRW_THREADS"] = str(max(1, args.threads))
    try:
        return args.func(args)
    except RwdreError as exc:
        print(f"error: {type(exc).__name__}: {exc}".replace("\n", " "), file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        # parameter validation outside the package's own error types
        print(f"error: ValueError: {exc}".replace("\n", " "), file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
