"""Command-line front end.

Every subcommand writes one table (CSV or JSON) preceded by the version, the
master seed and the fully resolved config; re-running with that config
reproduces the file.  Exit codes: 0 success, 1 config error, 2 runtime error
or flagged/undefined estimate.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile

import numpy as np

from . import __version__

CROSSING_COLUMNS = ["experiment", "d", "N", "h", "reps", "seed", "p_hat", "stderr", "ci_lo", "ci_hi",
                    "acceptance_rate"]


class ConfigError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _ints(text):
    return [int(x) for x in str(text).split(",") if x != ""]


def _floats(text):
    return [float(x) for x in str(text).split(",") if x != ""]


def _coords(text):
    return tuple(int(x) for x in str(text).split(","))


# name -> (help, {option: (type, default, help)})
COMMON = {"seed": (int, 1, "master seed"), "reps": (int, None, "samples, walks or chains")}
COMMANDS: dict[str, tuple[str, dict]] = {
    "green": ("Green's function of a box", {
        "d": (int, 3, "dimension"), "n": (int, 2, "box half-width"), "dump": (str, None, "matrix CSV path")}),
    "harmonic": ("harmonic measure of a sphere from a vertex", {
        "d": (int, 2, "dimension"), "n": (int, 3, "box half-width"), "v": (_coords, None, "start vertex"),
        "radius": (int, 2, "target sphere radius")}),
    "gff-cov-check": ("empirical GFF covariance against the Green's function", {
        "d": (int, 2, "dimension"), "n": (int, 1, "box half-width")}),
    "bridge-check": ("bridge opening law against discretised bridges", {
        "a": (float, 1.0, "value at one end"), "b": (float, 1.0, "value at the other end"),
        "h": (float, 0.0, "level"), "d": (int, 3, "dimension"), "steps": (int, 1024, "bridge grid steps")}),
    "crossing": ("P[0 <-> sphere of radius N]", {
        "d": (int, 3, "dimension"), "n": (int, 8, "target radius N"), "h": (float, 0.0, "level"),
        "enclosure": (float, 1.5, "field box half-width over N")}),
    "crossing-scaling": ("crossing probabilities over N and the log-log slope", {
        "d": (int, 3, "dimension"), "Ns": (_ints, [4, 6, 8, 12, 16], "radii"), "h": (float, 0.0, "level"),
        "enclosure": (float, 1.5, "field box half-width over N")}),
    "chem-distance": ("conditional chemical-distance tail", {
        "d": (int, 3, "dimension"), "n": (int, 12, "box half-width N"), "h": (float, 0.0, "level"),
        "alpha": (float, 0.25, "inner radius fraction"), "beta": (float, 0.5, "middle radius fraction"),
        "gamma": (float, 0.75, "outer radius fraction"), "C": (_floats, [0, 0.25, 0.5, 1, 2], "constants")}),
    "iic-scan": ("conditional event probabilities over increasing radii", {
        "d": (int, 3, "dimension"), "n": (int, 8, "box half-width"), "radii": (_ints, [2, 4, 6], "radii"),
        "h": (float, 0.0, "level"), "event": (json.loads, None, "event as JSON")}),
    "iic-height-scan": ("conditional event probabilities along a height schedule", {
        "d": (int, 3, "dimension"), "n": (int, 8, "box half-width"),
        "schedule": (_floats, [0.4, 0.2, 0.1, 0.05, 0.0], "decreasing heights"),
        "R_max": (int, None, "reach radius"), "event": (json.loads, None, "event as JSON")}),
    "qm-scan": ("quasi-multiplicativity ratios on the default presets", {
        "heights": (_floats, [0.0, 0.05, 0.1, 0.2], "heights")}),
    "epsilon-i": ("annulus face-separation probability", {
        "d": (int, 3, "dimension"), "n": (int, 6, "box half-width"), "r_in": (int, 2, "inner radius"),
        "r_out": (int, 5, "outer radius"), "h0": (float, 0.0, "largest height"),
        "n_heights": (int, 5, "heights in [0, h0]")}),
    "qv-check": ("quadratic variation along a random exploration", {
        "d": (int, 2, "dimension"), "n": (int, 3, "box half-width"), "steps": (int, 10, "exploration steps")}),
    "first-passage": ("P[B_t hits m t - b before T]", {
        "m": (float, 0.0, "slope"), "b": (float, 1.0, "offset"), "T": (float, 1.0, "horizon"),
        "paths": (int, 0, "oracle paths (0: formula only)"), "steps": (int, 10_000, "oracle steps")}),
    "tau-bounds": ("stopping-time columns next to the crossing probability", {
        "d": (int, 3, "dimension"), "h": (float, 0.0, "level"), "K": (int, 32, "far distance"),
        "N": (int, 8, "radius"), "enclosure": (float, 1.5, "field box half-width over N")}),
    "villain-kernel-check": ("circle kernel identities", {
        "t": (float, 1.0, "time")}),
    "villain-sample": ("one heat-bath state of the Villain model", {
        "n": (int, 8, "box side"), "t": (float, 1.0, "edge time"), "sweeps": (int, 200, "sweeps"),
        "bins": (int, 4096, "angular bins")}),
    "villain-ratio": ("<cos theta> over the connection probability", {
        "n": (int, 8, "box side"), "t": (float, 1.0, "edge time"), "sweeps": (int, 500, "recorded sweeps"),
        "mode": (str, "cos", "cos or cos2"), "alpha": (float, math.pi / 4, "angle for cos2"),
        "burn_in": (int, None, "burn-in sweeps (default: from autocorrelation)"),
        "bins": (int, 4096, "angular bins")}),
    "villain-iic-scan": ("Villain IIC columns over box sizes and angles", {
        "sizes": (_ints, [4, 6, 8], "box sides"), "alphas": (_floats, [1.2, 1.4, 1.5, 1.55], "angles"),
        "t": (float, 1.0, "edge time"), "sweeps": (int, 500, "recorded sweeps"),
        "event": (str, "edge-open", "edge-open, always or conditioning"), "R_max": (int, None, "reach radius"),
        "burn_in": (int, None, "burn-in sweeps"), "bins": (int, 4096, "angular bins")}),
    "acceptance": ("run the acceptance suite", {
        "quick": (bool, False, "reduced grid"), "only": (_ints, None, "criterion numbers")}),
}
DEFAULT_REPS = {"harmonic": 0, "gff-cov-check": 100_000, "bridge-check": 100_000, "crossing": 20_000,
                "crossing-scaling": 20_000, "chem-distance": 5_000, "iic-scan": 20_000, "iic-height-scan": 20_000,
                "qm-scan": 50_000, "epsilon-i": 20_000, "tau-bounds": 20_000, "villain-ratio": 16,
                "villain-iic-scan": 16}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cablegff", description="Cable-system GFF and Villain model experiments.")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (help_, opts) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_, description=help_)
        for opt, (typ, default, h) in {**COMMON, **opts}.items():
            flag = "--" + opt.replace("_", "-")
            if typ is bool:
                sp.add_argument(flag, dest=opt, action="store_const", const=True, default=None, help=h)
            else:
                sp.add_argument(flag, dest=opt, type=typ, default=None, help=f"{h} (default {default})")
        sp.add_argument("--out", default=None, help="output path (default stdout)")
        sp.add_argument("--format", choices=("csv", "json"), default=None, help="output format (default csv)")
        sp.add_argument("--config", default=None, help="JSON config file")
    return p


def resolve_config(ns: argparse.Namespace) -> dict:
    """Defaults, then the config file, then explicit flags."""
    name = ns.command
    opts = {**COMMON, **COMMANDS[name][1]}
    cfg = {k: v[1] for k, v in opts.items()}
    cfg["reps"] = DEFAULT_REPS.get(name)
    cfg["format"] = "csv"
    if ns.config:
        try:
            with open(ns.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {ns.config}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        data = {k.replace("-", "_"): v for k, v in data.items() if k != "command"}
        unknown = set(data) - set(cfg) - {"out"}
        if unknown:
            raise ConfigError(f"unknown config keys for {name}: {sorted(unknown)}")
        cfg.update(data)
    for k in list(opts) + ["format"]:
        v = getattr(ns, k, None)
        if v is not None:
            cfg[k] = v
    if cfg["format"] not in ("csv", "json"):
        raise ConfigError("format must be csv or json")
    for k, v in cfg.items():
        if isinstance(v, tuple):
            cfg[k] = list(v)
    return cfg


def _positive(cfg, *keys):
    for k in keys:
        if cfg.get(k) is None or cfg[k] < 1:
            raise ConfigError(f"{k} must be a positive integer")


def _est_row(est, **extra) -> dict:
    return {**extra, "p_hat": est.value, "stderr": est.stderr, "ci_lo": est.lo, "ci_hi": est.hi}


# Each runner returns (rows, flagged).

def _run_green(cfg):
    from .geometry import build_box
    from .potential import green
    dom = build_box(cfg["d"], cfg["n"])
    G = green(dom)
    if cfg["dump"]:
        _atomic(cfg["dump"], G.to_csv)
    M = G.matrix
    return [{"d": cfg["d"], "n": cfg["n"], "n_interior": dom.n_interior, "symmetric": bool(np.array_equal(M, M.T)),
             "min_eigenvalue": float(np.linalg.eigvalsh(M).min()), "G00": G(dom.vertex((0,) * cfg["d"]),
                                                                               dom.vertex((0,) * cfg["d"]))}], False


def _run_harmonic(cfg):
    from .geometry import RegionSpec, build_box, region_vertices
    from .potential import harmonic_measure
    dom = build_box(cfg["d"], cfg["n"])
    v = cfg["v"] or (0,) * cfg["d"]
    K = region_vertices(dom, RegionSpec.sphere((0,) * cfg["d"], cfg["radius"]))
    hm = harmonic_measure(dom, dom.vertex(tuple(v)), K)
    return [{"target": list(map(int, dom.coords[k])), "probability": p} for k, p in hm.as_dict().items()], False


def _run_gff_cov(cfg):
    from .geometry import build_box
    from .gff import make_sampler
    from .potential import green
    _positive(cfg, "reps")
    dom = build_box(cfg["d"], cfg["n"])
    G = green(dom).matrix
    x = make_sampler(dom).sample(np.random.Generator(np.random.PCG64(cfg["seed"])), cfg["reps"])
    prod = x[:, :, None] * x[:, None, :]
    z = np.abs(prod.mean(axis=0) - G) / (prod.std(axis=0, ddof=1) / math.sqrt(cfg["reps"]))
    return [{"samples": cfg["reps"], "max_abs_error": float(np.abs(prod.mean(axis=0) - G).max()),
             "max_z": float(z.max()), "within_5_se": bool(z.max() <= 5)}], False


def _run_bridge(cfg):
    from .gff import bridge_open_probability, bridge_oracle
    _positive(cfg, "reps")
    r = bridge_oracle(cfg["a"], cfg["b"], cfg["h"], cfg["d"], cfg["steps"], cfg["reps"], cfg["seed"])
    exact = bridge_open_probability(cfg["a"], cfg["b"], cfg["h"], cfg["d"])
    return [_est_row(r.estimate, formula=exact, bias_band=r.bias_band, accepted=r.accepts(exact))], False


def _crossing_row(experiment, cfg, N, est, h):
    return {"experiment": experiment, "d": cfg["d"], "N": N, "h": h, "reps": est.n, "seed": est.seed,
            "p_hat": est.value, "stderr": est.stderr, "ci_lo": est.lo, "ci_hi": est.hi, "acceptance_rate": 1.0}


def _run_crossing(cfg):
    from .geometry import build_box
    from .percolation import estimate_crossing, origin_to_sphere
    _positive(cfg, "reps", "n")
    if cfg["enclosure"] < 1:
        raise ConfigError("enclosure must be >= 1")
    dom = build_box(cfg["d"], math.ceil(cfg["enclosure"] * cfg["n"]))
    est = estimate_crossing(dom, origin_to_sphere(dom, cfg["n"], cfg["h"]), cfg["reps"], cfg["seed"])
    return [_crossing_row("crossing", cfg, cfg["n"], est, cfg["h"])], not est.defined


def _run_crossing_scaling(cfg):
    from .percolation import crossing_scaling, loglog_slope
    _positive(cfg, "reps")
    rows = crossing_scaling(cfg["d"], cfg["Ns"], cfg["h"], cfg["reps"], cfg["seed"], cfg["enclosure"])
    out = [_crossing_row("crossing-scaling", cfg, r["N"], r["estimate"], cfg["h"]) for r in rows]
    ps = [r["p_hat"] for r in out]
    if min(ps) <= 0:
        return out, True
    slope, _ = loglog_slope(cfg["Ns"], ps)
    for r in out:
        r["slope"] = slope
        r["p_sqrtN"] = r["p_hat"] * math.sqrt(r["N"])
    return out, False


def _run_chem(cfg):
    from .geometry import build_box
    from .percolation import conditional_chemical_scan
    _positive(cfg, "reps")
    dom = build_box(cfg["d"], cfg["n"])
    scan = conditional_chemical_scan(dom, cfg["alpha"], cfg["beta"], cfg["gamma"], cfg["h"], cfg["reps"],
                                     cfg["seed"], tuple(cfg["C"]))
    rows = [_est_row(e, experiment="chem-distance", d=cfg["d"], N=cfg["n"], h=cfg["h"], reps=cfg["reps"],
                     seed=cfg["seed"], C=C, threshold=thr, acceptance_rate=scan.acceptance.value)
            for C, thr, e in zip(cfg["C"], scan.thresholds, scan.conditional)]
    return rows, scan.flagged


def _event(cfg):
    from .iic import CylinderEvent
    if cfg.get("event") is None:
        return CylinderEvent.degree_at_least((0,) * cfg["d"], 2)
    try:
        return CylinderEvent(**cfg["event"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad event: {exc}") from None


def _scan_rows(table, experiment, cfg):
    rows = []
    for r in table.rows:
        row = r.row()
        rows.append({"experiment": experiment, "d": cfg["d"], **{k: v for k, v in row.items() if k not in ("event",)}})
    return rows


def _run_iic_scan(cfg):
    from .geometry import build_box
    from .iic import iic_convergence_scan
    _positive(cfg, "reps")
    t = iic_convergence_scan(build_box(cfg["d"], cfg["n"]), cfg["radii"], _event(cfg), cfg["reps"], cfg["seed"],
                             cfg["h"])
    return _scan_rows(t, "iic-scan", cfg), any(r.flagged for r in t.rows)


def _run_iic_height(cfg):
    from .geometry import build_box
    from .gff import HeightSchedule
    from .iic import iic_height_scan
    _positive(cfg, "reps")
    try:
        sched = HeightSchedule(tuple(cfg["schedule"]))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    t = iic_height_scan(build_box(cfg["d"], cfg["n"]), _event(cfg), sched, cfg["reps"], cfg["seed"], cfg["R_max"])
    return _scan_rows(t, "iic-height-scan", cfg), any(r.flagged for r in t.rows)


def _run_qm(cfg):
    from .iic import qm_scan
    _positive(cfg, "reps")
    rows = qm_scan(cfg["reps"], cfg["seed"], tuple(cfg["heights"]))
    return [r.row() for r in rows], any(r.flagged for r in rows)


def _run_epsilon(cfg):
    from .geometry import build_box
    from .iic import epsilon_i_estimate
    _positive(cfg, "reps")
    rep = epsilon_i_estimate(build_box(cfg["d"], cfg["n"]), cfg["r_in"], cfg["r_out"], cfg["h0"], cfg["reps"],
                             cfg["seed"], cfg["n_heights"])
    rows = []
    for h, row, acc in zip(rep.heights, rep.table, rep.acceptance):
        for name, e in zip(rep.family, row):
            rows.append(_est_row(e, h=h, family=name, acceptance_rate=acc.value))
    return rows, rep.flagged


def _run_qv(cfg):
    from .exploration import ExplorationSequence, quadratic_variation
    from .geometry import build_box
    from .potential import green
    dom = build_box(cfg["d"], cfg["n"])
    A = [dom.vertex((0,) * cfg["d"])]
    rng = np.random.Generator(np.random.PCG64(cfg["seed"]))
    order = [int(v) for v in rng.permutation(dom.n_interior) if v not in A]
    k = max(1, len(order) // (cfg["steps"] + 1))
    sets = [order[: k * j] for j in range(cfg["steps"] + 1)]
    qv = quadratic_variation(dom, green(dom), ExplorationSequence(dom, sets, A))
    return [{"step": j, "explored": len(s), "qv": v, "residual": qv.residual, "nondecreasing": qv.nondecreasing}
            for j, (s, v) in enumerate(zip(sets, qv.values))], False


def _run_first_passage(cfg):
    from .exploration import StoppingTimeParams, first_passage_cdf, first_passage_mc_oracle
    try:
        p = StoppingTimeParams(cfg["m"], cfg["b"], cfg["T"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    row = {"m": p.m, "b": p.b, "T": p.T, "probability": first_passage_cdf(p)}
    if cfg["paths"]:
        r = first_passage_mc_oracle(p, cfg["paths"], cfg["steps"], cfg["seed"])
        row.update(oracle=r.estimate.value, oracle_stderr=r.estimate.stderr, bias_band=r.bias_band,
                   accepted=r.accepts(row["probability"]))
    return [row], False


def _run_tau(cfg):
    from .exploration import tau_h_percolation_bounds
    _positive(cfg, "reps")
    rep = tau_h_percolation_bounds(cfg["d"], cfg["h"], cfg["K"], cfg["N"], cfg["reps"], cfg["seed"],
                                   enclosure=cfg["enclosure"])
    d = rep.to_dict()
    p = d.pop("p_hat")
    d.update(p_hat=p["value"], stderr=p["stderr"], ci_lo=p["ci_lo"], ci_hi=p["ci_hi"], notes="; ".join(d["notes"]))
    return [d], rep.flagged


def _run_kernel_check(cfg):
    from scipy import integrate
    from . import villain as vl
    t = cfg["t"]
    if not t > 0:
        raise ConfigError("t must be positive")
    a, b = 0.3, 2.1
    norm = integrate.quad(lambda y: vl.circle_kernel(t, a, y), a - math.pi, a + math.pi,
                          epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    ck = integrate.quad(lambda u: vl.circle_kernel(t / 2, a, u) * vl.circle_kernel(t / 2, u, b), 0, 2 * math.pi,
                        epsabs=1e-12, epsrel=1e-12, limit=200)[0]
    th = np.linspace(0, 2 * math.pi, 33)
    diff = np.abs(vl.circle_kernel(t, a, th, "images") - vl.circle_kernel(t, a, th, "dual")).max()
    return [{"t": t, "normalisation_error": abs(norm - 1), "chapman_kolmogorov_residual": abs(ck - vl.circle_kernel(t, a, b)),
             "image_vs_dual": float(diff), "symmetric": vl.circle_kernel(t, a, b) == vl.circle_kernel(t, b, a)}], False


def _run_villain_sample(cfg):
    from .geometry import build_grid
    from .villain import VillainState, gibbs_sample
    dom = build_grid((cfg["n"], cfg["n"]))
    st = gibbs_sample(VillainState.ordered(dom, cfg["t"]), cfg["sweeps"],
                      np.random.Generator(np.random.PCG64(cfg["seed"])), cfg["bins"])
    return [{"x": int(dom.coords[i][0]), "y": int(dom.coords[i][1]), "theta": float(th)}
            for i, th in enumerate(st.angles)], False


def _run_villain_ratio(cfg):
    from .geometry import build_grid
    from .villain import correlation_ratio
    if cfg["mode"] not in ("cos", "cos2"):
        raise ConfigError("mode must be cos or cos2")
    _positive(cfg, "reps", "sweeps")
    r = correlation_ratio(build_grid((cfg["n"], cfg["n"])), cfg["t"], cfg["reps"], cfg["sweeps"], cfg["seed"],
                          cfg["mode"], burn_in=cfg["burn_in"], bins=cfg["bins"], alpha=cfg["alpha"])
    d = r.to_dict()
    d["notes"] = "; ".join(d["notes"])
    return [d], r.ratio.flagged or not math.isfinite(r.ratio.value)


def _run_villain_iic(cfg):
    from .villain import villain_iic_scan
    _positive(cfg, "reps", "sweeps")
    if cfg["event"] not in ("edge-open", "always", "conditioning"):
        raise ConfigError("event must be edge-open, always or conditioning")
    scan = villain_iic_scan(cfg["sizes"], cfg["alphas"], cfg["reps"], cfg["sweeps"], cfg["seed"], cfg["t"],
                            cfg["event"], cfg["burn_in"], cfg["bins"], cfg["R_max"])
    rows = []
    for r in scan.rows:
        row = r.row()
        diag = scan.diagnostics[r.n]
        row.update(difference=diag["difference"], combined_sigma=diag["combined_sigma"], diagnostic_pass=diag["pass"],
                   burn_in=diag["burn_in"], proxy=diag["proxy"])
        rows.append(row)
    return rows, any(r.estimate.flagged for r in scan.rows)


def _run_acceptance(cfg):
    from .acceptance import run_acceptance
    res = run_acceptance(bool(cfg["quick"]), cfg["only"], progress=lambda r: print(r.line(), file=sys.stderr))
    rows = [{"number": r.number, "name": r.name, "passed": r.passed, "detail": json.dumps(r.detail, sort_keys=True)}
            for r in res]
    return rows, not all(r.passed for r in res)


RUNNERS = {
    "green": _run_green, "harmonic": _run_harmonic, "gff-cov-check": _run_gff_cov, "bridge-check": _run_bridge,
    "crossing": _run_crossing, "crossing-scaling": _run_crossing_scaling, "chem-distance": _run_chem,
    "iic-scan": _run_iic_scan, "iic-height-scan": _run_iic_height, "qm-scan": _run_qm, "epsilon-i": _run_epsilon,
    "qv-check": _run_qv, "first-passage": _run_first_passage, "tau-bounds": _run_tau,
    "villain-kernel-check": _run_kernel_check, "villain-sample": _run_villain_sample,
    "villain-ratio": _run_villain_ratio, "villain-iic-scan": _run_villain_iic, "acceptance": _run_acceptance,
}


def _plain(v):
    if isinstance(v, (np.bool_,)):
        return bool(v)
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.floating):
        return float(v)
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {k: _plain(x) for k, x in v.items()}
    return v


def render(command: str, cfg: dict, rows: list[dict]) -> str:
    rows = [_plain(r) for r in rows]
    echo = {"command": command, **{k: v for k, v in cfg.items() if k not in ("out", "format")}}
    if cfg["format"] == "json":
        doc = {"version": __version__, "seed": cfg["seed"], "config": echo, "rows": rows}
        return json.dumps(doc, indent=2, sort_keys=True, default=str) + "\n"
    buf = io.StringIO()
    buf.write(f"# version={__version__}\n# seed={cfg['seed']}\n# config={json.dumps(echo, sort_keys=True)}\n")
    cols = list(CROSSING_COLUMNS) if command in ("crossing", "crossing-scaling") else []
    for r in rows:
        cols += [k for k in r if k not in cols]
    w = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in r.items()})
    return buf.getvalue()


def _atomic(path: str, write) -> None:
    """``write(tmp_path)`` next to ``path``, then rename over it."""
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".cablegff-", suffix=".tmp")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def run(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if ns.command is None:
            parser.print_help()
            return 1
        cfg = resolve_config(ns)
        out = ns.out if ns.out is not None else cfg.pop("out", None)
        cfg.pop("out", None)
        rows, flagged = RUNNERS[ns.command](cfg)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # runtime failure of the experiment
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    text = render(ns.command, cfg, rows)
    if out:
        def write(tmp):
            with open(tmp, "w", newline="") as fh:
                fh.write(text)
        _atomic(out, write)
    else:
        sys.stdout.write(text)
    return 2 if flagged else 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
