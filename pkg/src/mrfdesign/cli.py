"""Command-line interface: ``mrfdesign <command> [options]``.

Commands
--------
simulate   magnetization trajectories of the configured tissues
crb        Fisher information, CRB and normalized CRB per tissue
design     optimize a schedule (Optimized-I with ``--mode opt1``, II with ``opt2``)
dict       build and save a dictionary for a schedule
match      match a signal file against a saved dictionary
mc         Monte Carlo evaluation of dictionary matching
sweep      normalized CRB against schedule length

Exit codes: 0 success, 2 invalid input, 3 numerical failure (singular
Fisher information), 4 file I/O error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
import time
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

import numpy as np

from .bloch import AcqSchedule, IsochromatEnsemble, conventional_schedule, simulate
from .config import ConfigError, RunConfig, load_config
from .crb import SingularInformation, crb_for
from .design import check_constraints, optimize, per_tissue_ncrb
from .dictionary import DictionaryFormatError, build_grid, generate, load, match, save
from .mc import NoiseModel, overall_error, run_mc, sweep_ncrb, write_rows

log = logging.getLogger("mrfdesign")

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

SCHEDULE_COLUMNS = ("n", "alpha_deg", "phi_deg", "te_ms", "tr_ms")
BANG_BANG_BAND = 0.01


def tool_version() -> str:
    try:
        return version("artifact")
    except PackageNotFoundError:
        return "0+unknown"


# -- schedule files ---------------------------------------------------------


def read_schedule(path) -> AcqSchedule:
    """Read ``n,alpha_deg,phi_deg,te_ms,tr_ms`` rows; '#' lines are comments."""
    with open(path, newline="") as fh:
        rows = [line for line in fh if line.strip() and not line.startswith("#")]
    reader = csv.DictReader(rows)
    if reader.fieldnames is None or tuple(reader.fieldnames) != SCHEDULE_COLUMNS:
        raise ValueError(f"{path}: expected header {','.join(SCHEDULE_COLUMNS)}")
    recs = list(reader)
    if not recs:
        raise ValueError(f"{path}: no schedule rows")
    try:
        idx = [int(r["n"]) for r in recs]
        cols = {c: np.array([float(r[c]) for r in recs]) for c in SCHEDULE_COLUMNS[1:]}
    except (TypeError, ValueError) as exc:
        raise ValueError(f"{path}: malformed number ({exc})") from exc
    if idx != list(range(1, len(recs) + 1)):
        raise ValueError(f"{path}: column n must run 1..N")
    return AcqSchedule(
        np.deg2rad(cols["alpha_deg"]), np.deg2rad(cols["phi_deg"]), cols["te_ms"], cols["tr_ms"]
    )


def _num(x) -> str:
    # shortest round-tripping decimal form
    return repr(float(x))


def write_schedule(schedule: AcqSchedule, path, header_lines=()) -> None:
    rows = [
        dict(zip(SCHEDULE_COLUMNS, (k + 1, _num(math.degrees(u.alpha)), _num(math.degrees(u.phi)), _num(u.te), _num(u.tr))))
        for k, u in enumerate(schedule)
    ]
    write_rows(rows, path, SCHEDULE_COLUMNS, header_lines)


# -- helpers ----------------------------------------------------------------


class Context:
    """Resolved configuration, provenance and output location for one run."""

    def __init__(self, args, cfg: RunConfig):
        self.args = args
        self.cfg = cfg
        self.seed = args.seed
        self.out = Path(args.out or cfg.io.out_dir)
        self.out.mkdir(parents=True, exist_ok=True)

    @property
    def provenance(self) -> dict:
        return {
            "tool": "mrfdesign",
            "version": tool_version(),
            "config_hash": self.cfg.digest(),
            "seed": self.seed,
            "threads": self.args.threads,
            "command": self.args.command,
        }

    def header(self) -> list[str]:
        return [f"{k}={v}" for k, v in self.provenance.items()]

    def write_json(self, name: str, payload: dict) -> Path:
        path = self.out / name
        path.write_text(json.dumps({"provenance": self.provenance, **payload}, indent=2))
        return path

    def ensemble(self) -> IsochromatEnsemble:
        return IsochromatEnsemble.uniform(self.cfg.bloch.nv)

    def schedule(self, required: bool = True) -> AcqSchedule | None:
        if self.args.schedule:
            return read_schedule(self.args.schedule)
        if required:
            raise ValueError("--schedule is required for this command")
        return None


def _bang_bang_fraction(schedule: AcqSchedule, lo: float, hi: float) -> float:
    band = BANG_BANG_BAND * (hi - lo) if hi > lo else 0.0
    tr = schedule.tr
    return float(np.mean((tr - lo <= band) | (hi - tr <= band)))


# -- commands ---------------------------------------------------------------


def cmd_simulate(ctx: Context) -> None:
    sched = ctx.schedule()
    ens = ctx.ensemble()
    rows = []
    for i, theta in enumerate(ctx.cfg.design_config().tissues):
        m = simulate(sched, theta, ens)
        mag = np.hypot(m[:, 0], m[:, 1])
        for k in range(len(sched)):
            rows.append({"tissue": i, "t1": theta.t1, "t2": theta.t2, "n": k + 1,
                         "mx": _num(m[k, 0]), "my": _num(m[k, 1]), "abs": _num(mag[k])})
    write_rows(rows, ctx.out / "trajectories.csv", header_lines=ctx.header())


def cmd_crb(ctx: Context) -> None:
    sched = ctx.schedule()
    ens = ctx.ensemble()
    sigma = ctx.cfg.noise.resolved_sigma
    reports, rows = [], []
    for i, theta in enumerate(ctx.cfg.design_config().tissues):
        rep = crb_for(sched, theta, ens, sigma)
        reports.append({"tissue": [theta.t1, theta.t2, theta.m0], **rep.as_dict()})
        rows.append({"tissue": i, "t1": theta.t1, "t2": theta.t2, "m0": theta.m0,
                     "ncrb_t1": rep.ncrb[0], "ncrb_t2": rep.ncrb[1], "ncrb_m0": rep.ncrb[2]})
    ctx.write_json("crb.json", {"sigma": sigma, "n": len(sched), "tissues": reports})
    write_rows(rows, ctx.out / "ncrb.csv", header_lines=ctx.header())


def cmd_design(ctx: Context) -> None:
    cfg = ctx.cfg.design_config(ctx.args.mode)
    init = ctx.schedule(required=False)
    if init is None:
        seed = ctx.cfg.design.init_seed if ctx.seed is None else ctx.seed
        init = conventional_schedule(cfg.n, seed=seed, te=ctx.cfg.bloch.te_ms)
    t0 = time.perf_counter()
    res = optimize(cfg, init, callback=lambda it, f: log.info("iter %d cost %.6g", it, f))
    elapsed = time.perf_counter() - t0
    init_ncrb = per_tissue_ncrb(init, cfg)
    write_schedule(res.schedule, ctx.out / "schedule.csv", ctx.header())
    write_rows(
        [{"step": i, "cost": _num(c)} for i, c in enumerate(res.cost_history)],
        ctx.out / "cost_history.csv",
        header_lines=ctx.header(),
    )
    ctx.write_json("design.json", {
        "mode": cfg.mode,
        "n": cfg.n,
        "iterations": res.iterations,
        "converged": res.converged,
        "message": res.message,
        "elapsed_s": elapsed,
        "initial_cost": res.cost_history[0],
        "final_cost": res.cost_history[-1],
        "per_tissue_ncrb_init": init_ncrb.tolist(),
        "per_tissue_ncrb": res.per_tissue_ncrb.tolist(),
        "t2_improvement": (init_ncrb[:, 1] / res.per_tissue_ncrb[:, 1]).tolist(),
        "tr_bang_bang_fraction": _bang_bang_fraction(res.schedule, cfg.tr_min, cfg.tr_max),
        "constraint_violations": check_constraints(res.schedule, cfg),
    })


def cmd_dict(ctx: Context) -> None:
    sched = ctx.schedule()
    spec = ctx.cfg.grid_spec()
    t0 = time.perf_counter()
    d = generate(sched, build_grid(spec), ctx.ensemble(), spec)
    d.meta["provenance"] = ctx.provenance
    save(d, ctx.out / "dictionary.bin")
    log.info("dictionary: %d atoms in %.1f s", len(d), time.perf_counter() - t0)


def _read_signal(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = [line for line in fh if line.strip() and not line.startswith("#")]
    recs = list(csv.DictReader(rows))
    if not recs or "mx" not in recs[0] or "my" not in recs[0]:
        raise ValueError(f"{path}: expected columns mx, my")
    if "tissue" in recs[0]:
        first = recs[0]["tissue"]
        recs = [r for r in recs if r["tissue"] == first]
    return np.array([[float(r["mx"]), float(r["my"])] for r in recs]).reshape(-1)


def cmd_match(ctx: Context) -> None:
    if not ctx.args.dict or not ctx.args.signal:
        raise ValueError("match needs --dict and --signal")
    d = load(ctx.args.dict)
    est = match(_read_signal(ctx.args.signal), d)
    ctx.write_json("match.json", {"t1": est.t1, "t2": est.t2, "m0": est.m0, "score": est.score, "index": est.index})


def cmd_mc(ctx: Context) -> None:
    sched = ctx.schedule()
    ens = ctx.ensemble()
    if ctx.args.dict:
        d = load(ctx.args.dict)
    else:
        spec = ctx.cfg.grid_spec()
        d = generate(sched, build_grid(spec), ens, spec)
    seed = ctx.cfg.mc.seed if ctx.seed is None else ctx.seed
    theta = ctx.cfg.mc_tissue()
    noise = NoiseModel(ctx.cfg.noise.resolved_sigma, seed)
    res = run_mc(sched, theta, noise, d, ctx.cfg.mc.trials, ens)
    est = res.estimates
    summary = res.as_dict()
    summary["overall_error"] = {
        name: overall_error(np.full(len(est), res.theta_true[i]), est[:, i])
        for i, name in enumerate(("t1", "t2", "m0"))
    }
    ctx.write_json("mc.json", {"sigma": noise.sigma, "seed": seed, **summary})
    write_rows(
        [{"trial": k, "t1": e[0], "t2": e[1], "m0": _num(e[2])} for k, e in enumerate(est)],
        ctx.out / "mc_estimates.csv",
        header_lines=ctx.header(),
    )


def cmd_sweep(ctx: Context) -> None:
    cfg = ctx.cfg
    seed = cfg.design.init_seed if ctx.seed is None else ctx.seed
    items = [("conventional", conventional_schedule(int(n), seed=seed, te=cfg.bloch.te_ms)) for n in cfg.sweep.lengths]
    for path in ctx.args.extra or []:
        items.append((Path(path).stem, read_schedule(path)))
    rows = sweep_ncrb(items, cfg.sweep_tissue(), cfg.noise.resolved_sigma, ctx.ensemble())
    write_rows(rows, ctx.out / "sweep.csv", header_lines=ctx.header())
    ctx.write_json("sweep.json", {"rows": rows})


COMMANDS = {
    "simulate": cmd_simulate,
    "crb": cmd_crb,
    "design": cmd_design,
    "dict": cmd_dict,
    "match": cmd_match,
    "mc": cmd_mc,
    "sweep": cmd_sweep,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--schedule", help="schedule CSV (n,alpha_deg,phi_deg,te_ms,tr_ms)")
    common.add_argument("--out", help="output directory (default: io.out_dir)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="thread budget (recorded; the kernels are serial, so results do not depend on it)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="mrfdesign", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="simulate magnetization trajectories")
    sub.add_parser("crb", parents=[common], help="CRB report for a schedule")
    d = sub.add_parser("design", parents=[common], help="optimize a schedule")
    d.add_argument("--mode", choices=("opt1", "opt2"), default=None,
                   help="opt1: no flip-angle variation limit; opt2: 1 degree limit")
    sub.add_parser("dict", parents=[common], help="build a dictionary")
    m = sub.add_parser("match", parents=[common], help="match a signal")
    m.add_argument("--dict", required=True, help="dictionary file from the dict command")
    m.add_argument("--signal", required=True, help="CSV with mx,my columns")
    mc = sub.add_parser("mc", parents=[common], help="Monte Carlo evaluation")
    mc.add_argument("--dict", help="reuse a saved dictionary instead of building one")
    s = sub.add_parser("sweep", parents=[common], help="nCRB versus schedule length")
    s.add_argument("extra", nargs="*", help="additional schedule files to include")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for opt in ("mode", "dict", "signal", "extra"):
        if not hasattr(args, opt):
            setattr(args, opt, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        ctx = Context(args, cfg)
        COMMANDS[args.command](ctx)
    except SingularInformation as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, DictionaryFormatError, ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
