"""``qpat`` command line: simulate, reconstruct, verify, report.

Exit codes: 0 success, 1 usage or configuration error, 2 numerical failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
from pathlib import Path
import sys

import numpy as np

from . import config as cfgmod
from .arrayfile import file_digest, read_array, write_array
from .experiment import StageError, simulate, solve
from .export import field_image, write_pgm
from .grid import build_mesh
from .mull import DivergenceError
from .rte import SolverError
from .trace import IterateTrace

log = logging.getLogger("qpat")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _json_dump(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> dict:
    cfg = cfgmod.load(args.config, args.seed) if args.config else cfgmod.resolve({}, args.seed)
    if getattr(args, "checkpoint_every", None) is not None:
        if args.checkpoint_every < 0:
            raise cfgmod.ConfigError("--checkpoint-every must be non-negative")
        cfg["checkpoint_every"] = args.checkpoint_every
    return cfg


def _write_config(out: Path, cfg: dict) -> str:
    text = cfgmod.dump(cfg)
    (out / "config.yaml").write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def _detector_grid(scenario) -> dict:
    g = scenario.geometry()
    return {"R": g.R, "n_det": g.n_det, "dt": g.dt, "t_max": g.t_max, "n_t": g.n_t, "sides": list(scenario.sides)}


def _data_name(i: int, side: str) -> str:
    return f"data_{i}_{side}.qarr"


# -- simulate --------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _load_config(args)
    scenario = cfgmod.to_scenario(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sim = simulate(scenario)
    files = {}
    for i, (side, v) in enumerate(zip(scenario.sides, sim.data)):
        name = _data_name(i, side)
        files[name] = write_array(out / name, v)
    noise = {"level": scenario.noise_level, "sigma": sim.sigma, "seed": scenario.noise_seed}
    _json_dump(out / "noise.json", noise)
    manifest = {
        "command": "simulate",
        "config_sha256": _write_config(out, cfg),
        "data_grid": {"h": scenario.h_data, "n_theta": scenario.n_theta_data},
        "detector_grid": _detector_grid(scenario),
        "files": files,
        "noise": noise,
    }
    _json_dump(out / "manifest.json", manifest)
    print(f"wrote {len(files)} data files to {out}")
    return EXIT_OK


# -- reconstruct -----------------------------------------------------------


def _load_data(data_dir: Path, scenario) -> tuple[list, float, dict]:
    """Read and check simulated data before any computation."""
    mpath = data_dir / "manifest.json"
    if not mpath.exists():
        raise UsageError(f"{data_dir}: no manifest.json; run 'qpat simulate' first")
    manifest = json.loads(mpath.read_text())
    want = _detector_grid(scenario)
    have = manifest.get("detector_grid")
    if have != want:
        raise UsageError(f"detector grid mismatch: data {have} vs config {want}")
    names = [_data_name(i, s) for i, s in enumerate(scenario.sides)]
    missing = [n for n in names if not (data_dir / n).exists()]
    if missing:
        raise UsageError(f"{data_dir}: missing data file(s) {missing}")
    digests = {n: file_digest(data_dir / n) for n in names}
    data = [read_array(data_dir / n) for n in names]
    shape = (want["n_det"], want["n_t"])
    for n, v in zip(names, data):
        if v.shape != shape:
            raise UsageError(f"{n}: shape {v.shape} does not match detector grid {shape}")
    sigma = float(manifest.get("noise", {}).get("sigma", 0.0))
    return data, sigma, digests


def cmd_reconstruct(args) -> int:
    cfg = _load_config(args)
    scenario = cfgmod.to_scenario(cfg)
    data, sigma, digests = _load_data(Path(args.data), scenario)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mesh = build_mesh(scenario.h_rec)
    images = {}
    checkpoint = None
    if cfg["checkpoint_every"] > 0:
        (out / "checkpoints").mkdir(exist_ok=True)

        def checkpoint(k, mu, trace):
            name = f"checkpoints/mu_a_iter{k:06d}.pgm"
            images[name] = write_pgm(out / name, field_image(mu.mu_a, mesh))

    result = solve(scenario, data, sigma, checkpoint=checkpoint)
    files = {
        "mu_a.qarr": write_array(out / "mu_a.qarr", result.mu.mu_a),
        "mu_s.qarr": write_array(out / "mu_s.qarr", result.mu.mu_s),
    }
    result.trace.to_csv(out / "trace.csv")
    images["mu_a.pgm"] = write_pgm(out / "mu_a.pgm", field_image(result.mu.mu_a, mesh))
    _json_dump(out / "images.json", images)
    run = {
        "algorithm": scenario.algorithm,
        "status": result.trace.status,
        "iterations": len(result.trace) - 1,
        "initial_error": result.initial_error,
        "final_error": result.final_error,
        "counts": {k: int(v) for k, v in sorted(result.counts.items())},
        "timings": result.timings,
    }
    _json_dump(out / "run.json", run)
    manifest = {
        "command": "reconstruct",
        "config_sha256": _write_config(out, cfg),
        "inputs": digests,
        "outputs": files,
        "reconstruction_grid": {"h": scenario.h_rec, "n_theta": scenario.n_theta_rec},
    }
    _json_dump(out / "manifest.json", manifest)
    print(f"{scenario.algorithm}: relative mu_a error {result.initial_error:.4f} -> {result.final_error:.4f} ({run['iterations']} iterations)")
    return EXIT_OK


# -- verify ----------------------------------------------------------------


def cmd_verify(args) -> int:
    from .verify import run_suite

    try:
        checks = run_suite(args.suite)
    except KeyError as exc:
        raise UsageError(exc.args[0]) from exc
    records = [c.as_dict() for c in checks]
    for r in records:
        print(json.dumps(r, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        _json_dump(out / "verify.json", {"suite": args.suite, "checks": records})
    failed = [r["name"] for r in records if not r["passed"]]
    if failed:
        print(f"{len(failed)} check(s) failed: {failed}", file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -- report ----------------------------------------------------------------

REPORT_COLUMNS = (
    "run", "algorithm", "status", "iterations", "initial_error", "final_error",
    "rte_solves", "applyM_count", "wall_s", "s_per_iter", "cost_ratio",
)


def _collect_run(path: Path):
    """One report row, or ``None`` with a warning when nothing is usable."""
    trace_path, run_path = path / "trace.csv", path / "run.json"
    if not trace_path.exists():
        log.warning("%s: no trace.csv, skipped", path)
        return None, None
    trace = IterateTrace.from_csv(trace_path)
    run = json.loads(run_path.read_text()) if run_path.exists() else {}
    if not run:
        log.warning("%s: no run.json, reporting the trace only", path)
    last = trace.rows[-1] if trace.rows else {}
    iters = len(trace) - 1
    wall = float(last.get("wall_s") or 0.0)
    row = {
        "run": path.name,
        "algorithm": run.get("algorithm", ""),
        "status": run.get("status", "incomplete"),
        "iterations": iters,
        "initial_error": trace.rows[0]["rel_err_mu_a"] if trace.rows else "",
        "final_error": last.get("rel_err_mu_a", ""),
        "rte_solves": last.get("rte_solves", ""),
        "applyM_count": last.get("applyM_count", ""),
        "wall_s": wall,
        "s_per_iter": wall / iters if iters > 0 else "",
        "cost_ratio": "",
    }
    return row, trace


def _plot(curves, path: Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4))
    for name, trace in curves:
        ax.semilogy(trace.column("iter"), trace.column("rel_err_mu_a"), label=name)
    ax.set_xlabel("iteration")
    ax.set_ylabel("relative error of mu_a")
    if curves:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_report(args) -> int:
    runs = []
    for d in args.runs:
        p = Path(d)
        if p.is_dir() and not (p / "trace.csv").exists():
            runs.extend(sorted(q for q in p.iterdir() if q.is_dir()))
        else:
            runs.append(p)
    rows, curves = [], []
    for p in runs:
        row, trace = _collect_run(p)
        if row is not None:
            rows.append(row)
            curves.append((row["run"], trace))
    if not rows:
        log.warning("no runs found; writing an empty report")
    base = rows[0]["s_per_iter"] if rows and rows[0]["s_per_iter"] not in ("", 0.0) else None
    for r in rows:
        if base and r["s_per_iter"] != "":
            r["cost_ratio"] = r["s_per_iter"] / base
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=REPORT_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    _plot(curves, out / "error_curves.png")
    for r in rows:
        ratio = f"{r['cost_ratio']:.3f}" if r["cost_ratio"] != "" else "-"
        print(f"{r['run']:<24} {r['algorithm']:<10} iters={r['iterations']:<6} error={r['final_error']} cost_ratio={ratio}")
    return EXIT_OK


# -- entry point -------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qpat", description="Quantitative photoacoustic tomography lab.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate noisy data on the fine grid")
    s.add_argument("--config", metavar="PATH")
    s.add_argument("--out", metavar="DIR", required=True)
    s.add_argument("--seed", type=int, metavar="N")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("reconstruct", help="reconstruct coefficients from simulated data")
    r.add_argument("--config", metavar="PATH")
    r.add_argument("--data", metavar="DIR", required=True, help="output directory of 'qpat simulate'")
    r.add_argument("--out", metavar="DIR", required=True)
    r.add_argument("--seed", type=int, metavar="N")
    r.add_argument("--checkpoint-every", type=int, metavar="K")
    r.set_defaults(func=cmd_reconstruct)

    v = sub.add_parser("verify", help="run invariant checks")
    v.add_argument("--suite", metavar="NAME", default="all")
    v.add_argument("--out", metavar="DIR")
    v.set_defaults(func=cmd_verify)

    rp = sub.add_parser("report", help="summarize run directories")
    rp.add_argument("runs", nargs="*", metavar="RUN_DIR")
    rp.add_argument("--out", metavar="DIR", required=True)
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (cfgmod.ConfigError, UsageError) as exc:
        print(f"qpat {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"qpat {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, SolverError, DivergenceError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"qpat {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
