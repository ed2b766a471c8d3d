"""Command-line entry point: ``smdlab <subcommand> [flags]``.

Every subcommand writes a ``config.json`` echo (full resolved config, seed and
version string) into its ``--out`` directory, so rerunning from the echo
reproduces the directory's CSVs.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .checks import TOL_ENV, run_checks, tolerance_overrides
from .config import ConfigError, ExperimentConfig, load_config
from .denoiser import model_from_dict, save_sidecar
from .forward import NoiseSchedule
from .metrics import MetricReport, as_kernel, local_error_table, mode_metrics, theorem1_table
from .nn import load_checkpoint, load_into, save_checkpoint, save_training_state
from .sampling import sample_chain, write_samples_csv, write_trajectory_csv
from .training import TrainConfig, loss_batch, train, write_trace_csv

log = logging.getLogger("smdlab")

THREADS_ENV = "SMD_THREADS"
STATE_FILE = "state.smd"
BEST_FILE = "best.smd"
SIDECAR = "model.json"
# step index for the held-out batch; training steps never reach it
VALIDATION_STEP = 2**62


def version_string() -> str:
    """Package version, plus ``git describe`` output when run from a checkout."""
    here = Path(__file__).resolve().parent
    try:
        desc = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=here,
            capture_output=True,
            text=True,
            timeout=5,
        )
    except (OSError, subprocess.SubprocessError):
        return __version__
    tag = desc.stdout.strip()
    return f"{__version__}+git.{tag}" if desc.returncode == 0 and tag else __version__


def thread_cap() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if raw is None or raw == "":
        return None
    n = int(raw)
    if n < 1:
        raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
    return n


def write_echo(out: Path, cfg: ExperimentConfig, command: str, extra: dict | None = None) -> None:
    doc = {"command": command, "version": version_string(), "seed": cfg.seed, "config": cfg.to_dict()}
    if extra:
        doc.update(extra)
    (out / "config.json").write_text(json.dumps(doc, indent=2) + "\n")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- gmm-check ---------------------------------------------------------------


def cmd_gmm_check(cfg: ExperimentConfig, args) -> int:
    overrides = tolerance_overrides(os.environ.get(TOL_ENV))
    results = run_checks(cfg.seed, overrides)
    width = max(len(r.name) for r in results)
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<{width}}  max_err={r.max_error:.3e}  tol={r.tolerance:.1e}")
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed" + (f"; failed: {', '.join(failed)}" if failed else ""))
    if args.out:
        out = _out_dir(args)
        write_echo(out, cfg, "gmm-check")
        report = [{"name": r.name, "max_error": r.max_error, "tolerance": r.tolerance, "passed": r.passed} for r in results]
        (out / "gmm_check.json").write_text(json.dumps(report, indent=2) + "\n")
    return 1 if failed else 0


# -- train --------------------------------------------------------------------


def validation_loss(model, data, s: NoiseSchedule, cfg: ExperimentConfig) -> float:
    """Loss on a fixed held-out batch; the batch and eta draws never change across checkpoints."""
    tc = cfg.train_config()
    vcfg = TrainConfig(1, cfg.train.val_batch, tc.lr, tc.n_eta, tc.weight_mode, tc.seed, 1)
    loss, _ = loss_batch(model, data, s, vcfg, VALIDATION_STEP)
    model.params.zero_grad()
    return loss


def _read_val_history(path: Path) -> list[tuple[int, float]]:
    if not path.exists():
        return []
    with open(path, newline="") as f:
        return [(int(r["step"]), float(r["val_loss"])) for r in csv.DictReader(f)]


def cmd_train(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    s = cfg.build_schedule()
    data = cfg.build_data()
    model = cfg.build_model(data.dim)
    tc = cfg.train_config()
    start = 0
    if args.checkpoint:
        load_into(model.params, load_checkpoint(args.checkpoint))
        start = model.params.step
        log.info("resuming from %s at step %d", args.checkpoint, start)
    write_echo(out, cfg, "train", {"resumed_from": str(args.checkpoint) if args.checkpoint else None, "start_step": start})
    save_sidecar(out / SIDECAR, model)

    val_path = out / "val.csv"
    history = _read_val_history(val_path) if start else []
    history = [(st, v) for st, v in history if st <= start]
    best = min((v for _, v in history), default=np.inf)
    if not start:
        with open(val_path, "w", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow(["step", "val_loss"])
        write_trace_csv(out / "loss.csv", [])

    def on_eval(step, m, _loss):
        nonlocal best
        val = validation_loss(m, data, s, cfg)
        with open(val_path, "a", newline="") as f:
            csv.writer(f, lineterminator="\n").writerow([step, repr(val)])
        save_checkpoint(out / f"ckpt_{step:07d}.smd", m.params)
        save_training_state(out / STATE_FILE, m.params)
        if val < best:
            best = val
            save_checkpoint(out / BEST_FILE, m.params)
        print(f"step {step:>7d}  val_loss {val:.5f}  best {best:.5f}", flush=True)

    _, trace = train(model, data, s, tc, start_step=start, callback=on_eval)
    write_trace_csv(out / "loss.csv", trace, append=True)
    if not (out / BEST_FILE).exists():
        save_checkpoint(out / BEST_FILE, model.params)
    return 0


# -- sample / metrics -----------------------------------------------------------


def load_model(checkpoint: Path):
    sidecar = checkpoint.parent / SIDECAR
    if not sidecar.exists():
        raise FileNotFoundError(f"no {SIDECAR} next to {checkpoint}")
    model = model_from_dict(json.loads(sidecar.read_text()))
    load_into(model.params, load_checkpoint(checkpoint))
    return model


def _need_checkpoint(args) -> Path:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required for this subcommand")
    return Path(args.checkpoint)


def cmd_sample(cfg: ExperimentConfig, args) -> int:
    ckpt = _need_checkpoint(args)
    out = _out_dir(args)
    model = load_model(ckpt)
    s = cfg.build_schedule()
    run = cfg.sample_run()
    write_echo(out, cfg, "sample", {"checkpoint": str(ckpt), "sigma_mode": cfg.schedule.sigma_mode, "noise_mode": run.noise_mode})
    res = sample_chain(model, run, s)
    if run.keep_trajectory:
        samples, traj = res
        sched = s if run.T_used is None else s.respace(run.T_used)
        labels = [int(sched.model_t[t - 1]) for t in range(sched.T, 0, -1)] + [0]
        write_trajectory_csv(out / "trajectory.csv", traj, labels)
    else:
        samples = res
    write_samples_csv(out / "samples.csv", samples)
    return 0


def cmd_metrics(cfg: ExperimentConfig, args) -> int:
    ckpt = _need_checkpoint(args)
    out = _out_dir(args)
    model = load_model(ckpt)
    s = cfg.build_schedule()
    data = cfg.build_data()
    mc = cfg.metrics
    run = cfg.sample_run()
    write_echo(out, cfg, "metrics", {"checkpoint": str(ckpt)})
    rng = np.random.default_rng([cfg.seed, 3])
    table = local_error_table(data, model, s, mc.n_outer, mc.n_inner, rng, mc.steps, run.noise_mode)
    samples = sample_chain(model, type(run)(mc.n_samples, False, run.seed, run.T_used, run.noise_mode), s)
    recall, nll = mode_metrics(samples, data)
    meta = {
        "checkpoint": str(ckpt),
        "version": version_string(),
        "seed": cfg.seed,
        "sigma_mode": cfg.schedule.sigma_mode,
        "noise_mode": run.noise_mode,
        "T_used": run.T_used,
        "n_outer": mc.n_outer,
        "n_inner": mc.n_inner,
        "steps": "all" if mc.steps is None else list(mc.steps),
        "kernel": type(as_kernel(model, s, mc.n_inner, rng, run.noise_mode)).__name__,
        "infimum_note": (
            "M_t and E are evaluated at the given checkpoint rather than minimised over parameters; "
            "they upper-bound the best-approximation errors"
        ),
    }
    if mc.steps is not None:
        meta["e_global_note"] = "e_global sums only the listed steps"
    report = MetricReport.build(table, recall, nll, meta)
    report.to_json(out / "report.json")
    report.write_mt_csv(out / "mt.csv")
    print(json.dumps({"e_global": report.e_global, "mode_recall": recall, "mean_nll": nll}))
    return 0


# -- theorem-demo ------------------------------------------------------------------


def cmd_theorem_demo(cfg: ExperimentConfig, args) -> int:
    out = _out_dir(args)
    s = cfg.theorem_schedule()
    th = cfg.theorem
    write_echo(out, cfg, "theorem-demo")
    rows = theorem1_table(cfg.theorem_config(), s, th.n_outer, th.n_inner, np.random.default_rng([cfg.seed, 4]))
    with open(out / "theorem1.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["lambda", "bound", "mc", "se"])
        for lam, bound, mc, se in rows:
            w.writerow([repr(lam), repr(bound), repr(mc), repr(se)])
    for lam, bound, mc, se in rows:
        flag = "ok" if mc >= bound - 3.0 * se else "BOUND VIOLATED"
        print(f"lambda={lam:<6g} bound={bound:+.6f}  M_t={mc:.6e} +/- {se:.1e}  {flag}")
    return 0


COMMANDS = {
    "gmm-check": cmd_gmm_check,
    "train": cmd_train,
    "sample": cmd_sample,
    "metrics": cmd_metrics,
    "theorem-demo": cmd_theorem_demo,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="smdlab", description="Vanilla and soft-mixture denoising on Gaussian mixtures.")
    p.add_argument("--version", action="version", version=f"smdlab {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="{" + ",".join(COMMANDS) + "}")
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="JSON experiment config")
        sp.add_argument("--out", type=Path, default=None if name == "gmm-check" else Path("runs") / name, help="output directory")
        sp.add_argument("--seed", type=int, help="overrides the config's top-level seed")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override, repeatable")
        sp.add_argument("--checkpoint", type=Path, help="parameter file (sample, metrics) or training state (train)")
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        cap = thread_cap()
    except (ConfigError, ValueError, OSError) as exc:
        print(f"smdlab: config error: {exc}", file=sys.stderr)
        return 2
    limits = threadpool_limits(limits=cap) if cap else contextlib.nullcontext()
    try:
        with limits:
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, FileNotFoundError, KeyError) as exc:
        print(f"smdlab: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
