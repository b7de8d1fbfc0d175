"""Command-line experiment runner.

Every subcommand reads a strict JSON config (unknown keys are rejected),
writes its outputs under ``<out>/<command>-<hash>`` where ``hash`` digests the
canonical config, and records a ``run_manifest.json`` next to them.

Exit codes: 0 success, 1 validation or numerical failure, 2 config error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import math
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from dataclasses import asdict, fields
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from .flocking import FlockConfig, FlockingTask, evaluate_policy, generate_dataset, write_trajectories
from .gnn import Activation, ParamTensor, export_params_csv, load_params, project_nonamplifying, save_params
from .graphon import (
    Graphon, GraphonSignal, induced_step_signal, l2_graphon_distance, l2_signal_distance,
    sample_graph, spectral_summary, template_graph, template_step,
)
from .trainer import TeacherStudentTask, TrainConfig, TrainingError, derive, grad_distance_estimate, train_growing

log = logging.getLogger("growgnn")


class ConfigError(ValueError):
    pass


class ValidationFailure(RuntimeError):
    pass


# -- config plumbing ------------------------------------------------------------

_GRAPHON = {"family": "additive", "params": {}}
_MODEL = {"dims": [1, 4, 1], "K": 3, "act": "tanh", "readout": None}

DEFAULTS = {
    "graphon-check": {
        "seed": 0, "graphon": _GRAPHON, "signal": "linear",
        "ns": [4, 8, 16, 32, 64, 128], "grid_factor": 8, "signal_grid": 4096, "slack": 1e-3,
    },
    "spectra": {"seed": 0, "graphon": _GRAPHON, "ns": [16, 32, 64, 128], "c": 0.1},
    "train-ts": {
        "seed": 0, "graphon": _GRAPHON, "model": _MODEL,
        "train": {"eta": 2.0, "epochs": 6, "n0": 16, "n_max": 128,
                  "growth": {"kind": "fixed", "delta": 16}, "c": 1e-9, "epsilon": 1e-7,
                  "lipschitz_estimate": 0.3, "shuffle": True, "full_batch": False},
        "teacher_seed": 1, "teacher_scale": 1.0, "samples_per_epoch": 32,
        "signal_family": "mixed", "noise": 0.0, "shared_graph": False,
    },
    "grad-dist": {
        "seed": 0, "graphon": _GRAPHON, "model": _MODEL, "ns": [32, 64, 128], "ref_n": 512,
        "trials": 50, "teacher_seed": 1, "student_seed": 2, "teacher_scale": 1.0,
        "signal_family": "mixed",
    },
    "flock-gen": {"seed": 0, "n": 10, "episodes": 2, "horizon": 50, "flock": {}},
    "flock-train": {
        "seed": 0, "flock": {"horizon": 100}, "episodes": 20, "hidden": [16], "K": 3,
        "act": "tanh",
        "train": {"eta": 0.05, "epochs": 8, "n0": 10, "n_max": 50,
                  "growth": {"kind": "fixed", "delta": 5}, "c": 1e-9, "epsilon": 1e-9,
                  "lipschitz_estimate": 10.0, "shuffle": True, "full_batch": False},
    },
    "flock-eval": {"seed": 0, "params": None, "n": 50, "episodes": 10, "flock": {"horizon": 100},
                   "act": "tanh", "export_trajectories": False},
    "report": {"seed": 0, "inputs": []},
}

# sections whose contents are validated by their own strict parsers
_OPAQUE = {"graphon", "model", "train", "flock"}


def _merge(defaults, given, where=""):
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config key: {where}{sorted(unknown)[0]}")
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        if key in _OPAQUE and isinstance(defaults[key], dict) and isinstance(value, dict):
            if key in ("graphon",):
                out[key] = value
            else:
                out[key] = {**defaults[key], **value}
        else:
            out[key] = value
    return out


def load_config(command, path=None, seed=None):
    given = {}
    if path is not None:
        try:
            given = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(given, dict):
            raise ConfigError("config must be a JSON object")
    cfg = _merge(DEFAULTS[command], given)
    if seed is not None:
        cfg["seed"] = int(seed)
    return cfg


def canonical(cfg):
    return json.dumps(cfg, sort_keys=True, separators=(",", ":"))


def config_hash(command, cfg):
    return hashlib.sha256(canonical({"command": command, "config": cfg}).encode()).hexdigest()


def _strict_fields(cls, d, where):
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown config key: {where}.{sorted(unknown)[0]}")
    return cls(**d)


def _graphon(cfg):
    try:
        return Graphon.from_dict(cfg["graphon"])
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"graphon: {exc}") from exc


def _flock_config(d):
    return _strict_fields(FlockConfig, d, "flock")


def _train_config(d, seed):
    if "seed" in d:
        raise ConfigError("unknown config key: train.seed (use the top-level seed)")
    try:
        return TrainConfig.from_dict({**d, "seed": seed})
    except KeyError as exc:
        raise ConfigError(str(exc.args[0])) from exc


def _model(cfg):
    m = cfg["model"]
    unknown = set(m) - set(_MODEL)
    if unknown:
        raise ConfigError(f"unknown config key: model.{sorted(unknown)[0]}")
    readout = m.get("readout")
    return (tuple(m["dims"]), int(m["K"]), Activation(m["act"]),
            None if readout is None else Activation(readout))


def random_projected(dims, K, seed, scale=1.0, margin=1e-3):
    """Taps uniform on ``[-scale, scale]``, projected to be non-amplifying."""
    rng = np.random.default_rng(seed)
    coeffs = [rng.uniform(-scale, scale, size=(K, a, b)) for a, b in zip(dims[:-1], dims[1:])]
    return project_nonamplifying(ParamTensor(dims, K, coeffs), margin)


def _f(x):
    return repr(float(x))


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


# -- subcommands ------------------------------------------------------------------

def cmd_graphon_check(cfg, run_dir, pool):
    W = _graphon(cfg)
    if W.lipschitz > 1.0:
        log.warning("graphon is not normalized Lipschitz (A=%g); bounds may not apply", W.lipschitz)
    signal = GraphonSignal(cfg["signal"])
    rows, ok = [], True

    def one(n):
        sig_d = l2_signal_distance(signal, induced_step_signal(signal.sample(n)), cfg["signal_grid"])
        gr_d = l2_graphon_distance(W, template_step(W, n), cfg["grid_factor"] * n)
        return n, sig_d, gr_d

    results = list(pool.map(one, cfg["ns"])) if pool else [one(n) for n in cfg["ns"]]
    for n, sig_d, gr_d in results:
        sig_ok = sig_d <= 1.0 / n
        gr_ok = gr_d <= 2.0 / n + cfg["slack"]
        ok = ok and sig_ok and gr_ok
        rows.append([n, _f(sig_d), _f(1.0 / n), int(sig_ok), _f(gr_d), _f(2.0 / n + cfg["slack"]), int(gr_ok)])
    path = run_dir / "graphon_check.csv"
    _write_csv(path, ["n", "signal_distance", "signal_bound", "signal_ok",
                      "graphon_distance", "graphon_bound", "graphon_ok"], rows)
    if not ok:
        raise ValidationFailure("a distance exceeded its bound; see graphon_check.csv")
    return [path], {"all_within_bounds": ok}


def cmd_spectra(cfg, run_dir, pool):
    W = _graphon(cfg)
    summary, eig_rows = [], []
    for n in cfg["ns"]:
        tmpl = template_graph(W, n)
        S = sample_graph(W, n, derive(cfg["seed"], n)).gso()
        ss = spectral_summary(tmpl.gso(), S, cfg["c"])
        lam_t = spectral_summary(tmpl.gso(), None, cfg["c"]).eigenvalues
        summary.append([n, _f(cfg["c"]), ss.band_cardinality, _f(ss.eigenvalue_margin)])
        eig_rows.extend([n, i, _f(a), _f(b)] for i, (a, b) in enumerate(zip(lam_t, ss.eigenvalues)))
    p1, p2 = run_dir / "spectra_summary.csv", run_dir / "spectra_eigenvalues.csv"
    _write_csv(p1, ["n", "c", "band_cardinality", "eigenvalue_margin"], summary)
    _write_csv(p2, ["n", "index", "template_eigenvalue", "sampled_eigenvalue"], eig_rows)
    return [p1, p2], {}


def _write_train_outputs(run_dir, train_log, params, act, seed):
    paths = [run_dir / "train_log.csv", run_dir / "params.bin", run_dir / "params.csv"]
    train_log.write_csv(paths[0], include_wall_time=False)
    save_params(paths[1], params, act, seed)
    export_params_csv(paths[2], params)
    last = train_log.rows[-1] if train_log.rows else {}
    return paths, {"epochs_run": len(train_log.rows), "final_n": last.get("n"),
                   "final_mean_loss": last.get("mean_loss"), "stopped_early": train_log.stopped_early}


def cmd_train_ts(cfg, run_dir, pool):
    W = _graphon(cfg)
    dims, K, act, readout = _model(cfg)
    tc = _train_config(cfg["train"], cfg["seed"])
    teacher = random_projected(dims, K, derive(cfg["teacher_seed"]), cfg["teacher_scale"])
    task = TeacherStudentTask(teacher, cfg["samples_per_epoch"], cfg["signal_family"],
                              cfg["noise"], act, readout, shared_graph=cfg["shared_graph"])
    train_log, params = train_growing(tc, W, task, pool=pool)
    return _write_train_outputs(run_dir, train_log, params, act, cfg["seed"])


def cmd_grad_dist(cfg, run_dir, pool):
    W = _graphon(cfg)
    dims, K, act, readout = _model(cfg)
    teacher = random_projected(dims, K, derive(cfg["teacher_seed"]), cfg["teacher_scale"])
    student = random_projected(dims, K, derive(cfg["student_seed"]), cfg["teacher_scale"])
    task = TeacherStudentTask(teacher, 1, cfg["signal_family"], 0.0, act, readout)
    per, summ = [], []
    medians = []
    for n in cfg["ns"]:
        r = grad_distance_estimate(student, W, n, cfg["ref_n"], cfg["trials"], task, cfg["seed"], pool)
        per.extend([n, t, _f(d)] for t, d in enumerate(r["per_trial"]))
        summ.append([n, cfg["ref_n"], _f(r["mean"]), _f(r["median"])])
        medians.append(r["median"])
    p1, p2 = run_dir / "grad_dist_trials.csv", run_dir / "grad_dist.csv"
    _write_csv(p1, ["n", "trial", "distance"], per)
    _write_csv(p2, ["n", "ref_n", "mean", "median"], summ)
    decreasing = all(a > b for a, b in zip(medians, medians[1:]))
    return [p1, p2], {"median_strictly_decreasing": decreasing}


def cmd_flock_gen(cfg, run_dir, pool):
    fc = _flock_config({**cfg["flock"], "horizon": cfg["horizon"]})
    data = generate_dataset(cfg["n"], cfg["episodes"], cfg["horizon"], fc, cfg["seed"], pool)
    paths = [run_dir / "dataset.npz", run_dir / "dataset.json"]
    data.save(paths[0])
    manifest = {"n": cfg["n"], "episodes": cfg["episodes"], "horizon": cfg["horizon"],
                "seed": cfg["seed"], "config": asdict(fc), "samples": len(data)}
    paths[1].write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    rows = [[i, r, _f(s.y[r, 0]), _f(s.y[r, 1])] for i, s in enumerate(data.samples)
            for r in range(s.y.shape[0])]
    paths.append(run_dir / "dataset_actions.csv")
    _write_csv(paths[-1], ["sample", "agent", "ux", "uy"], rows)
    return paths, {"samples": len(data)}


def cmd_flock_train(cfg, run_dir, pool):
    fc = _flock_config(cfg["flock"])
    tc = _train_config(cfg["train"], cfg["seed"])
    act = Activation(cfg["act"])
    task = FlockingTask(fc, cfg["episodes"], tuple(cfg["hidden"]), cfg["K"], act,
                        Activation.IDENTITY, pool=pool)
    train_log, params = train_growing(tc, None, task)
    return _write_train_outputs(run_dir, train_log, params, act, cfg["seed"])


def cmd_flock_eval(cfg, run_dir, pool):
    if not cfg["params"]:
        raise ConfigError("flock-eval needs 'params' pointing at a params.bin file")
    try:
        params, header = load_params(cfg["params"])
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot load params: {exc}") from exc
    fc = _flock_config(cfg["flock"])
    results = evaluate_policy(params, cfg["n"], cfg["episodes"], fc, cfg["seed"],
                              Activation(cfg["act"]), Activation.IDENTITY, pool)
    rows = []
    for r in results:
        h = len(r["policy_traj"])
        rows.append([r["episode"], _f(r["policy_cost"]), _f(r["policy_cost"] / max(h, 1)),
                     _f(r["expert_cost"]), _f(r["expert_cost"] / max(h, 1)),
                     _f(r["relative_cost"]), int(r["degenerate"])])
    paths = [run_dir / "flock_eval.csv"]
    _write_csv(paths[0], ["episode", "policy_sigma_sum", "policy_sigma_mean", "expert_sigma_sum",
                          "expert_sigma_mean", "relative_cost", "degenerate"], rows)
    if cfg["export_trajectories"]:
        paths.append(run_dir / "policy_trajectories.csv")
        write_trajectories(paths[-1], [(r["episode"], r["policy_traj"]) for r in results])
    rel = [r["relative_cost"] for r in results]
    return paths, {"mean_relative_cost": float(np.mean(rel)) if rel else math.nan}


def _csv_files(inputs):
    for item in inputs:
        p = Path(item)
        if p.is_dir():
            yield from sorted(p.glob("*.csv"))
        elif p.is_file():
            yield p
        else:
            raise ConfigError(f"report input not found: {item}")


def cmd_report(cfg, run_dir, pool):
    rows = []
    for path in _csv_files(cfg["inputs"]):
        with open(path, newline="") as fh:
            for i, rec in enumerate(csv.DictReader(fh)):
                rows.extend([str(path), i, key, val] for key, val in rec.items())
    out = run_dir / "report.csv"
    _write_csv(out, ["source", "row", "column", "value"], rows)
    return [out], {"rows": len(rows)}


COMMANDS = {
    "graphon-check": cmd_graphon_check,
    "spectra": cmd_spectra,
    "train-ts": cmd_train_ts,
    "grad-dist": cmd_grad_dist,
    "flock-gen": cmd_flock_gen,
    "flock-train": cmd_flock_train,
    "flock-eval": cmd_flock_eval,
    "report": cmd_report,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="growgnn", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="JSON config file")
        p.add_argument("--seed", type=int, help="master seed, overrides the config")
        p.add_argument("--out", type=Path, default=Path("runs"), help="output root")
        p.add_argument("--threads", type=int, default=1, help="worker threads (speed only)")
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    started = datetime.now(timezone.utc).isoformat()
    try:
        cfg = load_config(args.command, args.config, args.seed)
        digest = config_hash(args.command, cfg)
        run_dir = args.out / f"{args.command}-{digest[:12]}"
        run_dir.mkdir(parents=True, exist_ok=True)
        threads = max(1, args.threads)
        ctx = ThreadPoolExecutor(threads) if threads > 1 else nullcontext(None)
        with ctx as pool:
            outputs, summary = COMMANDS[args.command](cfg, run_dir, pool)
        status = 0
    except (ConfigError, KeyError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (ValidationFailure, TrainingError, FloatingPointError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        outputs, summary, status = sorted(run_dir.glob("*.csv")), {"error": str(exc)}, 1
    manifest = {
        "command": args.command, "config_hash": digest, "seed": cfg["seed"],
        "code_version": __version__, "config": cfg, "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "outputs": [p.name for p in outputs], "summary": summary, "exit_code": status,
    }
    (run_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, default=str) + "\n")
    print(run_dir)
    return status


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
