"""Config-driven command line: simulate / optimize / evaluate.

One JSON config file plus flag overrides (flags win); the fully resolved
config is echoed into every output file as a provenance record, except for
execution-only settings (worker count, output directory) which must not
change results. All randomness derives from the mandatory seed, so a rerun
with the same seed and any worker count is byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import cnn as cnn_mod
from . import expr as E
from . import obc as obc_mod
from . import tln as tln_mod
from .errors import ConfigError, DiffAnalogError
from .gradient import BatchItem
from .optim import (TrainConfig, load_checkpoint, save_checkpoint, train,
                    write_training_log)
from .relax import sample_mismatch
from .rng import STREAM_DATASET, STREAM_MISMATCH, STREAM_NOISE, rng_for, seed_for
from .solver import SolveConfig, solve, write_trajectory_csv
from .store import TrainableStore
from .sysmodel import load_model
from .optim import AdamState

PARADIGMS = ("cnn", "obc", "tln", "custom")

# Keys that affect results and belong in the provenance record.
_RESULT_KEYS = {
    "command", "paradigm", "seed", "steps", "lr", "batch", "mc_samples",
    "method", "alpha", "sigma", "bitwidth", "init", "trainables", "table",
    "n_train", "n_test", "rows", "cols", "t3", "dt", "n_branches",
    "segments", "challenge_sets", "train_instances", "test_instances",
    "fix_center", "model_file", "checkpoint", "dataset_file", "x0", "inputs",
    "t_end", "solver_method", "noise_seed", "gumbel_freeze",
}
# Execution-only keys: excluded from provenance so worker count or output
# location never changes output bytes.
_EXEC_KEYS = {"out", "workers"}

_DEFAULTS = {
    "cnn": {"sigma": 0.1, "rows": 16, "cols": 16, "steps": 64, "lr": 0.1,
            "batch": 128, "mc_samples": 1, "n_train": 512, "n_test": 64,
            "method": "backprop"},
    "obc": {"alpha": 0.025, "bitwidth": 1, "init": "hebbian",
            "trainables": "couple_lock", "steps": 64, "lr": 0.1,
            "batch": 32, "n_train": 512, "n_test": 2048, "table": False,
            "method": "backprop"},
    "tln": {"n_branches": 8, "segments": 2, "sigma": 0.05, "steps": 24,
            "lr": 0.005, "train_instances": 8, "challenge_sets": 8,
            "test_instances": 48, "fix_center": False, "method": "backprop"},
    "custom": {"method": "backprop", "steps": 16, "lr": 0.1, "batch": 1,
               "mc_samples": 1},
}


def _parser():
    p = argparse.ArgumentParser(
        prog="diffanalog",
        description="Differentiable modeling and tuning of analog computing "
                    "systems",
    )
    sub = p.add_subparsers(dest="command", required=True)
    for name in ("simulate", "optimize", "evaluate"):
        s = sub.add_parser(name)
        s.add_argument("--config", help="JSON config file")
        s.add_argument("--paradigm", choices=PARADIGMS)
        s.add_argument("--seed", type=int)
        s.add_argument("--steps", type=int)
        s.add_argument("--lr", type=float)
        s.add_argument("--batch", type=int)
        s.add_argument("--mc-samples", type=int, dest="mc_samples")
        s.add_argument("--method", choices=("backprop", "adjoint"))
        s.add_argument("--out")
        s.add_argument("--workers", type=int)
        s.add_argument("--alpha", type=float)
        s.add_argument("--sigma", type=float)
        s.add_argument("--bitwidth", type=int)
        s.add_argument("--checkpoint")
        s.add_argument("--model-file", dest="model_file")
    return p


def resolve_config(args: argparse.Namespace) -> dict:
    """defaults <- config file <- flags; collects every violation."""
    problems = []
    cfg = {}
    if args.config:
        try:
            with open(args.config) as f:
                cfg.update(json.load(f))
        except FileNotFoundError:
            problems.append(f"config file not found: {args.config}")
        except json.JSONDecodeError as e:
            problems.append(f"config file is not valid JSON: {e}")
    flag_values = {k: v for k, v in vars(args).items()
                   if v is not None and k not in ("command", "config")}
    cfg.update(flag_values)
    cfg["command"] = args.command

    paradigm = cfg.get("paradigm")
    if paradigm is None:
        problems.append("paradigm is required (--paradigm or config key)")
    elif paradigm not in PARADIGMS:
        problems.append(f"unknown paradigm {paradigm!r}")
    else:
        merged = dict(_DEFAULTS[paradigm])
        merged.update(cfg)
        cfg = merged
    if cfg.get("seed") is None:
        problems.append("seed is required (no wall-clock seeding)")
    out = cfg.get("out") or os.environ.get("DIFFANALOG_OUT")
    if not out:
        problems.append("output directory required (--out or DIFFANALOG_OUT)")
    cfg["out"] = out
    cfg.setdefault("workers", os.cpu_count() or 1)

    unknown = set(cfg) - _RESULT_KEYS - _EXEC_KEYS
    for k in sorted(unknown):
        problems.append(f"unknown config key {k!r}")
    if cfg.get("paradigm") == "custom" and cfg.get("command") != "evaluate":
        if not cfg.get("model_file"):
            problems.append("custom paradigm requires model_file")
    if cfg.get("command") == "evaluate" and not cfg.get("checkpoint"):
        problems.append("evaluate requires --checkpoint")
    for key in ("model_file", "checkpoint", "dataset_file"):
        path = cfg.get(key)
        if path and not os.path.exists(path):
            problems.append(f"{key} does not exist: {path}")
    if problems:
        raise ConfigError(problems)
    return cfg


def provenance(cfg: dict) -> str:
    doc = {k: v for k, v in cfg.items() if k not in _EXEC_KEYS}
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def _write_json(path, doc, cfg):
    doc = dict(doc)
    doc["provenance"] = json.loads(provenance(cfg))
    with open(path, "w") as f:
        f.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _history_rows(history):
    return [{k: row[k] for k in
             ("step", "loss_mean", "loss_std", "grad_norm", "tau")}
            for row in history]


# -- simulate -------------------------------------------------------------------


def _cmd_simulate(cfg: dict) -> dict:
    paradigm = cfg["paradigm"]
    seed = cfg["seed"]
    if paradigm == "cnn":
        model = cnn_mod.build_cnn(cfg["rows"], cfg["cols"], sigma=cfg["sigma"])
        scfg = cnn_mod.default_solve_config()
        items = cnn_mod.synth_silhouettes(1, cfg["cols"], cfg["rows"],
                                          rng_for(seed, STREAM_DATASET, 0))
        img, _ = items[0]
        params = TrainableStore.from_decls(model.trainables).physical(
            hard=True).params
        delta = sample_mismatch(model.sigmas, rng_for(seed, STREAM_MISMATCH))
        traj = solve(model, params, delta, cnn_mod.image_to_inputs(img),
                     np.zeros(model.n_states), scfg)
    elif paradigm == "obc":
        pats = obc_mod.builtin_patterns()
        ocfg = obc_mod.ObcConfig(bitwidth=cfg["bitwidth"],
                                 noise_alpha=cfg["alpha"], init=cfg["init"])
        model = obc_mod.build_obc(ocfg, patterns=pats, seed=seed)
        params = TrainableStore.from_decls(model.trainables).physical(
            hard=True).params
        item = obc_mod.noisy_dataset(pats, 1, rng_for(seed, STREAM_DATASET))[0]
        scfg = SolveConfig(dt=ocfg.dt, t_end=ocfg.t_measure,
                           method="euler_maruyama",
                           noise_seed=seed_for(seed, STREAM_NOISE))
        traj = solve(model, params, np.zeros(0), item.inputs, item.x0, scfg)
    elif paradigm == "tln":
        tcfg = tln_mod.SsPufConfig(n_branches=cfg["n_branches"],
                                   segments_per_branch=cfg["segments"],
                                   mismatch_sigma=cfg["sigma"])
        model = tln_mod.build_sspuf(tcfg)
        params = TrainableStore.from_decls(model.trainables).physical(
            hard=True).params
        delta = sample_mismatch(model.sigmas, rng_for(seed, STREAM_MISMATCH))
        ch = tln_mod.sample_challenges(1, tcfg.n_branches,
                                       rng_for(seed, STREAM_DATASET))[0]
        traj = solve(model, params, delta, ch.as_inputs(),
                     tln_mod.initial_state(model, tcfg),
                     tln_mod._solve_cfg(tcfg))
    else:  # custom
        model = load_model(cfg["model_file"])
        params = TrainableStore.from_decls(model.trainables).physical(
            hard=True).params
        delta = sample_mismatch(model.sigmas, rng_for(seed, STREAM_MISMATCH))
        inputs = np.asarray(cfg.get("inputs", np.zeros(model.n_inputs)),
                            dtype=np.float64)
        x0 = np.asarray(cfg.get("x0", np.zeros(model.n_states)),
                        dtype=np.float64)
        dt = cfg.get("dt", model.default_dt)
        if dt is None:
            raise ConfigError(["custom simulate needs dt (config or model)"])
        t_end = cfg.get("t_end", max(model.readout_times))
        method = cfg.get("solver_method", "rk4")
        noise_seed = (seed_for(seed, STREAM_NOISE)
                      if method == "euler_maruyama" else None)
        scfg = SolveConfig(dt=dt, t_end=t_end, method=method,
                           noise_seed=noise_seed)
        traj = solve(model, params, delta, inputs, x0, scfg)
    path = os.path.join(cfg["out"], "trajectory.csv")
    sibling = write_trajectory_csv(traj, path, provenance(cfg))
    return {"trajectory_csv": path, "readouts_csv": sibling,
            "n_steps": len(traj.times) - 1, "n_states": traj.states.shape[1]}


# -- optimize -------------------------------------------------------------------


def _cmd_optimize(cfg: dict) -> dict:
    paradigm = cfg["paradigm"]
    out = cfg["out"]
    seed = cfg["seed"]
    if paradigm == "cnn":
        c = cnn_mod.CnnExperimentConfig(
            rows=cfg["rows"], cols=cfg["cols"], sigma=cfg["sigma"],
            n_train=cfg["n_train"], n_test=cfg["n_test"],
            batch_size=cfg["batch"], n_steps=cfg["steps"], lr=cfg["lr"],
            n_mismatch=cfg["mc_samples"], seed=seed,
            workers=cfg["workers"], grad_method=cfg["method"])
        report = cnn_mod.run_cnn_experiment(c)
        decls_source = cnn_mod.build_cnn(c.rows, c.cols, sigma=c.sigma)
    elif paradigm == "obc":
        c = obc_mod.ObcExperimentConfig(
            noise_alpha=cfg["alpha"], n_train=cfg["n_train"],
            n_test=cfg["n_test"], batch_size=cfg["batch"],
            n_steps=cfg["steps"], lr=cfg["lr"], seed=seed,
            workers=cfg["workers"])
        if cfg["table"]:
            report = obc_mod.run_obc_table(c)
            _write_json(os.path.join(out, "report.json"), report, cfg)
            return report
        report = obc_mod.run_obc_setup(cfg["bitwidth"], cfg["init"],
                                       cfg["trainables"], c)
        ocfg = obc_mod.ObcConfig(
            bitwidth=cfg["bitwidth"], noise_alpha=cfg["alpha"],
            locking_trainable=(cfg["trainables"] == "couple_lock"),
            init=cfg["init"])
        decls_source = obc_mod.build_obc(ocfg,
                                         patterns=obc_mod.builtin_patterns(),
                                         seed=seed)
    elif paradigm == "tln":
        c = tln_mod.TlnExperimentConfig(
            n_branches=cfg["n_branches"],
            segments_per_branch=cfg["segments"],
            mismatch_sigma=cfg["sigma"],
            n_train_instances=cfg["train_instances"],
            n_challenge_sets=cfg["challenge_sets"],
            n_test_instances=cfg["test_instances"],
            n_steps=cfg["steps"], lr=cfg["lr"], seed=seed,
            workers=cfg["workers"], fix_center=cfg["fix_center"])
        report = tln_mod.run_tln_experiment(c)
        decls_source = tln_mod.build_sspuf(tln_mod.SsPufConfig(
            n_branches=c.n_branches, segments_per_branch=c.segments_per_branch,
            mismatch_sigma=c.mismatch_sigma, fix_center=c.fix_center))
    else:
        return _optimize_custom(cfg)

    result = report.pop("result", None)
    history = report.pop("history", [])
    write_training_log(_history_rows(history),
                       os.path.join(out, "training_log.csv"), provenance(cfg))
    if result is not None:
        save_checkpoint(os.path.join(out, "checkpoint_best.json"),
                        result.best_store, result.adam, seed,
                        next_step=cfg["steps"],
                        extra={"paradigm": paradigm, "config":
                               json.loads(provenance(cfg))})
        save_checkpoint(os.path.join(out, "checkpoint_last.json"),
                        result.final_store, result.adam, seed,
                        next_step=cfg["steps"],
                        extra={"paradigm": paradigm, "config":
                               json.loads(provenance(cfg))})
    _write_json(os.path.join(out, "report.json"), report, cfg)
    return report


def _optimize_custom(cfg: dict) -> dict:
    model = load_model(cfg["model_file"])
    if not cfg.get("dataset_file"):
        raise ConfigError(["custom optimize requires dataset_file"])
    with open(cfg["dataset_file"]) as f:
        raw_items = json.load(f)
    items = [BatchItem(inputs=np.asarray(d.get("inputs", []), dtype=np.float64),
                       x0=np.asarray(d["x0"], dtype=np.float64),
                       targets=np.asarray(d["targets"], dtype=np.float64))
             for d in raw_items]
    dt = cfg.get("dt", model.default_dt)
    if dt is None:
        raise ConfigError(["custom optimize needs dt (config or model)"])
    t_end = cfg.get("t_end", max(model.readout_times))
    scfg = SolveConfig(dt=dt, t_end=t_end,
                       method=cfg.get("solver_method", "rk4"))
    store = TrainableStore.from_decls(model.trainables)
    tc = TrainConfig(n_steps=cfg["steps"], batch_size=cfg["batch"],
                     lr=cfg["lr"], n_mismatch=cfg["mc_samples"],
                     method=cfg["method"], seed=cfg["seed"],
                     workers=cfg["workers"])
    n_entries = len(model.readout_times) * model.n_outputs
    result = train(model, store, items, tc, scfg,
                   loss_expr=E.mean_squared_error(n_entries))
    out = cfg["out"]
    write_training_log(_history_rows(result.history),
                       os.path.join(out, "training_log.csv"), provenance(cfg))
    save_checkpoint(os.path.join(out, "checkpoint_best.json"),
                    result.best_store, result.adam, cfg["seed"],
                    next_step=cfg["steps"],
                    extra={"paradigm": "custom",
                           "config": json.loads(provenance(cfg))})
    report = {"paradigm": "custom", "best_step": result.best_step,
              "best_train_loss": result.best_loss,
              "final_loss": result.history[-1]["loss_mean"]}
    _write_json(os.path.join(out, "report.json"), report, cfg)
    return report


# -- evaluate -------------------------------------------------------------------


def _cmd_evaluate(cfg: dict) -> dict:
    paradigm = cfg["paradigm"]
    seed = cfg["seed"]
    if paradigm == "cnn":
        model = cnn_mod.build_cnn(cfg["rows"], cfg["cols"], sigma=cfg["sigma"])
        store, _, _, _, _ = load_checkpoint(cfg["checkpoint"], model.trainables)
        test_set = cnn_mod.synth_silhouettes(
            cfg["n_test"], cfg["cols"], cfg["rows"],
            rng_for(seed, STREAM_DATASET, 1))
        items = cnn_mod._dataset_items(test_set, model, "mask01")
        mse = cnn_mod.evaluate_cnn(model, store.physical(hard=True).params,
                                   items, cnn_mod.default_solve_config(),
                                   seed, n_delta=2)
        report = {"paradigm": "cnn", "test_mse": mse}
    elif paradigm == "obc":
        pats = obc_mod.builtin_patterns()
        ocfg = obc_mod.ObcConfig(
            bitwidth=cfg["bitwidth"], noise_alpha=cfg["alpha"],
            locking_trainable=(cfg["trainables"] == "couple_lock"),
            init=cfg["init"])
        model = obc_mod.build_obc(ocfg, patterns=pats, seed=seed)
        store, _, _, _, _ = load_checkpoint(cfg["checkpoint"], model.trainables)
        items = obc_mod.noisy_dataset(pats, cfg["n_test"],
                                      rng_for(seed, STREAM_DATASET, 1))
        loss = obc_mod.evaluate_obc(model, store.physical(hard=True).params,
                                    items, ocfg, seed)
        report = {"paradigm": "obc", "test_loss": loss,
                  "bitwidth": cfg["bitwidth"]}
    elif paradigm == "tln":
        tcfg = tln_mod.SsPufConfig(n_branches=cfg["n_branches"],
                                   segments_per_branch=cfg["segments"],
                                   mismatch_sigma=cfg["sigma"],
                                   fix_center=cfg["fix_center"])
        model = tln_mod.build_sspuf(tcfg)
        store, _, _, _, _ = load_checkpoint(cfg["checkpoint"], model.trainables)
        report = tln_mod.evaluate_puf(model, store.physical(hard=True).params,
                                      cfg["test_instances"], tcfg, seed,
                                      workers=cfg["workers"])
        report["paradigm"] = "tln"
    else:
        raise ConfigError(["evaluate does not support custom models yet; "
                           "use simulate or the library API"])
    _write_json(os.path.join(cfg["out"], "report.json"), report, cfg)
    return report


# -- entry ----------------------------------------------------------------------


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
    except ConfigError as e:
        record = {"error": "config", "problems": e.problems}
        print(json.dumps(record, indent=2, sort_keys=True), file=sys.stderr)
        out = getattr(args, "out", None) or os.environ.get("DIFFANALOG_OUT")
        if out and os.path.isdir(out):
            with open(os.path.join(out, "error.json"), "w") as f:
                json.dump(record, f, indent=2, sort_keys=True)
        return 2
    os.makedirs(cfg["out"], exist_ok=True)
    with open(os.path.join(cfg["out"], "resolved_config.json"), "w") as f:
        f.write(json.dumps(json.loads(provenance(cfg)), indent=2,
                           sort_keys=True) + "\n")
    try:
        if cfg["command"] == "simulate":
            _cmd_simulate(cfg)
        elif cfg["command"] == "optimize":
            _cmd_optimize(cfg)
        else:
            _cmd_evaluate(cfg)
    except DiffAnalogError as e:
        record = {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(record, indent=2, sort_keys=True), file=sys.stderr)
        with open(os.path.join(cfg["out"], "error.json"), "w") as f:
            json.dump(record, f, indent=2, sort_keys=True)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
