"""Command-line entry point: ``tatu <command> [options]``.

Every command takes ``--seed``, ``--config FILE.json``, repeatable
``--set section.key=value`` and ``--out DIR`` (default: ``$TATU_OUTPUT_ROOT``,
else the config's ``output_dir``). Artifacts use fixed names inside the output
directory, so chaining commands on one directory runs the whole pipeline.
Each run echoes its resolved config to ``config.<command>.json`` and appends
metric records to ``metrics.jsonl``. Failures print one JSON object on stderr
and exit with the error's code.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import io, pipeline, theory
from .config import SWEEP_ALIASES, SWEEP_GRIDS, RunConfig, parse_value
from .envs import make_env
from .errors import ParameterError, TatuError, VerificationError
from .learners import evaluate_policy, fitted_q_iteration

OUTPUT_ENV = "TATU_OUTPUT_ROOT"

DATASET = "dataset.jsonl"
DYNAMICS = "dynamics.ckpt"
CVAE = "cvae.ckpt"
BUFFER = "buffer.ckpt"
POLICY = "policy.ckpt"
METRICS = "metrics.jsonl"


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = RunConfig.from_dict(io.read_json(args.config))
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ParameterError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = parse_value(v.strip())
    if overrides:
        cfg = cfg.with_overrides(overrides)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    return cfg


def _out_dir(args, cfg: RunConfig) -> Path:
    root = args.out or os.environ.get(OUTPUT_ENV) or cfg.output_dir
    p = Path(root)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _artifact(args, out: Path, attr: str, default: str) -> Path:
    given = getattr(args, attr, None)
    return Path(given) if given else out / default


def _echo(out: Path, command: str, cfg: RunConfig, extra: dict | None = None) -> None:
    doc = {"command": command, "config": cfg.to_dict()}
    if extra:
        doc["inputs"] = extra
    io.write_json(out / f"config.{command}.json", doc)


def _emit(obj) -> None:
    print(json.dumps(io._jsonable(obj), sort_keys=True))


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_defaults(args, cfg, out):
    d = cfg.to_dict()
    summary = {"lambda": cfg.truncation.lambda_pen, "alpha": cfg.truncation.alpha, "h": cfg.truncation.horizon_h,
               "n_total": cfg.dynamics.n_total, "n_elites": cfg.dynamics.n_elites}
    print(" ".join(f"{k}={v}" for k, v in summary.items()))
    print(json.dumps(d, indent=2, sort_keys=True))
    return 0


def cmd_gen_dataset(args, cfg, out):
    ds = pipeline.generate_dataset(cfg)
    path = io.save_dataset(ds, _artifact(args, out, "dataset", DATASET))
    m = io.MetricsWriter(out / METRICS, "gen-dataset")
    m.write(0, "dataset/n", len(ds))
    m.write(0, "dataset/mean_reward", float(ds.rewards.mean()))
    _echo(out, "gen-dataset", cfg)
    _emit({"dataset": str(path), "n": len(ds)})
    return 0


def cmd_train_dynamics(args, cfg, out):
    dpath = _artifact(args, out, "dataset", DATASET)
    ds = io.load_dataset(dpath)
    ens = pipeline.fit_dynamics(cfg, ds)
    path = io.save_checkpoint(_artifact(args, out, "output", DYNAMICS), *io.ensemble_to_checkpoint(ens))
    m = io.MetricsWriter(out / METRICS, "train-dynamics")
    for k, v in enumerate(ens.history["val_nll"]):
        m.write(k, "dynamics/val_nll", v, {"member": k})
    m.write(0, "dynamics/elites", list(ens.elite_indices))
    _echo(out, "train-dynamics", cfg, {"dataset": str(dpath)})
    _emit({"dynamics": str(path), "elites": list(ens.elite_indices)})
    return 0


def cmd_train_cvae(args, cfg, out):
    dpath = _artifact(args, out, "dataset", DATASET)
    ds = io.load_dataset(dpath)
    model = pipeline.fit_cvae(cfg, ds)
    path = io.save_checkpoint(_artifact(args, out, "output", CVAE), *io.cvae_to_checkpoint(model))
    m = io.MetricsWriter(out / METRICS, "train-cvae")
    for k, v in enumerate(model.history["loss"]):
        m.write(k, "cvae/loss", v)
    _echo(out, "train-cvae", cfg, {"dataset": str(dpath)})
    _emit({"cvae": str(path), "final_loss": model.history["loss"][-1] if model.history["loss"] else None})
    return 0


def cmd_augment(args, cfg, out):
    dpath = _artifact(args, out, "dataset", DATASET)
    ds = io.load_dataset(dpath)
    ens = io.ensemble_from_checkpoint(*io.load_checkpoint(_artifact(args, out, "dynamics", DYNAMICS)))
    inputs = {"dataset": str(dpath)}
    if cfg.augment.action_source == "cvae":
        cpath = _artifact(args, out, "cvae", CVAE)
        source = pipeline.action_source_for(cfg, io.cvae_from_checkpoint(*io.load_checkpoint(cpath)))
        inputs["cvae"] = str(cpath)
    else:
        ppath = _artifact(args, out, "policy", POLICY)
        policy = io.actor_critic_from_checkpoint(*io.load_checkpoint(ppath))
        source = pipeline.action_source_for(cfg, policy=policy)
        inputs["policy"] = str(ppath)
    buf, stats, th = pipeline.augment(cfg, ds, ens, source)
    path = io.save_checkpoint(_artifact(args, out, "output", BUFFER), *io.buffer_to_checkpoint(buf))
    m = io.MetricsWriter(out / METRICS, "augment")
    m.write(0, "augment/epsilon", th.epsilon, {"alpha": th.alpha_used, "max_u": th.source_max_u})
    for e, st in enumerate(stats):
        for k in ("n_admitted", "mean_length", "full_length_fraction", "truncation_rate", "rejection_rate"):
            m.write(e, f"augment/{k}", getattr(st, k))
        m.write(e, "augment/u_hist", st.to_dict()["u_hist"])
    _echo(out, "augment", cfg, inputs)
    _emit({"buffer": str(path), "size": len(buf), "epsilon": th.epsilon})
    return 0


def cmd_train_policy(args, cfg, out):
    dpath = _artifact(args, out, "dataset", DATASET)
    ds = io.load_dataset(dpath)
    m = io.MetricsWriter(out / METRICS, "train-policy")
    if ds.env_descriptor.get("kind") == "tabular":
        d = ds.env_descriptor
        q = fitted_q_iteration(ds, d["gamma"], cfg.learner.fq_iters, d["n_states"], d["n_actions"], tol=1e-12)
        path = io.save_checkpoint(_artifact(args, out, "output", POLICY), {"Q": q.Q}, {"kind": "tabular_q"})
        m.write(0, "policy/max_q", float(q.Q.max()))
        _echo(out, "train-policy", cfg, {"dataset": str(dpath)})
        _emit({"policy": str(path)})
        return 0
    buf = None
    bpath = _artifact(args, out, "buffer", BUFFER)
    if not args.no_buffer and bpath.exists():
        buf = io.buffer_from_checkpoint(*io.load_checkpoint(bpath))
    elif args.buffer:
        io.load_checkpoint(bpath)  # raises the missing-artifact error
    model = pipeline.train_policy(cfg, ds, buf, metrics=m)
    path = io.save_checkpoint(_artifact(args, out, "output", POLICY), *io.actor_critic_to_checkpoint(model))
    _echo(out, "train-policy", cfg, {"dataset": str(dpath), "buffer": str(bpath) if buf is not None else None})
    _emit({"policy": str(path), "augmented": buf is not None,
           "eta": cfg.real_ratio if buf is not None else 1.0})
    return 0


def cmd_evaluate(args, cfg, out):
    ppath = _artifact(args, out, "policy", POLICY)
    tensors, meta = io.load_checkpoint(ppath)
    m = io.MetricsWriter(out / METRICS, "evaluate")
    if meta.get("kind") == "tabular_q":
        ds = io.load_dataset(_artifact(args, out, "dataset", DATASET))
        env = make_env(ds.env_descriptor)
        Q = tensors["Q"]
        pi = np.zeros_like(Q)
        pi[np.arange(Q.shape[0]), Q.argmax(axis=1)] = 1.0
        res = {"exact_return": theory.exact_return(env, pi)}
        mc = evaluate_policy(env, pi, cfg.learner.eval_episodes, pipeline.derive_seed(cfg.seed, 6))
        res.update(mc.to_dict())
    else:
        policy = io.actor_critic_from_checkpoint(tensors, meta)
        res = pipeline.evaluate(cfg, policy).to_dict()
    for k, v in res.items():
        m.write(0, f"eval/{k}", v)
    io.write_json(out / "eval.json", res)
    _echo(out, "evaluate", cfg, {"policy": str(ppath)})
    _emit(res)
    return 0


def cmd_verify_bounds(args, cfg, out):
    rows = theory.run_bound_suite(args.instances, seed=cfg.seed, corollaries=not args.no_corollaries)
    m = io.MetricsWriter(out / METRICS, "verify-bounds")
    keys = ["theorem1_lower_ok", "theorem1_upper_ok", "lemma1_ok", "lemma2_ok"]
    counts = {k: 0 for k in keys}
    counts["corollary1_ok"] = 0
    records = []
    for r in rows:
        b = r["bounds"]
        rec = {"instance": r["instance"], "n_states": r["n_states"], "n_actions": r["n_actions"], **b.to_dict()}
        for k in keys:
            counts[k] += int(getattr(b, k))
        if "corollary" in r:
            c = r["corollary"]
            counts["corollary1_ok"] += int(c.corollary1_ok)
            rec["corollary"] = c.to_dict()
        records.append(rec)
        m.write(r["instance"], "bounds/lower_slack", b.lower_slack)
        m.write(r["instance"], "bounds/upper_slack", b.upper_slack)
    if args.no_corollaries:
        counts.pop("corollary1_ok")
    io.write_json(out / "bounds_report.json", {"n_instances": len(rows), "passing": counts, "instances": records})
    _echo(out, "verify-bounds", cfg, {"instances": args.instances})
    summary = {"n_instances": len(rows), "passing": counts}
    _emit(summary)
    if any(v != len(rows) for v in counts.values()):
        raise VerificationError(f"bound violations: {counts} out of {len(rows)}")
    return 0


def cmd_sweep(args, cfg, out):
    param = SWEEP_ALIASES.get(args.param or cfg.sweep.param, args.param or cfg.sweep.param)
    if param not in SWEEP_GRIDS:
        raise ParameterError(f"cannot sweep {param!r}; choose one of {sorted(SWEEP_GRIDS)}")
    if args.grid:
        grid = [float(x) for x in args.grid.split(",")]
    elif args.param:
        grid = list(SWEEP_GRIDS[param])
    else:
        grid = list(cfg.sweep.grid)
    n_seeds = args.seeds or cfg.sweep.seeds
    seeds = [cfg.seed + k for k in range(n_seeds)]
    m = io.MetricsWriter(out / METRICS, "sweep")
    rows = pipeline.run_sweep(cfg, param, grid, seeds, train=not args.no_train, metrics=m)
    io.write_json(out / f"sweep_{param}.json", [r.to_dict() for r in rows])
    _echo(out, "sweep", cfg, {"param": param, "grid": grid, "seeds": seeds})
    print(f"{'seed':>4} {param:>10} {'buffer':>8} {'mean_len':>8} {'full':>6} {'return':>10}")
    for r in rows:
        ret = "-" if r.return_mean is None else f"{r.return_mean:10.2f}"
        print(f"{r.seed:>4} {r.value:>10g} {r.buffer_size:>8d} {r.mean_length:>8.3f} "
              f"{r.full_length_fraction:>6.3f} {ret:>10}")
    return 0


COMMANDS = {
    "defaults": (cmd_defaults, "print every default setting"),
    "gen-dataset": (cmd_gen_dataset, "roll the behaviour policy and write dataset.jsonl"),
    "train-dynamics": (cmd_train_dynamics, "fit the Gaussian ensemble dynamics model"),
    "train-cvae": (cmd_train_cvae, "fit the CVAE rollout policy"),
    "augment": (cmd_augment, "generate truncated synthetic trajectories into buffer.ckpt"),
    "train-policy": (cmd_train_policy, "train TD3+BC (or fitted-Q on tabular data)"),
    "evaluate": (cmd_evaluate, "Monte-Carlo evaluation of a trained policy"),
    "verify-bounds": (cmd_verify_bounds, "exact numerical check of the performance bounds"),
    "sweep": (cmd_sweep, "parameter study over h, alpha or eta"),
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tatu", description="Uncertainty-truncated model rollouts for offline RL.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--seed", type=int, default=None, help="global seed (overrides the config)")
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override, e.g. truncation.alpha=3")
        sp.add_argument("--out", default=None, help=f"output directory (default ${OUTPUT_ENV} or config output_dir)")
        if name in ("train-dynamics", "train-cvae", "augment", "train-policy", "evaluate"):
            sp.add_argument("--dataset", default=None, help=f"dataset path (default OUT/{DATASET})")
        if name in ("gen-dataset",):
            sp.add_argument("--dataset", default=None, help=f"where to write (default OUT/{DATASET})")
        if name in ("train-dynamics", "train-cvae", "augment", "train-policy"):
            sp.add_argument("--output", default=None, help="where to write the artifact")
        if name == "augment":
            sp.add_argument("--dynamics", default=None)
            sp.add_argument("--cvae", default=None)
            sp.add_argument("--policy", default=None)
        if name == "train-policy":
            sp.add_argument("--buffer", default=None, help=f"model buffer (default OUT/{BUFFER} if present)")
            sp.add_argument("--no-buffer", action="store_true", help="train on real data only")
        if name == "evaluate":
            sp.add_argument("--policy", default=None)
        if name == "verify-bounds":
            sp.add_argument("--instances", type=int, default=100)
            sp.add_argument("--no-corollaries", action="store_true")
        if name == "sweep":
            sp.add_argument("--param", default=None, help="horizon_h (h), alpha or real_ratio (eta)")
            sp.add_argument("--grid", default=None, help="comma-separated values")
            sp.add_argument("--seeds", type=int, default=None)
            sp.add_argument("--no-train", action="store_true", help="only generate; skip policy training")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _resolve_config(args)
        # `defaults` only prints, so it must not create an output directory
        out = None if args.command == "defaults" else _out_dir(args, cfg)
        fn, _ = COMMANDS[args.command]
        return fn(args, cfg, out)
    except TatuError as e:
        sys.stderr.write(json.dumps({"error": e.category, "message": str(e), "exit_code": e.exit_code}) + "\n")
        return e.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
