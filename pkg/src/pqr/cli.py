"""Command-line interface: data generation, solving, identification, baselines.

Every subcommand takes explicit seeds, prints nothing on success beyond a
one-line summary, exits 0 on success and 1 with a stderr line on failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .approx import TrainerConfig, fit_policy_mle
from .baselines import maxent_irl_grounded, normalize_by_anchor, select_alpha, spl_gd
from .demos import load_dataset, rollout, save_dataset
from .estimators import PqrConfig, pqr_full
from .harness import ExperimentConfig, evaluate_mse, expert_solution, run_experiment, sweep
from .soft_mdp import (
    FittedSoftQConfig,
    SyntheticMdp,
    TabularMdp,
    env_from_dict,
    load_env,
    solve_soft,
)


def _load_json(path) -> dict:
    with Path(path).open("r", encoding="utf-8") as fh:
        return json.load(fh)


def _write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _gen_policy(env, expert_config_path=None):
    if isinstance(env, TabularMdp):
        sol = solve_soft(env)
        return sol.policy, {"kind": "soft-optimal-exact", "residual": sol.residual}
    cfg = FittedSoftQConfig.from_dict(_load_json(expert_config_path)) if expert_config_path else None
    expert = expert_solution(env, cfg)
    return expert, expert.descriptor()


def cmd_gen_data(args) -> int:
    env = load_env(args.env)
    policy, desc = _gen_policy(env, args.expert_config)
    ds = rollout(env, policy, args.steps, args.seed, policy_desc=desc)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} transitions to {args.out}")
    return 0


def cmd_solve(args) -> int:
    env = load_env(args.env)
    if isinstance(env, TabularMdp):
        sol = solve_soft(env, tol=args.tol)
        _write_json(args.out, {
            "kind": "tabular",
            "q": sol.q.tolist(),
            "v": sol.v.tolist(),
            "policy": sol.policy.tolist(),
            "residual": sol.residual,
            "iterations": sol.iterations,
            "converged": sol.converged,
        })
        print(f"solved tabular env in {sol.iterations} iterations (residual {sol.residual:.3e})")
    else:
        cfg = FittedSoftQConfig.from_dict(_load_json(args.expert_config)) if args.expert_config else None
        expert = expert_solution(env, cfg)
        _write_json(args.out, {
            "kind": "synthetic-fitted",
            "net": expert.net.to_dict(),
            "residual": expert.residual,
            "config": expert.config.to_dict(),
        })
        print(f"fitted synthetic env (holdout residual {expert.residual:.4f})")
    return 0


def _grid_points(ds, reward_fn) -> list:
    if ds.is_tabular:
        env = ds.meta["env"]
        n_s, n_a = int(env["n_states"]), int(env["n_actions"])
        s = np.repeat(np.arange(n_s), n_a)
        a = np.tile(np.arange(n_a), n_s)
        vals = reward_fn(s, a)
        return [{"s": int(si), "a": int(ai), "value": float(v)} for si, ai, v in zip(s, a, vals)]
    vals = reward_fn(ds.states, ds.actions)
    return [
        {"s": [float(x) for x in s], "a": int(a), "value": float(v)}
        for s, a, v in zip(ds.states, ds.actions, vals)
    ]


def cmd_pqr(args) -> int:
    ds = load_dataset(args.data)
    config = PqrConfig.from_dict(_load_json(args.config))
    env = load_env(args.env) if args.env else env_from_dict(ds.meta["env"])
    mdp = env if (config.expectation_mode == "exact" and isinstance(env, TabularMdp)) else None
    solution = solve_soft(env) if (config.policy_mode == "exact" and isinstance(env, TabularMdp)) else None
    run = pqr_full(ds, config, mdp=mdp, solution=solution)
    out = Path(args.out)
    _write_json(out / "manifest.json", run.manifest)
    _write_json(out / "reward.json", {
        "env": ds.meta["env"],
        "anchor_action": config.anchor_action,
        "points": _grid_points(ds, run.reward_estimate.reward),
    })
    print(f"identification complete; outputs in {out}")
    return 0


def cmd_baseline(args) -> int:
    ds = load_dataset(args.data)
    env = load_env(args.env) if args.env else env_from_dict(ds.meta["env"])
    anchor = env.anchor_action

    if isinstance(env, TabularMdp):
        sol = solve_soft(env)
        truth_q = lambda s, a: sol.q[np.asarray(s, np.int64), np.asarray(a, np.int64)]
        truth_v = lambda s: sol.v[np.asarray(s, np.int64)]
        ref_state = 0
    else:
        expert = expert_solution(env)
        truth_q, truth_v = expert.q_value, expert.v
        ref_state = np.zeros(env.p)

    if args.alpha_select:
        if args.r_avg is not None:
            r_avg = args.r_avg
        elif isinstance(env, TabularMdp):
            r_avg = float(np.mean(env.reward[ds.states, ds.actions]))
        else:
            r_avg = float(np.mean(env.reward(ds.states, ds.actions)))
        cfg = PqrConfig.from_dict(_load_json(args.config)) if args.config else None
        alpha_hat = select_alpha(ds, r_avg, gamma=env.gamma, config=cfg)
        _write_json(args.out, {"alpha_hat": alpha_hat, "r_avg": r_avg, "n": len(ds)})
        print(f"selected temperature {alpha_hat:.6f}")
        return 0

    if args.method == "maxent":
        trainer = TrainerConfig.from_dict(_load_json(args.config)) if args.config else TrainerConfig()
        policy = fit_policy_mle(ds, trainer)
        q_ref = float(np.asarray(truth_q(
            np.asarray(ref_state).reshape(1, -1) if not isinstance(env, TabularMdp) else np.asarray([ref_state]),
            np.asarray([anchor]),
        )).ravel()[0])
        grounded = maxent_irl_grounded(ds, policy, env.alpha, q_ref,
                                       reference_state=ref_state, reference_action=anchor)
        est = normalize_by_anchor(grounded.value, anchor)
    elif args.method == "splgd":
        spl = spl_gd(ds, truth_q, truth_v, env.gamma)
        est = normalize_by_anchor(spl.reward, anchor)
    else:
        raise ValueError(f"unknown baseline method {args.method!r}")

    _write_json(args.out, {
        "env": ds.meta["env"],
        "method": args.method,
        "anchor_action": anchor,
        "points": _grid_points(ds, est),
    })
    print(f"baseline {args.method} written to {args.out}")
    return 0


def cmd_sweep(args) -> int:
    template = ExperimentConfig.from_json(args.template)
    values = []
    for tok in args.values.split(","):
        tok = tok.strip()
        values.append(float(tok) if ("." in tok or "e" in tok.lower()) else int(tok))
    report = sweep(template, args.axis, values, out_csv=args.out)
    print(f"swept {args.axis} over {values}; {len(report.rows)} rows -> {args.out}")
    return 0


def cmd_eval(args) -> int:
    grid = _load_json(args.estimate)
    env = load_env(args.truth) if Path(args.truth).exists() else env_from_dict(grid["env"])
    points = grid["points"]
    if not points:
        raise ValueError("estimate grid holds no points")
    if isinstance(env, TabularMdp):
        s = np.asarray([pt["s"] for pt in points], dtype=np.int64)
        a = np.asarray([pt["a"] for pt in points], dtype=np.int64)
        truth = env.reward[s, a]
    else:
        s = np.asarray([pt["s"] for pt in points], dtype=float)
        a = np.asarray([pt["a"] for pt in points], dtype=np.int64)
        truth = env.reward(s, a)
    vals = np.asarray([pt["value"] for pt in points], dtype=float)
    mse = float(np.mean((vals - truth) ** 2))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(f"n_points,mse_r\n{len(points)},{mse!r}\n", encoding="utf-8")
    print(f"mse_r={mse:.6g} over {len(points)} points -> {args.out}")
    return 0


def cmd_run(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    if args.out:
        cfg.out_dir = args.out
    report = run_experiment(cfg)
    if not cfg.out_dir:
        sys.stdout.write(report.csv_text())
    print(f"ran {len(cfg.methods)} methods on {cfg.env.get('kind')} env")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pqr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="roll the soft-optimal policy and save transitions")
    p.add_argument("--env", required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--expert-config", default=None)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("solve", help="solve an environment spec")
    p.add_argument("--env", required=True)
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--out", required=True)
    p.add_argument("--expert-config", default=None)
    p.set_defaults(fn=cmd_solve)

    p = sub.add_parser("pqr", help="run the identification pipeline on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--env", default=None)
    p.set_defaults(fn=cmd_pqr)

    p = sub.add_parser("baseline", help="run a baseline estimator or temperature selection")
    p.add_argument("--method", choices=["maxent", "splgd"], default="maxent")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--env", default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--alpha-select", action="store_true")
    p.add_argument("--r-avg", type=float, default=None)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("sweep", help="run an experiment template across an axis")
    p.add_argument("--template", required=True)
    p.add_argument("--axis", required=True)
    p.add_argument("--values", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("eval", help="score a saved estimate grid against the true reward")
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("run", help="run one experiment config end to end")
    p.add_argument("--config", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(fn=cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
