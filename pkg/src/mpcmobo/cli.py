"""Command-line entry point: ``mpcmobo run | verify-theorem1 | replay``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import experiment as exp
from . import mdp_oracle


def _run(args) -> int:
    overrides = {"mode": args.mode, "seed": args.seed, "episodes": args.episodes}
    try:
        if args.config:
            cfg = exp.ExperimentConfig.load(args.config, **overrides)
        else:
            cfg = exp.ExperimentConfig.from_dict({k: v for k, v in overrides.items() if v is not None})
    except exp.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        res = exp.run_experiment(cfg, args.out)
    except exp.InitializationError as exc:
        print(f"initialization failed: {exc}", file=sys.stderr)
        return 1
    fin = res.final
    print(f"{len(res.archive)} episodes archived, {len(res.failures)} failed, "
          f"hypervolume {res.archive.hypervolume():.6g}")
    if fin is not None:
        print(f"final episode {fin.episode}: f = {[round(float(v), 6) for v in fin.f]}")
    return 0


def _verify(args) -> int:
    t0 = time.perf_counter()
    seeds = range(args.seed0, args.seed0 + args.seeds)
    horizons = tuple(args.horizon) if args.horizon else (2, 3, 5)
    gammas = tuple(args.gamma) if args.gamma else (0.9, 0.99, 1.0)
    try:
        rows = mdp_oracle.sweep(seeds, args.states, args.actions, horizons, gammas, args.model)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    ok = True
    print(f"{'N':>3} {'gamma':>6} {'runs':>5} {'max|Vhat-V*|':>14} {'min agreement':>14}")
    for N in horizons:
        for g in gammas:
            sel = [r for r in rows if r["horizon"] == N and r["gamma"] == g]
            gap = max(r["max_gap"] for r in sel)
            agr = min(r["agreement"] for r in sel)
            ok &= gap <= args.tol and agr == 1.0
            print(f"{N:>3} {g:>6} {len(sel):>5} {gap:>14.3e} {agr:>14.3f}")
    print(f"{'PASS' if ok else 'FAIL'} ({len(rows)} problems, {time.perf_counter() - t0:.2f} s)")
    return 0 if ok else 1


def _replay(args) -> int:
    path = Path(args.log)
    gamma, beta = args.gamma, args.beta
    manifest = path.parent.parent / "manifest.json"
    if manifest.exists():
        cfg = json.loads(manifest.read_text())["config"]
        gamma = cfg["gamma"] if gamma is None else gamma
        beta = cfg["beta"] if beta is None else beta
    gamma = 0.99 if gamma is None else gamma
    beta = 1.0 if beta is None else beta
    prev = None if args.first else exp.previous_log_for(path)
    out = exp.replay_log(path, gamma, beta, prev)
    out["previous_log"] = str(prev) if prev else None
    print(json.dumps(out, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mpcmobo", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log every episode")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run a learning experiment")
    r.add_argument("--config", help="JSON config file (keys are ExperimentConfig fields)")
    r.add_argument("--mode", choices=exp.MODES)
    r.add_argument("--seed", type=int)
    r.add_argument("--episodes", type=int)
    r.add_argument("--out", required=True, help="output directory; an existing run there is resumed")
    r.set_defaults(func=_run)

    v = sub.add_parser("verify-theorem1", help="check the modified-cost construction on random finite MDPs")
    v.add_argument("--seeds", type=int, default=20, help="number of seeds")
    v.add_argument("--seed0", type=int, default=0, help="first seed")
    v.add_argument("--states", type=int, default=4)
    v.add_argument("--actions", type=int, default=2)
    v.add_argument("--horizon", type=int, nargs="+")
    v.add_argument("--gamma", type=float, nargs="+")
    v.add_argument("--model", choices=mdp_oracle.MODEL_KINDS, default="consistent")
    v.add_argument("--tol", type=float, default=1e-9)
    v.set_defaults(func=_verify)

    rp = sub.add_parser("replay", help="recompute the objectives of a stored episode log")
    rp.add_argument("--log", required=True)
    rp.add_argument("--gamma", type=float)
    rp.add_argument("--beta", type=float)
    rp.add_argument("--first", action="store_true", help="treat the episode as the first one (f3 = 0)")
    rp.set_defaults(func=_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
