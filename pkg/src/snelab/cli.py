"""Command-line entry point: ``snelab <command> ...``.

Exit status is 0 only when every requested run succeeded. Set ``SNE_LOG`` to a
logging level name (DEBUG, INFO, ...) for progress output on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .game import JointPolicy, OfflineDataset, TabularGameSpec, generate_dataset, one_hot_features, random_game, validate_spec
from .offline import certify, offline_theorem_beta, run_pvi_sne, write_certification_csv
from .online import LearnerConfig, run_ovi_sne
from .planner import exact_sne
from .reward_free import reward_free_explore
from .stage import StageGame, TieBreakRule, quantize, solve_stage_sne
from .suite import ExperimentConfig, run_suite

log = logging.getLogger("snelab")


def _pair(text: str) -> tuple[float, float]:
    try:
        C, p = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError("expected C,p") from None
    return C, p


def _ints(text) -> list[int]:
    if isinstance(text, (list, tuple)):
        return [int(v) for v in text]
    return [int(v) for v in str(text).split(",") if v]


def _load_spec(path) -> TabularGameSpec:
    spec = TabularGameSpec.load(path)
    problems = validate_spec(spec)
    if problems:
        raise ValueError("invalid game spec:\n  " + "\n  ".join(problems))
    return spec


def _outdir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    spec = random_game(args.states, args.leader_actions, _ints(args.follower_actions), args.horizon, args.seed,
                       leader_controller=args.controller_mode)
    spec.save(args.out or "game.json")
    return 0


def cmd_plan(args) -> int:
    plan = exact_sne(_load_spec(args.spec), args.tiebreak)
    Path(args.out or "plan.json").write_text(json.dumps(plan.to_dict(), sort_keys=True))
    return 0


def cmd_stage(args) -> int:
    doc = json.loads(Path(args.game).read_text())
    game = StageGame.from_nested(doc["leader"], doc["followers"])
    eps = doc.get("epsilon")
    if eps:
        game = StageGame(quantize(game.leader, eps), game.followers, game.follower_actions)
    rule = TieBreakRule(doc.get("tiebreak", "optimistic"), doc.get("strict_margin", 1e-3))
    sol = solve_stage_sne(game, rule)
    Path(args.out or "stage_solution.json").write_text(json.dumps(sol.to_dict(), sort_keys=True))
    return 0


def cmd_online(args) -> int:
    spec = _load_spec(args.spec)
    C, p = args.beta_theorem if args.beta_theorem else (0.1, 0.1)
    config = LearnerConfig(episodes=args.episodes, beta=args.beta, beta_C=C, p=p, epsilon=args.epsilon,
                           tiebreak=args.tiebreak, seed=args.seed,
                           feature_mode="leader_controller" if args.controller_mode else "joint")
    report = run_ovi_sne(spec, config, exact_sne(spec, args.tiebreak))
    out = _outdir(args.out or "online_out")
    report.write(out / "report.json", out / "episodes.csv")
    log.info("regret after %d episodes: %.4f", args.episodes, report.regret)
    return 0


def cmd_offline(args) -> int:
    spec = _load_spec(args.spec)
    data = OfflineDataset.read_jsonl(args.dataset)
    features, _ = one_hot_features(spec, "leader_controller" if args.controller_mode else "joint")
    if args.beta_prime is not None:
        beta = args.beta_prime
    else:
        C, p = args.beta_theorem if args.beta_theorem else (1.0, 0.1)
        beta = offline_theorem_beta(C, features.dim, spec.horizon, data.num_episodes, p)
    plan = run_pvi_sne(data, (spec.leader_reward, spec.follower_rewards), spec.follower_actions, features,
                       beta, args.epsilon, args.tiebreak)
    out = _outdir(args.out or "offline_out")
    plan.write(out / "plan.json")
    write_certification_csv([(data.num_episodes, certify(spec, plan, exact_sne(spec, args.tiebreak)))],
                            out / "certification.csv")
    return 0


def cmd_collect(args) -> int:
    spec = _load_spec(args.spec)
    uniform = JointPolicy.uniform(spec)
    if args.behavior == "uniform":
        behavior, desc = uniform, "uniform"
    else:
        sne = exact_sne(spec).policy
        alpha = 1.0 if args.behavior == "sne" else args.alpha
        behavior = JointPolicy.mixture(sne, uniform, alpha)
        desc = f"{alpha}*SNE + {1 - alpha}*uniform"
    generate_dataset(spec, behavior, args.episodes, args.seed, desc).write_jsonl(args.out or "dataset.jsonl")
    return 0


def cmd_rewardfree(args) -> int:
    spec = _load_spec(args.spec)
    est, psi = reward_free_explore(spec, args.k0, args.k, args.seed)
    out = _outdir(args.out or "rewardfree_out")
    est.write(out / "rewards.json")
    truth = np.concatenate([spec.leader_reward[None], spec.follower_rewards])
    guess = np.concatenate([est.leader[None], est.followers])
    visited = ~est.mask
    with open(out / "errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["player", "max_abs_error_visited", "mean_abs_error_visited", "visited_cells", "unvisited_cells"])
        for i in range(truth.shape[0]):
            err = np.abs(truth[i] - guess[i])[visited]
            w.writerow(["leader" if i == 0 else f"follower{i}", repr(float(err.max(initial=0.0))),
                        repr(float(err.mean()) if err.size else 0.0), int(visited.sum()), int(est.mask.sum())])
    return 0


def cmd_suite(args) -> int:
    doc = dict(args.suite_config)
    if args.out:
        doc["output_dir"] = args.out
    manifest = run_suite(ExperimentConfig.from_dict(doc), jobs=args.jobs)
    for r in manifest.runs:
        if r["status"] != "ok":
            log.error("seed %s K %s failed: %s", r["seed"], r["K"], r["error"])
    return 0 if manifest.ok else 1


# -- parser -------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    def global_flags(suppress: bool) -> argparse.ArgumentParser:
        # Subcommands repeat the global flags; SUPPRESS keeps them from resetting values given earlier.
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        g = argparse.ArgumentParser(add_help=False)
        g.add_argument("--config", default=dflt(None), help="JSON file of default option values")
        g.add_argument("--out", default=dflt(None), help="output file (gen, plan, stage, collect) or directory")
        g.add_argument("--jobs", type=int, default=dflt(1), help="concurrent runs for suite")
        g.add_argument("--seed", type=int, default=dflt(0))
        return g

    common = global_flags(suppress=True)
    parser = argparse.ArgumentParser(prog="snelab", parents=[global_flags(suppress=False)],
                                     description="Stackelberg-Nash equilibrium solvers and benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.set_defaults(func=func)
        return p

    def learner_flags(p):
        p.add_argument("--spec", required=True)
        p.add_argument("--epsilon", type=float)
        p.add_argument("--tiebreak", choices=["optimistic", "pessimistic"], default="optimistic")
        p.add_argument("--controller-mode", action="store_true", help="features over (x, a) only")
        p.add_argument("--beta-theorem", type=_pair, metavar="C,p")

    p = add("gen", cmd_gen, "write a random game spec")
    p.add_argument("--states", type=int, required=True)
    p.add_argument("--leader-actions", type=int, required=True)
    p.add_argument("--follower-actions", required=True, help="comma-separated, one entry per follower")
    p.add_argument("--horizon", type=int, required=True)
    p.add_argument("--controller-mode", action="store_true", help="transitions ignore follower actions")

    p = add("plan", cmd_plan, "exact SNE of a known game")
    p.add_argument("--spec", required=True)
    p.add_argument("--tiebreak", choices=["optimistic", "pessimistic"], default="optimistic")

    p = add("stage", cmd_stage, "solve one stage game from JSON")
    p.add_argument("--game", required=True)

    p = add("online", cmd_online, "optimistic online learner")
    learner_flags(p)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--beta", type=float)

    p = add("offline", cmd_offline, "pessimistic offline learner")
    learner_flags(p)
    p.add_argument("--dataset", required=True)
    p.add_argument("--beta-prime", type=float)

    p = add("collect", cmd_collect, "sample an offline dataset")
    p.add_argument("--spec", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--behavior", choices=["uniform", "sne", "mixture"], default="mixture")
    p.add_argument("--alpha", type=float, default=0.5)

    p = add("rewardfree", cmd_rewardfree, "reward-free exploration")
    p.add_argument("--spec", required=True)
    p.add_argument("--k0", type=int, required=True)
    p.add_argument("--k", type=int, required=True)

    add("suite", cmd_suite, "seed x K batch; options come from --config")
    return parser


def _config_defaults(argv) -> dict:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config:
        return {}
    return json.loads(Path(known.config).read_text())


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    level = os.environ.get("SNE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        defaults = _config_defaults(argv)
    except (OSError, ValueError) as exc:
        print(f"snelab: cannot read config: {exc}", file=sys.stderr)
        return 2
    defaults_by_dest = {k.replace("-", "_"): v for k, v in defaults.items()}
    for group in parser._subparsers._group_actions:
        for p in group.choices.values():
            for act in p._actions:
                if act.dest in defaults_by_dest:
                    act.required = False
                    act.default = defaults_by_dest[act.dest]
    args = parser.parse_args(argv)
    args.suite_config = defaults
    if args.command == "suite" and not defaults:
        parser.error("suite needs --config")
    try:
        return args.func(args)
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"snelab {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
