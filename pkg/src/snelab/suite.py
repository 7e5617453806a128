"""Seed x K experiment batches with per-run artifacts and an aggregate manifest."""

from __future__ import annotations

import hashlib
import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .game import JointPolicy, TabularGameSpec, generate_dataset, one_hot_features, random_game
from .offline import certify, offline_theorem_beta, run_pvi_sne, write_certification_csv
from .online import LearnerConfig, run_ovi_sne
from .planner import exact_sne

log = logging.getLogger(__name__)

COMMANDS = ("online", "offline")


@dataclass
class ExperimentConfig:
    command: str
    seeds: list
    k_grid: list
    spec: str | None = None  # path; a fresh random game per seed when absent
    sizes: list | None = None  # [S, A_l, [A_f...], H]
    beta: float | None = None
    beta_theorem: list | None = None  # [C, p]
    epsilon: float | None = None
    tiebreak: str = "optimistic"
    controller_mode: bool = False
    alpha: float = 0.5  # offline behavior: alpha * SNE + (1 - alpha) * uniform
    output_dir: str = "suite_out"

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ValueError(f"command must be one of {COMMANDS}")
        if not self.seeds:
            raise ValueError("seed list is empty")
        if not self.k_grid or any(b <= a for a, b in zip(self.k_grid, self.k_grid[1:])):
            raise ValueError("K grid must be nonempty and strictly increasing")
        if self.spec is None and self.sizes is None:
            raise ValueError("give either a spec path or game sizes")
        if self.spec is not None and not Path(self.spec).exists():
            raise FileNotFoundError(self.spec)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def game(self, seed: int) -> TabularGameSpec:
        if self.spec is not None:
            return TabularGameSpec.load(self.spec)
        S, A, fa, H = self.sizes
        return random_game(S, A, list(fa), H, seed, leader_controller=self.controller_mode)


@dataclass
class RunManifest:
    config: dict
    code_version: str
    wall_clock: float
    runs: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(r["status"] == "ok" for r in self.runs)

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=1))


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _run_online(cfg: ExperimentConfig, spec, seed: int, K: int, out: Path) -> dict:
    truth = exact_sne(spec, cfg.tiebreak)
    C, p = cfg.beta_theorem if cfg.beta_theorem else (0.1, 0.1)
    config = LearnerConfig(episodes=K, beta=cfg.beta, beta_C=C, p=p, epsilon=cfg.epsilon,
                           tiebreak=cfg.tiebreak, seed=seed,
                           feature_mode="leader_controller" if cfg.controller_mode else "joint")
    report = run_ovi_sne(spec, config, truth)
    report.write(out / "report.json", out / "episodes.csv")
    return {
        "regret": report.regret,
        "regret_per_episode": report.regret / K,
        "violation_rate": sum(e.optimism_violations for e in report.episodes) / max(1, report.cells()),
        "certificate_min": min(e.certificate_min for e in report.episodes),
    }


def _run_offline(cfg: ExperimentConfig, spec, seed: int, K: int, out: Path) -> dict:
    truth = exact_sne(spec, cfg.tiebreak)
    behavior = JointPolicy.mixture(truth.policy, JointPolicy.uniform(spec), cfg.alpha)
    data = generate_dataset(spec, behavior, K, seed, f"{cfg.alpha}*SNE + {1 - cfg.alpha}*uniform")
    data.write_jsonl(out / "dataset.jsonl")
    features, _ = one_hot_features(spec, "leader_controller" if cfg.controller_mode else "joint")
    if cfg.beta is not None:
        beta = cfg.beta
    else:
        C, p = cfg.beta_theorem if cfg.beta_theorem else (1.0, 0.1)
        beta = offline_theorem_beta(C, features.dim, spec.horizon, K, p)
    plan = run_pvi_sne(data, (spec.leader_reward, spec.follower_rewards), spec.follower_actions, features,
                       beta, cfg.epsilon, cfg.tiebreak)
    plan.write(out / "plan.json")
    cert = certify(spec, plan, truth)
    write_certification_csv([(K, cert)], out / "certification.csv")
    return {"subopt": cert.subopt, "bound": cert.bound, "c_estimate": cert.coverage,
            "bound_holds": bool(cert.subopt <= cert.bound), "certificate_min": plan.certificate_min}


def run_one(cfg_dict: dict, seed: int, K: int) -> dict:
    """One (seed, K) run; failures are captured in the record, never raised."""
    cfg = ExperimentConfig.from_dict(cfg_dict)
    out = Path(cfg.output_dir) / f"seed{seed}_K{K}"
    record = {"seed": seed, "K": K, "status": "ok", "outputs": {}, "metrics": {}, "error": None}
    try:
        out.mkdir(parents=True, exist_ok=True)
        spec = cfg.game(seed)
        runner = _run_online if cfg.command == "online" else _run_offline
        record["metrics"] = runner(cfg, spec, seed, K, out)
        record["outputs"] = {str(p.relative_to(cfg.output_dir)): sha256(p) for p in sorted(out.iterdir())}
    except Exception as exc:  # isolate: one failed seed never aborts the suite
        record["status"] = "failed"
        record["error"] = f"{type(exc).__name__}: {exc}"
        log.debug(traceback.format_exc())
    return record


def _summarize(cfg: ExperimentConfig, runs: list) -> dict:
    ok = [r for r in runs if r["status"] == "ok"]
    out = {"runs": len(runs), "failed": len(runs) - len(ok)}
    by_k = {K: [r["metrics"] for r in ok if r["K"] == K] for K in cfg.k_grid}
    if cfg.command == "online":
        med = {K: float(np.median([m["regret_per_episode"] for m in ms])) for K, ms in by_k.items() if ms}
        out["median_regret_per_episode"] = {str(K): v for K, v in med.items()}
        ks = sorted(med)
        out["median_regret_ratios"] = {f"{b}/{a}": (med[b] / med[a] if med[a] > 0 else None)
                                       for a, b in zip(ks, ks[1:])}
        out["violation_rate"] = float(np.mean([m["violation_rate"] for m in [r["metrics"] for r in ok]])) if ok else None
    else:
        med = {K: float(np.median([m["subopt"] for m in ms])) for K, ms in by_k.items() if ms}
        out["median_subopt"] = {str(K): v for K, v in med.items()}
        out["bound_frequency"] = float(np.mean([r["metrics"]["bound_holds"] for r in ok])) if ok else None
        out["median_c_estimate"] = {str(K): float(np.median([m["c_estimate"] for m in ms]))
                                    for K, ms in by_k.items() if ms}
    return out


def run_suite(cfg: ExperimentConfig, jobs: int = 1) -> RunManifest:
    """Execute every (seed, K) pair, concurrently up to ``jobs``; writes ``manifest.json``."""
    start = time.time()
    root = Path(cfg.output_dir)
    root.mkdir(parents=True, exist_ok=True)
    pairs = [(s, K) for s in cfg.seeds for K in cfg.k_grid]
    cfg_dict = asdict(cfg)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            runs = list(pool.map(run_one, [cfg_dict] * len(pairs), *zip(*pairs)))
    else:
        runs = [run_one(cfg_dict, s, K) for s, K in pairs]
    runs.sort(key=lambda r: (r["seed"], r["K"]))
    manifest = RunManifest(cfg_dict, __version__, time.time() - start, runs, _summarize(cfg, runs))
    manifest.write(root / "manifest.json")
    return manifest
