"""Experiment orchestration: cost accounting, multi-learner loops and outputs.

Threshold values written to summaries (such as the final-quarter match
rate) are regression anchors chosen for this harness.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .confidence import load_snapshot
from .fixtures import two_state_mdp
from .learners import LEARNERS, make_learner, subopt_mask
from .mdp import MdpError, TabularMdp, check_policy, load_mdp
from .prior import FrozenAttacker, attack_from_prior, generative_counts
from .simulator import AUX, LEARNER, NoAttack, RunConfig, Trajectory, run_learner, stream
from .twophase import ATTACK, EXPLORATION, TwoPhaseAttacker, TwoPhaseConfig, attack_cost_bound, theoretical_budget
from .whitebox import AttackConfig, delta_star, whitebox_cost_bound, poisoned_mdp

ATTACKERS = ("none", "whitebox", "adaptive", "prior")
MATCH_ANCHOR = 0.9
BUILTIN_PREFIX = "builtin:"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        self.field = field_name
        super().__init__(f"{field_name}: {message}")


# ---------------------------------------------------------------------------
# cost accounting


@dataclass
class CostLedger:
    """Per-step reward changes and off-target flags, grouped by learner."""

    lam: float
    target: tuple[int, ...]
    reward_change: list[np.ndarray] = field(default_factory=list)
    deviation: list[np.ndarray] = field(default_factory=list)
    phases: list[str] = field(default_factory=list)

    def add(self, traj: Trajectory, phase: str = "") -> None:
        tgt = np.asarray(self.target)
        self.reward_change.append(np.abs(traj.r - traj.r_delivered))
        self.deviation.append(traj.a != tgt[traj.s])
        self.phases.append(phase)

    def add_step(self, l: int, r: float, r_delivered: float, deviated: bool) -> None:
        while len(self.reward_change) <= l:
            self.reward_change.append(np.zeros(0))
            self.deviation.append(np.zeros(0, dtype=bool))
            self.phases.append("")
        self.reward_change[l] = np.append(self.reward_change[l], abs(r - r_delivered))
        self.deviation[l] = np.append(self.deviation[l], bool(deviated))

    @property
    def num_learners(self) -> int:
        return len(self.reward_change)

    def learner_costs(self) -> np.ndarray:
        """Per-learner average cost per step."""
        return np.array(
            [(rc.sum() + self.lam * dv.sum()) / max(len(rc), 1) for rc, dv in zip(self.reward_change, self.deviation)]
        )

    @property
    def total_steps(self) -> int:
        return int(sum(len(rc) for rc in self.reward_change))

    @property
    def aggregate(self) -> float:
        """``(1/(L T)) sum_{l,t} (|r - r'| + lambda 1{a != target(s)})``."""
        steps = self.total_steps
        if steps == 0:
            return 0.0
        total = sum(float(rc.sum()) for rc in self.reward_change)
        total += self.lam * sum(int(dv.sum()) for dv in self.deviation)
        return total / steps

    def records(self) -> Iterable[tuple[int, int, float, bool]]:
        for l, (rc, dv) in enumerate(zip(self.reward_change, self.deviation)):
            for t in range(len(rc)):
                yield l, t + 1, float(rc[t]), bool(dv[t])


def final_quarter_match(traj: Trajectory, target: Sequence[int]) -> float:
    T = len(traj)
    start = (3 * T) // 4
    tgt = np.asarray(target)
    return float(np.mean(traj.a[start:] == tgt[traj.s[start:]]))


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class ExperimentConfig:
    mdp: str
    learner: str
    attacker: str
    attacker_params: dict
    T: int
    L: int
    seeds: tuple[int, ...]
    out: str | None = None
    learner_params: dict = field(default_factory=dict)
    record_trajectories: bool = False
    theory: dict = field(default_factory=dict)
    base_dir: str = "."

    @classmethod
    def from_dict(cls, data: dict, base_dir: str | Path = ".") -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("<root>", "config must be a JSON object")
        for key in ("mdp", "learner", "attacker", "T", "L", "seeds"):
            if key not in data:
                raise ConfigError(key, "missing required field")
        known = {f for f in cls.__dataclass_fields__} - {"base_dir"}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(unknown[0], "unknown field")
        seeds = data["seeds"]
        if isinstance(seeds, int):
            seeds = [seeds]
        cfg = cls(
            mdp=str(data["mdp"]),
            learner=str(data["learner"]),
            attacker=str(data["attacker"]),
            attacker_params=dict(data.get("attacker_params", {})),
            T=data["T"],
            L=data["L"],
            seeds=tuple(seeds),
            out=data.get("out"),
            learner_params=dict(data.get("learner_params", {})),
            record_trajectories=bool(data.get("record_trajectories", False)),
            theory=dict(data.get("theory", {})),
            base_dir=str(base_dir),
        )
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError("--config", f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON at line {exc.lineno}: {exc.msg}") from None
        return cls.from_dict(data, path.parent)

    def to_dict(self) -> dict:
        return {
            "mdp": self.mdp,
            "learner": self.learner,
            "learner_params": self.learner_params,
            "attacker": self.attacker,
            "attacker_params": self.attacker_params,
            "T": self.T,
            "L": self.L,
            "seeds": list(self.seeds),
            "out": self.out,
            "record_trajectories": self.record_trajectories,
            "theory": self.theory,
        }

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def validate(self) -> None:
        if not self.mdp.startswith(BUILTIN_PREFIX) and not self.resolve(self.mdp).is_file():
            raise ConfigError("mdp", f"file not found: {self.mdp}")
        if self.learner not in LEARNERS:
            raise ConfigError("learner", f"unknown learner {self.learner!r}; expected one of {LEARNERS}")
        if self.attacker not in ATTACKERS:
            raise ConfigError("attacker", f"unknown attacker {self.attacker!r}; expected one of {ATTACKERS}")
        for key in ("T", "L"):
            value = getattr(self, key)
            if not isinstance(value, int) or isinstance(value, bool) or value < 1:
                raise ConfigError(key, "must be a positive integer")
        if not self.seeds or not all(isinstance(s, int) and not isinstance(s, bool) for s in self.seeds):
            raise ConfigError("seeds", "must be a non-empty list of integers")
        params = self.attacker_params
        if "target" not in params:
            raise ConfigError("attacker_params.target", "missing target policy")
        for key in ("eps", "lambda"):
            if key in params and not (isinstance(params[key], (int, float)) and params[key] > 0):
                raise ConfigError(f"attacker_params.{key}", "must be positive")
        if "m" in params and not params["m"] > 0:
            raise ConfigError("attacker_params.m", "must be positive")
        if "p" in params and not 0 < params["p"] < 1:
            raise ConfigError("attacker_params.p", "must lie in (0, 1)")
        if self.attacker == "prior":
            if "counts" in params:
                if not self.resolve(params["counts"]).is_file():
                    raise ConfigError("attacker_params.counts", f"file not found: {params['counts']}")
            elif "samples_per_pair" not in params:
                raise ConfigError("attacker_params", "prior attacker needs 'counts' or 'samples_per_pair'")

    def load_mdp(self) -> TabularMdp:
        if self.mdp.startswith(BUILTIN_PREFIX):
            name = self.mdp[len(BUILTIN_PREFIX):]
            if name != "two_state":
                raise ConfigError("mdp", f"unknown builtin {name!r}")
            return two_state_mdp()
        try:
            return load_mdp(self.resolve(self.mdp))
        except MdpError as exc:
            raise ConfigError("mdp", str(exc)) from None

    def replace(self, **changes) -> "ExperimentConfig":
        data = self.to_dict()
        data.update(changes)
        return ExperimentConfig.from_dict(data, self.base_dir)


def attack_params(cfg: ExperimentConfig, mdp: TabularMdp) -> AttackConfig:
    p = cfg.attacker_params
    try:
        target = check_policy(mdp, p["target"])
    except (ValueError, TypeError) as exc:
        raise ConfigError("attacker_params.target", str(exc)) from None
    return AttackConfig(target, float(p.get("eps", 0.1)), float(p.get("lambda", 1.0)))


# ---------------------------------------------------------------------------
# running


@dataclass
class SeedResult:
    seed: int
    cost: float
    learner_costs: list[float]
    phases: list[str]
    match_last_quarter: list[float]
    subopt_counts: list[int]
    k1: int
    attack_started: bool
    delta: list[list[float]] | None
    extra: dict = field(default_factory=dict)

    @property
    def attack_match(self) -> list[float]:
        return [m for m, ph in zip(self.match_last_quarter, self.phases) if ph == ATTACK]


def build_attacker(cfg: ExperimentConfig, mdp: TabularMdp, seed: int):
    acfg = attack_params(cfg, mdp)
    p = cfg.attacker_params
    name = cfg.attacker
    if name == "none":
        return NoAttack(), acfg, {}
    if name == "whitebox":
        return FrozenAttacker(delta_star(mdp, acfg), "whitebox"), acfg, {}
    if name == "adaptive":
        ucfg = TwoPhaseConfig.for_mdp(
            mdp, acfg.target, acfg.eps, acfg.lam, float(p.get("m", 0.5)), float(p.get("p", 0.1)), cfg.L, p.get("sigma")
        )
        return TwoPhaseAttacker(ucfg, mdp.num_actions), acfg, {"two_phase_config": ucfg}
    # prior-data attack
    sigma = float(p.get("sigma", mdp.noise_sigma))
    report = attack_from_prior(
        _prior_counts(cfg, mdp, seed), acfg, sigma, mdp.gamma, mdp.initial_dist, cfg.L, float(p.get("p", 0.1)), mdp_true=mdp
    )
    return FrozenAttacker(report.delta, "prior"), acfg, {"prior_report": report}


def run_seed(cfg: ExperimentConfig, seed: int, mdp: TabularMdp | None = None, out_dir: Path | None = None) -> SeedResult:
    mdp = mdp if mdp is not None else cfg.load_mdp()
    attacker, acfg, extra = build_attacker(cfg, mdp, seed)
    ledger = CostLedger(acfg.lam, acfg.target)
    run_cfg = RunConfig(cfg.T, cfg.L, seed, cfg.record_trajectories)
    S, A = mdp.num_states, mdp.num_actions
    phases, matches, subopts = [], [], []
    traj_path = out_dir / f"seed_{seed}_trajectories.csv" if out_dir is not None and cfg.record_trajectories else None
    mask_cache: dict[int, np.ndarray] = {}
    for l in range(cfg.L):
        learner = make_learner(cfg.learner, (S, A), mdp.gamma, stream(seed, l, LEARNER), **cfg.learner_params)
        traj, _ = run_learner(mdp, learner, attacker, run_cfg, l)
        phase = getattr(attacker, "learner_phase", {}).get(l, ATTACK if cfg.attacker != "none" else "none")
        ledger.add(traj, phase)
        phases.append(phase)
        matches.append(final_quarter_match(traj, acfg.target))
        subopts.append(_subopt_count(mdp, attacker, traj, phase, acfg, mask_cache))
        if traj_path is not None:
            traj.write_csv(traj_path, append=l > 0)
    delta = getattr(attacker, "frozen_delta", None) or getattr(attacker, "delta", None)
    if isinstance(attacker, TwoPhaseAttacker) and out_dir is not None:
        attacker.save_snapshot(out_dir / f"seed_{seed}_attacker_state.json")
    result = SeedResult(
        seed=seed,
        cost=ledger.aggregate,
        learner_costs=ledger.learner_costs().tolist(),
        phases=phases,
        match_last_quarter=matches,
        subopt_counts=subopts,
        k1=int(getattr(attacker, "k1", 0)),
        attack_started=cfg.attacker != "none" and (not isinstance(attacker, TwoPhaseAttacker) or attacker.phase == ATTACK),
        delta=None if delta is None else delta.delta.tolist(),
        extra={k: v for k, v in extra.items() if k == "prior_report"},
    )
    if out_dir is not None:
        _write_learner_csv(out_dir / f"seed_{seed}_learners.csv", result, ledger)
    return result


def _subopt_count(mdp, attacker, traj, phase, acfg, cache) -> int:
    """Off-eps-optimal steps measured in the reward environment the learner actually faced."""
    if phase == EXPLORATION:
        return -1
    delta = getattr(attacker, "frozen_delta", None) or getattr(attacker, "delta", None)
    key = id(delta)
    if key not in cache:
        faced = mdp if delta is None else poisoned_mdp(mdp, delta)
        cache[key] = subopt_mask(faced, acfg.eps)
    return int(cache[key][traj.s, traj.a].sum())


def _write_learner_csv(path: Path, result: SeedResult, ledger: CostLedger) -> None:
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["l", "phase", "reward_change", "deviations", "cost", "match_last_quarter", "subopt"])
        for l in range(ledger.num_learners):
            writer.writerow(
                [
                    l,
                    result.phases[l],
                    repr(float(ledger.reward_change[l].sum())),
                    int(ledger.deviation[l].sum()),
                    repr(result.learner_costs[l]),
                    repr(result.match_last_quarter[l]),
                    result.subopt_counts[l],
                ]
            )


def _seed_job(args) -> SeedResult:
    cfg_dict, base_dir, seed, out_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict, base_dir)
    return run_seed(cfg, seed, out_dir=None if out_dir is None else Path(out_dir))


def run_experiment(cfg: ExperimentConfig, jobs: int = 1, out: str | Path | None = None) -> dict:
    """Run every seed, write per-seed CSVs and ``summary.json`` when an output dir is set."""
    out = out if out is not None else cfg.out
    out_dir = None
    if out is not None:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
    mdp = cfg.load_mdp()
    attack_params(cfg, mdp)
    if jobs > 1 and len(cfg.seeds) > 1:
        args = [(cfg.to_dict(), cfg.base_dir, s, None if out_dir is None else str(out_dir)) for s in cfg.seeds]
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_seed_job, args))
    else:
        results = [run_seed(cfg, s, mdp, out_dir) for s in cfg.seeds]
    summary = summarize(cfg, results)
    if out_dir is not None:
        with (out_dir / "seeds.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["seed", "cost", "k1", "attack_started", "attack_match_min", "attack_match_mean"])
            for r in results:
                am = r.attack_match
                writer.writerow(
                    [r.seed, repr(r.cost), r.k1, int(r.attack_started), repr(min(am)) if am else "", repr(float(np.mean(am))) if am else ""]
                )
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    summary["_results"] = results
    return summary


def summarize(cfg: ExperimentConfig, results: list[SeedResult]) -> dict:
    costs = np.array([r.cost for r in results])
    attack_matches = [m for r in results for m in r.attack_match]
    all_matches = [m for r in results for m in r.match_last_quarter]
    return {
        "config": cfg.to_dict(),
        "attacker": cfg.attacker,
        "seeds": [r.seed for r in results],
        "cost_per_seed": costs.tolist(),
        "cost_mean": float(costs.mean()),
        "cost_std": float(costs.std(ddof=1)) if len(costs) > 1 else 0.0,
        "target_match_mean": float(np.mean(all_matches)),
        "attack_phase_match_mean": float(np.mean(attack_matches)) if attack_matches else None,
        "attack_phase_match_min": float(np.min(attack_matches)) if attack_matches else None,
        "k1_per_seed": [r.k1 for r in results],
        "k1_mean": float(np.mean([r.k1 for r in results])),
        "attack_never_started": [r.seed for r in results if not r.attack_started and cfg.attacker != "none"],
        "regression_anchor": {
            "final_quarter_match_threshold": MATCH_ANCHOR,
            "met": bool(attack_matches) and min(attack_matches) >= MATCH_ANCHOR,
            "note": "harness regression value, not a derived guarantee",
        },
    }


# ---------------------------------------------------------------------------
# comparison


def bound_for(cfg: ExperimentConfig, mdp: TabularMdp, results: list[SeedResult]) -> tuple[str, float | None]:
    """Analytic cost bound matching the attacker, using measured worst-case suboptimal-step counts."""
    acfg = attack_params(cfg, mdp)
    counts = [c for r in results for c in r.subopt_counts if c >= 0]
    if not counts:
        return "", None
    worst = max(counts)
    if cfg.attacker == "whitebox":
        return "per_step", whitebox_cost_bound(delta_star(mdp, acfg), acfg.lam, worst, cfg.T, cfg.L)
    if cfg.attacker == "prior":
        p = cfg.attacker_params
        report = attack_from_prior(
            _prior_counts(cfg, mdp, results[0].seed),
            acfg,
            float(p.get("sigma", mdp.noise_sigma)),
            mdp.gamma,
            mdp.initial_dist,
            cfg.L,
            float(p.get("p", 0.1)),
            mdp_true=mdp,
            subopt=worst,
            T=cfg.T,
        )
        return "prior_data", report.bound
    if cfg.attacker == "adaptive" and {"alpha", "beta"} <= set(cfg.theory):
        p = cfg.attacker_params
        ucfg = TwoPhaseConfig.for_mdp(mdp, acfg.target, acfg.eps, acfg.lam, float(p.get("m", 0.5)), float(p.get("p", 0.1)), cfg.L, p.get("sigma"))
        budget = theoretical_budget(mdp, float(cfg.theory["alpha"]), float(cfg.theory["beta"]), ucfg)
        return "two_phase", attack_cost_bound(mdp, ucfg, budget, worst, cfg.T, cfg.L)
    return "", None


def _prior_counts(cfg: ExperimentConfig, mdp: TabularMdp, seed: int):
    p = cfg.attacker_params
    if "counts" in p:
        return load_snapshot(cfg.resolve(p["counts"]))[0]
    return generative_counts(mdp, int(p["samples_per_pair"]), stream(seed, 0, AUX))


def compare_attacks(cfg: ExperimentConfig, attackers: Sequence[str] = ATTACKERS, jobs: int = 1) -> list[dict]:
    mdp = cfg.load_mdp()
    rows = []
    for name in attackers:
        params = dict(cfg.attacker_params)
        if name == "prior" and "counts" not in params:
            params.setdefault("samples_per_pair", 10_000)
        sub = cfg.replace(attacker=name, attacker_params=params, out=None)
        summary = run_experiment(sub, jobs=jobs, out=None)
        results = summary["_results"]
        kind, bound = bound_for(sub, mdp, results)
        rows.append(
            {
                "attacker": name,
                "cost_mean": summary["cost_mean"],
                "cost_std": summary["cost_std"],
                "k1_mean": summary["k1_mean"],
                "bound_kind": kind,
                "bound": bound,
            }
        )
    return rows


def format_table(rows: list[dict]) -> str:
    lines = [f"{'attacker':<10} {'cost mean':>12} {'cost std':>10} {'k1':>6} {'bound':>12} kind"]
    for r in rows:
        bound = "" if r["bound"] is None else (f"{r['bound']:.5g}" if math.isfinite(r["bound"]) else "inf")
        lines.append(
            f"{r['attacker']:<10} {r['cost_mean']:>12.6f} {r['cost_std']:>10.6f} {r['k1_mean']:>6.1f} {bound:>12} {r['bound_kind']}"
        )
    return "\n".join(lines)
