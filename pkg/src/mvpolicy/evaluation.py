"""Closed-loop evaluation, seen/unseen protocols and the ablation matrix."""
from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import sim
from .episodes import Action, DatasetManifest, canonical_quaternion, episode_instruction
from .policy import Policy, PolicyConfig
from .training import Checkpoint, TrainConfig, train

log = logging.getLogger(__name__)

REPORT_VERSION = 1


class EvalError(ValueError):
    pass


def rollout_seed(seed: int, task: sim.TaskSpec, index: int) -> int:
    """Scene seed for evaluation episode ``index``; tagged so it never mirrors a training seed stream."""
    ss = np.random.SeedSequence([seed, task.task_id, task.variation_id, index, 0xE7A1])
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


def chance_success(n_objects: int, length: int) -> float:
    """Probability that a uniformly random ordered choice of ``length`` distinct objects is the goal."""
    if not 0 < length <= n_objects:
        raise ValueError("need 0 < length <= n_objects")
    return math.factorial(n_objects - length) / math.factorial(n_objects)


class ExpertPolicy:
    """The scripted expert behind the policy interface; replans from the initial scene on reset."""

    config = None

    def __init__(self):
        self._plan = []

    def reset(self, task: sim.TaskSpec, scene: sim.Scene) -> None:
        self._plan = sim.expert_demo(scene, task)

    def predict_action(self, observations, instruction):
        a = self._plan[len(observations) - 1]
        q = canonical_quaternion(a.quaternion)
        return Action(tuple(a.position), tuple(q), float(a.open)), {"finite": True, "degenerate": False}


@dataclass
class Outcome:
    task: str
    variation: int
    seed: int
    success: bool
    steps: int
    flag: str = ""
    trajectory: list = field(default_factory=list)  # executed action vectors

    def record(self) -> dict:
        return {"task": self.task, "variation": self.variation, "seed": self.seed,
                "success": self.success, "steps": self.steps, "flag": self.flag}


def rollout(policy, task: sim.TaskSpec, seed: int, rig: sim.CameraRig | None = None) -> Outcome:
    """Render, act, step until success or T_max steps; history is the policy's own observations."""
    if isinstance(policy, Checkpoint):
        policy = policy.build_policy()
    cfg = getattr(policy, "config", None)
    if cfg is not None and task.task_id >= cfg.n_tasks:
        raise EvalError(f"policy covers {cfg.n_tasks} tasks, {task.task_name} has id {task.task_id}")
    image_size = cfg.image_size if cfg is not None else (32, 32)
    rig = rig or sim.default_rig(tuple(image_size))
    scene = sim.make_scene(task, seed, tuple(image_size))
    if hasattr(policy, "reset"):
        policy.reset(task, scene)
    instruction = episode_instruction(task, seed)
    out = Outcome(task.task_name, task.variation_id, int(seed), False, 0)
    history = []
    for t in range(sim.T_MAX):
        history.append(sim.render(scene, rig))
        action, info = policy.predict_action(history, instruction)
        vec = action.vector()
        out.trajectory.append(vec)
        out.steps = t + 1
        if not info.get("finite", True) or not np.all(np.isfinite(vec)):
            out.flag = f"non-finite action at step {t + 1}"
            return out
        try:
            scene = sim.step(scene, action)
        except sim.SimError as exc:
            out.flag = f"invalid action at step {t + 1}: {exc}"
            return out
        if sim.check_success(scene, task):
            out.success = True
            return out
    return out


@dataclass
class EvalReport:
    seed: int
    config_hash: str = ""
    checkpoint_hash: str = ""
    outcomes: dict = field(default_factory=dict)  # split -> list[Outcome]
    version: int = REPORT_VERSION

    def rows(self) -> list:
        """Per (task, split) aggregates; success_rate = successes / episodes."""
        out = []
        for split, items in self.outcomes.items():
            for task in sorted({o.task for o in items}):
                sel = [o for o in items if o.task == task]
                wins = sum(o.success for o in sel)
                out.append({"task": task, "split": split, "episodes": len(sel), "successes": wins,
                            "success_rate": wins / len(sel)})
        return out

    def success_rate(self, split: str) -> float:
        items = self.outcomes.get(split, [])
        return sum(o.success for o in items) / len(items) if items else float("nan")

    def check_splits(self) -> None:
        keys = {s: {(o.task, o.variation) for o in v} for s, v in self.outcomes.items()}
        if "seen" in keys and "unseen" in keys and keys["seen"] & keys["unseen"]:
            raise EvalError(f"variations in both splits: {sorted(keys['seen'] & keys['unseen'])}")

    def to_dict(self) -> dict:
        self.check_splits()
        return {
            "format": "mvpolicy-eval-report",
            "version": self.version,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "checkpoint_hash": self.checkpoint_hash,
            "results": self.rows(),
            "episodes": {s: [o.record() for o in v] for s, v in self.outcomes.items()},
        }

    def write(self, path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(json.dumps(self.to_dict(), indent=1) + "\n")
        return p

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        if d.get("version") != REPORT_VERSION:
            raise EvalError(f"{path}: report version {d.get('version')} != {REPORT_VERSION}")
        outcomes = {s: [Outcome(**r) for r in v] for s, v in d["episodes"].items()}
        return cls(d["seed"], d["config_hash"], d["checkpoint_hash"], outcomes)

    def table(self) -> str:
        lines = [f"{'task':<14} {'split':<7} {'episodes':>8} {'success':>8}"]
        for r in self.rows():
            lines.append(f"{r['task']:<14} {r['split']:<7} {r['episodes']:>8d} {r['success_rate']:>8.3f}")
        return "\n".join(lines)


def evaluate(policy, splits: dict, n_episodes: int = 100, seed: int = 0, out_path=None,
             rig: sim.CameraRig | None = None, echo: bool = False) -> EvalReport:
    """Roll out ``n_episodes`` per split, cycling through that split's TaskSpecs.

    ``splits`` maps a split name ("seen"/"unseen") to a list of TaskSpecs.
    """
    ckpt_hash = cfg_hash = ""
    if isinstance(policy, Checkpoint):
        ckpt_hash, cfg_hash = policy.param_hash(), policy.config_hash()
        policy = policy.build_policy()
    elif isinstance(policy, Policy):
        cfg_hash = policy.config.digest()
    report = EvalReport(seed, cfg_hash, ckpt_hash)
    for split, specs in splits.items():
        specs = list(specs)
        items = []
        if n_episodes and not specs:
            raise EvalError(f"split {split!r} has no task variations")
        for i in range(n_episodes):
            task = specs[i % len(specs)]
            items.append(rollout(policy, task, rollout_seed(seed, task, i), rig))
        report.outcomes[split] = items
    report.check_splits()
    if out_path is not None:
        report.write(out_path)
    if echo:
        print(report.table())
    return report


def manifest_splits(manifest: DatasetManifest, splits: Iterable[str] = ("seen", "unseen")) -> dict:
    return {s: manifest.task_specs(s) for s in splits if manifest.task_specs(s)}


# ---------------------------------------------------------------- ablations

_BASE_R = dict(token_mode="channel", attn_mode="self", n_layers=2, use_pcd=False,
               use_gripper_map=False, history=False, mask_obs=False)

VARIANTS = {
    "R1": dict(_BASE_R, token_mode="none", n_layers=0),
    "R2": dict(_BASE_R),
    "R3": dict(_BASE_R, use_pcd=True),
    "R4": dict(_BASE_R, use_pcd=True, use_gripper_map=True),
    "R5": dict(_BASE_R, use_pcd=True, use_gripper_map=True, history=True),
    "R6": dict(_BASE_R, use_pcd=True, use_gripper_map=True, history=True, mask_obs=True),
    "R7": dict(_BASE_R, use_pcd=True, use_gripper_map=True, history=True, mask_obs=True,
               token_mode="patch"),
    "R8": dict(token_mode="patch", attn_mode="cross", n_layers=2, use_pcd=True,
               use_gripper_map=True, history=True, mask_obs=True),
    "no_hist": dict(history=False),
    "one_view": {},  # expanded per camera
}


def variant_configs(base: PolicyConfig, variant: str) -> list:
    """Policy configs a variant trains; one_view yields one per camera of ``base``."""
    if variant not in VARIANTS:
        raise EvalError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    if variant == "one_view":
        return [dataclasses.replace(base, cameras=(k,)) for k in base.cameras]
    return [dataclasses.replace(base, **VARIANTS[variant])]


def config_diff(a: PolicyConfig, b: PolicyConfig) -> dict:
    da, db = a.to_dict(), b.to_dict()
    return {k: (da[k], db[k]) for k in da if da[k] != db[k]}


@dataclass
class AblationRow:
    variant: str
    complete: bool
    success: dict  # split -> rate (best sub-run for one_view)
    detail: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def run_ablation(dataset: DatasetManifest, base: PolicyConfig, train_config: TrainConfig,
                 variants: Sequence[str], budget: float = 0.0, n_episodes: int = 100,
                 seed: int = 0, out_dir=None) -> list:
    """Train and evaluate each variant on identical data, seed and iteration budget.

    ``budget`` is wall-clock seconds for the whole table (0 = unlimited); variants
    that cannot finish are returned with ``complete=False``.
    """
    for v in variants:
        if v not in VARIANTS:
            raise EvalError(f"unknown variant {v!r}; choose from {sorted(VARIANTS)}")
    if not dataset.split("seen"):
        raise EvalError("empty dataset")
    episodes = dataset.episodes("seen")
    splits = manifest_splits(dataset)
    deadline = time.monotonic() + budget if budget else None
    rows = []
    for v in variants:
        row = AblationRow(v, True, {})
        for cfg in variant_configs(base, v):
            if deadline is not None and time.monotonic() > deadline:
                row.complete = False
                break
            sub = Path(out_dir) / v / "".join(map(str, cfg.cameras)) if out_dir else None
            res = train(episodes, cfg, train_config, out_dir=sub, deadline=deadline)
            if not res.complete:
                row.complete = False
                break
            rep = evaluate(res.checkpoint, splits, n_episodes, seed,
                           out_path=sub / "eval.json" if sub else None)
            rates = {s: rep.success_rate(s) for s in rep.outcomes}
            row.detail.append({"cameras": list(cfg.cameras), "success": rates,
                               "checkpoint": res.checkpoint.param_hash()})
        if row.detail:
            best = max(row.detail, key=lambda d: d["success"].get("seen", 0.0))
            row.success = dict(best["success"])
        rows.append(row)
        log.info("variant %s complete=%s success=%s", v, row.complete, row.success)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "ablation.json").write_text(
            json.dumps({"version": REPORT_VERSION, "rows": [r.to_dict() for r in rows]}, indent=1))
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> str:
    splits = sorted({s for r in rows for s in r.success}) or ["seen"]
    lines = [f"{'variant':<9}" + "".join(f" {s:>8}" for s in splits) + "  status"]
    for r in rows:
        vals = "".join(f" {r.success[s]:>8.3f}" if s in r.success else f" {'-':>8}" for s in splits)
        lines.append(f"{r.variant:<9}{vals}  {'ok' if r.complete else 'incomplete'}")
    return "\n".join(lines)
