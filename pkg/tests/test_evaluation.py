import math

import numpy as np
import pytest
import torch

from mvpolicy import sim
from mvpolicy.episodes import build_dataset
from mvpolicy.evaluation import (
    VARIANTS,
    EvalError,
    EvalReport,
    ExpertPolicy,
    ablation_table,
    chance_success,
    config_diff,
    evaluate,
    rollout,
    rollout_seed,
    run_ablation,
    variant_configs,
)
from mvpolicy.policy import Policy, PolicyConfig
from mvpolicy.training import TrainConfig, train

ALL_SPECS = [sim.TaskSpec("reach_target", 3), sim.TaskSpec("push_buttons", 40),
             sim.TaskSpec("tower", 120), sim.TaskSpec("push_buttons", 16, 2, True),
             sim.TaskSpec("reach_target", 0, occluded=True)]


def test_expert_concordance_both_splits():
    rep = evaluate(ExpertPolicy(), {"seen": ALL_SPECS[:3], "unseen": ALL_SPECS[3:]}, 30, 0)
    assert rep.success_rate("seen") == 1.0 and rep.success_rate("unseen") == 1.0
    for r in rep.rows():
        assert r["success_rate"] == r["successes"] / r["episodes"]
    assert sum(r["episodes"] for r in rep.rows()) == 60
    assert sum(r["successes"] for r in rep.rows()) == sum(o.success for v in rep.outcomes.values() for o in v)


def test_zero_episodes():
    rep = evaluate(ExpertPolicy(), {"seen": ALL_SPECS}, 0, 0)
    assert rep.rows() == [] and rep.outcomes == {"seen": []}


def test_split_hygiene():
    with pytest.raises(EvalError):
        evaluate(ExpertPolicy(), {"seen": ALL_SPECS[:1], "unseen": ALL_SPECS[:1]}, 2, 0)


def test_report_round_trip(tmp_path):
    rep = evaluate(ExpertPolicy(), {"seen": ALL_SPECS[:2]}, 4, 7, out_path=tmp_path / "r.json")
    back = EvalReport.load(tmp_path / "r.json")
    assert back.rows() == rep.rows() and back.seed == 7
    assert "push_buttons" in back.table()
    # every outcome is replayable from its recorded seed
    for o in back.outcomes["seen"]:
        spec = next(s for s in ALL_SPECS if (s.task_name, s.variation_id) == (o.task, o.variation))
        assert rollout(ExpertPolicy(), spec, o.seed).success == o.success


def test_rollout_seeds_differ_from_training_seeds():
    from mvpolicy.episodes import episode_seed

    t = ALL_SPECS[1]
    train_seeds = {episode_seed(0, t, i) for i in range(500)}
    assert not train_seeds & {rollout_seed(0, t, i) for i in range(500)}


def test_chance_success():
    assert chance_success(2, 2) == 0.5
    assert chance_success(3, 2) == pytest.approx(1 / 6)
    assert chance_success(3, 1) == pytest.approx(1 / 3)
    with pytest.raises(ValueError):
        chance_success(2, 3)


def _binomial_upper(n, p, alpha=0.01):
    """Smallest k with P[X >= k] <= alpha for X ~ Binomial(n, p)."""
    tail = 0.0
    for k in range(n, -1, -1):
        tail += math.comb(n, k) * p**k * (1 - p) ** (n - k)
        if tail > alpha:
            return k + 1
    return 0


def test_random_policy_not_above_chance():
    torch.manual_seed(0)
    p = Policy(PolicyConfig(d=16)).eval()
    specs = [sim.TaskSpec("push_buttons", v, 2) for v in (0, 16)]
    rep = evaluate(p, {"seen": specs}, 100, 0)
    wins = sum(o.success for o in rep.outcomes["seen"])
    assert wins < _binomial_upper(100, chance_success(2, 2))


def test_rollout_deterministic():
    torch.manual_seed(1)
    p = Policy(PolicyConfig(d=16)).eval()
    a = rollout(p, ALL_SPECS[1], 123)
    b = rollout(p, ALL_SPECS[1], 123)
    assert a.record() == b.record()
    assert all(np.array_equal(x, y) for x, y in zip(a.trajectory, b.trajectory))


def test_non_finite_action_is_flagged_failure():
    p = Policy(PolicyConfig(d=16)).eval()
    with torch.no_grad():
        p.offsets.fill_(float("nan"))
    out = rollout(p, ALL_SPECS[0], 5)
    assert not out.success and "non-finite" in out.flag and out.steps == 1


def test_rollout_checks_task_coverage():
    p = Policy(PolicyConfig(d=16, n_tasks=1)).eval()
    with pytest.raises(EvalError):
        rollout(p, sim.TaskSpec("tower", 0), 0)


def test_variant_switches():
    base = PolicyConfig()
    r5, r8 = variant_configs(base, "R5")[0], variant_configs(base, "R8")[0]
    diff = config_diff(r5, r8)
    assert diff == {"token_mode": ("channel", "patch"), "attn_mode": ("self", "cross"),
                    "mask_obs": (False, True)}
    r1 = variant_configs(base, "R1")[0]
    assert r1.n_layers == 0 and r1.token_mode == "none"
    assert Policy(r1).transformer is None
    assert variant_configs(base, "R8")[0] == base
    assert [c.cameras for c in variant_configs(base, "one_view")] == [(0,), (1,), (2,)]
    assert not variant_configs(base, "no_hist")[0].history
    # R-series adds one switch at a time
    order = ["R2", "R3", "R4", "R5", "R6", "R7", "R8"]
    for a, b in zip(order, order[1:]):
        n = len(config_diff(variant_configs(base, a)[0], variant_configs(base, b)[0]))
        assert n >= 1
    assert set(VARIANTS) == {f"R{i}" for i in range(1, 9)} | {"no_hist", "one_view"}
    with pytest.raises(EvalError):
        variant_configs(base, "R9")


@pytest.fixture(scope="module")
def tiny_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("abl")
    return build_dataset([sim.TaskSpec("reach_target", 0)], 2, 0, root / "data",
                         unseen=[sim.TaskSpec("reach_target", 1)])


def test_ablation_repeatable_and_table(tiny_data, tmp_path):
    tc = TrainConfig(iterations=2, batch_size=2)
    base = PolicyConfig(d=16)
    a = run_ablation(tiny_data, base, tc, ["R1", "no_hist"], n_episodes=2, out_dir=tmp_path)
    b = run_ablation(tiny_data, base, tc, ["R1", "no_hist"], n_episodes=2)
    assert [r.to_dict() for r in a] == [r.to_dict() for r in b]
    assert set(a[0].success) == {"seen", "unseen"}
    assert "incomplete" not in ablation_table(a)
    assert (tmp_path / "ablation.json").exists()


def test_ablation_budget_exhausted(tiny_data):
    rows = run_ablation(tiny_data, PolicyConfig(d=16), TrainConfig(iterations=10**6, batch_size=2),
                        ["R8", "R1"], budget=1.0, n_episodes=1)
    assert [r.complete for r in rows] == [False, False]
    assert "incomplete" in ablation_table(rows)


def test_ablation_rejects_bad_input(tiny_data, tmp_path):
    with pytest.raises(EvalError):
        run_ablation(tiny_data, PolicyConfig(), TrainConfig(), ["R0"])
    from mvpolicy.episodes import DatasetManifest

    with pytest.raises(EvalError, match="empty dataset"):
        run_ablation(DatasetManifest(tmp_path), PolicyConfig(), TrainConfig(), ["R1"])


def test_checkpoint_evaluation_records_hashes(tiny_data):
    res = train(tiny_data, PolicyConfig(d=16), TrainConfig(iterations=1, batch_size=1))
    rep = evaluate(res.checkpoint, {"seen": [sim.TaskSpec("reach_target", 0)]}, 2, 0)
    assert rep.checkpoint_hash == res.checkpoint.param_hash()
    assert rep.config_hash == res.checkpoint.config_hash()
