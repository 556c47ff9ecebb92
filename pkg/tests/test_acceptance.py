"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Criteria 4-7 train policies and take minutes of CPU time each (marked slow).
Run just the gate with ``pytest tests/test_acceptance.py -s``.
"""
import dataclasses
import time

import numpy as np
import pytest
import torch

from mvpolicy import sim
from mvpolicy.episodes import Action, build_dataset, episode_seed, generate_episode, read_episode, write_episode
from mvpolicy.evaluation import ExpertPolicy, chance_success, evaluate
from mvpolicy.heads import expected_position, normalize_heatmaps, task_distribution
from mvpolicy.instructions import mean_language_embedding
from mvpolicy.policy import Policy, PolicyConfig, collate
from mvpolicy.training import Checkpoint, TrainConfig, bc_loss, train
from mvpolicy.transformer import attention
from mvpolicy.visual import UNetEncoder, fuse_pointcloud

from oracles import (attention_loop, bc_loss_loop, block_mean_loop, central_difference_check,
                     expected_position_loop, mean_pool_loop, softmax_loop)


def report(record, n, ok, detail, t0):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'}  {detail}  ({time.time() - t0:.0f}s)"
    print("\n" + line, flush=True)
    record("criterion", line)
    assert ok, line


def push_order(task, seed, trajectory):
    """Colors pressed when the rollout's actions are replayed on its scene."""
    scene = sim.make_scene(task, seed)
    for vec in trajectory:
        try:
            scene = sim.step(scene, Action.from_vector(vec))
        except sim.SimError:
            break
    return tuple(scene.pressed)


# ---------------------------------------------------------------- 1


def test_criterion_1_oracle_equivalence(record_property):
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst = {"attention": 0.0, "expected_position": 0.0, "bc_loss": 0.0, "mean_pool": 0.0}
    for _ in range(100):
        a, b, d, h = rng.integers(1, 6), rng.integers(1, 7), 8, int(rng.choice([1, 2, 4]))
        q, k, v = rng.standard_normal((a, d)), rng.standard_normal((b, d)), rng.standard_normal((b, d))
        wq, wk, wv = (rng.standard_normal((d, d)) / 3 for _ in range(3))
        mask = rng.random((a, b)) < 0.7
        mask[:, 0] = True
        got = attention(*(torch.tensor(x) for x in (q, k, v, wq, wk, wv)), mask=torch.tensor(mask), n_heads=h)
        worst["attention"] = max(worst["attention"],
                                 np.abs(got.numpy() - attention_loop(q, k, v, wq, wk, wv, h, mask)).max())

        K, H, W = rng.integers(1, 4), rng.integers(1, 6), rng.integers(1, 6)
        heat = normalize_heatmaps(torch.tensor(rng.standard_normal((K, H, W)))).numpy()
        pcd = rng.standard_normal((K, H, W, 3))
        got = expected_position(torch.tensor(heat), torch.tensor(pcd)).numpy()
        worst["expected_position"] = max(worst["expected_position"],
                                         np.abs(got - expected_position_loop(heat, pcd)).max())

        B, T = rng.integers(1, 4), rng.integers(1, 5)
        pred, tgt = rng.standard_normal((B, T, 8)), rng.standard_normal((B, T, 8))
        prob = rng.random((B, 3)) + 0.05
        prob /= prob.sum(1, keepdims=True)
        task = rng.integers(0, 3, B)
        got, _ = bc_loss(torch.tensor(pred), torch.tensor(tgt), torch.tensor(prob), torch.tensor(task))
        worst["bc_loss"] = max(worst["bc_loss"], abs(got.item() - bc_loss_loop(pred, tgt, prob, task)))

        n = rng.integers(1, 12)
        toks = rng.standard_normal((n, 16))
        got = mean_language_embedding(torch.tensor(toks)).numpy()
        err = np.abs(got - mean_pool_loop(toks, n)).max()
        s = 16
        cloud = rng.standard_normal((3, s * rng.integers(1, 3), s * rng.integers(1, 3)))
        fmap = torch.zeros(1, 2, cloud.shape[1] // s, cloud.shape[2] // s, dtype=torch.float64)
        pooled = fuse_pointcloud(fmap, torch.tensor(cloud)[None])[0, 2:].numpy()
        err = max(err, np.abs(pooled - block_mean_loop(cloud, s)).max())
        worst["mean_pool"] = max(worst["mean_pool"], err)
    ok = all(v < 1e-6 for v in worst.values())
    report(record_property, 1, ok, "max abs error over 100 instances: " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()), t0)


# ---------------------------------------------------------------- 2


def test_criterion_2_gradients(record_property):
    t0 = time.time()
    torch.manual_seed(0)
    p = Policy(PolicyConfig(d=16, cameras=(0, 1))).double()
    ep = generate_episode(sim.TaskSpec("push_buttons", 3), 11)
    assert len(ep) == 2
    b = collate([ep.observations], [p.encode_text(ep.instruction)], [ep.actions], [ep.task_id],
                dtype=torch.float64)
    b = dataclasses.replace(b, rgb=b.rgb[:, :, :2], pcd=b.pcd[:, :, :2], gripper_map=b.gripper_map[:, :, :2])
    mask = torch.zeros(1, 2, p.tokens_per_step, dtype=torch.bool)
    mask[0, 1, ::2] = True

    def loss():
        out = p(b, mask)
        return bc_loss(out["action"], b.target, out["task_prob"], b.task)[0]

    groups = {}
    for name, prm in p.named_parameters():
        groups.setdefault(name.split(".")[0], []).append((name, prm))
    worst = {}
    for g, params in groups.items():
        worst[g] = central_difference_check(loss, params, eps=1e-6, max_entries=6,
                                            rng=np.random.default_rng(len(worst)))
    bad = {g: w for g, w in worst.items() if w[0] >= 1e-3}
    detail = f"{len(groups)} parameter groups, worst relative error {max(w[0] for w in worst.values()):.1e}"
    report(record_property, 2, not bad, detail + (f"; failing {bad}" if bad else ""), t0)


# ---------------------------------------------------------------- 3


def test_criterion_3_shapes_and_normalization(record_property):
    t0 = time.time()
    problems = []
    enc = UNetEncoder()
    for H in (32, 64, 128):
        for W in (32, 64, 128):
            fmap, _ = enc(torch.zeros(1, 4, H, W))
            if tuple(fmap.shape[1:]) != (16, H // 16, W // 16):
                problems.append(f"encoder {H}x{W} -> {tuple(fmap.shape)}")
    for size in ((32, 32), (64, 64), (32, 64)):
        for K in (1, 3):
            cams = tuple(range(K))
            hv, wv = size[0] // 16, size[1] // 16
            if Policy(PolicyConfig(d=16, image_size=size, cameras=cams)).tokens_per_step != K * hv * wv:
                problems.append(f"patch tokens {size} K={K}")
            if Policy(PolicyConfig(d=16, image_size=size, cameras=cams, token_mode="channel",
                                   attn_mode="self")).tokens_per_step != K * 19:
                problems.append(f"channel tokens {size} K={K}")

    torch.manual_seed(0)
    p = Policy(PolicyConfig(d=16)).double()
    ep = generate_episode(sim.TaskSpec("push_buttons", 40, return_home=True), 2)
    b = collate([ep.observations], [p.encode_text(ep.instruction)], dtype=torch.float64)
    out = p(b)
    dev = (out["heatmap"].sum((-3, -2, -1)) - 1).abs().max().item()
    dev = max(dev, (out["task_prob"].sum(-1) - 1).abs().max().item())
    rng = np.random.default_rng(0)
    for _ in range(100):
        x = rng.standard_normal(rng.integers(2, 40)) * 10
        dev = max(dev, np.abs(normalize_heatmaps(torch.tensor(x).reshape(1, 1, -1)).numpy().ravel()
                              - softmax_loop(list(x))).max())
        _, w = attention(*(torch.tensor(rng.standard_normal((n, 8))) for n in (3, 5, 5)),
                         *(torch.eye(8, dtype=torch.float64),) * 3, n_heads=2, return_weights=True)
        dev = max(dev, (w.sum(-1) - 1).abs().max().item())
        m = task_distribution(torch.tensor(rng.standard_normal(8)), torch.tensor(rng.standard_normal((3, 8))))
        dev = max(dev, abs(m.sum().item() - 1))
    if dev > 1e-6:
        problems.append(f"softmax normalization off by {dev:.1e}")
    report(record_property, 3, not problems, "; ".join(problems) or f"shapes ok, max normalization error {dev:.1e}", t0)


# ---------------------------------------------------------------- 4


@pytest.mark.slow
def test_criterion_4_overfit_reach(tmp_path, record_property):
    t0 = time.time()
    task = sim.TaskSpec("reach_target", 0)
    data = build_dataset([task], 50, 0, tmp_path / "data")
    res = train(data, PolicyConfig(), TrainConfig(learning_rate=5e-5, iterations=2000, seed=0))
    rate = evaluate(res.policy.eval(), {"seen": [task]}, 100, 1).success_rate("seen")
    report(record_property, 4, rate >= 0.95, f"reach_target success {rate:.2f} after {res.checkpoint.iteration} iterations", t0)


# ---------------------------------------------------------------- 5


@pytest.mark.slow
def test_criterion_5_history(record_property):
    t0 = time.time()
    specs = [sim.TaskSpec("push_buttons", sim.variation_of("push_buttons", order), n_objects=2, return_home=True)
             for order in (("red", "green"), ("green", "red"))]
    eps = [generate_episode(t, episode_seed(0, t, i)) for t in specs for i in range(50)]
    cfg = TrainConfig(learning_rate=1e-3, iterations=3000, seed=0)
    rates, second = {}, {}
    for name, pcfg in (("full", PolicyConfig()), ("no_hist", PolicyConfig(history=False))):
        policy = train(eps, pcfg, cfg).policy.eval()
        rep = evaluate(policy, {"seen": specs}, 100, 1)
        rates[name] = rep.success_rate("seen")
        hits = 0
        for o in rep.outcomes["seen"]:
            t = next(s for s in specs if s.variation_id == o.variation)
            pressed = push_order(t, o.seed, o.trajectory)
            hits += len(pressed) > 1 and pressed[1] == t.goal[1]
        second[name] = hits / len(rep.outcomes["seen"])
    chance = chance_success(2, 2)
    ok = rates["full"] - rates["no_hist"] >= 0.20 and second["no_hist"] <= chance + 0.15
    report(record_property, 5, ok, f"full {rates['full']:.2f}, no history {rates['no_hist']:.2f}; "
                  f"no-history second press correct {second['no_hist']:.2f} (chance {chance:.2f})", t0)


# ---------------------------------------------------------------- 6


@pytest.mark.slow
def test_criterion_6_multi_view(record_property):
    t0 = time.time()
    specs = [sim.TaskSpec("reach_target", v, occluded=True) for v in range(3)]
    eps = [generate_episode(t, episode_seed(0, t, i)) for t in specs for i in range(30)]
    cfg = TrainConfig(learning_rate=1e-3, iterations=1000, seed=0)
    rates = {}
    for cams in ((0, 1, 2), (0,), (1,), (2,)):
        policy = train(eps, PolicyConfig(cameras=cams), cfg).policy.eval()
        rates[cams] = evaluate(policy, {"seen": specs}, 100, 1).success_rate("seen")
    best_single = max(rates[(k,)] for k in range(3))
    ok = rates[(0, 1, 2)] - best_single >= 0.10
    singles = ", ".join(f"{sim.CAMERA_NAMES[k]} {rates[(k,)]:.2f}" for k in range(3))
    report(record_property, 6, ok, f"3 cameras {rates[(0, 1, 2)]:.2f}; single camera {singles}", t0)


# ---------------------------------------------------------------- 7


@pytest.mark.slow
def test_criterion_7_instruction_generalization(record_property):
    t0 = time.time()
    seen = [sim.TaskSpec("push_buttons", v) for v in range(10)]
    unseen = [sim.TaskSpec("push_buttons", v) for v in range(10, 20)]
    eps = [generate_episode(t, episode_seed(0, t, i)) for t in seen for i in range(10)]
    cfg = TrainConfig(learning_rate=1e-3, iterations=4000, seed=0)
    rates = {}
    for enc in ("hash", "onehot"):
        policy = train(eps, PolicyConfig(text_encoder=enc), cfg).policy.eval()
        rep = evaluate(policy, {"seen": seen, "unseen": unseen}, 100, 1)
        rates[enc] = (rep.success_rate("seen"), rep.success_rate("unseen"))
    chance = chance_success(3, 2)
    ok = (rates["hash"][0] >= 0.60 and rates["hash"][1] > chance
          and rates["onehot"][1] <= chance + 0.10 and rates["onehot"][0] >= 0.60)
    report(record_property, 7, ok, f"seen/unseen: text encoder {rates['hash'][0]:.2f}/{rates['hash'][1]:.2f}, "
                  f"one-hot {rates['onehot'][0]:.2f}/{rates['onehot'][1]:.2f} (chance {chance:.3f})", t0)


# ---------------------------------------------------------------- 8


def test_criterion_8_determinism_and_persistence(tmp_path, record_property):
    t0 = time.time()
    problems = []
    eps = [generate_episode(sim.TaskSpec("push_buttons", v), s) for v in range(3) for s in range(3)]
    cfg = TrainConfig(iterations=10, log_every=1, batch_size=4, seed=5)
    runs = [train(eps, PolicyConfig(d=32), cfg) for _ in range(2)]
    losses = [[r["total"] for r in run.log] for run in runs]
    if len(losses[0]) != 10 or losses[0] != losses[1]:
        problems.append("logged losses differ between runs")

    for i, e in enumerate(eps[:3] + [generate_episode(sim.TaskSpec("tower", 7), 1)]):
        path = tmp_path / f"{i}.ep"
        write_episode(e, path)
        back = read_episode(path)
        write_episode(back, tmp_path / f"{i}b.ep")
        if back != e or path.read_bytes() != (tmp_path / f"{i}b.ep").read_bytes():
            problems.append(f"episode {i} round trip")

    ck = runs[0].checkpoint
    ck.save(tmp_path / "a.ckpt")
    back = Checkpoint.load(tmp_path / "a.ckpt")
    back.save(tmp_path / "b.ckpt")
    same = all(torch.equal(back.params[k], v) for k, v in ck.params.items())
    if not same or (tmp_path / "a.ckpt").read_bytes() != (tmp_path / "b.ckpt").read_bytes():
        problems.append("checkpoint round trip")

    specs = [sim.TaskSpec(name, v) for name in sim.TASKS for v in (0, 5)]
    specs += [sim.TaskSpec("push_buttons", 16, 2, True), sim.TaskSpec("reach_target", 2, occluded=True)]
    rep = evaluate(ExpertPolicy(), {"seen": specs}, 10 * len(specs), 3)
    if rep.success_rate("seen") != 1.0:
        problems.append(f"expert success {rep.success_rate('seen')}")
    report(record_property, 8, not problems, "; ".join(problems) or
           f"10 losses bit-identical, episode/checkpoint bytes identical, expert {len(rep.outcomes['seen'])}/"
           f"{len(rep.outcomes['seen'])}", t0)
