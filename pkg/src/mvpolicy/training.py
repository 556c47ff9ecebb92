"""Behavioral cloning: loss, observation masking, optimization loop and checkpoints."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .episodes import DatasetManifest, Episode, augment
from .policy import Batch, Policy, PolicyConfig, collate

log = logging.getLogger(__name__)

CKPT_MAGIC = b"MVCKPT\x00\x01"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-5
    batch_size: int = 8
    iterations: int = 5000
    mask_prob: float = 0.1
    mask_fraction: float = 0.5
    seed: int = 0
    augment: bool = True
    jitter: float = 0.1
    crop_fraction: float = 7 / 8
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    log_every: int = 50
    checkpoint_every: int = 0  # 0: only the final checkpoint
    time_budget: float = 0.0  # seconds; 0 = unlimited

    def __post_init__(self):
        if not 0.0 <= self.mask_prob <= 1.0 or not 0.0 <= self.mask_fraction <= 1.0:
            raise ValueError("mask_prob and mask_fraction must lie in [0, 1]")
        if self.batch_size < 1 or self.iterations < 0 or self.log_every < 1:
            raise ValueError("batch_size and log_every must be positive, iterations >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------- loss


def bc_loss(pred: torch.Tensor, target: torch.Tensor, task_prob: torch.Tensor, task: torch.Tensor,
            valid: torch.Tensor | None = None) -> tuple[torch.Tensor, dict]:
    """Batch mean of [sum_t MSE(a_t, a*_t) + CE(Pr(m), m*)].

    pred/target: (B, T, 8) = position(3), quaternion(4), open(1); MSE averages
    the 8 components. Returns the total and its four additive components.
    """
    if pred.shape != target.shape:
        raise ValueError(f"prediction {tuple(pred.shape)} vs target {tuple(target.shape)}")
    B, T, D = pred.shape
    n_tasks = task_prob.shape[-1]
    if torch.any(task < 0) or torch.any(task >= n_tasks):
        raise ValueError(f"task id outside [0, {n_tasks})")
    if valid is None:
        valid = torch.ones(B, T, dtype=torch.bool)
    sq = (pred - target) ** 2 * valid[..., None].to(pred.dtype) / D
    parts = {
        "position": sq[..., :3].sum((1, 2)).mean(),
        "rotation": sq[..., 3:7].sum((1, 2)).mean(),
        "gripper": sq[..., 7:].sum((1, 2)).mean(),
        "ce": -torch.log(task_prob.gather(-1, task[:, None]).squeeze(-1)).mean(),
    }
    total = parts["position"] + parts["rotation"] + parts["gripper"] + parts["ce"]
    return total, parts


# ---------------------------------------------------------------- masking


def sample_token_mask(rng: np.random.Generator, samples: tuple, m: int, mask_prob: float,
                      mask_fraction: float) -> np.ndarray:
    """Boolean (*samples, m): for each sample, with prob ``mask_prob``, ceil(fraction*m) random tokens."""
    n = int(np.prod(samples))
    out = np.zeros((n, m), dtype=bool)
    k = math.ceil(mask_fraction * m)
    fire = rng.random(n) < mask_prob
    for i in np.flatnonzero(fire):
        out[i, rng.choice(m, size=k, replace=False)] = True
    return out.reshape(*samples, m)


def mask_current_observation(tokens: torch.Tensor, rng: np.random.Generator, mask_prob: float = 0.1,
                             mask_fraction: float = 0.5) -> torch.Tensor:
    """Zero a random subset of one step's (m, d) token vectors with probability ``mask_prob``."""
    mask = sample_token_mask(rng, (), tokens.shape[-2], mask_prob, mask_fraction)
    return tokens * torch.as_tensor(~mask, dtype=tokens.dtype)[:, None]


# ---------------------------------------------------------------- checkpoints


@dataclass
class Checkpoint:
    policy_config: PolicyConfig
    train_config: TrainConfig
    iteration: int
    params: dict  # name -> tensor
    optimizer: dict  # torch optimizer state_dict
    rng_state: dict
    meta: dict = field(default_factory=dict)

    def config_hash(self) -> str:
        blob = json.dumps([self.policy_config.to_dict(), self.train_config.to_dict()], sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].detach().cpu().numpy().tobytes())
        return h.hexdigest()[:16]

    def build_policy(self) -> Policy:
        p = Policy(self.policy_config)
        p.load_state_dict(self.params)
        if next(iter(self.params.values())).dtype == torch.float64:
            p.double()
        p.eval()
        return p

    def save(self, path) -> None:
        blobs, index, off = [], [], 0

        def add(name, t):
            nonlocal off
            a = t.detach().cpu().contiguous().numpy()
            a = a.astype(a.dtype.newbyteorder("<"))
            b = a.tobytes()
            index.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                          "offset": off, "nbytes": len(b)})
            blobs.append(b)
            off += len(b)

        for k, v in self.params.items():
            add(f"param/{k}", v)
        opt_state = {}
        for pid, st in self.optimizer["state"].items():
            scalars = {}
            for sk, sv in st.items():
                if torch.is_tensor(sv):
                    add(f"optim/{pid}/{sk}", sv)
                else:
                    scalars[sk] = sv
            opt_state[str(pid)] = scalars
        header = {
            "version": CKPT_VERSION,
            "iteration": self.iteration,
            "policy_config": self.policy_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "config_hash": self.config_hash(),
            "param_groups": self.optimizer["param_groups"],
            "optim_scalars": opt_state,
            "rng_state": self.rng_state,
            "meta": self.meta,
            "blobs": index,
        }
        hb = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as f:
            f.write(CKPT_MAGIC)
            f.write(struct.pack("<I", len(hb)))
            f.write(hb)
            f.write(b"".join(blobs))

    @classmethod
    def load(cls, path) -> "Checkpoint":
        data = Path(path).read_bytes()
        if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        pos = len(CKPT_MAGIC)
        (hlen,) = struct.unpack("<I", data[pos : pos + 4])
        pos += 4
        h = json.loads(data[pos : pos + hlen].decode("utf-8"))
        if h["version"] != CKPT_VERSION:
            raise ValueError(f"{path}: checkpoint version {h['version']} != {CKPT_VERSION}")
        payload = data[pos + hlen :]
        params, optim = {}, {}
        for b in h["blobs"]:
            if b["offset"] + b["nbytes"] > len(payload):
                raise ValueError(f"{path}: truncated checkpoint")
            a = np.frombuffer(payload, dtype=b["dtype"], count=int(np.prod(b["shape"], dtype=np.int64)),
                              offset=b["offset"]).reshape(b["shape"])
            t = torch.from_numpy(a.copy())
            kind, rest = b["name"].split("/", 1)
            if kind == "param":
                params[rest] = t
            else:
                pid, key = rest.split("/", 1)
                optim.setdefault(int(pid), {})[key] = t
        for pid, scalars in h["optim_scalars"].items():
            optim.setdefault(int(pid), {}).update(scalars)
        return cls(
            PolicyConfig.from_dict(h["policy_config"]),
            TrainConfig.from_dict(h["train_config"]),
            h["iteration"],
            params,
            {"state": optim, "param_groups": h["param_groups"]},
            h["rng_state"],
            h["meta"],
        )


# ---------------------------------------------------------------- training loop


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    policy: Policy
    complete: bool = True


def _episodes(dataset) -> list:
    if isinstance(dataset, DatasetManifest):
        return dataset.episodes("seen")
    return list(dataset)


def dataset_meta(dataset) -> dict:
    if isinstance(dataset, DatasetManifest):
        seen = sorted({(r.task, r.variation) for r in dataset.rows if r.split == "seen"})
        unseen = sorted({(r.task, r.variation) for r in dataset.rows if r.split == "unseen"})
        return {"seen": [list(x) for x in seen], "unseen": [list(x) for x in unseen],
                "manifest": dataset.digest()}
    eps = list(dataset)
    seen = sorted({(e.task_name, e.variation_id) for e in eps})
    return {"seen": [list(x) for x in seen], "unseen": []}


class Trainer:
    """Owns the policy parameters, optimizer and sampling RNG for one run."""

    def __init__(self, episodes: Sequence[Episode], policy_config: PolicyConfig,
                 train_config: TrainConfig, dtype=torch.float32, meta: dict | None = None):
        if not episodes:
            raise TrainingError("empty dataset")
        self.episodes = list(episodes)
        self.pcfg, self.tcfg = policy_config, train_config
        torch.manual_seed(train_config.seed)
        self.policy = Policy(policy_config).to(dtype)
        self.dtype = dtype
        self.optimizer = torch.optim.Adam(
            self.policy.parameters(), lr=train_config.learning_rate,
            betas=(train_config.beta1, train_config.beta2), eps=train_config.eps,
        )
        self.rng = np.random.default_rng(train_config.seed)
        self.iteration = 0
        self.meta = dict(meta or {})
        self._text = {}
        self.meta.setdefault("text_encoder_hash", self.encoder_hash())

    def encoder_hash(self) -> str:
        enc = self.policy.text_encoder
        return enc.state_hash() if hasattr(enc, "state_hash") else type(enc).__name__

    def _raw(self, text: str) -> np.ndarray:
        if text not in self._text:
            self._text[text] = self.policy.encode_text(text)
        return self._text[text]

    def make_batch(self, idx: Sequence[int], augmented: bool) -> Batch:
        cams = list(self.pcfg.cameras)
        obs = []
        for i in idx:
            ep = self.episodes[i]
            seq = [o.cameras(cams) for o in ep.observations]
            if augmented:
                seq = [augment(o, self.rng, self.tcfg.jitter, self.tcfg.crop_fraction) for o in seq]
            obs.append(seq)
        eps = [self.episodes[i] for i in idx]
        return collate(obs, [self._raw(e.instruction) for e in eps], [e.actions for e in eps],
                       [e.task_id for e in eps], dtype=self.dtype,
                       ids=[(e.task_name, e.variation_id, e.seed) for e in eps])

    def loss(self, batch: Batch, token_mask=None):
        out = self.policy(batch, token_mask)
        return bc_loss(out["action"], batch.target, out["task_prob"], batch.task, batch.step_valid)

    def step(self) -> dict:
        tc = self.tcfg
        idx = self.rng.integers(0, len(self.episodes), size=tc.batch_size)
        batch = self.make_batch(idx, tc.augment)
        token_mask = None
        if self.pcfg.mask_obs and tc.mask_prob > 0 and self.policy.tokens_per_step:
            B, T = batch.shape
            token_mask = torch.as_tensor(
                sample_token_mask(self.rng, (B, T), self.policy.tokens_per_step, tc.mask_prob,
                                  tc.mask_fraction))
        self.policy.train()
        total, parts = self.loss(batch, token_mask)
        if not torch.isfinite(total):
            raise TrainingError(f"non-finite loss at iteration {self.iteration + 1}; episodes {batch.ids}")
        self.optimizer.zero_grad(set_to_none=True)
        total.backward()
        self.optimizer.step()
        self.iteration += 1
        return {"iteration": self.iteration, "total": total.item(),
                **{k: v.item() for k, v in parts.items()}}

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(
            self.pcfg, self.tcfg, self.iteration,
            {k: v.detach().clone() for k, v in self.policy.state_dict().items()},
            _clone_optim(self.optimizer.state_dict()),
            self.rng.bit_generator.state, dict(self.meta),
        )

    def restore(self, ckpt: Checkpoint) -> None:
        self.policy.load_state_dict(ckpt.params)
        self.optimizer.load_state_dict(_clone_optim(ckpt.optimizer))
        self.rng.bit_generator.state = ckpt.rng_state
        self.iteration = ckpt.iteration

    def run(self, iterations: int | None = None, out_dir=None, deadline: float | None = None):
        tc = self.tcfg
        target = tc.iterations if iterations is None else iterations
        logs, complete = [], True
        out = Path(out_dir) if out_dir else None
        metrics = None
        if out:
            out.mkdir(parents=True, exist_ok=True)
            metrics = open(out / "metrics.jsonl", "a")
        try:
            while self.iteration < target:
                if deadline is not None and time.monotonic() > deadline:
                    complete = False
                    break
                rec = self.step()
                if rec["iteration"] % tc.log_every == 0 or rec["iteration"] == 1:
                    logs.append(rec)
                    if metrics:
                        metrics.write(json.dumps(rec) + "\n")
                        metrics.flush()
                    log.info("iter %(iteration)d total %(total).5f pos %(position).6f "
                             "rot %(rotation).5f grip %(gripper).5f ce %(ce).5f", rec)
                if out and tc.checkpoint_every and self.iteration % tc.checkpoint_every == 0:
                    self.checkpoint().save(out / f"ckpt_{self.iteration:06d}.ckpt")
        finally:
            if metrics:
                metrics.close()
        ckpt = self.checkpoint()
        if out:
            ckpt.save(out / "final.ckpt")
        self.policy.eval()
        return TrainResult(ckpt, logs, self.policy, complete)


def _clone_optim(state: dict) -> dict:
    return {
        "state": {k: {sk: sv.clone() if torch.is_tensor(sv) else sv for sk, sv in v.items()}
                  for k, v in state["state"].items()},
        "param_groups": json.loads(json.dumps(state["param_groups"])),
    }


def train(dataset, policy_config: PolicyConfig | None = None, config: TrainConfig | None = None,
          out_dir=None, resume: Checkpoint | None = None, dtype=torch.float32,
          deadline: float | None = None) -> TrainResult:
    """Run behavioral cloning on the seen split of ``dataset`` (manifest or episode list)."""
    policy_config = policy_config or PolicyConfig()
    config = config or TrainConfig()
    trainer = Trainer(_episodes(dataset), policy_config, config, dtype, dataset_meta(dataset))
    if resume is not None:
        trainer.restore(resume)
    if config.time_budget and deadline is None:
        deadline = time.monotonic() + config.time_budget
    return trainer.run(out_dir=out_dir, deadline=deadline)
