"""The full policy: instruction + multi-view history -> next macro-step action."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import sim
from .episodes import Action, Episode, Observation
from .heads import (
    HeatmapDecoder,
    RotationGripperHead,
    expected_position,
    finalize_rotation_gripper,
    normalize_heatmaps,
    predict_offset,
    task_distribution,
)
from .instructions import InstructionProjector, make_encoder, mean_language_embedding
from .transformer import MultimodalTransformer
from .visual import FEAT_DIM, STRIDE, UNetEncoder, VisualTokenizer, fuse_pointcloud


@dataclass(frozen=True)
class PolicyConfig:
    image_size: tuple = (32, 32)
    cameras: tuple = (0, 1, 2)  # indices into the default rig
    d: int = 64
    n_heads: int = 4
    n_layers: int = 2
    d_ff: int = 0  # 0 -> 4 * d
    token_mode: str = "patch"  # patch | channel | none
    attn_mode: str = "cross"  # cross | self
    history: bool = True
    mask_obs: bool = True
    use_pcd: bool = True
    use_gripper_map: bool = True
    heatmap_norm: str = "joint"  # joint | per_camera
    n_tasks: int = len(sim.TASKS)
    t_max: int = sim.T_MAX
    text_encoder: str = "hash"
    text_encoder_task: str = "push_buttons"
    leaky_slope: float = 0.02
    groups: int = 4

    def __post_init__(self):
        H, W = self.image_size
        if H % STRIDE or W % STRIDE:
            raise ValueError(f"image size {self.image_size} not divisible by {STRIDE}")
        if self.token_mode not in ("patch", "channel", "none"):
            raise ValueError(f"unknown token_mode {self.token_mode!r}")
        if self.attn_mode not in ("cross", "self"):
            raise ValueError(f"unknown attn_mode {self.attn_mode!r}")
        if self.heatmap_norm not in ("joint", "per_camera"):
            raise ValueError(f"unknown heatmap_norm {self.heatmap_norm!r}")
        if self.d % self.n_heads:
            raise ValueError("n_heads must divide d")

    @property
    def K(self) -> int:
        return len(self.cameras)

    @property
    def grid(self) -> tuple:
        return (self.image_size[0] // STRIDE, self.image_size[1] // STRIDE)

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown policy config keys: {sorted(unknown)}")
        kw = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
        return cls(**kw)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class Batch:
    rgb: torch.Tensor  # (B, T, K, 3, H, W)
    gripper_map: torch.Tensor  # (B, T, K, H, W)
    pcd: torch.Tensor  # (B, T, K, 3, H, W)
    step_valid: torch.Tensor  # (B, T) bool
    instr: torch.Tensor  # (B, n, d_text)
    instr_mask: torch.Tensor  # (B, n) bool
    target: torch.Tensor | None = None  # (B, T, 8)
    task: torch.Tensor | None = None  # (B,) long
    ids: list = field(default_factory=list)

    @property
    def shape(self) -> tuple:
        return tuple(self.step_valid.shape)


def collate(observations: Sequence[Sequence[Observation]], instr_raw: Sequence[np.ndarray],
            targets=None, tasks=None, dtype=torch.float32, ids=()) -> Batch:
    """Pad per-episode observation lists into one batch."""
    B = len(observations)
    T = max(len(o) for o in observations)
    K, H, W = observations[0][0].shape
    rgb = np.zeros((B, T, K, H, W, 3), np.float32)
    pcd = np.zeros((B, T, K, H, W, 3), np.float32)
    gm = np.zeros((B, T, K, H, W), np.float32)
    valid = np.zeros((B, T), bool)
    for b, obs in enumerate(observations):
        for t, o in enumerate(obs):
            rgb[b, t], pcd[b, t], gm[b, t] = o.rgb, o.pcd, o.gripper_map
            valid[b, t] = True
    n = max(len(r) for r in instr_raw)
    dt = instr_raw[0].shape[1]
    instr = np.zeros((B, n, dt))
    imask = np.zeros((B, n), bool)
    for b, r in enumerate(instr_raw):
        instr[b, : len(r)] = r
        imask[b, : len(r)] = True
    tgt = None
    if targets is not None:
        tgt = np.zeros((B, T, 8), np.float32)
        for b, acts in enumerate(targets):
            for t, a in enumerate(acts):
                tgt[b, t] = a.vector() if isinstance(a, Action) else a
        tgt = torch.as_tensor(tgt, dtype=dtype)
    as_t = lambda a: torch.as_tensor(a, dtype=dtype)  # noqa: E731
    return Batch(
        as_t(rgb).permute(0, 1, 2, 5, 3, 4),
        as_t(gm),
        as_t(pcd).permute(0, 1, 2, 5, 3, 4),
        torch.as_tensor(valid),
        as_t(instr),
        torch.as_tensor(imask),
        tgt,
        None if tasks is None else torch.as_tensor(list(tasks), dtype=torch.long),
        list(ids),
    )


class Policy(nn.Module):
    def __init__(self, config: PolicyConfig, encoder=None):
        super().__init__()
        self.config = c = config
        self.text_encoder = encoder or make_encoder(c.text_encoder, task_name=c.text_encoder_task)
        d_text = self.text_encoder.dim
        self.instruction = InstructionProjector(d_text, c.d)
        self.task_head = nn.Linear(d_text, c.n_tasks, bias=False)  # W_m
        self.offsets = nn.Parameter(torch.zeros(c.n_tasks, c.t_max, 3))  # E_O
        self.encoder = UNetEncoder(4, c.leaky_slope, c.groups)
        self.tokenizer = None
        self.transformer = None
        self.back_proj = None
        if c.token_mode != "none":
            self.tokenizer = VisualTokenizer(c.d, c.K, c.t_max, c.grid, FEAT_DIM + 3,
                                             c.token_mode)
            if c.n_layers > 0:
                self.transformer = MultimodalTransformer(c.d, c.n_layers, c.n_heads,
                                                         c.d_ff or 4 * c.d, c.attn_mode)
            if c.token_mode == "channel":
                self.back_proj = nn.Linear(c.d, c.grid[0] * c.grid[1])
        self.decoder = HeatmapDecoder(self.decoder_channels, c.leaky_slope)
        self.rotation = RotationGripperHead(c.K * self.decoder_channels, c.leaky_slope, c.groups)

    @property
    def decoder_channels(self) -> int:
        c = self.config
        if c.token_mode == "none":
            return FEAT_DIM
        if c.token_mode == "channel":
            return FEAT_DIM + FEAT_DIM + 3
        return c.d + FEAT_DIM

    @property
    def tokens_per_step(self) -> int:
        return 0 if self.tokenizer is None else self.config.K * self.tokenizer.tokens_per_camera()

    # -------------------------------------------------------------- forward

    def forward(self, batch: Batch, token_mask: torch.Tensor | None = None) -> dict:
        """Teacher-forced predictions for every step of every episode.

        ``token_mask`` (B, T, m) bool zeroes current-step tokens (training-time
        observation masking); history copies of the same tokens stay intact.
        """
        c = self.config
        B, T = batch.shape
        K = batch.rgb.shape[2]
        H, W = batch.rgb.shape[-2:]
        N = B * T * K
        rgb = batch.rgb.reshape(N, 3, H, W)
        gm = batch.gripper_map.reshape(N, H, W)
        if not c.use_gripper_map:
            gm = torch.zeros_like(gm)
        fmap, skips = self.encoder(torch.cat([rgb, gm.unsqueeze(1)], dim=1))
        pcd = batch.pcd.reshape(N, 3, H, W)
        fused = fuse_pointcloud(fmap, pcd if c.use_pcd else torch.zeros_like(pcd))
        h, w = fmap.shape[-2:]

        step_ids = torch.arange(T) if c.history else torch.zeros(T, dtype=torch.long)
        instr_tok = self.instruction(batch.instr)
        mean_embed = mean_language_embedding(batch.instr, batch.instr_mask)
        task_prob = task_distribution(mean_embed, self.task_head.weight)

        if self.tokenizer is None:
            dec_in = fmap
        else:
            fused_bt = fused.reshape(B * T, K, FEAT_DIM + 3, h, w)
            tokens = self.tokenizer(fused_bt, step_ids.repeat(B))  # (B*T, m, d)
            m = tokens.shape[1]
            visual = tokens.reshape(B, T * m, -1)
            current = visual
            if token_mask is not None:
                current = visual * (~token_mask.reshape(B, T * m, 1)).to(visual.dtype)
            if self.transformer is not None:
                out = self.transformer(current, instr_tok, batch.instr_mask, visual, T, m, c.history)
            else:
                out = current
            out = out.reshape(B * T, m, -1)
            if c.token_mode == "patch":
                grid = self.tokenizer.to_grid(out, K)  # (B*T, K, d, h, w)
            else:
                grid = self.back_proj(out).reshape(B * T, K, FEAT_DIM + 3, h, w)
            dec_in = torch.cat([grid.reshape(N, -1, h, w), fmap], dim=1)

        logits = self.decoder(dec_in, skips).reshape(B, T, K, H, W)
        heat = normalize_heatmaps(logits, c.heatmap_norm)
        pe = expected_position(heat, batch.pcd.permute(0, 1, 2, 4, 5, 3))
        po = predict_offset(task_prob[:, None, :].expand(B, T, -1), step_ids[None, :].expand(B, T),
                            self.offsets)
        rot_in = dec_in.reshape(B * T, K * dec_in.shape[1], h, w)
        raw = self.rotation(rot_in).reshape(B, T, 5)
        action = torch.cat([pe + po, raw], dim=-1)
        return {"action": action, "heatmap": heat, "task_prob": task_prob,
                "expected": pe, "offset": po, "logits": logits}

    # -------------------------------------------------------------- inference

    def encode_text(self, text: str) -> np.ndarray:
        return self.text_encoder.encode(text)

    @torch.no_grad()
    def predict_action(self, observations: Sequence[Observation], instruction: str) -> tuple[Action, dict]:
        """Next action from the episode prefix o_1..o_t (pure function of its inputs)."""
        t = len(observations)
        if not 1 <= t <= self.config.t_max:
            raise ValueError(f"prefix length {t} outside [1, {self.config.t_max}]")
        obs = [o.cameras(self.config.cameras) if o.shape[0] != self.config.K else o
               for o in observations]
        dtype = next(self.parameters()).dtype
        batch = collate([obs], [self.encode_text(instruction)], dtype=dtype)
        try:
            out = self(batch)
        except ValueError as exc:
            raise ValueError(f"step {t}: {exc}") from exc
        a = out["action"][0, -1].double().numpy()
        q, opened, degenerate = finalize_rotation_gripper(a[3:])
        info = {"raw": a, "degenerate": degenerate, "finite": bool(np.all(np.isfinite(a))),
                "heatmap": out["heatmap"][0, -1].float().numpy()}
        return Action(tuple(float(x) for x in a[:3]), tuple(float(x) for x in q), opened), info


def episode_targets(ep: Episode) -> np.ndarray:
    return np.stack([a.vector() for a in ep.actions])
