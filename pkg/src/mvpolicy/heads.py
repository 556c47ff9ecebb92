"""Action prediction: point-cloud heatmaps, task-conditioned offset, rotation and gripper state."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .visual import FEAT_DIM, GROUPS, LEAKY_SLOPE


class HeatmapDecoder(nn.Module):
    """Four conv + x2 bilinear upsampling blocks fed with encoder skips, then a 1-channel conv.

    Block i convolves [previous output; encoder activation at the same
    resolution]; the final conv sees the last block output next to the
    full-resolution 16-channel encoder activation.
    """

    def __init__(self, in_channels: int, slope: float = LEAKY_SLOPE):
        super().__init__()
        self.slope = slope
        chans = [in_channels + FEAT_DIM] + [16 + FEAT_DIM] * 3
        self.blocks = nn.ModuleList([nn.Conv2d(c, 16, 3, 1, 1) for c in chans])
        self.out = nn.Conv2d(16 + FEAT_DIM, 1, 3, 1, 1)

    def forward(self, x: torch.Tensor, skips: list) -> torch.Tensor:
        """x: (N, C, H/16, W/16); skips: the six encoder activations -> logits (N, H, W)."""
        if skips is None or len(skips) != 6:
            raise ValueError("decoder needs the six encoder activations")
        for conv, skip in zip(self.blocks, skips[5:1:-1]):
            x = F.leaky_relu(conv(torch.cat([x, skip], dim=1)), self.slope)
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.out(torch.cat([x, skips[1]], dim=1)).squeeze(1)


def normalize_heatmaps(logits: torch.Tensor, mode: str = "joint") -> torch.Tensor:
    """(..., K, H, W) logits -> probabilities summing to one over (K, H, W).

    ``per_camera`` normalizes each camera separately and averages with weight 1/K.
    """
    K = logits.shape[-3]
    if mode == "joint":
        flat = logits.flatten(-3)
        return torch.softmax(flat, dim=-1).reshape(logits.shape)
    if mode == "per_camera":
        return torch.softmax(logits.flatten(-2), dim=-1).reshape(logits.shape) / K
    raise ValueError(f"unknown heatmap normalization {mode!r}")


def expected_position(heatmaps: torch.Tensor, pcd: torch.Tensor) -> torch.Tensor:
    """sum_{k,h,w} B[k,h,w] * pcd[k,h,w]; heatmaps (..., K, H, W), pcd (..., K, H, W, 3)."""
    return torch.einsum("...khw,...khwc->...c", heatmaps, pcd)


def task_distribution(mean_embed: torch.Tensor, w_m: torch.Tensor) -> torch.Tensor:
    return torch.softmax(mean_embed @ w_m.T, dim=-1)


def predict_offset(prob: torch.Tensor, step, offsets: torch.Tensor) -> torch.Tensor:
    """Convex combination of per-task offset rows at ``step``.

    prob: (..., N_tasks); step: int or long tensor (...,); offsets: (N_tasks, T, 3).
    """
    T = offsets.shape[1]
    step_t = torch.as_tensor(step)
    if torch.any(step_t < 0) or torch.any(step_t >= T):
        raise ValueError(f"step {step} outside [0, {T})")
    rows = offsets[:, step_t]  # (N_tasks, ..., 3)
    rows = rows.movedim(0, -2)  # (..., N_tasks, 3)
    return (prob.unsqueeze(-1) * rows).sum(-2)


class RotationGripperHead(nn.Module):
    """Two stride-2 3x3 convs (64 ch, GroupNorm, LeakyReLU), average pool, linear -> 5 values."""

    def __init__(self, in_channels: int, slope: float = LEAKY_SLOPE, groups: int = GROUPS):
        super().__init__()
        self.slope = slope
        self.conv1 = nn.Conv2d(in_channels, 64, 3, 2, 1)
        self.norm1 = nn.GroupNorm(groups, 64)
        self.conv2 = nn.Conv2d(64, 64, 3, 2, 1)
        self.norm2 = nn.GroupNorm(groups, 64)
        self.fc = nn.Linear(64, 5)

    def features(self, x):
        x = F.leaky_relu(self.norm1(self.conv1(x)), self.slope)
        x = F.leaky_relu(self.norm2(self.conv2(x)), self.slope)
        return x.mean(dim=(-2, -1))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """x: (N, K*C, h, w), cameras stacked on channels -> raw (N, 5): quaternion, open."""
        return self.fc(self.features(x))


def finalize_rotation_gripper(raw) -> tuple[np.ndarray, float, bool]:
    """Execution-time post-processing of the raw 5-vector.

    Returns (unit quaternion with non-negative scalar part, open flag in {0, 1},
    degenerate flag). A quaternion with norm < 1e-8 is replaced by identity.
    """
    raw = np.asarray(raw, dtype=np.float64)
    q = raw[:4]
    n = np.linalg.norm(q)
    degenerate = not np.isfinite(n) or n < 1e-8
    if degenerate:
        q = np.array([1.0, 0.0, 0.0, 0.0])
    else:
        q = q / n
        if q[0] < 0:
            q = -q
    return q, float(raw[4] >= 0.5), degenerate
