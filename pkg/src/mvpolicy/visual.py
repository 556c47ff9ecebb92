"""Per-camera convolutional encoding and visual token embedding."""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

STRIDE = 16
FEAT_DIM = 16  # d_v
LEAKY_SLOPE = 0.02
GROUPS = 4


class UNetEncoder(nn.Module):
    """Six 3x3 convolutions: two at stride 1 (8, 16 channels), four at stride 2 (16 channels)."""

    def __init__(self, in_channels: int = 4, slope: float = LEAKY_SLOPE, groups: int = GROUPS):
        super().__init__()
        self.slope = slope
        self.convs = nn.ModuleList(
            [
                nn.Conv2d(in_channels, 8, 3, 1, 1),
                nn.Conv2d(8, 16, 3, 1, 1),
                *[nn.Conv2d(16, 16, 3, 2, 1) for _ in range(4)],
            ]
        )
        self.norms = nn.ModuleList([nn.GroupNorm(groups, 16) for _ in range(4)])

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list]:
        """(N, C, H, W) -> (N, 16, H/16, W/16) plus all six activations for skips."""
        if x.shape[-1] % STRIDE or x.shape[-2] % STRIDE:
            raise ValueError(f"image size {tuple(x.shape[-2:])} not divisible by {STRIDE}")
        skips = []
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i >= 2:
                x = self.norms[i - 2](x)
            x = F.leaky_relu(x, self.slope)
            skips.append(x)
        return x, skips


def unet_encode(rgb: torch.Tensor, gripper_map: torch.Tensor, encoder: UNetEncoder):
    """Encode channel-first ``rgb`` (N, 3, H, W) and ``gripper_map`` (N, H, W)."""
    if rgb.shape[-2:] != gripper_map.shape[-2:] or rgb.shape[0] != gripper_map.shape[0]:
        raise ValueError(f"rgb {tuple(rgb.shape)} and gripper map {tuple(gripper_map.shape)} disagree")
    return encoder(torch.cat([rgb, gripper_map.unsqueeze(1)], dim=1))


def fuse_pointcloud(fmap: torch.Tensor, pcd: torch.Tensor) -> torch.Tensor:
    """Concatenate (N, C, h, w) features with the 16x16 mean-pooled (N, 3, 16h, 16w) point cloud."""
    if pcd.shape[-2] != STRIDE * fmap.shape[-2] or pcd.shape[-1] != STRIDE * fmap.shape[-1]:
        raise ValueError(f"point cloud {tuple(pcd.shape)} does not match features {tuple(fmap.shape)}")
    return torch.cat([fmap, F.avg_pool2d(pcd, STRIDE)], dim=1)


class VisualTokenizer(nn.Module):
    """Token = LN(W f) + camera + step + location + type embeddings.

    ``mode="patch"`` gives one token per camera and grid cell, ``mode="channel"``
    one token per camera and feature channel (content = the flattened spatial
    map, no location embedding).
    """

    def __init__(self, d: int, n_cameras: int, t_max: int, grid: tuple[int, int],
                 channels: int = FEAT_DIM + 3, mode: str = "patch"):
        super().__init__()
        if mode not in ("patch", "channel"):
            raise ValueError(f"unknown token mode {mode!r}")
        self.mode, self.grid, self.channels, self.t_max = mode, grid, channels, t_max
        cells = grid[0] * grid[1]
        self.proj = nn.Linear(channels if mode == "patch" else cells, d)
        self.norm = nn.LayerNorm(d)
        self.camera = nn.Parameter(torch.randn(n_cameras, d) * 0.02)
        self.step = nn.Parameter(torch.randn(t_max, d) * 0.02)
        self.location = nn.Parameter(torch.randn(cells, d) * 0.02) if mode == "patch" else None
        self.type_embed = nn.Parameter(torch.randn(d) * 0.02)

    def tokens_per_camera(self) -> int:
        return self.grid[0] * self.grid[1] if self.mode == "patch" else self.channels

    def forward(self, fused: torch.Tensor, steps: torch.Tensor) -> torch.Tensor:
        """fused: (N, K, C, h, w); steps: (N,) long step ids -> (N, K * per_camera, d)."""
        N, K, C, h, w = fused.shape
        if (h, w) != tuple(self.grid):
            raise ValueError(f"feature grid {(h, w)} != {self.grid}")
        if torch.any(steps >= self.t_max) or torch.any(steps < 0):
            raise ValueError(f"step id out of range [0, {self.t_max})")
        if self.mode == "patch":
            f = fused.flatten(3).transpose(2, 3)  # (N, K, hw, C)
            x = self.norm(self.proj(f)) + self.location
        else:
            f = fused.flatten(3)  # (N, K, C, hw)
            x = self.norm(self.proj(f))
        x = x + self.camera[:K, None, :] + self.step[steps][:, None, None, :] + self.type_embed
        return x.reshape(N, -1, x.shape[-1])

    def to_grid(self, tokens: torch.Tensor, K: int) -> torch.Tensor:
        """Patch tokens (N, K*h*w, d) back to a (N, K, d, h, w) map; exact inverse of the flattening."""
        N, _, d = tokens.shape
        h, w = self.grid
        return tokens.reshape(N, K, h, w, d).permute(0, 1, 4, 2, 3)
