"""Synthetic instructions and frozen text encoders.

Any object with ``dim`` and ``encode(text) -> (n, dim) float array`` can act as a
text encoder; register a factory with :func:`register_encoder` to make it
selectable by name from config files.
"""
from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch
from torch import nn

N_MAX = 32
D_TEXT = 64

TEMPLATES = {
    "push_buttons": (
        ("push the {} button", ", and then push the {} one"),
        ("press the {} button", ", then press the {} button"),
        ("first push the {} button", " and after that the {} button"),
    ),
    "tower": (
        "Stack the {} blocks",
        ("Stack the {} block", ". Stack the {} block on top of it", ", then add the {} cube"),
        ("Build a tower with the {} cube at the bottom", ", then the {} cube", ", then the {} cube"),
    ),
    "reach_target": (
        "reach the {} target",
        "move the gripper to the {} target",
        "touch the {} block",
    ),
}


def _fill(template, colors) -> str:
    if isinstance(template, str):
        return template.format(", ".join(colors))
    parts = [template[0].format(colors[0])]
    for i, c in enumerate(colors[1:], start=1):
        parts.append(template[min(i, len(template) - 1)].format(c))
    return "".join(parts)


def generate_instruction(task, template_rng: np.random.Generator | None = None,
                         template: int | None = None) -> str:
    """Instruction text for ``task`` with its goal colors substituted in order."""
    if task.task_name not in TEMPLATES:
        raise ValueError(f"unknown task {task.task_name!r}")
    options = TEMPLATES[task.task_name]
    if template is None:
        rng = template_rng if template_rng is not None else np.random.default_rng(0)
        template = int(rng.integers(len(options)))
    return _fill(options[template], list(task.goal))


def tokenize(text: str) -> list:
    return re.findall(r"[a-z0-9]+", text.lower())


class TextEncoder(Protocol):
    dim: int

    def encode(self, text: str) -> np.ndarray: ...


def _sinusoid(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / (10000 ** (2 * i / d))
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)
    return out


class HashTextEncoder:
    """Frozen stand-in for a pretrained language encoder.

    Word vectors come from a seeded random table indexed by a CRC32 hash of the
    lowercased token; palette color words use a separate orthogonal table so
    that colors are linearly separable. A sinusoidal position term is added,
    and the word vector is also scaled elementwise by a position-dependent
    factor so that the token mean still depends on word order.
    """

    def __init__(self, dim: int = D_TEXT, vocab: int = 4096, seed: int = 1234, colors=None):
        from .sim import COLOR_NAMES

        rng = np.random.default_rng(seed)
        self.dim = dim
        self.table = rng.standard_normal((vocab, dim))
        colors = tuple(colors or COLOR_NAMES)
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        self.color_table = {c: q[i] * np.sqrt(dim) for i, c in enumerate(colors)}
        self.position = 0.5 * _sinusoid(N_MAX, dim)
        self.gain = 1.0 + 0.5 * _sinusoid(N_MAX, dim)[:, ::-1].copy()
        self.seed = seed
        for a in (self.table, self.position, self.gain, *self.color_table.values()):
            a.setflags(write=False)

    def token_vector(self, token: str) -> np.ndarray:
        if token in self.color_table:
            return self.color_table[token]
        return self.table[zlib.crc32(token.encode()) % len(self.table)]

    def encode(self, text: str) -> np.ndarray:
        toks = tokenize(text)
        if not toks:
            raise ValueError("empty instruction")
        if len(toks) > N_MAX:
            raise ValueError(f"instruction has {len(toks)} tokens > n_max={N_MAX}")
        n = len(toks)
        return np.stack([self.token_vector(t) for t in toks]) * self.gain[:n] + self.position[:n]

    def state_hash(self) -> str:
        import hashlib

        h = hashlib.sha256(self.table.tobytes())
        h.update(self.position.tobytes())
        h.update(self.gain.tobytes())
        for c in sorted(self.color_table):
            h.update(self.color_table[c].tobytes())
        return h.hexdigest()


class OneHotEncoder:
    """Encodes an instruction as a single one-hot token of its variation index.

    The variation is recovered from the ordered palette colors in the text, so
    every template of one variation maps to the same vector.
    """

    def __init__(self, task_name: str = "push_buttons"):
        from .sim import COLOR_NAMES, variation_table

        self.task_name = task_name
        self.colors = COLOR_NAMES
        self.index = {goal: i for i, goal in enumerate(variation_table(task_name))}
        self.dim = len(self.index)

    def encode(self, text: str) -> np.ndarray:
        goal = tuple(t for t in tokenize(text) if t in self.colors)
        if goal not in self.index:
            raise ValueError(f"no {self.task_name} variation for colors {goal}")
        out = np.zeros((1, self.dim))
        out[0, self.index[goal]] = 1.0
        return out

    def state_hash(self) -> str:
        return f"onehot:{self.task_name}:{self.dim}"


_ENCODERS: dict = {
    "hash": lambda **kw: HashTextEncoder(**{k: v for k, v in kw.items() if k in ("dim", "seed")}),
    "onehot": lambda **kw: OneHotEncoder(kw.get("task_name", "push_buttons")),
}


def register_encoder(name: str, factory: Callable[..., TextEncoder]) -> None:
    _ENCODERS[name] = factory


def make_encoder(name: str = "hash", **kwargs) -> TextEncoder:
    if name not in _ENCODERS:
        raise KeyError(f"unknown text encoder {name!r}; known: {sorted(_ENCODERS)}")
    return _ENCODERS[name](**kwargs)


@dataclass
class InstructionTokens:
    raw: torch.Tensor  # (n, d_text)
    projected: torch.Tensor  # (n, d)

    @property
    def n(self) -> int:
        return self.raw.shape[0]


class InstructionProjector(nn.Module):
    """Token-wise LayerNorm(W_x x) + type embedding."""

    def __init__(self, d_text: int, d: int):
        super().__init__()
        self.proj = nn.Linear(d_text, d, bias=False)
        self.norm = nn.LayerNorm(d)
        self.type_embed = nn.Parameter(torch.zeros(d))
        nn.init.normal_(self.type_embed, std=0.02)

    def forward(self, raw: torch.Tensor) -> torch.Tensor:
        return self.norm(self.proj(raw)) + self.type_embed


def encode_instruction(text: str, encoder: TextEncoder, projector: InstructionProjector) -> InstructionTokens:
    raw = torch.as_tensor(encoder.encode(text), dtype=projector.proj.weight.dtype)
    return InstructionTokens(raw, projector(raw))


def mean_language_embedding(tokens, mask: torch.Tensor | None = None) -> torch.Tensor:
    """Mean of raw encoder outputs over the (unpadded) tokens."""
    raw = tokens.raw if isinstance(tokens, InstructionTokens) else tokens
    if mask is None:
        return raw.mean(dim=-2)
    m = mask.to(raw.dtype).unsqueeze(-1)
    return (raw * m).sum(dim=-2) / m.sum(dim=-2)
