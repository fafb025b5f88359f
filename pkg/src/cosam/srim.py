"""Salient-region interaction module.

Pixels are softly assigned to N_o object slots per frame, pooled into object
descriptors, mixed by self-attention restricted to nearby frames, scattered
back to pixels through the same assignment, expanded to the input width and
added to the input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor, as_tensor


@dataclass
class SrimConfig:
    C_L: int
    C_R: int = 512
    N_o: int = 5
    heads: int = 8
    window: int = 1

    def __post_init__(self):
        if not 1 <= self.C_R < self.C_L:
            raise ValueError(f"need 1 <= C_R < C_L, got C_R={self.C_R}, C_L={self.C_L}")
        if self.N_o < 1:
            raise ValueError("N_o must be >= 1")
        if self.heads < 1 or self.C_R % self.heads:
            raise ValueError(f"heads={self.heads} must divide C_R={self.C_R}")
        if self.window < 0:
            raise ValueError("window must be >= 0")


def _lead(x: Tensor, core: int) -> tuple[Tensor, bool]:
    single = x.ndim == core
    return (x.reshape((1,) + x.shape) if single else x), single


def object_association(f_red, conv: nn.Conv1x1) -> Tensor:
    """[T, C_R, H, W] -> [T, N_o, H, W], a spatial softmax per (frame, object)."""
    f_red = as_tensor(f_red)
    t, _, h, w = f_red.shape
    logits = conv(f_red)
    n_o = logits.shape[1]
    return T.softmax(logits.reshape(t, n_o, h * w), axis=-1).reshape(t, n_o, h, w)


def weighted_avg_pool(f_red, assoc) -> Tensor:
    """values[t,o,c] = sum_{h,w} assoc[t,o,h,w] * f_red[t,c,h,w]."""
    f_red, assoc = as_tensor(f_red), as_tensor(assoc)
    if f_red.ndim != 4 or assoc.ndim != 4:
        raise ValueError("weighted_avg_pool expects 4-d inputs")
    t, c, h, w = f_red.shape
    if assoc.shape[0] != t or assoc.shape[2:] != (h, w):
        raise ValueError(f"association {assoc.shape} does not match features {f_red.shape}")
    n_o = assoc.shape[1]
    return T.matmul(assoc.reshape(t, n_o, h * w), f_red.reshape(t, c, h * w).transpose(0, 2, 1))


def temporal_mask(t: int, n_o: int, window: int) -> np.ndarray:
    """Boolean [T*N_o, T*N_o]: token (t, o) may attend to (t', o') iff |t - t'| <= window."""
    if window < 0:
        raise ValueError("window must be >= 0")
    frame = np.repeat(np.arange(t), n_o)
    return np.abs(frame[:, None] - frame[None, :]) <= window


class MaskedSelfAttention(nn.Module):
    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads:
            raise ValueError(f"heads={heads} must divide dim={dim}")
        self.heads = heads
        self.q = nn.Linear(dim, dim, rng)
        self.k = nn.Linear(dim, dim, rng)
        self.v = nn.Linear(dim, dim, rng)
        self.o = nn.Linear(dim, dim, rng)
        self.last_attention: np.ndarray | None = None

    def forward(self, tokens, mask=None) -> Tensor:
        """tokens [B, L, C]; mask boolean [L, L] or None for all-to-all."""
        b, length, c = tokens.shape
        dh = c // self.heads

        def split(x):
            return x.reshape(b, length, self.heads, dh).transpose(0, 2, 1, 3)

        q, k, v = split(self.q(tokens)), split(self.k(tokens)), split(self.v(tokens))
        scores = T.matmul(q, k.transpose(0, 1, 3, 2)) / np.sqrt(dh)
        attn = T.softmax(scores, axis=-1, mask=mask)
        self.last_attention = attn.data
        mixed = T.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, length, c)
        return self.o(mixed)


def masked_mhsa(obj, cfg: SrimConfig, attention: MaskedSelfAttention) -> Tensor:
    """Self-attention over the T*N_o object tokens of each snippet, restricted to |t - t'| <= window."""
    obj = as_tensor(obj)
    if cfg.window < 0:
        raise ValueError("window must be >= 0")
    x, single = _lead(obj, 3)
    b, t, n_o, c = x.shape
    mask = temporal_mask(t, n_o, cfg.window)
    out = attention(x.reshape(b, t * n_o, c), mask).reshape(b, t, n_o, c)
    return out.reshape(out.shape[1:]) if single else out


def redistribute(attended, assoc, expand: nn.Conv1x1) -> Tensor:
    """pixel[t,c,h,w] = sum_o assoc[t,o,h,w] * attended[t,o,c], then a 1x1 expansion conv."""
    attended, assoc = as_tensor(attended), as_tensor(assoc)
    t, n_o, h, w = assoc.shape
    if attended.shape[:2] != (t, n_o):
        raise ValueError(f"attended {attended.shape} does not match association {assoc.shape}")
    c = attended.shape[2]
    pixels = T.matmul(attended.transpose(0, 2, 1), assoc.reshape(t, n_o, h * w)).reshape(t, c, h, w)
    return expand(pixels)


class Srim(nn.Module):
    def __init__(self, cfg: SrimConfig, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.reduce = nn.Conv1x1(cfg.C_L, cfg.C_R, rng)
        self.assoc = nn.Conv1x1(cfg.C_R, cfg.N_o, rng)
        self.attention = MaskedSelfAttention(cfg.C_R, cfg.heads, rng)
        # zero branch: the module starts as the identity map
        self.expand = nn.Conv1x1(cfg.C_R, cfg.C_L, rng, zero_init=True)
        self.last_association: Tensor | None = None

    def forward(self, f_co) -> Tensor:
        """[T, C_L, H, W] or [B, T, C_L, H, W] -> same shape."""
        f_co = as_tensor(f_co)
        x, single = _lead(f_co, 4)
        b, t, c, h, w = x.shape
        if c != self.cfg.C_L:
            raise ValueError(f"SRIM built for C_L={self.cfg.C_L}, got {c}")
        red = self.reduce(x.reshape(b * t, c, h, w))
        assoc = object_association(red, self.assoc)
        self.last_association = assoc
        obj = weighted_avg_pool(red, assoc).reshape(b, t, self.cfg.N_o, self.cfg.C_R)
        attended = masked_mhsa(obj, self.cfg, self.attention)
        back = redistribute(attended.reshape(b * t, self.cfg.N_o, self.cfg.C_R), assoc, self.expand)
        out = x + back.reshape(b, t, c, h, w)
        return out.reshape(out.shape[1:]) if single else out


def srim_forward(f_co, module: Srim) -> Tensor:
    return module(f_co)
