"""Co-segmentation activation module.

Spatial attention comes from NCC cost volumes between each frame and its
reference frames.  Channel attention comes from a frame-averaged MLP gate.
Both gates multiply the original features, so output shape equals input shape.

Inputs are ``[N, D, H, W]`` (one snippet) or ``[B, N, D, H, W]`` (a batch of
snippets, batch-norm statistics shared across the batch).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from . import tensor as T
from .tensor import Tensor, as_tensor


@dataclass
class CosamConfig:
    D: int
    D_R: int = 256
    K: int = 3
    eps_ncc: float = 1e-4
    mlp_hidden: int | None = None
    spatial: bool = True
    channel: bool = True

    def __post_init__(self):
        if self.mlp_hidden is None:
            self.mlp_hidden = self.D_R
        if not 1 <= self.D_R < self.D:
            raise ValueError(f"need 1 <= D_R < D, got D_R={self.D_R}, D={self.D}")
        if self.mlp_hidden < 1:
            raise ValueError("mlp_hidden must be >= 1")
        if self.K < 1:
            raise ValueError("K must be >= 1")

    def check_frames(self, n: int) -> None:
        if n < 2:
            raise ValueError(f"COSAM needs at least 2 frames, got {n}")
        if self.K > n - 1:
            raise ValueError(f"K={self.K} exceeds N-1={n - 1}")


@dataclass
class CostVolume:
    values: Tensor  # [..., N, K*H*W, H, W]
    frame_refs: list


def ncc(p, q, eps: float = 1e-4) -> Tensor:
    """Normalised cross-correlation of two descriptors (population std, eps on each std)."""
    p, q = as_tensor(p), as_tensor(q)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError(f"ncc needs equal-length vectors, got {p.shape} and {q.shape}")
    if p.shape[0] < 2:
        raise ValueError("ncc needs descriptors of length >= 2")
    return (T.standardize(p, 0, eps) * T.standardize(q, 0, eps)).mean()


def select_references(n: int, N: int, K: int) -> list[int]:
    """The K frames temporally nearest to ``n`` (excluding it), earlier frame first on ties."""
    if not 0 <= n < N:
        raise ValueError(f"frame index {n} outside [0, {N})")
    if not 1 <= K <= N - 1:
        raise ValueError(f"need 1 <= K <= N-1, got K={K}, N={N}")
    others = sorted((i for i in range(N) if i != n), key=lambda i: (abs(i - n), i))
    return others[:K]


def reference_table(N: int, K: int) -> np.ndarray:
    return np.array([select_references(n, N, K) for n in range(N)], dtype=np.int64)


def build_cost_volume(f_reduced, K: int, eps: float = 1e-4) -> CostVolume:
    """NCC of every descriptor of frame n against every descriptor of its K references.

    Output channel index is ``k*H*W + h*W + w`` (reference k, location h, w).
    """
    f_reduced = as_tensor(f_reduced)
    single = f_reduced.ndim == 4
    x = f_reduced.reshape((1,) + f_reduced.shape) if single else f_reduced
    if x.ndim != 5:
        raise ValueError(f"cost volume expects [N,D_R,H,W] or [B,N,D_R,H,W], got {f_reduced.shape}")
    b, n, d, h, w = x.shape
    if n < 2:
        raise ValueError(f"cost volume needs N >= 2 frames, got {n}")
    refs = reference_table(n, K)
    z = T.standardize(x.reshape(b, n, d, h * w), axis=2, eps=eps)
    zr = T.take(z, refs, axis=1)  # [B, N, K, D_R, HW]
    corr = T.matmul(zr.transpose(0, 1, 2, 4, 3), z.reshape(b, n, 1, d, h * w)) / d
    values = corr.reshape(b, n, K * h * w, h, w)
    if single:
        values = values.reshape(n, K * h * w, h, w)
    return CostVolume(values, [list(r) for r in refs])


class Cosam(nn.Module):
    """COSAM layer for feature maps of a fixed spatial size ``height x width``."""

    def __init__(self, cfg: CosamConfig, height: int, width: int, rng: np.random.Generator):
        super().__init__()
        self.cfg = cfg
        self.height, self.width = height, width
        if cfg.spatial:
            self.reduce = nn.Conv1x1(cfg.D, cfg.D_R, rng)
            self.reduce_bn = nn.BatchNorm2d(cfg.D_R)
            # neutral start: every mask entry is sigmoid(0) = 0.5
            self.summary = nn.Conv1x1(cfg.K * height * width, 1, rng, zero_init=True)
        if cfg.channel:
            self.mlp_in = nn.Linear(cfg.D, cfg.mlp_hidden, rng)
            self.mlp_out = nn.Linear(cfg.mlp_hidden, cfg.D, rng)

    def _split(self, f) -> tuple[Tensor, bool]:
        f = as_tensor(f)
        single = f.ndim == 4
        x = f.reshape((1,) + f.shape) if single else f
        if x.ndim != 5:
            raise ValueError(f"COSAM expects [N,D,H,W] or [B,N,D,H,W], got {f.shape}")
        _, n, d, h, w = x.shape
        if d != self.cfg.D or (h, w) != (self.height, self.width):
            raise ValueError(f"COSAM built for D={self.cfg.D}, {self.height}x{self.width}; got {x.shape[2:]}")
        return x, single

    def cost_volume(self, f) -> CostVolume:
        x, single = self._split(f)
        b, n, d, h, w = x.shape
        self.cfg.check_frames(n)
        red = T.relu(self.reduce_bn(self.reduce(x.reshape(b * n, d, h, w))))
        cv = build_cost_volume(red.reshape(b, n, self.cfg.D_R, h, w), self.cfg.K, self.cfg.eps_ncc)
        if single:
            cv.values = cv.values.reshape(cv.values.shape[1:])
        return cv

    def spatial_attention(self, f) -> tuple[Tensor, Tensor]:
        """Returns (f * mask, mask) with mask of shape [..., N, 1, H, W]."""
        x, single = self._split(f)
        b, n, d, h, w = x.shape
        if not self.cfg.spatial:
            mask = T.ones((b, n, 1, h, w))
            return as_tensor(f), mask.reshape(mask.shape[1:]) if single else mask
        cv = self.cost_volume(x).values.reshape(b * n, self.cfg.K * h * w, h, w)
        mask = T.sigmoid(self.summary(cv)).reshape(b, n, 1, h, w)
        out = x * mask
        if single:
            return out.reshape(out.shape[1:]), mask.reshape(mask.shape[1:])
        return out, mask

    def channel_attention(self, f_spat) -> tuple[Tensor, Tensor]:
        """Returns (f_spat * w, w) with one weight vector per snippet, shape [D] or [B, D]."""
        x, single = self._split(f_spat)
        b, n, d, h, w = x.shape
        if not self.cfg.channel:
            weights = T.ones((b, d))
            return as_tensor(f_spat), weights.reshape(d) if single else weights
        pooled = nn.global_avg_pool(x)  # [B, N, D]
        per_frame = T.sigmoid(self.mlp_out(T.relu(self.mlp_in(pooled))))
        weights = per_frame.mean(axis=1)  # [B, D]
        out = x * weights.reshape(b, 1, d, 1, 1)
        if single:
            return out.reshape(out.shape[1:]), weights.reshape(d)
        return out, weights

    def forward(self, f) -> tuple[Tensor, Tensor, Tensor]:
        f_spat, mask = self.spatial_attention(f)
        f_out, weights = self.channel_attention(f_spat)
        return f_out, mask, weights


def cosam_forward(f, module: Cosam):
    return module(f)
