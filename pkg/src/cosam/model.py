"""Toy networks hosting COSAM and SRIM.

The backbone is a stack of 3x3 conv / batch-norm / relu blocks.  COSAM and
SRIM layers sit at block boundaries (1-based: ``insert_cosam_after={3, 4}``
means after the third and fourth block) and see every frame of a snippet at
once.  Frames come in as ``[B, N, 3, H, W]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T
from .cosam import Cosam, CosamConfig
from .srim import Srim, SrimConfig
from .tensor import Tensor, as_tensor


@dataclass
class BackboneConfig:
    blocks: list = field(default_factory=lambda: [(16, 2), (32, 2), (64, 2), (128, 2)])
    insert_cosam_after: set = field(default_factory=lambda: {3, 4})
    insert_srim_after: set = field(default_factory=set)
    in_channels: int = 3
    # COSAM / SRIM hyper-parameters; reduced widths are capped at half the block width
    cosam_K: int = 3
    cosam_D_R: int = 256
    cosam_eps: float = 1e-4
    cosam_spatial: bool = True
    cosam_channel: bool = True
    srim_C_R: int = 512
    srim_N_o: int = 5
    srim_heads: int = 8
    srim_window: int = 1

    def __post_init__(self):
        self.blocks = [tuple(b) for b in self.blocks]
        self.insert_cosam_after = set(self.insert_cosam_after)
        self.insert_srim_after = set(self.insert_srim_after)
        n = len(self.blocks)
        for name, idx in (("COSAM", self.insert_cosam_after), ("SRIM", self.insert_srim_after)):
            bad = [i for i in idx if not 1 <= i <= n]
            if bad:
                raise ValueError(f"{name} insertion points {bad} outside blocks 1..{n}")
        for ch, stride in self.blocks:
            if ch < 1 or stride not in (1, 2):
                raise ValueError(f"bad block {(ch, stride)}")

    @property
    def total_stride(self) -> int:
        return int(np.prod([s for _, s in self.blocks]))

    def output_size(self, height: int, width: int) -> tuple[int, int]:
        s = self.total_stride
        return height // s, width // s

    @property
    def out_channels(self) -> int:
        return self.blocks[-1][0]


class ConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, rng, stride=stride)
        self.bn = nn.BatchNorm2d(c_out)

    def forward(self, x):
        return T.relu(self.bn(self.conv(x)))


class Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig, height: int, width: int, rng: np.random.Generator):
        super().__init__()
        if height % cfg.total_stride or width % cfg.total_stride:
            raise ValueError(f"{height}x{width} not divisible by total stride {cfg.total_stride}")
        self.cfg = cfg
        self.block_names: list[str] = []
        self.cosam_names: dict[int, str] = {}
        self.srim_names: dict[int, str] = {}
        c_in, h, w = cfg.in_channels, height, width
        for i, (c_out, stride) in enumerate(cfg.blocks, start=1):
            name = f"block{i}"
            setattr(self, name, ConvBlock(c_in, c_out, stride, rng))
            self.block_names.append(name)
            h, w, c_in = h // stride, w // stride, c_out
            if i in cfg.insert_cosam_after:
                cc = CosamConfig(
                    D=c_out,
                    D_R=max(1, min(cfg.cosam_D_R, c_out // 2)),
                    K=cfg.cosam_K,
                    eps_ncc=cfg.cosam_eps,
                    spatial=cfg.cosam_spatial,
                    channel=cfg.cosam_channel,
                )
                self.cosam_names[i] = f"cosam{i}"
                setattr(self, self.cosam_names[i], Cosam(cc, h, w, rng))
            if i in cfg.insert_srim_after:
                c_r = max(cfg.srim_heads, min(cfg.srim_C_R, c_out // 2))
                c_r -= c_r % cfg.srim_heads
                sc = SrimConfig(C_L=c_out, C_R=c_r, N_o=cfg.srim_N_o, heads=cfg.srim_heads, window=cfg.srim_window)
                self.srim_names[i] = f"srim{i}"
                setattr(self, self.srim_names[i], Srim(sc, rng))
        self.last_masks: dict[int, Tensor] = {}

    def forward(self, frames) -> Tensor:
        """[B, N, 3, H, W] (or [N, 3, H, W]) -> [B, N, D, H', W']."""
        frames = as_tensor(frames)
        single = frames.ndim == 4
        x = frames.reshape((1,) + frames.shape) if single else frames
        if x.ndim != 5:
            raise ValueError(f"backbone expects [B,N,C,H,W], got {frames.shape}")
        b, n = x.shape[:2]
        s = self.cfg.total_stride
        if x.shape[3] % s or x.shape[4] % s:
            raise ValueError(f"{x.shape[3]}x{x.shape[4]} not divisible by total stride {s}")
        x = x.reshape((b * n,) + x.shape[2:])
        self.last_masks = {}
        for i, name in enumerate(self.block_names, start=1):
            x = getattr(self, name)(x)
            if i in self.cosam_names or i in self.srim_names:
                y = x.reshape((b, n) + x.shape[1:])
                if i in self.cosam_names:
                    y, mask, _ = getattr(self, self.cosam_names[i])(y)
                    self.last_masks[i] = mask
                if i in self.srim_names:
                    y = getattr(self, self.srim_names[i])(y)
                x = y.reshape((b * n,) + y.shape[2:])
        out = x.reshape((b, n) + x.shape[1:])
        return out.reshape(out.shape[1:]) if single else out


def backbone_forward(frames, model: Backbone) -> Tensor:
    return model(frames)


class TemporalAttention(nn.Module):
    """Linear per-frame score followed by a softmax over frames."""

    def __init__(self, dim: int, rng: np.random.Generator):
        super().__init__()
        self.score = nn.Linear(dim, 1, rng)


def temporal_aggregate(feats, mode: str = "avg", attention: TemporalAttention | None = None) -> Tensor:
    """[..., N, D] -> [..., D] by frame mean ('avg') or learned attention ('ta')."""
    feats = as_tensor(feats)
    if feats.ndim < 2 or feats.shape[-2] < 1:
        raise ValueError(f"temporal_aggregate expects [..., N, D], got {feats.shape}")
    if mode == "avg":
        return feats.mean(axis=-2)
    if mode == "ta":
        if attention is None:
            raise ValueError("mode 'ta' needs a TemporalAttention module")
        weights = T.softmax(attention.score(feats), axis=-2)  # [..., N, 1]
        return (feats * weights).sum(axis=-2)
    raise ValueError(f"unknown temporal aggregation mode {mode!r}")


@dataclass
class SnippetEmbedding:
    vector: Tensor  # [B, D_emb]
    identity_logits: Tensor  # [B, num_ids]


class ReidModel(nn.Module):
    def __init__(
        self,
        cfg: BackboneConfig,
        num_ids: int,
        height: int,
        width: int,
        rng: np.random.Generator,
        aggregation: str = "avg",
    ):
        super().__init__()
        if aggregation not in ("avg", "ta"):
            raise ValueError(f"unknown temporal aggregation mode {aggregation!r}")
        self.cfg = cfg
        self.aggregation = aggregation
        self.backbone = Backbone(cfg, height, width, rng)
        if aggregation == "ta":
            self.temporal = TemporalAttention(cfg.out_channels, rng)
        self.classifier = nn.Linear(cfg.out_channels, num_ids, rng)

    def embed(self, frames) -> Tensor:
        feats = nn.global_avg_pool(self.backbone(frames))  # [B, N, D]
        return temporal_aggregate(feats, self.aggregation, getattr(self, "temporal", None))

    def forward(self, frames) -> SnippetEmbedding:
        vec = self.embed(frames)
        return SnippetEmbedding(vec, self.classifier(vec))


def reid_forward(frames, model: ReidModel) -> SnippetEmbedding:
    return model(frames)


class TwoBranchModel(nn.Module):
    """Shared backbone feeding a global branch and a COSAM + SRIM branch.

    With ``tied=True`` and both modules disabled the two branches are the same
    function, which gives P == Q exactly.
    """

    def __init__(
        self,
        cfg: BackboneConfig,
        num_classes: int,
        height: int,
        width: int,
        rng: np.random.Generator,
        use_cosam: bool = True,
        use_srim: bool = True,
        tied: bool = False,
    ):
        super().__init__()
        base = BackboneConfig(
            blocks=cfg.blocks, insert_cosam_after=set(), insert_srim_after=set(), in_channels=cfg.in_channels
        )
        self.backbone = Backbone(base, height, width, rng)
        d = cfg.out_channels
        h, w = base.output_size(height, width)
        self.use_cosam, self.use_srim, self.tied = use_cosam, use_srim, tied
        if use_cosam:
            cc = CosamConfig(D=d, D_R=max(1, min(cfg.cosam_D_R, d // 2)), K=cfg.cosam_K, eps_ncc=cfg.cosam_eps)
            self.cosam = Cosam(cc, h, w, rng)
        if use_srim:
            c_r = max(cfg.srim_heads, min(cfg.srim_C_R, d // 2))
            c_r -= c_r % cfg.srim_heads
            sc = SrimConfig(C_L=d, C_R=c_r, N_o=cfg.srim_N_o, heads=cfg.srim_heads, window=cfg.srim_window)
            self.srim = Srim(sc, rng)
        self.global_head = nn.Linear(d, num_classes, rng)
        if not tied:
            self.cosb_head = nn.Linear(d, num_classes, rng)

    def forward(self, frames) -> tuple[Tensor, Tensor, Tensor, Tensor]:
        """Returns (P, Q, global_logits, cosb_logits), one row per snippet."""
        feats = self.backbone(frames)
        single = feats.ndim == 4
        if single:
            feats = feats.reshape((1,) + feats.shape)
        g = nn.global_avg_pool(feats).mean(axis=1)
        co = feats
        if self.use_cosam:
            co, _, _ = self.cosam(co)
        if self.use_srim:
            co = self.srim(co)
        c = nn.global_avg_pool(co).mean(axis=1)
        logits_p = self.global_head(g)
        logits_q = (self.global_head if self.tied else self.cosb_head)(c)
        return T.softmax(logits_p, axis=-1), T.softmax(logits_q, axis=-1), logits_p, logits_q


def two_branch_forward(frames, model: TwoBranchModel):
    return model(frames)
