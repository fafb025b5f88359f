"""Training and evaluation loops for the re-identification toy model."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import metrics, objectives
from . import tensor as T
from .config import ConfigError, RunConfig
from .model import BackboneConfig, ReidModel
from .optim import Adam, step_decay
from .synthdata import Dataset, eval_stack, load_dataset, make_dataset, sample_batch

log = logging.getLogger(__name__)

EVAL_CHUNK = 8


def backbone_config(cfg: RunConfig) -> BackboneConfig:
    return BackboneConfig(
        blocks=[tuple(b) for b in cfg.model.blocks],
        insert_cosam_after=set(cfg.cosam.insert_after) if cfg.cosam.enable else set(),
        insert_srim_after=set(cfg.srim.insert_after) if cfg.srim.enable else set(),
        cosam_K=cfg.cosam.K,
        cosam_D_R=cfg.cosam.D_R,
        cosam_eps=cfg.cosam.eps,
        cosam_spatial=cfg.cosam.spatial,
        cosam_channel=cfg.cosam.channel,
        srim_C_R=cfg.srim.C_R,
        srim_N_o=cfg.srim.N_o,
        srim_heads=cfg.srim.heads,
        srim_window=cfg.srim.window,
    )


def build_model(cfg: RunConfig, num_train_ids: int) -> ReidModel:
    rng = np.random.default_rng([cfg.seed, 1])
    return ReidModel(
        backbone_config(cfg), num_train_ids, cfg.data.height, cfg.data.width, rng, aggregation=cfg.model.aggregation
    )


def get_dataset(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.path:
        ds = load_dataset(d.path)
        p = ds.params
        if (p.get("H"), p.get("W")) != (d.height, d.width) or p.get("N", 0) < d.N:
            raise ConfigError(
                f"dataset at {d.path} is {p.get('H')}x{p.get('W')} with {p.get('N')} frames; "
                f"config wants {d.height}x{d.width} with N={d.N}"
            )
        return ds
    return make_dataset(d.num_ids, d.snippets_per_id, d.video_len, d.height, d.width, d.seed)


@dataclass
class TrainResult:
    model: ReidModel
    history: list = field(default_factory=list)
    seconds: float = 0.0


def train(cfg: RunConfig, ds: Dataset, log_fn=None) -> TrainResult:
    """Adam on cross-entropy + lam * batch-hard triplet with step-decayed learning rate."""
    label_map = ds.train_label_map()
    model = build_model(cfg, len(label_map))
    opt = Adam(model.parameters(), lr=cfg.optim.lr, betas=(cfg.optim.beta1, cfg.optim.beta2), eps=cfg.optim.eps)
    history = []
    start = time.perf_counter()
    model.train()
    for step in range(cfg.optim.steps):
        batch = sample_batch(ds.train, cfg.batch.P, cfg.batch.K_s, cfg.batch.frame_select, cfg.data.N, [cfg.seed, step])
        targets = np.array([label_map[int(i)] for i in batch.labels])
        opt.lr = step_decay(cfg.optim.lr, step, cfg.decay_every, cfg.optim.decay_factor)
        out = model(batch.frames)
        total, ce, tri = objectives.reid_loss(
            out.identity_logits, targets, out.vector, batch.labels, cfg.loss.margin, cfg.loss.lam
        )
        opt.zero_grad()
        T.backward(total)
        opt.step()
        rec = {"step": step, "total": total.item(), "ce": ce.item(), "triplet": tri.item(), "lr": opt.lr}
        history.append(rec)
        if log_fn is not None:
            log_fn(rec)
    return TrainResult(model, history, time.perf_counter() - start)


def embed_split(model: ReidModel, frames: np.ndarray) -> tuple[np.ndarray, dict]:
    """Embeddings for [S, N, 3, H, W] snippets plus the spatial masks of each COSAM layer."""
    model.eval()
    vecs, masks = [], {}
    with T.no_grad():
        for i in range(0, frames.shape[0], EVAL_CHUNK):
            vecs.append(model.embed(frames[i : i + EVAL_CHUNK]).data)
            for k, m in model.backbone.last_masks.items():
                masks.setdefault(k, []).append(m.data)
    return np.concatenate(vecs), {k: np.concatenate(v) for k, v in masks.items()}


def permutation_chance_map(result: metrics.RetrievalResult, trials: int = 200, seed: int = 0) -> tuple[float, float]:
    """Mean and std of mAP when gallery labels are shuffled (retrieval carries no information)."""
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(trials):
        shuffled = metrics.RetrievalResult(
            result.distance_matrix, result.query_labels, rng.permutation(result.gallery_labels)
        )
        vals.append(metrics.mean_ap(shuffled))
    return float(np.mean(vals)), float(np.std(vals))


def evaluate(model: ReidModel, ds: Dataset, N: int, ranks=(1, 5, 20)) -> dict:
    qf, qm, ql = eval_stack(ds.query, N)
    gf, gm, gl = eval_stack(ds.gallery, N)
    q_emb, q_masks = embed_split(model, qf)
    g_emb, g_masks = embed_split(model, gf)
    result = metrics.RetrievalResult.from_embeddings(q_emb, g_emb, ql, gl)
    report = {f"cmc@{k}": v for k, v in zip(ranks, metrics.cmc(result, ranks))}
    report["mAP"] = metrics.mean_ap(result)
    report["mAP_chance"], report["mAP_chance_std"] = permutation_chance_map(result)
    if q_masks and model.cfg.cosam_spatial:
        first = min(q_masks)
        mask = np.concatenate([q_masks[first], g_masks[first]])
        gt = np.concatenate([qm, gm])
        h, w = mask.shape[-2:]
        report["coverage"] = metrics.attention_coverage(mask, gt)
        report["gt_area_fraction"] = metrics.area_fraction(gt, h, w)
        report["coverage_ratio"] = report["coverage"] / report["gt_area_fraction"]
    return report
