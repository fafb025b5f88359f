"""Training objectives: cross-entropy, batch-hard triplet, KL distillation."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor

DEFAULT_MARGIN = 0.3


def cross_entropy(logits, targets) -> Tensor:
    """Mean over the batch of -log softmax(logits)[target]."""
    logits = as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if logits.ndim != 2 or logits.shape[0] != targets.size:
        raise ValueError(f"logits {logits.shape} do not match {targets.size} targets")
    c = logits.shape[1]
    if targets.size and (targets.min() < 0 or targets.max() >= c):
        raise ValueError(f"targets must lie in [0, {c})")
    logp = T.log_softmax(logits, axis=1)
    return -logp[np.arange(targets.size), targets].mean()


def pairwise_distances(emb) -> Tensor:
    """Euclidean distances between rows; the squared distance is floored at 1e-12 before the root."""
    emb = as_tensor(emb)
    diff = emb.reshape(emb.shape[0], 1, -1) - emb.reshape(1, emb.shape[0], -1)
    return T.sqrt(T.clamp_min((diff * diff).sum(axis=-1), 1e-12))


def hinge(d_ap, d_an, margin: float = DEFAULT_MARGIN) -> Tensor:
    return T.relu(as_tensor(d_ap) - d_an + margin)


def batch_hard_triplet(embeddings, labels, margin: float = DEFAULT_MARGIN) -> Tensor:
    """Mean over anchors of max(d(a, hardest positive) - d(a, hardest negative) + margin, 0).

    Anchors without another same-label sample or without any other-label
    sample are skipped.
    """
    labels = np.asarray(labels).reshape(-1)
    embeddings = as_tensor(embeddings)
    if embeddings.ndim != 2 or embeddings.shape[0] != labels.size:
        raise ValueError(f"embeddings {embeddings.shape} do not match {labels.size} labels")
    same = labels[:, None] == labels[None, :]
    off_diag = ~np.eye(labels.size, dtype=bool)
    pos = same & off_diag
    neg = ~same
    valid = pos.any(axis=1) & neg.any(axis=1)
    if not valid.any():
        raise ValueError("no anchor has both a positive and a negative in the batch")
    dist = pairwise_distances(embeddings)
    d_ap = T.max_(dist, axis=1, where=pos | ~valid[:, None])
    d_an = T.min_(dist, axis=1, where=neg | ~valid[:, None])
    losses = hinge(d_ap, d_an, margin)
    return losses[np.flatnonzero(valid)].mean()


def _check_distribution(p: np.ndarray, name: str) -> None:
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6):
        raise ValueError(f"{name} is not a probability distribution")


def kl_divergence(P, Q) -> Tensor:
    """sum P log(P / Q) along the last axis (0 log 0 = 0), averaged over leading rows."""
    P, Q = as_tensor(P), as_tensor(Q)
    if P.shape != Q.shape:
        raise ValueError(f"shape mismatch {P.shape} vs {Q.shape}")
    _check_distribution(P.data, "P")
    _check_distribution(Q.data, "Q")
    support = P.data > 0
    if np.any(support & (Q.data <= 0)):
        raise ValueError("Q must be positive wherever P is")
    safe_p = T.where(support, P, 1.0)
    safe_q = T.where(support, Q, 1.0)
    terms = T.where(support, P * (T.log(safe_p) - T.log(safe_q)), 0.0)
    kl = terms.sum(axis=-1)
    return kl.mean() if kl.ndim else kl


def kl_from_logits(logits_p, logits_q) -> Tensor:
    """KL(softmax(p) || softmax(q)) computed in log space, averaged over rows."""
    lp = T.log_softmax(logits_p, axis=-1)
    lq = T.log_softmax(logits_q, axis=-1)
    kl = (T.exp(lp) * (lp - lq)).sum(axis=-1)
    return kl.mean() if kl.ndim else kl


def reid_loss(logits, targets, embeddings, labels, margin: float = DEFAULT_MARGIN, lam: float = 1.0):
    """Cross-entropy plus lam * batch-hard triplet.  Returns (total, ce, triplet)."""
    ce = cross_entropy(logits, targets)
    if lam == 0:
        return ce, ce, T.zeros(())
    tri = batch_hard_triplet(embeddings, labels, margin)
    return ce + lam * tri, ce, tri


def distill_loss(P, Q, ce_p, ce_q, lam: float = 1.0, lam_kl: float = 1.0, kl=None) -> Tensor:
    """ce_p + lam * ce_q + lam_kl * KL(P || Q).

    ``kl`` may be passed precomputed (e.g. from logits) to skip the
    distribution-space evaluation.
    """
    if kl is None:
        kl = kl_divergence(P, Q) if lam_kl else 0.0
    return ce_p + lam * ce_q + lam_kl * kl
