"""Finite-difference audit over every differentiable op and composite block.

Each check builds a small double-precision problem from a seed, reduces the
output to a scalar with a fixed random projection, and compares backprop to
central differences.  Inputs to kinked functions (relu, max) are kept away
from their kinks; composite blocks use seeds whose random draws do not put
any relu pre-activation or descriptor std within finite-difference range of
a kink.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import nn, objectives
from . import tensor as T
from .cosam import Cosam, CosamConfig, build_cost_volume, ncc
from .gradcheck import grad_check
from .model import BackboneConfig, ReidModel, TemporalAttention, TwoBranchModel, temporal_aggregate
from .srim import MaskedSelfAttention, Srim, SrimConfig, masked_mhsa, object_association, redistribute, weighted_avg_pool
from .tensor import Tensor

TOLERANCE = 1e-4
FD_EPS = 1e-5
SEEDS = (0, 1, 2)
# whole-model checks probe this many seeded positions per tensor; every op
# inside them is also checked exhaustively on its own
MODEL_COORDS = 12
SAMPLED = {"backbone_forward", "reid_forward", "distill_loss"}


@dataclass
class CheckResult:
    name: str
    seed: int
    error: float
    passed: bool


def _param(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _away_from_zero(rng, shape, gap=0.1):
    x = rng.uniform(gap, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


def _randomise(module: nn.Module, rng, scale=0.5) -> None:
    for p in module.parameters():
        p.data = p.data + rng.normal(0.0, scale, size=p.shape)


def _scalar(fn: Callable[[], Tensor], rng) -> Callable[[], Tensor]:
    probe = fn()
    r = rng.normal(size=probe.shape)
    return lambda: (fn() * r).sum()


# -- primitive ops -----------------------------------------------------------


def check_conv1x1(rng):
    x, w, b = _param(rng, 2, 3, 4, 4), _param(rng, 5, 3), _param(rng, 5)
    return _scalar(lambda: nn.conv1x1(x, w, b), rng), [x, w, b]


def check_conv2d(rng):
    x, w, b = _param(rng, 2, 3, 4, 4), _param(rng, 4, 3, 3, 3), _param(rng, 4)
    f1 = _scalar(lambda: nn.conv2d(x, w, b, stride=1), rng)
    f2 = _scalar(lambda: nn.conv2d(x, w, b, stride=2), rng)
    return (lambda: f1() + f2()), [x, w, b]


def check_batch_norm(rng):
    x = _param(rng, 3, 2, 3, 3)
    g, b = _param(rng, 2), _param(rng, 2)
    state = nn.BatchNormState(2)
    return _scalar(lambda: nn.batch_norm2d(x, g, b, state, "train"), rng), [x, g, b]


def check_linear(rng):
    x, w, b = _param(rng, 4, 3), _param(rng, 2, 3), _param(rng, 2)
    return _scalar(lambda: nn.linear(x, w, b), rng), [x, w, b]


def check_relu(rng):
    x = Tensor(_away_from_zero(rng, (4, 5)), requires_grad=True)
    return _scalar(lambda: T.relu(x), rng), [x]


def check_sigmoid(rng):
    x = _param(rng, 4, 5)
    return _scalar(lambda: T.sigmoid(x), rng), [x]


def check_softmax(rng):
    x = _param(rng, 3, 5)
    mask = rng.uniform(size=(3, 5)) > 0.3
    mask[:, 0] = True
    f1 = _scalar(lambda: T.softmax(x, axis=1), rng)
    f2 = _scalar(lambda: T.softmax(x, axis=0), rng)
    f3 = _scalar(lambda: T.softmax(x, axis=1, mask=mask), rng)
    return (lambda: f1() + f2() + f3()), [x]


def check_log_softmax(rng):
    x = _param(rng, 3, 5)
    return _scalar(lambda: T.log_softmax(x, axis=-1), rng), [x]


def check_gap(rng):
    x = _param(rng, 2, 3, 4, 5)
    return _scalar(lambda: nn.global_avg_pool(x), rng), [x]


def check_arithmetic(rng):
    a, b = _param(rng, 3, 4), Tensor(rng.uniform(0.5, 2.0, size=(1, 4)), requires_grad=True)
    return _scalar(lambda: (a * b - a / b + T.exp(a * 0.3) + T.log(b) + T.sqrt(b) + a**2), rng), [a, b]


def check_matmul_take(rng):
    a, b = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    idx = np.array([[1, 0], [0, 0]])
    return _scalar(lambda: T.take(T.matmul(a, b), idx, axis=0), rng), [a, b]


def check_standardize(rng):
    x = _param(rng, 3, 6, 4)
    return _scalar(lambda: T.standardize(x, axis=1, eps=1e-4), rng), [x]


def check_ncc(rng):
    p, q = _param(rng, 8), _param(rng, 8)
    return (lambda: ncc(p, q, 1e-4)), [p, q]


# -- COSAM -------------------------------------------------------------------


def check_cost_volume(rng):
    x = _param(rng, 3, 4, 3, 3)
    return _scalar(lambda: build_cost_volume(x, K=2).values, rng), [x]


def _toy_cosam(rng, **kw):
    cfg = CosamConfig(D=8, D_R=4, K=2, **kw)
    m = Cosam(cfg, 4, 4, rng)
    _randomise(m, rng)
    x = _param(rng, 3, 8, 4, 4)
    return m, x


def check_spatial_attention(rng):
    m, x = _toy_cosam(rng, channel=False)
    return _scalar(lambda: m.spatial_attention(x)[0], rng), [x] + m.parameters()


def check_channel_attention(rng):
    m, x = _toy_cosam(rng, spatial=False)
    return _scalar(lambda: m.channel_attention(x)[0], rng), [x] + m.parameters()


def check_cosam_forward(rng):
    m, x = _toy_cosam(rng)
    return _scalar(lambda: m(x)[0], rng), [x] + m.parameters()


# -- SRIM --------------------------------------------------------------------


def check_object_association(rng):
    f = _param(rng, 2, 4, 3, 3)
    conv = nn.Conv1x1(4, 2, rng)
    _randomise(conv, rng)
    return _scalar(lambda: object_association(f, conv), rng), [f] + conv.parameters()


def check_weighted_avg_pool(rng):
    f, logits = _param(rng, 2, 4, 3, 3), _param(rng, 2, 2, 9)
    return _scalar(lambda: weighted_avg_pool(f, T.softmax(logits, -1).reshape(2, 2, 3, 3)), rng), [f, logits]


def check_masked_mhsa(rng):
    cfg = SrimConfig(C_L=8, C_R=4, N_o=2, heads=2, window=1)
    att = MaskedSelfAttention(4, 2, rng)
    _randomise(att, rng)
    obj = _param(rng, 3, 2, 4)
    return _scalar(lambda: masked_mhsa(obj, cfg, att), rng), [obj] + att.parameters()


def check_redistribute(rng):
    att, logits = _param(rng, 2, 2, 4), _param(rng, 2, 2, 9)
    conv = nn.Conv1x1(4, 8, rng)
    _randomise(conv, rng)
    return (
        _scalar(lambda: redistribute(att, T.softmax(logits, -1).reshape(2, 2, 3, 3), conv), rng),
        [att, logits] + conv.parameters(),
    )


def check_srim_forward(rng):
    m = Srim(SrimConfig(C_L=8, C_R=4, N_o=2, heads=2), rng)
    _randomise(m, rng)
    x = _param(rng, 3, 8, 3, 3)
    return _scalar(lambda: m(x), rng), [x] + m.parameters()


# -- models ------------------------------------------------------------------


def _toy_backbone_cfg(**kw):
    return BackboneConfig(blocks=[(3, 2), (6, 2)], insert_cosam_after={2}, cosam_K=2, **kw)


def check_backbone(rng):
    model = ReidModel(_toy_backbone_cfg(), 3, 8, 8, rng)
    _randomise(model.backbone, rng, 0.3)
    x = _param(rng, 1, 3, 3, 8, 8)
    return _scalar(lambda: model.backbone(x), rng), [x] + model.backbone.parameters()


def check_temporal_attention(rng):
    ta = TemporalAttention(5, rng)
    _randomise(ta, rng)
    x = _param(rng, 2, 4, 5)
    return _scalar(lambda: temporal_aggregate(x, "ta", ta), rng), [x] + ta.parameters()


def check_reid_forward(rng):
    model = ReidModel(_toy_backbone_cfg(), 3, 8, 8, rng, aggregation="ta")
    _randomise(model, rng, 0.3)
    x = _param(rng, 1, 3, 3, 8, 8)

    def f():
        out = model(x)
        return out.vector.sum() * 0.3 + (out.identity_logits * out.identity_logits).sum()

    return f, [x] + model.parameters()


# -- losses ------------------------------------------------------------------


def check_cross_entropy(rng):
    logits = _param(rng, 4, 3)
    return (lambda: objectives.cross_entropy(logits, [0, 2, 1, 2])), [logits]


def _separated_embeddings(rng, n=6, d=3):
    # distinct pairwise distances so hardest positive / negative are unique
    return Tensor(rng.normal(size=(n, d)) * 2.0, requires_grad=True)


def check_triplet(rng):
    emb = _separated_embeddings(rng)
    labels = [0, 0, 1, 1, 2, 2]
    return (lambda: objectives.batch_hard_triplet(emb, labels, margin=5.0)), [emb]


def check_kl(rng):
    lp, lq = _param(rng, 3, 5), _param(rng, 3, 5)
    f1 = lambda: objectives.kl_divergence(T.softmax(lp, -1), T.softmax(lq, -1))  # noqa: E731
    return (lambda: f1() + objectives.kl_from_logits(lp, lq)), [lp, lq]


def check_reid_loss(rng):
    emb, logits = _separated_embeddings(rng), _param(rng, 6, 3)
    labels = [0, 0, 1, 1, 2, 2]
    return (lambda: objectives.reid_loss(logits, labels, emb, labels, 5.0, 1.0)[0]), [emb, logits]


def check_distill_loss(rng):
    model = TwoBranchModel(_toy_backbone_cfg(srim_heads=2, srim_N_o=2), 3, 8, 8, rng)
    _randomise(model, rng, 0.3)
    x = _param(rng, 2, 3, 3, 8, 8)
    y = [0, 2]

    def f():
        p, q, lp, lq = model(x)
        ce_p, ce_q = objectives.cross_entropy(lp, y), objectives.cross_entropy(lq, y)
        return objectives.distill_loss(p, q, ce_p, ce_q, lam=2.0, lam_kl=4.0)

    return f, [x] + model.parameters()


CHECKS: dict[str, Callable] = {
    "conv1x1": check_conv1x1,
    "conv2d": check_conv2d,
    "batch_norm2d": check_batch_norm,
    "linear": check_linear,
    "relu": check_relu,
    "sigmoid": check_sigmoid,
    "softmax": check_softmax,
    "log_softmax": check_log_softmax,
    "global_avg_pool": check_gap,
    "arithmetic": check_arithmetic,
    "matmul_take": check_matmul_take,
    "standardize": check_standardize,
    "ncc": check_ncc,
    "build_cost_volume": check_cost_volume,
    "spatial_attention": check_spatial_attention,
    "channel_attention": check_channel_attention,
    "cosam_forward": check_cosam_forward,
    "object_association": check_object_association,
    "weighted_avg_pool": check_weighted_avg_pool,
    "masked_mhsa": check_masked_mhsa,
    "redistribute": check_redistribute,
    "srim_forward": check_srim_forward,
    "backbone_forward": check_backbone,
    "temporal_attention": check_temporal_attention,
    "reid_forward": check_reid_forward,
    "cross_entropy": check_cross_entropy,
    "batch_hard_triplet": check_triplet,
    "kl_divergence": check_kl,
    "reid_loss": check_reid_loss,
    "distill_loss": check_distill_loss,
}


def run_check(name: str, seed: int, tol: float = TOLERANCE) -> CheckResult:
    rng = np.random.default_rng([seed, 1000 + list(CHECKS).index(name)])
    f, wrt = CHECKS[name](rng)
    coords = MODEL_COORDS if name in SAMPLED else None
    err = grad_check(f, wrt, eps=FD_EPS, max_coords=coords, seed=seed)
    return CheckResult(name, seed, err, err < tol)


def run_audit(names=None, seeds=SEEDS, tol: float = TOLERANCE, report=None) -> list[CheckResult]:
    results = []
    start = time.perf_counter()
    for name in names or CHECKS:
        for seed in seeds:
            res = run_check(name, seed, tol)
            results.append(res)
            if report is not None:
                report(res)
    if report is not None:
        report(f"audit finished in {time.perf_counter() - start:.1f}s")
    return results
