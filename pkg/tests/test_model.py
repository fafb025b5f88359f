import numpy as np
import pytest

from cosam import objectives
from cosam import tensor as T
from cosam.gradcheck import grad_check
from cosam.model import Backbone, BackboneConfig, ReidModel, TemporalAttention, TwoBranchModel, temporal_aggregate
from cosam.tensor import Tensor


def frames(rng, b=2, n=4, h=64, w=32):
    return rng.normal(size=(b, n, 3, h, w))


def test_stride_arithmetic(rng):
    cfg = BackboneConfig(insert_cosam_after=set())
    assert cfg.total_stride == 16 and cfg.output_size(64, 32) == (4, 2)
    out = Backbone(cfg, 64, 32, rng)(frames(rng))
    assert out.shape == (2, 4, 128, 4, 2)


def test_empty_insertion_is_plain_cnn(rng):
    b = Backbone(BackboneConfig(insert_cosam_after=set()), 64, 32, rng)
    assert not any("cosam" in n or "srim" in n for n, _ in b.named_parameters())
    b(frames(rng, b=1))
    assert b.last_masks == {}


def test_insertion_validation():
    with pytest.raises(ValueError):
        BackboneConfig(insert_cosam_after={5})
    with pytest.raises(ValueError):
        BackboneConfig(blocks=[(8, 3)], insert_cosam_after=set())


def test_baseline_and_augmented_shapes_agree(rng):
    x = frames(rng)
    outs = []
    for cos, srim in ((set(), set()), ({3, 4}, set()), ({3, 4}, {4})):
        cfg = BackboneConfig(insert_cosam_after=cos, insert_srim_after=srim, srim_heads=4)
        m = ReidModel(cfg, 5, 64, 32, np.random.default_rng(1))
        out = m(x)
        outs.append((out.vector.shape, out.identity_logits.shape))
    assert len(set(outs)) == 1 and outs[0] == ((2, 128), (2, 5))


def test_masks_recorded_per_insertion(rng):
    b = Backbone(BackboneConfig(), 64, 32, rng)
    b(frames(rng))
    assert sorted(b.last_masks) == [3, 4]
    assert b.last_masks[3].shape == (2, 4, 1, 8, 4)


def test_temporal_aggregation(rng):
    f = rng.normal(size=(5,))
    assert np.allclose(temporal_aggregate(np.stack([f] * 3), "avg").data, f)
    assert temporal_aggregate(np.array([[1.0], [3.0]]), "avg").data.item() == 2.0
    ta = TemporalAttention(5, rng)
    ta.score.weight.data[:] = 0
    x = rng.normal(size=(2, 4, 5))
    assert np.allclose(temporal_aggregate(x, "ta", ta).data, temporal_aggregate(x, "avg").data, atol=1e-15)
    with pytest.raises(ValueError):
        temporal_aggregate(x, "max")
    with pytest.raises(ValueError):
        temporal_aggregate(x, "ta")


def test_identical_snippets_identical_embeddings(rng):
    m = ReidModel(BackboneConfig(), 4, 64, 32, rng).eval()
    x = frames(rng, b=1)
    with T.no_grad():
        e = m.embed(np.concatenate([x, x])).data
    assert np.array_equal(e[0], e[1])


def test_cosam_is_live_in_the_graph(rng):
    x = frames(rng, b=2)
    base = ReidModel(BackboneConfig(insert_cosam_after=set()), 4, 64, 32, np.random.default_rng(3))
    aug = ReidModel(BackboneConfig(), 4, 64, 32, np.random.default_rng(3))
    # share the backbone convolutions so the only difference is COSAM
    shared = dict(base.named_parameters())
    for name, p in aug.named_parameters():
        if name in shared:
            p.data[...] = shared[name].data
    assert not np.allclose(base.embed(x).data, aug.embed(x).data)


def test_mask_parameters_receive_gradient(rng):
    m = ReidModel(BackboneConfig(), 4, 64, 32, rng)
    out = m(frames(rng))
    total, _, _ = objectives.reid_loss(out.identity_logits, [0, 1], out.vector, [0, 1], lam=0)
    T.backward(total)
    g = m.backbone.cosam3.summary.weight.grad
    assert g is not None and np.any(g != 0)


def _randomise(module, rng, scale=0.3):
    for p in module.parameters():
        p.data += rng.normal(0, scale, size=p.shape)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_two_block_backbone_gradient(seed):
    rng = np.random.default_rng([seed, 91])
    cfg = BackboneConfig(blocks=[(4, 2), (8, 2)], insert_cosam_after={2}, cosam_K=2)
    b = Backbone(cfg, 8, 8, rng)
    _randomise(b, rng)
    x = Tensor(rng.normal(size=(2, 3, 3, 8, 8)), requires_grad=True)
    r = rng.normal(size=(2, 3, 8, 2, 2))
    assert grad_check(lambda: (b(x) * r).sum(), [x] + b.parameters()) < 1e-4


def test_training_trajectory_is_deterministic():
    def run():
        rng = np.random.default_rng(0)
        m = ReidModel(BackboneConfig(blocks=[(4, 2), (8, 2)], insert_cosam_after={2}, cosam_K=2), 3, 8, 8, rng)
        from cosam.optim import Adam

        opt = Adam(m.parameters(), lr=1e-2)
        data = np.random.default_rng(1).normal(size=(4, 3, 3, 8, 8))
        losses = []
        for _ in range(10):
            out = m(data)
            total, _, _ = objectives.reid_loss(out.identity_logits, [0, 0, 1, 2], out.vector, [0, 0, 1, 2])
            opt.zero_grad()
            T.backward(total)
            opt.step()
            losses.append(total.item())
        return losses, m.state_dict()

    (l1, s1), (l2, s2) = run(), run()
    assert l1 == l2
    assert all(np.array_equal(s1[k], s2[k]) for k in s1)


# -- two-branch ----------------------------------------------------------------


def small_two_branch(rng, **kw):
    cfg = BackboneConfig(blocks=[(4, 2), (8, 2)], insert_cosam_after=set(), cosam_K=2, srim_N_o=2, srim_heads=2)
    return TwoBranchModel(cfg, 3, 8, 8, rng, **kw)


def test_two_branch_outputs_are_distributions(rng):
    m = small_two_branch(rng)
    P, Q, lp, lq = m(rng.normal(size=(2, 3, 3, 8, 8)))
    assert P.shape == Q.shape == (2, 3)
    assert np.allclose(P.data.sum(-1), 1, atol=1e-6) and np.allclose(Q.data.sum(-1), 1, atol=1e-6)


def test_tied_degenerate_branches_agree(rng):
    m = small_two_branch(rng, use_cosam=False, use_srim=False, tied=True)
    P, Q, _, _ = m(rng.normal(size=(2, 3, 3, 8, 8)))
    assert np.array_equal(P.data, Q.data)
    assert objectives.kl_divergence(P, Q).item() == 0.0


def test_distillation_reaches_both_branches(rng):
    m = small_two_branch(rng)
    for p in m.parameters():
        p.data += rng.normal(0, 0.3, size=p.shape)
    P, Q, lp, lq = m(rng.normal(size=(2, 3, 3, 8, 8)))
    y = [0, 2]
    loss = objectives.distill_loss(P, Q, objectives.cross_entropy(lp, y), objectives.cross_entropy(lq, y))
    T.backward(loss)
    for name, p in m.named_parameters():
        assert p.grad is not None and np.any(p.grad != 0), name
