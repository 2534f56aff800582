from types import SimpleNamespace

import numpy as np
import numpy.testing as npt
import pytest

from _gradcheck import check_gradients
from costdet import autodiff as ad
from costdet import losses
from costdet.errors import ConfigError


def fake_slice(n_lesions):
    return SimpleNamespace(lesions=[SimpleNamespace(significant=True)] * n_lesions)


def probs(values):
    return ad.Value(np.array(values, dtype=np.float64).reshape(-1, 1))


# ---------------------------------------------------------------------------
# CostConfig
# ---------------------------------------------------------------------------

def test_defaults_are_plain_bce():
    cfg = losses.CostConfig()
    assert (cfg.alpha_lesion, cfg.beta_lesion) == (1.0, 1.0)
    assert (cfg.alpha_slice, cfg.beta_slice) == (1.0, 1.0)
    assert cfg.use_slice_loss is False


def test_config_rejects_negative_weight():
    with pytest.raises(ConfigError):
        losses.CostConfig(alpha_lesion=-1.0).validate()


def test_config_tags():
    assert losses.CostConfig(alpha_lesion=3).tag() == "a3b1"
    assert losses.CostConfig(beta_lesion=3).tag() == "a1b3"
    assert losses.CostConfig(alpha_slice=3, use_slice_loss=True).tag() == "a1b1-s3-1"


# ---------------------------------------------------------------------------
# lesion_cost_loss
# ---------------------------------------------------------------------------

def test_lesion_loss_single_positive():
    out = losses.lesion_cost_loss(probs([0.5]), [1], losses.CostConfig())
    npt.assert_allclose(out.item(), 0.693147, atol=1e-6)


def test_lesion_loss_weighted_pair():
    out = losses.lesion_cost_loss(
        probs([0.5, 0.5]), [1, 0], losses.CostConfig(alpha_lesion=3.0)
    )
    npt.assert_allclose(out.item(), 1.386294, atol=1e-6)


def test_lesion_loss_confident_limit():
    out = losses.lesion_cost_loss(
        probs([1.0, 0.0, 1.0]), [1, 0, 1], losses.CostConfig(alpha_lesion=3, beta_lesion=2)
    )
    assert 0.0 <= out.item() < 1e-5


def test_lesion_loss_no_labeled_is_detached_zero():
    out = losses.lesion_cost_loss(probs([0.3, 0.8]), [None, None], losses.CostConfig())
    assert out.item() == 0.0
    assert out._parents == ()
    assert out.requires_grad is False


def test_lesion_loss_alpha_scaling_exact():
    rng = np.random.default_rng(51)
    for _ in range(50):
        n = int(rng.integers(1, 8))
        p = rng.uniform(0.05, 0.95, size=n)
        c = float(rng.uniform(0.5, 5.0))
        base = losses.lesion_cost_loss(probs(p), [1] * n, losses.CostConfig())
        scaled = losses.lesion_cost_loss(
            probs(p), [1] * n, losses.CostConfig(alpha_lesion=c)
        )
        assert scaled.item() == c * base.item()


def test_lesion_loss_unit_weights_match_plain_bce():
    rng = np.random.default_rng(52)
    for _ in range(50):
        n = int(rng.integers(1, 10))
        p = rng.uniform(0.05, 0.95, size=n)
        t = rng.integers(0, 2, size=n)
        out = losses.lesion_cost_loss(probs(p), list(t), losses.CostConfig())
        plain = np.mean(-t * np.log(p) - (1 - t) * np.log1p(-p))
        assert abs(out.item() - plain) < 1e-12


def test_lesion_loss_gradient_sign_and_magnitude():
    p = probs([0.5])
    p.requires_grad = True
    out = losses.lesion_cost_loss(p, [1], losses.CostConfig(alpha_lesion=3.0))
    out.backward()
    npt.assert_allclose(p.grad, [[-6.0]])  # -alpha/p at p=0.5


def test_lesion_loss_gradcheck():
    rng = np.random.default_rng(53)
    for _ in range(100):
        n = int(rng.integers(1, 8))
        logits = rng.normal(size=(n, 1))
        labels = [int(v) if v < 2 else None for v in rng.integers(0, 3, size=n)]
        if all(l is None for l in labels):
            labels[0] = 1
        cfg = losses.CostConfig(
            alpha_lesion=float(rng.uniform(0.5, 4)), beta_lesion=float(rng.uniform(0.5, 4))
        )
        check_gradients(
            lambda v: losses.lesion_cost_loss(ad.sigmoid(v[0]), labels, cfg), [logits]
        )


# ---------------------------------------------------------------------------
# slice-level loss
# ---------------------------------------------------------------------------

def test_slice_targets_max_of_labels():
    p_star, p_slice = losses.slice_targets(probs([0.2, 0.9, 0.4]), [0, 1, 0], True)
    assert p_star == 1
    npt.assert_allclose(p_slice.item(), 0.9)


def test_slice_targets_probability_max_over_all():
    # the excluded proposal still participates in the probability max
    _, p_slice = losses.slice_targets(probs([0.2, 0.95, 0.4]), [0, None, 0], False)
    npt.assert_allclose(p_slice.item(), 0.95)


def test_slice_targets_no_proposals():
    p_star, p_slice = losses.slice_targets(None, [], False)
    assert p_star == 0
    npt.assert_allclose(p_slice.item(), ad.PROB_EPS)
    p_star, _ = losses.slice_targets(None, [], True)
    assert p_star == 1


def test_slice_targets_gt_fallback_with_unlabeled_proposals():
    p_star, _ = losses.slice_targets(probs([0.3]), [0], True)
    assert p_star == 1


def test_slice_loss_positive_example():
    cfg = losses.CostConfig(alpha_slice=3.0, use_slice_loss=True)
    out = losses.slice_cost_loss(1, ad.Value(0.5), cfg)
    npt.assert_allclose(out.item(), 2.079442, atol=1e-6)


def test_slice_loss_negative_example():
    cfg = losses.CostConfig(beta_slice=3.0, use_slice_loss=True)
    out = losses.slice_cost_loss(0, ad.Value(0.1), cfg)
    npt.assert_allclose(out.item(), 0.316082, atol=1e-6)


def test_slice_loss_negative_limit():
    cfg = losses.CostConfig(beta_slice=3.0, use_slice_loss=True)
    out = losses.slice_cost_loss(0, ad.Value(1e-9), cfg)
    assert 0.0 <= out.item() < 1e-6


def test_slice_loss_gradient_hits_only_argmax():
    p = probs([0.2, 0.9, 0.4, 0.1])
    p.requires_grad = True
    _, p_slice = losses.slice_targets(p, [0, 1, 0, 0], True)
    out = losses.slice_cost_loss(1, p_slice, losses.CostConfig(alpha_slice=3, use_slice_loss=True))
    out.backward()
    nonzero = np.flatnonzero(p.grad.reshape(-1))
    npt.assert_array_equal(nonzero, [1])


# ---------------------------------------------------------------------------
# total_loss
# ---------------------------------------------------------------------------

def make_outputs(
    anchor_labels,
    proposal_labels,
    anchor_logits=None,
    prop_logits=None,
    mask_grid=4,
    seed=0,
):
    rng = np.random.default_rng(seed)
    n_a = len(anchor_labels)
    n_p = len(proposal_labels)
    anchor_logits = anchor_logits if anchor_logits is not None else rng.normal(size=(n_a, 1))
    objectness = ad.sigmoid(ad.Value(anchor_logits, requires_grad=True))
    anchor_deltas = ad.Value(rng.normal(scale=0.3, size=(n_a, 4)), requires_grad=True)
    out = losses.StageOutputs(
        anchor_objectness=objectness,
        anchor_deltas=anchor_deltas,
        anchor_labels=np.array(anchor_labels),
        anchor_delta_targets=rng.normal(scale=0.3, size=(n_a, 4)),
        proposal_labels=list(proposal_labels),
    )
    if n_p:
        prop_logits = prop_logits if prop_logits is not None else rng.normal(size=(n_p, 1))
        out.class_prob = ad.sigmoid(ad.Value(prop_logits, requires_grad=True))
        out.roi_deltas = ad.Value(rng.normal(scale=0.3, size=(n_p, 4)), requires_grad=True)
        out.roi_masks = ad.sigmoid(
            ad.Value(rng.normal(size=(n_p, mask_grid, mask_grid)), requires_grad=True)
        )
        out.roi_delta_targets = rng.normal(scale=0.3, size=(n_p, 4))
        out.mask_targets = (rng.random((n_p, mask_grid, mask_grid)) < 0.5).astype(np.float64)
    return out


def leaf_of(value):
    # walk down the single-parent chain to the leaf (sigmoid(Value(...)))
    node = value
    while node._parents:
        node = node._parents[0]
    return node


def test_total_negative_slice_routing():
    out = make_outputs([0, 0, 0, 0], [0, 0, 0])
    cfg = losses.CostConfig(beta_lesion=3.0)
    bd = losses.total_loss(fake_slice(0), out, cfg)
    assert bd.rpn_reg.item() == 0.0 and bd.box.item() == 0.0 and bd.mask.item() == 0.0
    assert bd.slice_cls.item() == 0.0
    assert bd.total.item() == bd.rpn_cls.item() + bd.cost_cls.item()
    bd.total.backward()
    npt.assert_array_equal(out.anchor_deltas.grad, np.zeros((4, 4)))
    npt.assert_array_equal(leaf_of(out.roi_deltas).grad, np.zeros((3, 4)))
    npt.assert_array_equal(leaf_of(out.roi_masks).grad, np.zeros((3, 4, 4)))
    assert np.abs(leaf_of(out.class_prob).grad).max() > 0
    assert np.abs(leaf_of(out.anchor_objectness).grad).max() > 0


def test_total_positive_slice_all_terms():
    out = make_outputs([1, 0, -1, 0], [1, 0, None])
    cfg = losses.CostConfig(alpha_slice=3.0, use_slice_loss=True)
    bd = losses.total_loss(fake_slice(2), out, cfg)
    for term in (bd.rpn_reg, bd.rpn_cls, bd.box, bd.mask, bd.cost_cls, bd.slice_cls):
        assert term.item() > 0.0
    parts = (
        ((((bd.rpn_reg.item() + bd.rpn_cls.item()) + bd.box.item()) + bd.mask.item())
         + bd.cost_cls.item()) + bd.slice_cls.item()
    )
    assert bd.total.item() == parts


def test_total_positive_slice_zero_init_slice_term():
    # class probabilities all exactly 0.5 (zero logits)
    out = make_outputs([1, 0], [1, 0], prop_logits=np.zeros((2, 1)))
    cfg = losses.CostConfig(alpha_slice=3.0, use_slice_loss=True)
    bd = losses.total_loss(fake_slice(1), out, cfg)
    npt.assert_allclose(bd.slice_cls.item(), 2.079442, atol=1e-6)  # -3 log 0.5


def test_total_cost_term_independent_of_slice_flag():
    out_a = make_outputs([1, 0], [1, 0], seed=4)
    out_b = make_outputs([1, 0], [1, 0], seed=4)
    cfg_off = losses.CostConfig()
    cfg_on = losses.CostConfig(use_slice_loss=True)
    a = losses.total_loss(fake_slice(1), out_a, cfg_off)
    b = losses.total_loss(fake_slice(1), out_b, cfg_on)
    assert a.cost_cls.item() == b.cost_cls.item()


def test_total_excluded_anchors_carry_no_gradient():
    out = make_outputs([1, -1, 0, -1], [0])
    bd = losses.total_loss(fake_slice(1), out, losses.CostConfig())
    bd.total.backward()
    obj_leaf = leaf_of(out.anchor_objectness)
    npt.assert_array_equal(obj_leaf.grad[[1, 3]], np.zeros((2, 1)))
    assert np.abs(obj_leaf.grad[[0, 2]]).max() > 0


def test_total_cls_labels_override():
    out = make_outputs([1, 0], [1, 1, 0], seed=6)
    out.cls_labels = [1, None, 0]  # second positive sampled out
    bd = losses.total_loss(fake_slice(1), out, losses.CostConfig())
    out2 = make_outputs([1, 0], [1, 1, 0], seed=6)
    out2.proposal_labels = [1, None, 0]
    bd2 = losses.total_loss(fake_slice(1), out2, losses.CostConfig())
    assert bd.cost_cls.item() == bd2.cost_cls.item()


def test_total_loss_gradcheck_positive_slice():
    rng = np.random.default_rng(54)
    cfg = losses.CostConfig(
        alpha_lesion=2.0, beta_lesion=3.0, alpha_slice=1.5, beta_slice=2.0, use_slice_loss=True
    )
    for trial in range(30):
        a_logits = rng.normal(size=(5, 1))
        a_deltas = rng.normal(scale=0.3, size=(5, 4))
        a_targets = rng.normal(scale=0.3, size=(5, 4))
        p_logits = rng.normal(size=(3, 1)) * 1.5
        r_deltas = rng.normal(scale=0.3, size=(3, 4))
        r_targets = rng.normal(scale=0.3, size=(3, 4))
        m_logits = rng.normal(size=(3, 4, 4))
        m_targets = (rng.random((3, 4, 4)) < 0.5).astype(np.float64)
        anchor_labels = np.array([1, 0, -1, 0, 1])
        prop_labels = [1, 0, 1]

        def build(v):
            out = losses.StageOutputs(
                anchor_objectness=ad.sigmoid(v[0]),
                anchor_deltas=v[1],
                anchor_labels=anchor_labels,
                anchor_delta_targets=a_targets,
                class_prob=ad.sigmoid(v[2]),
                roi_deltas=v[3],
                roi_masks=ad.sigmoid(v[4]),
                proposal_labels=prop_labels,
                roi_delta_targets=r_targets,
                mask_targets=m_targets,
            )
            return losses.total_loss(fake_slice(2), out, cfg).total

        check_gradients(build, [a_logits, a_deltas, p_logits, r_deltas, m_logits])


def test_total_loss_gradcheck_negative_slice():
    rng = np.random.default_rng(55)
    cfg = losses.CostConfig(beta_lesion=3.0, beta_slice=2.0, use_slice_loss=True)
    for trial in range(30):
        a_logits = rng.normal(size=(4, 1))
        p_logits = rng.normal(size=(3, 1)) * 1.5
        anchor_labels = np.zeros(4, dtype=int)

        def build(v):
            out = losses.StageOutputs(
                anchor_objectness=ad.sigmoid(v[0]),
                anchor_deltas=ad.Value(np.zeros((4, 4))),
                anchor_labels=anchor_labels,
                anchor_delta_targets=np.zeros((4, 4)),
                class_prob=ad.sigmoid(v[1]),
                proposal_labels=[0, 0, 0],
            )
            return losses.total_loss(fake_slice(0), out, cfg).total

        check_gradients(build, [a_logits, p_logits])
