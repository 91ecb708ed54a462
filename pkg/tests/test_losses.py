import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from greedyfool import autodiff as ad
from greedyfool.losses import LossSpec, loss_tensor, loss_value, margin_loss, target_margin_loss

from gradcheck import assert_grad_close, numeric_grad


@pytest.mark.parametrize("scores,y,kappa,expected", [
    ([3, 1, 0], 0, 0, 2.0),
    ([0, 5], 0, 0, 0.0),  # plateau at -kappa
    ([2, 2], 0, 1, 0.0),  # tie
    ([0, 5], 0, 3, -3.0),
])
def test_margin_loss_examples(scores, y, kappa, expected):
    assert margin_loss(scores, y, kappa) == expected


@pytest.mark.parametrize("scores,tar,kappa,expected", [
    ([3, 1], 1, 0, 2.0),
    ([0, 9], 1, 0, 0.0),
])
def test_target_margin_loss_examples(scores, tar, kappa, expected):
    assert target_margin_loss(scores, tar, kappa) == expected


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=2), st.floats(0, 10))
def test_two_class_label_swap_symmetry(scores, kappa):
    # on two classes, the non-target loss for y equals the target loss for the other class
    assert margin_loss(scores, 0, kappa) == target_margin_loss(scores, 1, kappa)


def test_bad_loss_specs():
    with pytest.raises(ValueError):
        LossSpec("hinge", 0)
    with pytest.raises(ValueError):
        LossSpec("margin", 0, kappa=-1)
    with pytest.raises(ValueError):
        margin_loss([1.0], 0)
    with pytest.raises(ValueError):
        margin_loss([1.0, 2.0], 5)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["margin", "target", "cross_entropy"]),
       st.floats(0, 3))
def test_tensor_loss_matches_numpy(seed, kind, kappa):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(5) * 3
    spec = LossSpec(kind, int(rng.integers(5)), kappa)
    assert float(loss_tensor(ad.Tensor(z[None]), spec).data) == pytest.approx(loss_value(z, spec))


@pytest.mark.parametrize("kind", ["margin", "target", "cross_entropy"])
def test_tensor_loss_gradient(kind):
    z = np.array([[0.3, 2.0, -1.0, 1.2]])  # distinct scores, away from kinks
    spec = LossSpec(kind, 2)
    t = ad.Tensor(z)
    with ad.Record() as rec:
        out = loss_tensor(t, spec)
    g = rec.backward(out)[t]
    assert_grad_close(g, numeric_grad(lambda v: loss_value(v[0], spec), z))
