import numpy as np
import pytest
from numpy.testing import assert_array_equal

from gradcheck import check_op
from hypertransformer.checkpoint import load_perceptual, save
from hypertransformer.errors import ContractError, DimensionError
from hypertransformer.losses import (
    LossWeights, PerceptualNet, loss_overall, loss_rec, loss_transfer_per, loss_vgg_per,
)
from hypertransformer.model import FeatureExtractor
from hypertransformer.tensor import Tensor, backward


@pytest.fixture(scope="module")
def net():
    return PerceptualNet()


@pytest.fixture
def cubes():
    r = np.random.default_rng(11)
    return r.random((6, 8, 8)), r.random((6, 8, 8))


def test_weights_defaults_and_validation():
    w = LossWeights()
    assert (w.rec, w.vgg_per, w.t_per) == (1.0, 0.1, 0.05)
    with pytest.raises(ContractError):
        LossWeights(rec=-1.0)
    with pytest.raises(ContractError):
        LossWeights(t_per=float("nan"))


def test_rec_examples():
    ref = np.random.default_rng(0).random((2, 3, 3))
    assert loss_rec(Tensor(ref), ref).item() == 0.0
    assert loss_rec(Tensor(ref + 0.5), ref).item() == pytest.approx(0.5, abs=1e-15)
    assert loss_rec(Tensor(np.array([0.0, 1.0]).reshape(1, 1, 2)), np.ones((1, 1, 2))).item() == 0.5
    with pytest.raises(DimensionError):
        loss_rec(Tensor(ref), ref[:1])


def test_rec_is_absolutely_homogeneous(cubes):
    x, ref = cubes
    d = x - ref
    base = loss_rec(Tensor(ref + d), ref).item()
    for c in (-2.0, 0.5, 3.0):
        assert loss_rec(Tensor(ref + c * d), ref).item() == pytest.approx(abs(c) * base, rel=1e-12)


def test_vgg_examples(net, cubes):
    x, ref = cubes
    assert loss_vgg_per(Tensor(ref), ref, net).item() == 0.0
    assert loss_vgg_per(Tensor(x), ref, net).item() > 0.0


def test_vgg_decreases_toward_reference(net, cubes):
    x, ref = cubes
    values = [loss_vgg_per(Tensor(ref + a * (x - ref)), ref, net).item() for a in (1.0, 0.75, 0.5, 0.25, 0.0)]
    assert all(a > b for a, b in zip(values, values[1:]))


def test_vgg_value_matches_direct_computation(net, cubes):
    from hypertransformer.pipeline import synthesize_rgb

    x, ref = cubes
    fx = net(Tensor(synthesize_rgb(x))).data
    fr = net(Tensor(synthesize_rgb(ref))).data
    want = np.sqrt(((fx - fr) ** 2).sum()) / fx.size
    assert loss_vgg_per(Tensor(x), ref, net).item() == pytest.approx(want, rel=1e-12)


def test_perceptual_net_is_frozen(net, cubes):
    x, ref = cubes
    xt = Tensor(x, requires_grad=True)
    backward(loss_vgg_per(xt, ref, net))
    assert xt.grad is not None
    assert all(p.grad is None and not p.requires_grad for p in net.parameters())


def test_perceptual_weights_load_from_checkpoint(tmp_path):
    src = PerceptualNet(seed=5)
    save(tmp_path / "vgg.htck", {"kind": "perceptual"}, src)
    dst = PerceptualNet(seed=6)
    load_perceptual(tmp_path / "vgg.htck", dst)
    for a, b in zip(src.parameters(), dst.parameters()):
        assert_array_equal(a.data.astype(np.float32), b.data)
    assert all(not p.requires_grad for p in dst.parameters())


def test_perceptual_tap_range():
    with pytest.raises(ContractError):
        PerceptualNet(tap=0)
    assert PerceptualNet(tap=5)(Tensor(np.zeros((3, 4, 4)))).shape == (64, 4, 4)


@pytest.fixture
def fe():
    return FeatureExtractor(6, (3, 4, 5), rng=np.random.default_rng(2))


def test_transfer_examples(fe, cubes):
    x, _ = cubes
    feats = fe(Tensor(x))
    exact = {s: feats[s].data for s in (1, 4)}
    assert loss_transfer_per(Tensor(x), exact, fe).item() == 0.0
    assert loss_transfer_per(Tensor(x), {}, fe).item() == 0.0
    with pytest.raises(ContractError):
        loss_transfer_per(Tensor(x), exact, fe, scales=(2,))


def test_transfer_two_scale_norm_oracle(fe, cubes):
    x, _ = cubes
    r = np.random.default_rng(3)
    feats = fe(Tensor(x))
    targets = {s: feats[s].data + r.standard_normal(feats[s].shape) for s in (2, 4)}
    want = sum(np.linalg.norm((feats[s].data - targets[s]).ravel()) / targets[s].size for s in (2, 4))
    assert loss_transfer_per(Tensor(x), targets, fe).item() == pytest.approx(want, rel=1e-12)


def test_textures_receive_no_gradient(fe, cubes):
    x, _ = cubes
    tex = {1: Tensor(np.zeros((5, 2, 2)), requires_grad=True)}
    xt = Tensor(x, requires_grad=True)
    backward(loss_transfer_per(xt, {1: tex[1].data}, fe))
    assert tex[1].grad is None and xt.grad is not None


def test_overall_combination(net, fe, cubes):
    x, ref = cubes
    r = np.random.default_rng(4)
    feats = fe(Tensor(x))
    tex = {s: feats[s].data + r.standard_normal(feats[s].shape) for s in (1, 2, 4)}
    total, parts = loss_overall(Tensor(x), ref, tex, LossWeights(), fe_hsi=fe, net=net)
    rec = loss_rec(Tensor(x), ref).item()
    vgg = loss_vgg_per(Tensor(x), ref, net).item()
    tr = loss_transfer_per(Tensor(x), tex, fe).item()
    assert parts == pytest.approx({"rec": rec, "vgg_per": vgg, "t_per": tr}, rel=1e-14)
    assert total.item() == pytest.approx(rec + 0.1 * vgg + 0.05 * tr, rel=1e-14)


def test_overall_zero_weights_give_zero_and_zero_gradient(cubes):
    x, ref = cubes
    xt = Tensor(x, requires_grad=True)
    total, parts = loss_overall(xt, ref, {}, LossWeights(0.0, 0.0, 0.0))
    assert total.item() == 0.0 and parts == {}
    backward(total)
    assert_array_equal(xt.grad, 0.0)


def test_overall_rec_only_equals_rec(cubes):
    x, ref = cubes
    a = Tensor(x, requires_grad=True)
    b = Tensor(x, requires_grad=True)
    total, _ = loss_overall(a, ref, {}, LossWeights(1.0, 0.0, 0.0))
    alone = loss_rec(b, ref)
    assert total.item() == alone.item()
    backward(total)
    backward(alone)
    assert_array_equal(a.grad, b.grad)


def test_overall_requires_networks(cubes):
    x, ref = cubes
    with pytest.raises(ContractError):
        loss_overall(Tensor(x), ref, {}, LossWeights(1.0, 0.1, 0.0))
    with pytest.raises(ContractError):
        loss_overall(Tensor(x), ref, {1: np.zeros((1, 1, 1))}, LossWeights(1.0, 0.0, 0.05))


# -- gradient checks ------------------------------------------------------------------
def test_grad_rec(cubes):
    x, ref = cubes
    check_op(lambda t: loss_rec(t, ref), x)


def test_grad_vgg(net, cubes):
    x, ref = cubes
    check_op(lambda t: loss_vgg_per(t, ref, net), x)


def test_grad_transfer(fe, cubes):
    x, _ = cubes
    r = np.random.default_rng(5)
    feats = fe(Tensor(x))
    tex = {s: feats[s].data + 0.1 * r.standard_normal(feats[s].shape) for s in (1, 2, 4)}
    check_op(lambda t: loss_transfer_per(t, tex, fe), x)
