import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from colorcnn.errors import ConfigError
from colorcnn.quantnet import (BackboneConfig, ColorCNN, ColorCNNPlus, UNet, build_backbone,
                               build_quantnet, hard_quantize, indexed_from_prob, pool_channels,
                               soft_quantize, topk_softmax)


def tiny(mode="colorcnn_plus", **kw):
    base = dict(mode=mode, base_channels=4, levels=2, feature_dim=16, bottleneck_dim=4)
    if mode == "colorcnn":
        base |= dict(colors=4)
    base |= kw
    torch.manual_seed(0)
    return build_quantnet(BackboneConfig(**base)).eval()


# -- pooling / top-k ---------------------------------------------------------

def test_pool_hand_values():
    h = torch.tensor([1.0, 3.0, 5.0, 7.0]).view(1, 4, 1, 1)
    np.testing.assert_allclose(pool_channels(h, 2).flatten(), [2.0, 6.0])
    assert torch.equal(pool_channels(h, 4), h)
    np.testing.assert_allclose(pool_channels(h, 1).flatten(), [4.0])


def test_pool_uneven_slices_oracle():
    h = torch.arange(7.0).view(1, 7, 1, 1)
    # slices [0,2) [2,4) [4,7)
    np.testing.assert_allclose(pool_channels(h, 3).flatten(), [0.5, 2.5, 5.0])


@settings(max_examples=40, deadline=None)
@given(d=st.integers(1, 32), data=st.data())
def test_pool_properties(d, data):
    c = data.draw(st.integers(1, d))
    g = torch.Generator().manual_seed(d * 100 + c)
    h1, h2 = torch.randn(2, d, 3, 3, generator=g), torch.randn(2, d, 3, 3, generator=g)
    a, b = 1.7, -0.3
    torch.testing.assert_close(pool_channels(a * h1 + b * h2, c),
                               a * pool_channels(h1, c) + b * pool_channels(h2, c))
    const = torch.full((1, d, 2, 2), 2.5)
    torch.testing.assert_close(pool_channels(const, c), torch.full((1, c, 2, 2), 2.5))
    ref = torch.stack([h1[:, (k * d) // c:((k + 1) * d) // c].mean(1) for k in range(c)], 1)
    torch.testing.assert_close(pool_channels(h1, c), ref)


def test_pool_rejects_too_many_colors():
    with pytest.raises(ValueError):
        pool_channels(torch.zeros(1, 4, 2, 2), 5)


def test_topk_hand_values():
    m = topk_softmax(torch.zeros(1, 3, 1, 1), 2).flatten()
    np.testing.assert_allclose(m, [0.5, 0.5, 0.0])
    m = topk_softmax(torch.tensor([1.0, 0.0, -9.0]).view(1, 3, 1, 1), 2).flatten()
    np.testing.assert_allclose(m, [math.e / (math.e + 1), 1 / (math.e + 1), 0.0], atol=1e-7)
    z = torch.randn(2, 5, 3, 3)
    torch.testing.assert_close(topk_softmax(z, 5), z.softmax(1))


@settings(max_examples=40, deadline=None)
@given(c=st.integers(1, 24), data=st.data())
def test_topk_normalized_and_sparse(c, data):
    k = data.draw(st.integers(1, c))
    z = torch.randn(2, c, 4, 4, generator=torch.Generator().manual_seed(c * 31 + k))
    m = topk_softmax(z, k)
    torch.testing.assert_close(m.sum(1), torch.ones(2, 4, 4))
    assert int((m > 0).sum(1).max()) <= k
    assert (m >= 0).all()


@settings(max_examples=20, deadline=None)
@given(d=st.integers(2, 64), data=st.data())
def test_probmap_normalized_after_pooling(d, data):
    c = data.draw(st.integers(1, d))
    k = data.draw(st.integers(1, c))
    h = torch.randn(1, d, 3, 3, generator=torch.Generator().manual_seed(d))
    m = topk_softmax(pool_channels(h, c), k)
    assert torch.allclose(m.sum(1), torch.ones(1, 3, 3), atol=1e-5)


# -- hard / soft quantization ------------------------------------------------

def test_hard_quantize_hand_case():
    img = torch.tensor([[[10, 20, 30], [30, 40, 50]], [[0, 0, 0], [2, 2, 4]]],
                       dtype=torch.float64).permute(2, 0, 1)[None] / 255
    idx = torch.tensor([[0, 0], [1, 1]])
    m = torch.nn.functional.one_hot(idx, 3).permute(2, 0, 1)[None].double()
    out = hard_quantize(m, img)
    np.testing.assert_allclose(out.palette[0, 0] * 255, [20, 30, 40])
    np.testing.assert_allclose(out.palette[0, 1] * 255, [1, 1, 2])
    np.testing.assert_allclose(out.palette[0, 2], [0, 0, 0])  # unused
    ix = out.to_indexed()[0]
    assert ix.compact().palette.shape == (2, 3)


def test_hard_quantize_single_color_is_mean():
    img = torch.rand(1, 3, 5, 6, dtype=torch.float64)
    out = hard_quantize(torch.ones(1, 1, 5, 6, dtype=torch.float64), img)
    assert (out.index_map == 0).all()
    torch.testing.assert_close(out.palette[0, 0], img.mean((2, 3))[0])


def test_hard_quantize_ties_lowest():
    m = torch.full((1, 3, 2, 2), 1 / 3)
    assert (hard_quantize(m, torch.rand(1, 3, 2, 2)).index_map == 0).all()


def test_soft_single_pixel_and_onehot_agreement():
    v = torch.tensor([0.2, 0.5, 0.9]).view(1, 3, 1, 1)
    out = soft_quantize(torch.full((1, 2, 1, 1), 0.5), v)
    torch.testing.assert_close(out.palette[0], v.view(1, 3).expand(2, 3))
    torch.testing.assert_close(out.image, v)
    img = torch.tensor([[0.1, 0.2, 0.3], [0.7, 0.6, 0.5]]).T.reshape(1, 3, 1, 2)
    m = torch.tensor([[1.0, 0.0], [0.0, 1.0]]).reshape(1, 2, 1, 2)
    torch.testing.assert_close(soft_quantize(m, img).image, hard_quantize(m, img).image)


def test_soft_empty_cluster_zero_palette_and_grad():
    img = torch.rand(1, 3, 2, 2, requires_grad=True)
    m = torch.zeros(1, 3, 2, 2)
    m[:, 0] = 1
    m.requires_grad_()
    out = soft_quantize(m, img)
    assert (out.palette[0, 1:] == 0).all()
    out.image.sum().backward()
    assert torch.isfinite(img.grad).all() and torch.isfinite(m.grad).all()


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), c=st.integers(1, 8))
def test_soft_image_in_input_hull(seed, c):
    g = torch.Generator().manual_seed(seed)
    img = torch.rand(1, 3, 4, 4, generator=g, dtype=torch.float64)
    m = torch.randn(1, c, 4, 4, generator=g, dtype=torch.float64).softmax(1)
    out = soft_quantize(m, img).image
    lo, hi = img.amin((2, 3), keepdim=True), img.amax((2, 3), keepdim=True)
    assert (out >= lo - 1e-12).all() and (out <= hi + 1e-12).all()


def test_soft_hard_converge_when_sharpened():
    g = torch.Generator().manual_seed(1)
    img = torch.rand(1, 3, 6, 6, generator=g, dtype=torch.float64)
    z = torch.randn(1, 4, 6, 6, generator=g, dtype=torch.float64)
    gaps = []
    for t in (1.0, 10.0, 100.0, 1e3, 1e4):
        m = (z * t).softmax(1)
        gaps.append((soft_quantize(m, img).image - hard_quantize(m, img).image).abs().max().item())
    assert gaps[-1] < 1e-6 and all(a >= b for a, b in zip(gaps, gaps[1:]))


def test_indexed_from_prob_numpy():
    rng = np.random.default_rng(0)
    img = rng.random((3, 4, 3))
    m = rng.random((3, 4, 5))
    ix = indexed_from_prob(m, img)
    np.testing.assert_array_equal(ix.index_map, m.argmax(-1))


# -- networks ----------------------------------------------------------------

@pytest.mark.parametrize("size", [(32, 32), (96, 96), (13, 21)])
def test_backbone_preserves_size(size):
    net = UNet(3, 4, 3)
    assert net(torch.rand(2, 3, *size)).shape == (2, 4, *size)


def test_backbone_config_errors():
    with pytest.raises(ConfigError):
        build_backbone(BackboneConfig(kind="dncnn"))
    with pytest.raises(ConfigError):
        BackboneConfig(mode="colorcnn")
    with pytest.raises(ConfigError):
        BackboneConfig(bottleneck_dim=300)
    with pytest.raises(ConfigError):
        BackboneConfig(mode="other")


@pytest.mark.parametrize("mode", ["colorcnn", "colorcnn_plus"])
def test_forward_test_color_bound(mode):
    net = tiny(mode)
    x = torch.rand(3, 3, 16, 16)
    for c in ([4] if mode == "colorcnn" else [1, 2, 4, 8, 16]):
        out = net.forward_test(x, c)
        for ix in out.to_indexed():
            assert ix.num_used_colors() <= c


def test_forward_test_reconstructs_exactly():
    net = tiny()
    x = torch.rand(2, 3, 8, 8)
    out = net.forward_test(x, 4)
    for b, ix in enumerate(out.to_indexed()):
        np.testing.assert_allclose(ix.reconstruct(), out.image[b].permute(1, 2, 0).numpy(),
                                   atol=1e-6)


def test_unsupported_colors():
    with pytest.raises(ConfigError):
        tiny("colorcnn").forward_test(torch.rand(1, 3, 8, 8), 8)
    with pytest.raises(ConfigError):
        tiny().forward_train(torch.rand(1, 3, 8, 8), 17)
    with pytest.raises(ValueError):
        tiny().forward_test(torch.rand(1, 4, 8, 8), 2)


def test_multi_c_shares_one_backbone_pass():
    net = tiny()
    calls = []
    net.backbone.register_forward_hook(lambda *a: calls.append(1))
    x = torch.rand(1, 3, 8, 8)
    multi = net.forward_test_multi(x, [2, 4])
    assert len(calls) == 1
    for c in (2, 4):
        assert torch.equal(multi[c].index_map, net.forward_test(x, c).index_map)


def test_forward_deterministic():
    net = tiny()
    x = torch.rand(2, 3, 8, 8)
    a, b = net.forward_train(x, 4).image, net.forward_train(x, 4).image
    assert torch.equal(a, b)


def test_soft_output_has_extra_colors():
    net = tiny()
    x = torch.rand(1, 3, 8, 8)
    soft = net.forward_train(x, 2).image[0].reshape(3, -1).T
    assert len(torch.unique(soft, dim=0)) > 2


@pytest.mark.parametrize("mode", ["colorcnn", "colorcnn_plus"])
def test_forward_train_gradient_finite_differences(mode):
    torch.manual_seed(0)
    net = tiny(mode, levels=1).double()
    net.eval()
    g = torch.Generator().manual_seed(5)
    x = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64)
    params = [p for p in net.parameters() if p.requires_grad]

    def objective():
        return net.forward_train(x, 4).image.mean()

    net.zero_grad()
    objective().backward()
    rng = np.random.default_rng(0)
    step, checked = 1e-4, 0
    for p in params:
        flat = p.data.view(-1)
        grad = p.grad.view(-1)
        for i in rng.choice(flat.numel(), min(3, flat.numel()), replace=False):
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + step
                hi = objective().item()
                flat[i] = orig - step
                lo = objective().item()
                flat[i] = orig
            num = (hi - lo) / (2 * step)
            ana = grad[i].item()
            assert abs(num - ana) <= 1e-3 * max(abs(num), abs(ana)) + 1e-9, (p.shape, i, num, ana)
            checked += 1
    assert checked > 10
