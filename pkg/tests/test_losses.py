import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from colorcnn.errors import NumericalError
from colorcnn.losses import (LossWeights, classification_loss, combined_regularizer, kd_loss,
                             r_color, r_conf, r_info, relationship_loss, sample_pixels, total_loss)



@pytest.fixture(autouse=True)
def float64():
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


def prob_map(b, c, h, w, seed, sharp=1.0):
    g = torch.Generator().manual_seed(seed)
    return (torch.randn(b, c, h, w, generator=g) * sharp).softmax(1)


def onehot_map(idx: np.ndarray, c: int) -> torch.Tensor:
    """(B, H, W) integer labels -> (B, C, H, W) one-hot."""
    return torch.nn.functional.one_hot(torch.as_tensor(idx), c).permute(0, 3, 1, 2).double()


def gram_oracle(m: np.ndarray) -> np.ndarray:
    """Row-normalized pixel Gram matrix, written with explicit loops."""
    c, n = m.shape
    a = np.array([[sum(m[k, i] * m[k, j] for k in range(c)) for j in range(n)] for i in range(n)])
    return a / np.maximum(np.sqrt((a ** 2).sum(1, keepdims=True)), 1e-8)


# -- classification / distillation -----------------------------------------

def test_ce_hand_values():
    assert classification_loss(torch.zeros(4, 10), torch.zeros(4, dtype=torch.long)).item() == \
        pytest.approx(math.log(10), abs=1e-9)
    ce = classification_loss(torch.tensor([[1.0, 0.0, 0.0]]), torch.tensor([0])).item()
    assert ce == pytest.approx(-math.log(math.e / (math.e + 2)), abs=1e-12)
    assert ce == pytest.approx(0.5514, abs=1e-4)
    saturated = classification_loss(torch.tensor([[60.0, -60.0]]), torch.tensor([0])).item()
    assert saturated < 1e-20


def test_bce_multilabel():
    logits = torch.tensor([[2.0, -1.0, 0.0]])
    target = torch.tensor([[1.0, 0.0, 1.0]])
    sig = lambda z: 1 / (1 + math.exp(-z))
    want = -(math.log(sig(2)) + math.log(1 - sig(-1)) + math.log(sig(0))) / 3
    assert classification_loss(logits, target).item() == pytest.approx(want, abs=1e-12)


def test_ce_shape_errors():
    with pytest.raises(ValueError):
        classification_loss(torch.zeros(2, 3), torch.zeros(2, 4))
    with pytest.raises(ValueError):
        classification_loss(torch.zeros(2, 3), torch.zeros(3, dtype=torch.long))


def test_kd_values():
    z = torch.randn(5, 7)
    assert kd_loss(z, z).item() == pytest.approx(0.0, abs=1e-12)
    teacher = torch.full((1, 10), -1e4)
    teacher[0, 3] = 1e4
    assert kd_loss(torch.zeros(1, 10), teacher).item() == pytest.approx(math.log(10), abs=1e-9)
    with pytest.raises(ValueError):
        kd_loss(torch.zeros(1, 3), torch.zeros(1, 4))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), k=st.integers(2, 12))
def test_kd_non_negative(seed, k):
    g = torch.Generator().manual_seed(seed)
    s, t = torch.randn(3, k, generator=g) * 4, torch.randn(3, k, generator=g) * 4
    assert kd_loss(s, t).item() >= -1e-12


# -- regularizers -----------------------------------------------------------

def test_regularizer_hand_values():
    onehot = torch.zeros(1, 2, 3, 3)
    onehot[:, 0] = 1
    assert r_color(onehot).item() == pytest.approx(-0.5)
    assert r_color(torch.full((1, 2, 3, 3), 0.5)).item() == pytest.approx(-0.5)
    both = onehot.clone()
    both[0, :, 0, 0] = torch.tensor([0.0, 1.0])
    assert r_color(both).item() == pytest.approx(-1.0)

    avg = torch.zeros(1, 2, 1, 4)
    avg[0, 0] = torch.tensor([1.0, 1.0, 1.0, 0.0])
    avg[0, 1] = 1 - avg[0, 0]
    want = 0.75 * math.log(0.75) + 0.25 * math.log(0.25)
    assert r_info(avg).item() == pytest.approx(want, abs=1e-12)
    assert r_info(avg).item() == pytest.approx(-0.5623, abs=1e-4)
    assert r_info(onehot).item() == pytest.approx(0.0)

    px = torch.tensor([0.9, 0.1]).view(1, 2, 1, 1)
    assert r_conf(px).item() == pytest.approx(-(0.9 * math.log(0.9) + 0.1 * math.log(0.1)))
    assert r_conf(px).item() == pytest.approx(0.3251, abs=1e-4)
    assert r_conf(torch.full((1, 2, 2, 2), 0.5)).item() == pytest.approx(math.log(2))
    assert r_conf(onehot).item() == 0.0


def test_combined_regularizer():
    onehot = torch.zeros(2, 2, 4, 4)
    onehot[:, 0] = 1
    assert combined_regularizer(onehot, LossWeights()).item() == pytest.approx(-0.5)
    m = prob_map(2, 5, 4, 4, 0)
    base = combined_regularizer(m, LossWeights(alpha=0, beta=0)).item()
    assert base == pytest.approx(r_color(m).item())
    assert combined_regularizer(m, LossWeights(), mode="colorcnn").item() == pytest.approx(base)
    for a, b in [(0.5, 2.0), (3.0, 0.25)]:
        got = combined_regularizer(m, LossWeights(alpha=a, beta=b)).item()
        assert got == pytest.approx(base + a * r_info(m).item() + b * r_conf(m).item())


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), c=st.integers(1, 16), sharp=st.floats(0.0, 20.0))
def test_regularizer_ranges(seed, c, sharp):
    m = prob_map(2, c, 3, 5, seed, sharp)
    eps = 1e-9
    assert -1 - eps <= r_color(m).item() <= eps
    assert -math.log(c) - eps <= r_info(m).item() <= eps
    assert -eps <= r_conf(m).item() <= math.log(c) + eps


def test_r_conf_topk_bound():
    logits = torch.randn(1, 8, 4, 4)
    top = logits.topk(3, dim=1)
    m = torch.zeros_like(logits).scatter(1, top.indices, top.values.softmax(1))
    assert r_conf(m).item() <= math.log(3) + 1e-9


def test_entropy_gradient_finite_at_zero():
    m = torch.tensor([1.0, 0.0]).view(1, 2, 1, 1).requires_grad_()
    (r_conf(m) + r_info(m)).backward()
    assert torch.isfinite(m.grad).all()


# -- relationship loss ------------------------------------------------------

def test_relationship_hand_case():
    m = onehot_map(np.array([[[0, 1]]]), 2)
    m_star = onehot_map(np.array([[[0, 0]]]), 2)
    got = relationship_loss(m, m_star).item()
    want = 0.5 * (2 * (1 - 1 / math.sqrt(2)) ** 2 + 2 * (1 / math.sqrt(2)) ** 2)
    assert got == pytest.approx(want, abs=1e-12)
    assert got == pytest.approx(0.5858, abs=1e-4)


def test_relationship_identical_is_zero():
    m = onehot_map(np.random.default_rng(0).integers(0, 4, (2, 5, 5)), 4)
    assert relationship_loss(m, m).item() == pytest.approx(0.0, abs=1e-14)


def test_relationship_matches_loop_oracle():
    rng = np.random.default_rng(7)
    m = prob_map(1, 3, 2, 3, 1)
    star = onehot_map(rng.integers(0, 5, (1, 2, 3)), 5)
    a = gram_oracle(m[0].reshape(3, -1).numpy())
    b = gram_oracle(star[0].reshape(5, -1).numpy())
    want = ((a - b) ** 2).sum() / 6
    assert relationship_loss(m, star).item() == pytest.approx(want, rel=1e-12)


def test_relationship_three_pixel_permutation_by_hand():
    m = onehot_map(np.array([[[0, 1, 1]]]), 3)
    perm = onehot_map(np.array([[[2, 0, 0]]]), 3)
    np.testing.assert_allclose(gram_oracle(m[0].reshape(3, -1).numpy()),
                               gram_oracle(perm[0].reshape(3, -1).numpy()))
    assert relationship_loss(m, perm).item() == 0.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10 ** 6), c=st.integers(2, 6), data=st.data())
def test_relationship_permutation_invariant(seed, c, data):
    perm = data.draw(st.permutations(range(c)))
    m = prob_map(2, c, 4, 3, seed)
    star = onehot_map(np.random.default_rng(seed).integers(0, c, (2, 4, 3)), c)
    base = relationship_loss(m, star).item()
    assert relationship_loss(m[:, perm], star).item() == pytest.approx(base, abs=1e-12)
    assert relationship_loss(m, star[:, perm]).item() == pytest.approx(base, abs=1e-12)
    assert relationship_loss(m[:, perm], m).item() == pytest.approx(0.0, abs=1e-12)
    assert base >= 0


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10 ** 6), c=st.integers(1, 5))
def test_relationship_symmetric_on_onehot(seed, c):
    rng = np.random.default_rng(seed)
    a = onehot_map(rng.integers(0, c, (1, 3, 4)), c)
    b = onehot_map(rng.integers(0, c, (1, 3, 4)), c)
    assert relationship_loss(a, b).item() == pytest.approx(relationship_loss(b, a).item())


def test_relationship_uses_sample_only():
    m = prob_map(1, 3, 4, 4, 2)
    star = onehot_map(np.random.default_rng(2).integers(0, 3, (1, 4, 4)), 3)
    idx = torch.tensor([1, 5, 6, 14])
    sub = relationship_loss(m.flatten(2)[..., idx].unsqueeze(-1),
                            star.flatten(2)[..., idx].unsqueeze(-1))
    assert relationship_loss(m, star, idx).item() == pytest.approx(sub.item())


def test_relationship_zero_row_guard():
    m = torch.zeros(1, 2, 1, 2)
    m[0, 0, 0, 1] = 1
    star = onehot_map(np.array([[[0, 1]]]), 2)
    assert torch.isfinite(relationship_loss(m, star))


def test_sample_pixels():
    idx = sample_pixels(10, 10, 0.3, seed=4)
    assert len(idx) == 30 and len(set(idx.tolist())) == 30
    assert torch.equal(idx, sample_pixels(10, 10, 0.3, seed=4))
    assert len(sample_pixels(2, 2, 0.01)) == 2
    assert int(idx.max()) < 100


# -- total ------------------------------------------------------------------

def test_total_loss_arithmetic():
    w = LossWeights(gamma=1, lambda_=3)
    t = total_loss(torch.tensor(0.5514), torch.tensor(0.5858), torch.tensor(-0.5), w)
    assert t.item() == pytest.approx(1.8088, abs=1e-9)
    ce = torch.tensor(0.7)
    assert total_loss(ce, 5.0, 9.0, LossWeights(gamma=0, lambda_=0)).item() == pytest.approx(0.7)


def test_total_loss_names_bad_component():
    with pytest.raises(NumericalError, match="relationship"):
        total_loss(torch.tensor(1.0), torch.tensor(float("nan")), torch.tensor(0.0), LossWeights())
    with pytest.raises(NumericalError, match="regularizer"):
        total_loss(torch.tensor(1.0), 0.0, float("inf"), LossWeights())


def test_weights_non_negative():
    with pytest.raises(ValueError):
        LossWeights(beta=-0.1)


# -- gradients vs central differences --------------------------------------

def _fd_check(fn, x: torch.Tensor, step=1e-4, rtol=1e-3, n_coords=24, seed=0):
    x = x.clone().requires_grad_()
    fn(x).backward()
    analytic = x.grad.flatten()
    flat = x.detach().flatten()
    coords = np.random.default_rng(seed).choice(flat.numel(), min(n_coords, flat.numel()),
                                                replace=False)
    scale = analytic.abs().max().item()
    for i in coords:
        hi, lo = flat.clone(), flat.clone()
        hi[i] += step
        lo[i] -= step
        num = (fn(hi.view_as(x)) - fn(lo.view_as(x))).item() / (2 * step)
        assert abs(num - analytic[i].item()) <= rtol * max(abs(num), scale * 1e-2, 1e-8), \
            (i, num, analytic[i].item())


def _logits_to_map(z):
    return z.softmax(1)


@pytest.mark.parametrize("name", ["r_color", "r_info", "r_conf", "relationship", "total"])
def test_loss_gradients_finite_differences(name):
    z = torch.randn(1, 4, 8, 8, generator=torch.Generator().manual_seed(3))
    star = onehot_map(np.random.default_rng(3).integers(0, 4, (1, 8, 8)), 4)
    sample = sample_pixels(8, 8, 0.3, seed=1)
    w = LossWeights()
    fns = {
        "r_color": lambda z: r_color(_logits_to_map(z)),
        "r_info": lambda z: r_info(_logits_to_map(z)),
        "r_conf": lambda z: r_conf(_logits_to_map(z)),
        "relationship": lambda z: relationship_loss(_logits_to_map(z), star, sample),
        "total": lambda z: total_loss(
            classification_loss(_logits_to_map(z).mean((2, 3)), torch.tensor([1])),
            relationship_loss(_logits_to_map(z), star, sample),
            combined_regularizer(_logits_to_map(z), w), w),
    }
    _fd_check(fns[name], z)
