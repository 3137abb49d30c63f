import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import zero_module
from edgegan3d.adversarial import (
    DICE_EPS, LossWeights, PatchDiscriminator, dice_loss, discriminator_loss, generator_loss, lsgan_d_loss,
)


class ConstantD(torch.nn.Module):
    """Discriminator stub returning a fixed score grid."""

    def __init__(self, real, fake):
        super().__init__()
        self.real = torch.as_tensor(real, dtype=torch.float32)
        self.fake = torch.as_tensor(fake, dtype=torch.float32)

    def forward(self, x, m):
        return self.real if getattr(m, "_is_real", False) else self.fake + 0 * m.sum()


def real(t):
    t._is_real = True
    return t


def test_patch_scores_shape():
    d = PatchDiscriminator()
    assert d(torch.randn(1, 1, 32, 48, 48), torch.rand(1, 1, 32, 48, 48)).shape == (1, 1, 2, 3, 3)


def test_patch_scores_zero_weights():
    d = zero_module(PatchDiscriminator())
    assert not d(torch.randn(1, 1, 16, 16, 16), torch.rand(1, 1, 16, 16, 16)).any()


def test_patch_misaligned():
    with pytest.raises(ValueError, match="not aligned"):
        PatchDiscriminator()(torch.randn(1, 1, 16, 16, 16), torch.rand(1, 1, 16, 16, 8))


@pytest.mark.parametrize("shape", [(16, 16, 16), (32, 48, 48), (48, 32, 64)])
def test_patch_stride_arithmetic(shape):
    out = PatchDiscriminator(base=4)(torch.randn(1, 1, *shape), torch.rand(1, 1, *shape))
    assert tuple(out.shape[2:]) == tuple(n // 16 for n in shape)


def test_dice_loss_perfect():
    t = torch.zeros(4, 4, 4)
    t[1:3, 1:3, :] = 1
    assert dice_loss(t.clone(), t).item() == 0.0


def test_dice_loss_empty_prediction():
    t = torch.zeros(10, 10, 4, dtype=torch.float64)
    t[:, :, 0] = 1
    assert dice_loss(torch.zeros_like(t), t).item() == pytest.approx(1 - DICE_EPS / (100 + DICE_EPS), abs=1e-12)


def test_dice_loss_half_overlap():
    p = torch.zeros(4, 4, 4)
    t = torch.zeros(4, 4, 4)
    p[0:2, 0:2, 0:2] = 1
    t[0:2, 0:2, 1:3] = 1
    assert (p * t).sum() == 4
    assert dice_loss(p, t).item() == pytest.approx(0.5, abs=1e-6)


def test_dice_loss_shape_mismatch():
    with pytest.raises(ValueError, match="shape mismatch"):
        dice_loss(torch.zeros(2, 2, 2), torch.zeros(2, 2, 3))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_dice_loss_range_and_symmetry(seed):
    g = torch.Generator().manual_seed(seed)
    p = torch.rand(3, 4, 5, generator=g)
    a = (torch.rand(3, 4, 5, generator=g) > 0.5).double()
    b = (torch.rand(3, 4, 5, generator=g) > 0.5).double()
    assert 0 <= dice_loss(p, a.float()).item() <= 1
    assert dice_loss(a, b).item() == pytest.approx(dice_loss(b, a).item(), abs=1e-15)


def finite_difference_grad(f, p, h=1e-4):
    g = np.zeros_like(p)
    for i in np.ndindex(p.shape):
        up, dn = p.copy(), p.copy()
        up[i] += h
        dn[i] -= h
        g[i] = (f(up) - f(dn)) / (2 * h)
    return g


def test_dice_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(0)
    for _ in range(3):
        p0 = rng.uniform(0.05, 0.95, size=(4, 4, 4))
        t = torch.tensor((rng.random((4, 4, 4)) > 0.5).astype(np.float64))
        p = torch.tensor(p0, requires_grad=True)
        dice_loss(p, t).backward()
        fd = finite_difference_grad(lambda q: dice_loss(torch.tensor(q), t).item(), p0)
        rel = np.abs(p.grad.numpy() - fd).max() / np.abs(fd).max()
        assert rel < 1e-4


def test_discriminator_loss_perfect_and_indifferent():
    assert lsgan_d_loss(torch.ones(1, 1, 2, 3, 3), torch.zeros(1, 1, 2, 3, 3)).item() == 0
    assert lsgan_d_loss(torch.full((4,), 0.5), torch.full((4,), 0.5)).item() == pytest.approx(0.5)


def test_discriminator_loss_two_patches():
    d = ConstantD([0.2, 0.8], [0.1, 0.3])
    x = torch.zeros(1, 1, 2, 2, 2)
    y = real(torch.ones(1, 1, 2, 2, 2))
    loss = discriminator_loss(d, x, y, torch.zeros(1, 1, 2, 2, 2))
    # ((0.2-1)^2 + (0.8-1)^2)/2 + (0.1^2 + 0.3^2)/2
    assert loss.item() == pytest.approx(0.34 + 0.05, abs=1e-6)


def test_discriminator_loss_detaches_generator_output():
    d = PatchDiscriminator(base=4)
    g = torch.rand(1, 1, 16, 16, 16, requires_grad=True)
    discriminator_loss(d, torch.randn(1, 1, 16, 16, 16), torch.ones(1, 1, 16, 16, 16), g).backward()
    assert g.grad is None


def test_generator_loss_perfect():
    y = torch.zeros(1, 1, 4, 4, 4)
    y[0, 0, 1:3, 1:3, 1:3] = 1
    ye = y.clone()
    total, _ = generator_loss(ConstantD(1.0, torch.ones(1, 1, 2, 2, 2)), y, y, ye, y.clone(), ye.clone())
    assert total.item() == 0


def test_generator_loss_weights_zero_is_adversarial_only():
    torch.manual_seed(0)
    d = PatchDiscriminator(base=4)
    x, y = torch.randn(1, 1, 16, 16, 16), (torch.rand(1, 1, 16, 16, 16) > 0.5).float()
    g = torch.rand(1, 1, 16, 16, 16)
    total, parts = generator_loss(d, x, y, y, g, torch.rand_like(g), LossWeights(0.0, 0.0))
    assert total.item() == pytest.approx(((d(x, g) - 1) ** 2).mean().item())
    assert parts["edge_dice"].item() == 0


def test_generator_loss_weighted_sum():
    # adversarial 0.09, mask dice 0.2, edge dice 0.4 -> 0.09 + 1*0.2 + 0.5*0.4
    t = torch.zeros(10)
    t[:5] = 1
    p_mask = torch.zeros(10)
    p_mask[1:6] = 1   # |P|=|T|=5, overlap 4 -> 1 - 8/10
    p_edge = torch.zeros(10)
    p_edge[2:7] = 1   # overlap 3 -> 1 - 6/10
    total, parts = generator_loss(ConstantD(0, torch.full((3,), 0.7)), t, t, t, p_mask, p_edge, LossWeights(1.0, 0.5))
    assert parts["adv"].item() == pytest.approx(0.09, abs=1e-6)
    assert parts["dice"].item() == pytest.approx(0.2, abs=1e-5)
    assert parts["edge_dice"].item() == pytest.approx(0.4, abs=1e-5)
    assert total.item() == pytest.approx(0.49, abs=1e-5)


def test_loss_weights_defaults_and_validation():
    assert LossWeights() == LossWeights(1.0, 0.5)
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.5)


def test_losses_non_negative_random():
    torch.manual_seed(5)
    d = PatchDiscriminator(base=4)
    for _ in range(100):
        x = torch.randn(1, 1, 16, 16, 16)
        y = (torch.rand_like(x) > 0.5).float()
        g, ge = torch.rand_like(x), torch.rand_like(x)
        assert discriminator_loss(d, x, y, g).item() >= 0
        assert generator_loss(d, x, y, y, g, ge)[0].item() >= 0
