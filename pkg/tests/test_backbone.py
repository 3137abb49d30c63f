import pytest
import torch

from conftest import zero_module
from edgegan3d.backbone import CBR, Decoder, Encoder
from edgegan3d.gfe import EASNet
from edgegan3d.config import ModelConfig


def test_cbr_shape():
    assert CBR(1, 16)(torch.randn(1, 1, 8, 8, 8)).shape == (1, 16, 8, 8, 8)


def test_cbr_zero_weights_no_norm():
    block = zero_module(CBR(3, 4, norm=False))
    assert not block(torch.randn(2, 3, 6, 6, 6)).any()


def test_cbr_non_negative():
    torch.manual_seed(0)
    block = CBR(2, 5)
    lo = min(block(torch.randn(1, 2, 4, 4, 4) * 3).min().item() for _ in range(100))
    assert lo >= 0


def test_cbr_rejects_non_finite():
    x = torch.zeros(1, 1, 4, 4, 4)
    x[0, 0, 1, 1, 1] = float("inf")
    with pytest.raises(ValueError, match="non-finite"):
        CBR(1, 2)(x)


def test_encoder_full_scale_shapes():
    enc = Encoder((16, 32, 64, 128)).eval()
    with torch.no_grad():
        e = enc(torch.randn(1, 1, 88, 112, 112))
    assert [tuple(t.shape) for t in e] == [
        (1, 16, 88, 112, 112), (1, 32, 44, 56, 56), (1, 64, 22, 28, 28), (1, 128, 11, 14, 14)]


def test_encoder_desk_shape():
    e = Encoder()(torch.randn(1, 1, 32, 48, 48))
    assert e[1].shape == (1, 32, 16, 24, 24)


def test_encoder_indivisible():
    with pytest.raises(ValueError, match="depth 30 not divisible by 8"):
        Encoder()(torch.randn(1, 1, 30, 48, 48))


def test_encoder_rejects_non_increasing_channels():
    with pytest.raises(ValueError):
        Encoder((16, 16, 32, 64))


def test_decoder_full_scale():
    dec = Decoder().eval()
    skips = (torch.zeros(1, 16, 88, 112, 112), torch.zeros(1, 32, 44, 56, 56), torch.zeros(1, 64, 22, 28, 28))
    with torch.no_grad():
        f2, f1, f0 = dec(torch.randn(1, 128, 11, 14, 14), skips)
    assert f2.shape == (1, 64, 22, 28, 28)
    assert f1.shape == (1, 32, 44, 56, 56)
    assert f0.shape == (1, 16, 88, 112, 112)


def test_decoder_skip_mismatch():
    skips = (torch.zeros(1, 16, 32, 48, 48), torch.zeros(1, 32, 16, 23, 24), torch.zeros(1, 64, 8, 12, 12))
    with pytest.raises(ValueError, match=r"expected spatial dims \(16, 24, 24\), got \(16, 23, 24\)"):
        Decoder()(torch.zeros(1, 128, 4, 6, 6), skips)


def test_decoder_zero_propagation():
    dec = zero_module(Decoder())
    skips = (torch.zeros(1, 16, 16, 16, 16), torch.zeros(1, 32, 8, 8, 8), torch.zeros(1, 64, 4, 4, 4))
    f0 = dec(torch.zeros(1, 128, 2, 2, 2), skips)[2]
    assert f0.shape == (1, 16, 16, 16, 16) and not f0.any()


@pytest.mark.parametrize("shape", [(8, 8, 8), (16, 8, 24), (32, 48, 48)])
def test_stride_contract(shape):
    enc, dec = Encoder().eval(), Decoder().eval()
    with torch.no_grad():
        e = enc(torch.randn(1, 1, *shape))
    for s, t in enumerate(e):
        assert tuple(t.shape[2:]) == tuple(n // 2**s for n in shape)
        assert tuple(dec(e[3], e[:3])[2].shape[2:]) == shape


def test_eval_determinism():
    torch.manual_seed(3)
    enc = Encoder().eval()
    x = torch.randn(1, 1, 16, 16, 16)
    with torch.no_grad():
        a, b = enc(x), enc(x)
    assert all(torch.equal(p, q) for p, q in zip(a, b))


def test_parameter_count_monotone_in_width():
    counts = [sum(p.numel() for p in EASNet(ModelConfig(channels=c)).parameters())
              for c in ((8, 16, 32, 64), (16, 32, 64, 128), (32, 64, 128, 256))]
    assert counts[0] < counts[1] < counts[2]
