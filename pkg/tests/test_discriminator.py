import pytest
import torch

from mrnet.discriminator import PatchDiscriminator, build_discriminator, output_size


@pytest.mark.parametrize("size, expected", [(256, 30), (64, 6)])
def test_patch_grid(size, expected):
    d = PatchDiscriminator(base_width=8)
    x = torch.zeros(1, 3, size, size)
    assert d(x, x).shape == (1, 1, expected, expected)
    assert output_size(size) == expected


def test_asymmetric_and_checked():
    d = build_discriminator(0, base_width=8)
    a, b = torch.randn(1, 3, 64, 64), torch.randn(1, 3, 64, 64)
    assert not torch.allclose(d(a, b), d(b, a))
    with pytest.raises(ValueError):
        d(a, torch.randn(1, 3, 32, 32))


def test_seeded():
    a, b = build_discriminator(3, 8), build_discriminator(3, 8)
    assert all(torch.equal(p, q) for p, q in zip(a.parameters(), b.parameters()))
