import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from codecrestore.errors import ShapeError
from codecrestore.metrics import (
    PerceptualDistance,
    perceptual_distance,
    psnr,
    ssim,
)
from conftest import fixed_image
from oracles import psnr_loop, ssim_loop


class TestPsnr:
    def test_identical_images_report_cap(self):
        img = fixed_image(32)
        assert psnr(img, img) == 100.0

    def test_constant_offset_16(self):
        # MSE = 256 -> 10*log10(255^2/256) = 24.0483 dB
        a = np.full((32, 32, 3), 100, dtype=np.uint8)
        b = a + 16
        assert psnr(a, b) == pytest.approx(24.0483, abs=1e-3)

    def test_symmetric(self):
        a = fixed_image(32, seed=1)
        b = fixed_image(32, seed=2)
        assert psnr(a, b) == psnr(b, a)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            a = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
            b = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
            assert psnr(a, b) == pytest.approx(psnr_loop(a, b), abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError):
            psnr(np.zeros((8, 8, 3), np.uint8), np.zeros((8, 9, 3), np.uint8))

    def test_cap_applies_to_near_identical_large_images(self):
        a = np.zeros((256, 256, 3), np.uint8)
        b = a.copy()
        b[0, 0, 0] = 1  # MSE tiny enough to exceed 100 dB uncapped
        assert psnr(a, b) == 100.0


class TestSsim:
    def test_identical_is_one(self):
        img = fixed_image(32)
        assert ssim(img, img) == pytest.approx(1.0)

    def test_symmetric(self):
        a = fixed_image(32, seed=3)
        b = fixed_image(32, seed=4)
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        a = rng.integers(0, 256, (20, 20, 3), dtype=np.uint8)
        b = rng.integers(0, 256, (20, 20, 3), dtype=np.uint8)
        assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-6)

    def test_window_must_fit(self):
        tiny = np.zeros((8, 8, 3), np.uint8)
        with pytest.raises(ShapeError):
            ssim(tiny, tiny)

    def test_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(5):
            a = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
            b = rng.integers(0, 256, (16, 16, 3), dtype=np.uint8)
            assert -1.0 < ssim(a, b) <= 1.0


class TestPerceptualDistance:
    def test_zero_iff_equal(self):
        img = fixed_image(32)
        assert perceptual_distance(img, img) == 0.0
        other = img.copy()
        other[5, 5, 0] ^= 4
        assert perceptual_distance(img, other) > 0.0

    def test_symmetric(self):
        a = fixed_image(32, seed=5)
        b = fixed_image(32, seed=6)
        assert perceptual_distance(a, b) == pytest.approx(
            perceptual_distance(b, a), rel=1e-6
        )

    def test_triangle_inequality_on_random_triples(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            a, b, c = (
                rng.integers(0, 256, (16, 16, 3), dtype=np.uint8) for _ in range(3)
            )
            dab = perceptual_distance(a, b)
            dbc = perceptual_distance(b, c)
            dac = perceptual_distance(a, c)
            assert dac <= dab + dbc + 1e-6

    def test_seed_pinned_and_frozen(self):
        m1, m2 = PerceptualDistance(), PerceptualDistance()
        for p1, p2 in zip(m1.parameters(), m2.parameters()):
            assert torch.equal(p1, p2)
            assert not p1.requires_grad

    def test_differentiable_wrt_inputs(self):
        m = PerceptualDistance()
        a = torch.rand(1, 3, 16, 16, requires_grad=True)
        b = torch.rand(1, 3, 16, 16)
        m(a, b).sum().backward()
        assert a.grad is not None and torch.isfinite(a.grad).all()


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_psnr_ssim_agree_with_oracles_property(seed):
    rng = np.random.default_rng(seed)
    a = rng.integers(0, 256, (12, 12, 1), dtype=np.uint8)
    b = rng.integers(0, 256, (12, 12, 1), dtype=np.uint8)
    assert psnr(a, b) == pytest.approx(psnr_loop(a, b), abs=1e-9)
    assert ssim(a, b) == pytest.approx(ssim_loop(a, b), abs=1e-6)
