import math

import numpy as np
import pytest

from mmgs import diffgrad as dg
from mmgs import pipeline as pl
from mmgs.diffgrad import Tensor


def reference_ssim(a, b):
    """Independent direct-formula SSIM: explicit window loops."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
    k = 11
    ax = np.arange(k) - 5.0
    g = np.exp(-(ax**2) / (2 * 1.5**2))
    win = np.outer(g, g)
    win /= win.sum()
    pad = 5
    if min(a.shape[0], a.shape[1]) < k:
        a = np.pad(a, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
        b = np.pad(b, ((pad, pad), (pad, pad), (0, 0)), mode="reflect")
    c1, c2 = 0.01**2, 0.03**2
    h, w, ch = a.shape
    vals = []
    for c in range(ch):
        for i in range(h - k + 1):
            for j in range(w - k + 1):
                wa = a[i : i + k, j : j + k, c]
                wb = b[i : i + k, j : j + k, c]
                mu_a = (win * wa).sum()
                mu_b = (win * wb).sum()
                var_a = (win * wa * wa).sum() - mu_a**2
                var_b = (win * wb * wb).sum() - mu_b**2
                cov = (win * wa * wb).sum() - mu_a * mu_b
                vals.append(
                    ((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                    / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
                )
    return float(np.mean(vals))


def reference_psnr(a, b):
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return 99.0
    return min(10.0 * math.log10(1.0 / mse), 99.0)


class TestSsim:
    def test_self_similarity_exactly_one(self):
        x = np.random.default_rng(0).uniform(0, 1, (20, 20, 3))
        assert float(pl.ssim(x, x).data) == pytest.approx(1.0, abs=1e-9)

    def test_matches_independent_reimplementation(self):
        rng = np.random.default_rng(1)
        for trial in range(6):
            a = rng.uniform(0, 1, (16, 15, 3))
            b = np.clip(a + rng.normal(0, 0.1, a.shape), 0, 1)
            mine = float(pl.ssim(a, b).data)
            ref = reference_ssim(a, b)
            assert abs(mine - ref) < 1e-6

    def test_growing_distortion_lowers_ssim(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(0.25, 0.75, (24, 24, 3))
        near = float(pl.ssim(x, np.clip(x + 0.01, 0, 1)).data)
        far = float(pl.ssim(x, 1.0 - x).data)
        assert far < near

    def test_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(5):
            a = rng.uniform(0, 1, (14, 14))
            b = rng.uniform(0, 1, (14, 14))
            v = float(pl.ssim(a, b).data)
            assert -1.0 <= v <= 1.0

    def test_small_image_reflect_padding(self):
        rng = np.random.default_rng(4)
        a = rng.uniform(0, 1, (8, 8, 3))
        b = rng.uniform(0, 1, (8, 8, 3))
        mine = float(pl.ssim(a, b).data)
        ref = reference_ssim(a, b)
        assert abs(mine - ref) < 1e-6

    def test_differentiable(self):
        rng = np.random.default_rng(5)
        target = rng.uniform(0.2, 0.8, (12, 12, 3))

        def fn(t):
            return 1.0 - pl.ssim(t.reshape(12, 12, 3), Tensor(target))

        x = Tensor(np.clip(target + rng.normal(0, 0.05, target.shape), 0, 1).ravel())
        assert dg.grad_check(fn, x, step=1e-5, coords=range(0, 432, 37)) < 1e-5

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            pl.ssim(np.zeros((4, 4)), np.zeros((5, 5)))


class TestPsnr:
    def test_mse_hand_value(self):
        a = np.zeros((10, 10))
        b = np.full((10, 10), 0.1)  # MSE = 0.01 -> 20 dB
        assert pl.psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_identical_capped(self):
        x = np.random.default_rng(6).uniform(0, 1, (8, 8, 3))
        assert pl.psnr(x, x) == 99.0

    def test_half_amplitude_noise_gains_6db(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(0.3, 0.7, (64, 64, 3))
        noise = rng.uniform(-0.1, 0.1, x.shape)
        full = pl.psnr(x, x + noise)
        half = pl.psnr(x, x + 0.5 * noise)
        assert half - full == pytest.approx(10 * math.log10(4.0), abs=1e-9)

    def test_matches_independent_formula(self):
        rng = np.random.default_rng(8)
        for _ in range(10):
            a = rng.uniform(0, 1, (9, 13, 3))
            b = rng.uniform(0, 1, (9, 13, 3))
            assert abs(pl.psnr(a, b) - reference_psnr(a, b)) < 1e-9

    def test_masked_region_only(self):
        a = np.zeros((4, 4))
        b = a.copy()
        b[0, 0] = 0.5
        mask = np.zeros((4, 4), bool)
        mask[1:, :] = True
        assert pl.psnr(a, b, mask=mask) == 99.0


class TestRenderLoss:
    def test_identical_images_zero_loss(self):
        img = np.random.default_rng(9).uniform(0, 1, (16, 16, 3)).astype(np.float32)
        mask = np.ones((16, 16), bool)
        loss, parts = pl.render_loss(Tensor(img), img, mask, (0.8, 0.2, 0.0))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-7)
        assert parts["l1"] == pytest.approx(0.0, abs=1e-8)

    def test_constant_offset_l1(self):
        rng = np.random.default_rng(10)
        rendered = rng.uniform(0.2, 0.7, (12, 12, 3)).astype(np.float32)
        target = rendered + 0.1
        mask = np.ones((12, 12), bool)
        loss, parts = pl.render_loss(Tensor(rendered), target, mask, (1.0, 0.0, 0.0))
        assert float(loss.data) == pytest.approx(0.1, abs=1e-5)

    def test_symmetric_in_arguments(self):
        rng = np.random.default_rng(11)
        a = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        b = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        mask = rng.uniform(size=(16, 16)) > 0.3
        l_ab, _ = pl.render_loss(Tensor(a), b, mask, (0.8, 0.2, 0.0))
        l_ba, _ = pl.render_loss(Tensor(b), a, mask, (0.8, 0.2, 0.0))
        assert float(l_ab.data) == pytest.approx(float(l_ba.data), abs=1e-6)

    def test_loss_ignores_pixels_outside_mask(self):
        rng = np.random.default_rng(12)
        rendered = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
        target = rendered.copy()
        mask = np.zeros((16, 16), bool)
        mask[:8] = True
        target[12:, :, :] = 0.0  # corrupt only unmasked pixels
        loss, _ = pl.render_loss(Tensor(rendered), target, mask, (0.8, 0.2, 0.0))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-7)

    def test_empty_mask_warns_zero(self):
        img = np.zeros((8, 8, 3), dtype=np.float32)
        with pytest.warns(UserWarning, match="empty"):
            loss, _ = pl.render_loss(
                Tensor(img), img, np.zeros((8, 8), bool), (0.8, 0.2, 0.0)
            )
        assert float(loss.data) == 0.0

    def test_nonnegative_and_zero_iff_identical_masked(self):
        rng = np.random.default_rng(13)
        for _ in range(5):
            a = rng.uniform(0, 1, (16, 16, 3)).astype(np.float32)
            b = np.clip(a + rng.normal(0, 0.05, a.shape), 0, 1).astype(np.float32)
            mask = rng.uniform(size=(16, 16)) > 0.4
            loss, _ = pl.render_loss(Tensor(a), b, mask, (0.8, 0.2, 0.0))
            assert float(loss.data) > 0.0

    def test_lpips_plugin_interface(self):
        img = np.random.default_rng(14).uniform(0, 1, (16, 16, 3)).astype(np.float32)
        other = np.clip(img + 0.1, 0, 1).astype(np.float32)
        calls = []

        def plugin(x, y):
            calls.append(1)
            return ((x - y) ** 2).mean()

        mask = np.ones((16, 16), bool)
        loss_with, parts = pl.render_loss(
            Tensor(img), other, mask, (0.8, 0.2, 0.5), lpips_plugin=plugin
        )
        assert calls and parts["lpips_term"] > 0
        loss_without, parts2 = pl.render_loss(
            Tensor(img), other, mask, (0.8, 0.2, 0.0), lpips_plugin=plugin
        )
        assert parts2["lpips_term"] == 0.0
        assert float(loss_with.data) > float(loss_without.data)

    def test_invalid_weights_rejected(self):
        with pytest.raises(ValueError):
            pl.TrainConfig(lambda_l1=0.0, lambda_ssim=0.0)
