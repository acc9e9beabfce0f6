import numpy as np
import pytest

from freqmoe import autodiff as ad
from freqmoe.autodiff import Tensor, backward
from freqmoe.errors import ConfigError, ContractError, DimensionError
from freqmoe.gradcheck import check_gradients
from freqmoe.losses import (LossConfig, mgl_loss, psnr, rec_loss, ssim,
                            total_loss, PSNR_CAP_DB)


# ---------------------------------------------------------------------------
# rec_loss
# ---------------------------------------------------------------------------

def test_rec_loss_zero_on_equal():
    x = Tensor(np.random.default_rng(0).random((3, 8, 8)))
    assert rec_loss(x, x, alpha_freq=0.1).item() == 0.0


def test_rec_loss_constant_offset_no_freq():
    pred = Tensor(np.full((3, 4, 4), 0.6))
    target = Tensor(np.full((3, 4, 4), 0.5))
    assert np.isclose(rec_loss(pred, target, alpha_freq=0.0).item(), 0.1)


def naive_dft2(x):
    C, H, W = x.shape
    out = np.zeros((C, H, W), dtype=np.complex128)
    for c in range(C):
        for u in range(H):
            for v in range(W):
                grid_h = np.arange(H)[:, None]
                grid_w = np.arange(W)[None, :]
                phases = np.exp(-2j * np.pi * (u * grid_h / H + v * grid_w / W))
                out[c, u, v] = (x[c] * phases).sum()
    return out


def test_rec_loss_matches_scalar_recomputation():
    rng = np.random.default_rng(1)
    p = rng.random((3, 8, 8))
    t = rng.random((3, 8, 8))
    alpha = 0.1
    got = rec_loss(Tensor(p), Tensor(t), alpha_freq=alpha).item()
    dp, dt = naive_dft2(p), naive_dft2(t)
    want = (np.abs(p - t).mean()
            + alpha * (np.abs(dp.real - dt.real).mean() + np.abs(dp.imag - dt.imag).mean()))
    assert abs(got - want) <= 1e-5


def test_rec_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        rec_loss(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((3, 4, 2))))


def test_rec_loss_positive_unless_equal():
    rng = np.random.default_rng(2)
    p = Tensor(rng.random((3, 4, 4)))
    t = Tensor(rng.random((3, 4, 4)))
    assert rec_loss(p, t).item() > 0.0


def test_rec_loss_gradcheck():
    rng = np.random.default_rng(3)
    p = Tensor(rng.random((2, 4, 4)), requires_grad=True)
    t = Tensor(rng.random((2, 4, 4)))
    assert check_gradients(lambda: rec_loss(p, t, alpha_freq=0.1), [p]) <= 1e-4


# ---------------------------------------------------------------------------
# mgl_loss
# ---------------------------------------------------------------------------

def test_mgl_single_sample_is_zero():
    e = np.array([[1.0, 2.0, 3.0]])
    s = Tensor(np.array([[0.2, 0.9]]))
    assert mgl_loss(e, s).item() <= 1e-9


def test_mgl_hand_2x2_case():
    e = np.eye(2)  # Sim(E) = identity
    s = Tensor(np.array([[0.4, 0.4], [0.8, 0.8]]))  # proportional rows -> Sim(S) = ones
    assert np.isclose(mgl_loss(e, s).item(), 0.5, atol=1e-7)


def test_mgl_orthogonal_map_invariance():
    rng = np.random.default_rng(4)
    e = rng.standard_normal((5, 6))
    q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    s = Tensor(e @ q)
    assert mgl_loss(e, s).item() <= 1e-6


def test_mgl_batch_permutation_symmetry():
    rng = np.random.default_rng(5)
    e = rng.standard_normal((6, 8))
    s = rng.random((6, 4)) + 0.1
    perm = rng.permutation(6)
    a = mgl_loss(e, Tensor(s)).item()
    b = mgl_loss(e[perm], Tensor(s[perm])).item()
    assert np.isclose(a, b, atol=1e-12)


def test_mgl_range_and_zero_row_error():
    rng = np.random.default_rng(6)
    e = rng.standard_normal((4, 8))
    s = Tensor(rng.random((4, 3)) + 0.05)
    val = mgl_loss(e, s).item()
    assert 0.0 <= val <= 2.0
    bad = e.copy()
    bad[2] = 0.0
    with pytest.raises(ContractError, match="zero"):
        mgl_loss(bad, s)


def test_mgl_gradients_only_into_gates():
    rng = np.random.default_rng(7)
    e = Tensor(rng.standard_normal((4, 8)))
    s = Tensor(rng.random((4, 3)) + 0.05, requires_grad=True)
    backward(mgl_loss(e, s))
    assert s.grad is not None
    assert e.grad is None


def test_mgl_gradcheck():
    rng = np.random.default_rng(8)
    e = rng.standard_normal((3, 6))
    s = Tensor(rng.random((3, 4)) + 0.1, requires_grad=True)
    assert check_gradients(lambda: mgl_loss(e, s), [s]) <= 1e-4


# ---------------------------------------------------------------------------
# total_loss
# ---------------------------------------------------------------------------

def test_total_loss_lambda_zero_is_rec_exactly():
    rec = Tensor(np.array(1.25))
    mgl = Tensor(np.array(0.7))
    out = total_loss(rec, mgl, LossConfig(lambda_mgl=0.0))
    assert out is rec


def test_total_loss_linear_form():
    rec = Tensor(np.array(1.0))
    mgl = Tensor(np.array(0.5))
    out = total_loss(rec, mgl, LossConfig(lambda_mgl=0.1))
    assert np.isclose(out.item(), 1.05)


def test_total_loss_gradient_composition():
    rng = np.random.default_rng(9)
    p = Tensor(rng.random((2, 4, 4)), requires_grad=True)
    t = Tensor(rng.random((2, 4, 4)))
    e = rng.standard_normal((2, 8))
    s_base = Tensor(rng.random((2, 3)) + 0.1, requires_grad=True)
    cfg = LossConfig(lambda_mgl=0.1, alpha_freq=0.05)

    def make_total():
        return total_loss(rec_loss(p, t, cfg.alpha_freq), mgl_loss(e, s_base), cfg)

    assert check_gradients(make_total, [p, s_base]) <= 1e-4

    # grad(total) == grad(rec) + lambda*grad(mgl)
    for tensor in (p, s_base):
        tensor.zero_grad()
    backward(make_total())
    gp_total = p.grad.copy()
    gs_total = s_base.grad.copy()
    p.zero_grad(); s_base.zero_grad()
    backward(rec_loss(p, t, cfg.alpha_freq))
    backward(mgl_loss(e, s_base))
    assert np.allclose(gp_total, p.grad, atol=1e-12)
    assert np.allclose(gs_total, 0.1 * s_base.grad, atol=1e-12)


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig(lambda_mgl=-0.1).validate()


# ---------------------------------------------------------------------------
# psnr
# ---------------------------------------------------------------------------

def test_psnr_identical_hits_cap():
    img = np.random.default_rng(10).random((3, 16, 16))
    assert psnr(img, img) == PSNR_CAP_DB


def test_psnr_uniform_difference_closed_form():
    a = np.full((3, 8, 8), 0.5)
    b = np.full((3, 8, 8), 0.4)
    assert np.isclose(psnr(a, b), 20.0, atol=1e-9)


def test_psnr_scalar_recomputation_and_symmetry():
    rng = np.random.default_rng(11)
    a, b = rng.random((3, 8, 8)), rng.random((3, 8, 8))
    mse = float(((a - b) ** 2).mean())
    assert abs(psnr(a, b) - 10 * np.log10(1 / mse)) <= 1e-6
    assert psnr(a, b) == psnr(b, a)


# ---------------------------------------------------------------------------
# ssim
# ---------------------------------------------------------------------------

def loop_ssim_gray(x, y, win=11, sigma=1.5, k1=0.01, k2=0.03):
    half = (win - 1) / 2.0
    g1 = np.exp(-((np.arange(win) - half) ** 2) / (2 * sigma * sigma))
    kernel = np.outer(g1, g1)
    kernel /= kernel.sum()
    H, W = x.shape
    c1, c2 = k1**2, k2**2
    vals = []
    for i in range(H - win + 1):
        for j in range(W - win + 1):
            px = x[i:i + win, j:j + win]
            py = y[i:i + win, j:j + win]
            mx = (px * kernel).sum()
            my = (py * kernel).sum()
            vx = (px * px * kernel).sum() - mx * mx
            vy = (py * py * kernel).sum() - my * my
            cxy = (px * py * kernel).sum() - mx * my
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


def test_ssim_identical_is_one():
    img = np.random.default_rng(12).random((3, 16, 16))
    assert np.isclose(ssim(img, img), 1.0, atol=1e-12)


def test_ssim_anticorrelated_binary_is_negative():
    rng = np.random.default_rng(13)
    a = (rng.random((16, 16)) > 0.5).astype(np.float64)
    assert ssim(a, 1.0 - a) < 0.0


def test_ssim_matches_loop_oracle():
    rng = np.random.default_rng(14)
    a = rng.random((14, 15))
    b = np.clip(a + 0.1 * rng.standard_normal((14, 15)), 0, 1)
    assert abs(ssim(a, b) - loop_ssim_gray(a, b)) <= 1e-4


def test_ssim_channel_mean_and_symmetry():
    rng = np.random.default_rng(15)
    a = rng.random((3, 16, 16))
    b = np.clip(a + 0.05 * rng.standard_normal((3, 16, 16)), 0, 1)
    per_channel = np.mean([loop_ssim_gray(a[c], b[c]) for c in range(3)])
    assert abs(ssim(a, b) - per_channel) <= 1e-4
    assert abs(ssim(a, b) - ssim(b, a)) <= 1e-6


def test_ssim_too_small_image_rejected():
    with pytest.raises(ContractError):
        ssim(np.zeros((8, 8)), np.zeros((8, 8)))
