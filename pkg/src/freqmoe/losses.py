"""Training objective and evaluation metrics.

* rec_loss   - L1 in pixel space plus a weighted L1 over the (real, imag)
               parts of the unnormalized 2-d DFT of prediction and target.
* mgl_loss   - mean absolute gap between the batch cosine-similarity matrix
               of the answer embeddings and that of the router gates;
               gradients flow only into the gates.
* total_loss - rec + lambda * mgl.
* psnr/ssim  - standard fidelity metrics on [0,1] images (ssim: 11x11
               Gaussian window, sigma 1.5, K1=0.01, K2=0.03, range 1.0,
               valid-window filtering, channels averaged).
"""

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError, DimensionError
from .freq import dft2


@dataclass
class LossConfig:
    lambda_mgl: float = 0.1
    alpha_freq: float = 0.1

    def validate(self):
        if self.lambda_mgl < 0:
            raise ConfigError(f"lambda_mgl must be >= 0, got {self.lambda_mgl}")
        if self.alpha_freq < 0:
            raise ConfigError(f"alpha_freq must be >= 0, got {self.alpha_freq}")
        return self


def rec_loss(pred, target, alpha_freq=0.1):
    """mean|pred-target| + alpha * (mean|d real| + mean|d imag|) over dft2."""
    if pred.shape != target.shape:
        raise DimensionError(f"rec_loss: shape mismatch {pred.shape} vs {target.shape}")
    spatial = ad.l1(pred, target)
    if alpha_freq == 0.0:
        return spatial
    ps = dft2(pred)
    ts = dft2(target)
    freq = ad.add(ad.l1(ps.real, ts.real), ad.l1(ps.imag, ts.imag))
    return ad.add(spatial, ad.scale(freq, alpha_freq))


def cosine_similarity_matrix(rows):
    """Differentiable pairwise cosine matrix of a [B,D] tensor."""
    unit = ad.l2_normalize(rows, axis=-1)
    return ad.matmul(unit, ad.transpose(unit, (1, 0)))


def mgl_loss(e_answer_batch, s_batch):
    """Relational alignment gap, mean over all B^2 entries.

    ``e_answer_batch`` is a constant [B,D] array; ``s_batch`` is the [B,N]
    gate tensor in the graph.
    """
    e = np.asarray(e_answer_batch.data if isinstance(e_answer_batch, Tensor)
                   else e_answer_batch)
    if e.ndim != 2 or s_batch.ndim != 2:
        raise DimensionError(
            f"mgl_loss: expected [B,D] and [B,N], got {e.shape} and {s_batch.shape}")
    if e.shape[0] != s_batch.shape[0]:
        raise DimensionError(
            f"mgl_loss: batch mismatch {e.shape[0]} vs {s_batch.shape[0]}")
    norms = np.linalg.norm(e, axis=1)
    if np.any(norms == 0.0):
        raise ContractError(
            f"mgl_loss: zero embedding row at index {int(np.argmin(norms))}")
    if np.any(np.linalg.norm(s_batch.data, axis=1) == 0.0):
        raise ContractError("mgl_loss: zero gate row")
    unit = (e / norms[:, None]).astype(s_batch.data.dtype)
    sim_e = Tensor(unit @ unit.T)
    sim_s = cosine_similarity_matrix(s_batch)
    return ad.l1(sim_e, sim_s)


def total_loss(rec, mgl, cfg):
    """rec + lambda * mgl."""
    if cfg.lambda_mgl == 0.0:
        return rec
    return ad.add(rec, ad.scale(mgl, cfg.lambda_mgl))


# ---------------------------------------------------------------------------
# metrics (plain numpy, evaluation side)
# ---------------------------------------------------------------------------

PSNR_CAP_DB = 100.0


def psnr(a, b):
    """10*log10(1/MSE) for [0,1] images, capped at 100 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    err = float(((a - b) ** 2).mean())
    if err == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * math.log10(1.0 / err), PSNR_CAP_DB)


def _gaussian_kernel(size=11, sigma=1.5):
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, kernel):
    # separable valid-mode correlation along the two spatial axes
    win = len(kernel)
    rows = sliding_window_view(img, win, axis=0)
    rows = rows @ kernel
    cols = sliding_window_view(rows, win, axis=1)
    return cols @ kernel


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def ssim(a, b):
    """Single-scale SSIM on [0,1] images; [H,W] or [C,H,W], channel mean."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"ssim: shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise DimensionError(f"ssim: expected [H,W] or [C,H,W], got {a.shape}")
    if min(a.shape[1], a.shape[2]) < SSIM_WINDOW:
        raise ContractError(
            f"ssim: image {a.shape[1]}x{a.shape[2]} smaller than the "
            f"{SSIM_WINDOW}x{SSIM_WINDOW} window")
    kernel = _gaussian_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = SSIM_K1**2
    c2 = SSIM_K2**2
    scores = []
    for x, y in zip(a, b):
        mu_x = _filter_valid(x, kernel)
        mu_y = _filter_valid(y, kernel)
        xx = _filter_valid(x * x, kernel) - mu_x * mu_x
        yy = _filter_valid(y * y, kernel) - mu_y * mu_y
        xy = _filter_valid(x * y, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
        den = (mu_x**2 + mu_y**2 + c1) * (xx + yy + c2)
        scores.append(float((num / den).mean()))
    return float(np.mean(scores))
