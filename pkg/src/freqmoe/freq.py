"""Frequency machinery: single-level Haar DWT, 2-d DFT, bilinear resize.

All three are differentiable. The wavelet is the orthonormal Haar pair on
even-sized inputs (no boundary handling needed); resize uses half-pixel
centers with edge clamping; the DFT is the unnormalized forward transform.
"""

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, add, concat, reshape, scale, split, sub, transpose
from .errors import DimensionError


@dataclass
class SubbandSet:
    """The four subbands of one 2-d Haar level, each [.., C, H/2, W/2]."""

    ll: Tensor
    lh: Tensor
    hl: Tensor
    hh: Tensor
    source_shape: tuple

    def all(self):
        return self.ll, self.lh, self.hl, self.hh


@dataclass
class SpectrumPair:
    """Real and imaginary parts of an unnormalized forward 2-d DFT."""

    real: Tensor
    imag: Tensor


def _corner_views(x):
    """Split [.., H, W] into the four 2x2-block corners a,b,c,d at [.., H/2, W/2]."""
    h, w = x.shape[-2], x.shape[-1]
    if h % 2 or w % 2:
        raise DimensionError(f"dwt_haar: spatial size ({h}, {w}) must be even")
    lead = x.shape[:-2]
    # [.., H/2, 2, W/2, 2] -> [.., H/2, W/2, 2, 2] -> [.., H/2, W/2, 4]
    n = x.ndim
    blocked = reshape(x, lead + (h // 2, 2, w // 2, 2))
    perm = tuple(range(n - 2)) + (n - 2, n, n - 1, n + 1)
    blocked = transpose(blocked, perm)
    flat = reshape(blocked, lead + (h // 2, w // 2, 4))
    a, b, c, d = split(flat, 4, axis=-1)
    sq = lead + (h // 2, w // 2)
    return tuple(reshape(t, sq) for t in (a, b, c, d))


def dwt_haar(x):
    """Orthonormal single-level 2-d Haar transform of [.., C, H, W]."""
    a, b, c, d = _corner_views(x)
    ll = scale(add(add(a, b), add(c, d)), 0.5)
    hl = scale(add(sub(a, b), sub(c, d)), 0.5)
    lh = scale(sub(add(a, b), add(c, d)), 0.5)
    hh = scale(add(sub(a, b), sub(d, c)), 0.5)
    return SubbandSet(ll=ll, lh=lh, hl=hl, hh=hh, source_shape=tuple(x.shape))


def idwt_haar(s):
    """Exact inverse of :func:`dwt_haar`."""
    shapes = {tuple(t.shape) for t in s.all()}
    if len(shapes) != 1:
        raise DimensionError(f"idwt_haar: subband shapes disagree: {sorted(shapes)}")
    ll, lh, hl, hh = s.ll, s.lh, s.hl, s.hh
    a = scale(add(add(ll, hl), add(lh, hh)), 0.5)
    b = scale(add(sub(ll, hl), sub(lh, hh)), 0.5)
    c = scale(sub(add(ll, hl), add(lh, hh)), 0.5)
    d = scale(add(sub(ll, hl), sub(hh, lh)), 0.5)
    lead = ll.shape[:-2]
    h2, w2 = ll.shape[-2], ll.shape[-1]
    n = ll.ndim + 1
    corners = [reshape(t, lead + (h2, w2, 1)) for t in (a, b, c, d)]
    flat = concat(corners, axis=-1)
    blocked = reshape(flat, lead + (h2, w2, 2, 2))
    perm = tuple(range(n - 3)) + (n - 3, n - 1, n - 2, n)
    blocked = transpose(blocked, perm)
    return reshape(blocked, lead + (2 * h2, 2 * w2))


def dft2(x):
    """Unnormalized forward DFT over the last two axes, as (real, imag)."""
    dtype = x.data.dtype
    spectrum = np.fft.fft2(x.data, axes=(-2, -1))
    re = np.ascontiguousarray(spectrum.real.astype(dtype))
    im = np.ascontiguousarray(spectrum.imag.astype(dtype))

    # d(loss)/dx for X = F x with F the symmetric DFT matrix: Re(F g_re) + Im(F g_im)
    def vjp_re(g):
        return (np.fft.fft2(g, axes=(-2, -1)).real.astype(dtype),)

    def vjp_im(g):
        return (np.fft.fft2(g, axes=(-2, -1)).imag.astype(dtype),)

    real = Tensor._result(re, (x,), vjp_re)
    imag = Tensor._result(im, (x,), vjp_im)
    return SpectrumPair(real=real, imag=imag)


def _interp_matrix(n_in, n_out, dtype):
    """Row-interpolation matrix for half-pixel-center bilinear sampling."""
    m = np.zeros((n_out, n_in), dtype=dtype)
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(int)
    i1 = np.minimum(i0 + 1, n_in - 1)
    w1 = src - i0
    for r in range(n_out):
        m[r, i0[r]] += 1.0 - w1[r]
        m[r, i1[r]] += w1[r]
    return m


def resize_bilinear(x, out_h, out_w):
    """Bilinear resize of [.., H, W] to [.., out_h, out_w]; differentiable."""
    if out_h < 1 or out_w < 1:
        raise DimensionError(f"resize_bilinear: output size ({out_h}, {out_w}) must be >= 1")
    h, w = x.shape[-2], x.shape[-1]
    dtype = x.data.dtype
    ah = _interp_matrix(h, int(out_h), dtype)
    aw = _interp_matrix(w, int(out_w), dtype)
    out = np.einsum("oy,...yx,px->...op", ah, x.data, aw, optimize=True)

    def vjp(g):
        return (np.einsum("oy,...op,px->...yx", ah, g, aw, optimize=True),)

    return Tensor._result(np.ascontiguousarray(out), (x,), vjp)
