"""Central finite-difference gradient verification.

``check_gradients`` rebuilds the scalar loss from scratch for every
perturbed entry, so the numeric side never touches the analytic backward
rules it is checking. All checks run in float64.
"""

import numpy as np

from .autodiff import backward


def central_difference(make_loss, tensors, h=1e-5):
    """Numeric d(loss)/d(t) for each tensor, via central differences."""
    grads = []
    for t in tensors:
        flat = t.data.reshape(-1)
        g = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = make_loss().data.item()
            flat[i] = orig - h
            fm = make_loss().data.item()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * h)
        grads.append(g.reshape(t.shape))
    return grads


def relative_error(analytic, numeric):
    """max over entries of |analytic - numeric| / max(1, |numeric|)."""
    denom = np.maximum(1.0, np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))


def check_gradients(make_loss, tensors, h=1e-5):
    """Max relative error between autodiff and central differences."""
    for t in tensors:
        t.zero_grad()
    loss = make_loss()
    backward(loss)
    analytic = []
    for t in tensors:
        if t.grad is None:
            raise AssertionError("gradient did not reach a checked tensor")
        analytic.append(t.grad.copy())
    numeric = central_difference(make_loss, tensors, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


# ---------------------------------------------------------------------------
# full verification suite (every network block in float64 at toy dims)
# ---------------------------------------------------------------------------

TOLERANCE = 1e-4


def run_suite(seed=0):
    """Finite-difference-check every block; yields (name, max_rel_error)."""
    from . import autodiff as ad
    from .autodiff import Tensor
    from .blocks import GdfnBlock, MdtaBlock, MgfbBlock, MofeModule
    from .freq import SubbandSet, dft2, dwt_haar, idwt_haar, resize_bilinear
    from .losses import mgl_loss, rec_loss

    rng = np.random.default_rng(seed)
    f64 = np.float64

    def t(*shape, grad=True):
        return Tensor(rng.standard_normal(shape), requires_grad=grad)

    results = []

    x = t(2, 4, 4)
    w = t(3, 2, 3, 3)
    b = t(3)
    tgt = t(3, 4, 4, grad=False)
    results.append(("conv2d_dense3x3", check_gradients(
        lambda: ad.mse(ad.conv2d(x, w, b), tgt), [x, w, b])))

    xd = t(3, 4, 4)
    wd = t(3, 1, 3, 3)
    bd = t(3)
    tgtd = t(3, 4, 4, grad=False)
    results.append(("conv2d_depthwise3x3", check_gradients(
        lambda: ad.mse(ad.conv2d(xd, wd, bd, groups=3), tgtd), [xd, wd, bd])))

    x1 = t(3, 4, 4)
    w1 = t(2, 3, 1, 1)
    b1 = t(2)
    tgt1 = t(2, 4, 4, grad=False)
    results.append(("conv2d_1x1", check_gradients(
        lambda: ad.mse(ad.conv2d(x1, w1, b1), tgt1), [x1, w1, b1])))

    mdta = MdtaBlock(rng, "mdta", dim=4, heads=2, kv_dim=4, dtype=f64)
    qx = t(4, 4, 4)
    kx = t(4, 4, 4)
    tm = t(4, 4, 4, grad=False)
    results.append(("mdta", check_gradients(
        lambda: ad.mse(mdta.forward(qx, kx), tm), [qx, kx] + mdta.params())))

    gdfn = GdfnBlock(rng, "gdfn", dim=4, gamma=2.0, dtype=f64)
    gx = t(4, 4, 4)
    tg = t(4, 4, 4, grad=False)
    results.append(("gdfn", check_gradients(
        lambda: ad.mse(gdfn.forward(gx), tg), [gx] + gdfn.params())))

    mgfb = MgfbBlock(rng, "mgfb", dim=4, embed_dim=8, tokens=4, dtype=f64)
    fx = t(4, 3, 3)
    ex = t(8)
    tf = t(4, 3, 3, grad=False)
    results.append(("mgfb", check_gradients(
        lambda: ad.mse(mgfb.forward(fx, ex), tf), [fx, ex] + mgfb.params())))

    mofe = MofeModule(rng, "mofe", dim=4, heads=2, num_experts=2, answer_dim=8, dtype=f64)
    mf = t(4, 4, 4)
    mi = Tensor(rng.random((3, 8, 8)), requires_grad=True)
    me = t(8)
    tmo = t(4, 4, 4, grad=False)
    results.append(("mofe", check_gradients(
        lambda: ad.mse(mofe.forward(mf, mi, me)[0], tmo),
        [mf, mi, me] + mofe.params())))

    dx = t(2, 4, 4)
    dw = [t(2, 2, 2, grad=False) for _ in range(4)]
    dt = t(2, 4, 4, grad=False)

    def dwt_loss():
        s = dwt_haar(dx)
        bands = [ad.mul(band, w_) for band, w_ in zip(s.all(), dw)]
        return ad.mse(idwt_haar(SubbandSet(*bands, s.source_shape)), dt)

    results.append(("dwt_idwt", check_gradients(dwt_loss, [dx])))

    sx = t(1, 4, 4)
    str_ = t(1, 4, 4, grad=False)
    sti = t(1, 4, 4, grad=False)

    def dft_loss():
        spectrum = dft2(sx)
        return ad.add(ad.l1(spectrum.real, str_), ad.l1(spectrum.imag, sti))

    results.append(("dft2", check_gradients(dft_loss, [sx])))

    rx = t(1, 3, 4)
    rt = t(1, 6, 6, grad=False)
    results.append(("resize_bilinear", check_gradients(
        lambda: ad.mse(resize_bilinear(rx, 6, 6), rt), [rx])))

    p = Tensor(rng.random((2, 4, 4)), requires_grad=True)
    q = Tensor(rng.random((2, 4, 4)), requires_grad=False)
    results.append(("rec_loss", check_gradients(
        lambda: rec_loss(p, q, alpha_freq=0.1), [p])))

    e_rows = rng.standard_normal((3, 6))
    s_rows = Tensor(rng.random((3, 4)) + 0.1, requires_grad=True)
    results.append(("mgl_loss", check_gradients(
        lambda: mgl_loss(e_rows, s_rows), [s_rows])))

    return results
