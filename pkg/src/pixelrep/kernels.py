"""Hot numeric kernels with a numba path and a pure-numpy path.

Every kernel exists twice: ``<name>_numpy`` (vectorized numpy) and
``<name>_numba`` (explicit loops under ``@njit``). The unsuffixed name is the
one selected by :data:`pixelrep._accel.BACKEND`. Both paths agree to float
rounding; within one backend results are bit-reproducible.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ._accel import BACKEND, HAVE_NUMBA, njit

__all__ = [
    "BACKEND",
    "conv2d_forward",
    "conv2d_backward",
    "extract_windows",
    "composite_max",
    "scatter_add_rows",
    "bn_stats",
    "bn_normalize",
    "bn_backward",
    "IMPLEMENTATIONS",
]


# -- conv2d (valid padding, NCHW) ---------------------------------------------


def conv2d_forward_numpy(x, w, b, sh, sw):
    kh, kw = w.shape[2], w.shape[3]
    patches = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    out = np.tensordot(patches, w, axes=([1, 4, 5], [1, 2, 3]))  # n, ho, wo, co
    out = out.transpose(0, 3, 1, 2) + b[None, :, None, None]
    return np.ascontiguousarray(out, dtype=x.dtype)


def conv2d_backward_numpy(x, w, gy, sh, sw, need_gx=True):
    kh, kw = w.shape[2], w.shape[3]
    ho, wo = gy.shape[2], gy.shape[3]
    patches = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    gw = np.tensordot(gy, patches, axes=([0, 2, 3], [0, 2, 3])).astype(x.dtype)
    gb = gy.sum(axis=(0, 2, 3)).astype(x.dtype)
    if not need_gx:
        return None, gw, gb
    gx = np.zeros_like(x)
    for dy in range(kh):
        for dx in range(kw):
            contrib = np.tensordot(gy, w[:, :, dy, dx], axes=([1], [0]))  # n, ho, wo, ci
            gx[:, :, dy:dy + sh * (ho - 1) + 1:sh, dx:dx + sw * (wo - 1) + 1:sw] += contrib.transpose(0, 3, 1, 2)
    return gx, gw, gb


@njit
def conv2d_forward_numba(x, w, b, sh, sw):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = (h - kh) // sh + 1
    wo = (wd - kw) // sw + 1
    out = np.empty((n, co, ho, wo), dtype=x.dtype)
    for i in range(n):
        for c in range(co):
            o = out[i, c]
            o[:, :] = b[c]
            for k in range(ci):
                xi = x[i, k]
                for dy in range(kh):
                    for dx in range(kw):
                        wv = w[c, k, dy, dx]
                        for y in range(ho):
                            orow = o[y]
                            irow = xi[y * sh + dy]
                            if sw == 1:
                                for xx in range(wo):
                                    orow[xx] += wv * irow[xx + dx]
                            else:
                                for xx in range(wo):
                                    orow[xx] += wv * irow[xx * sw + dx]
    return out


@njit
def _conv2d_backward_numba(x, w, gy, sh, sw, need_gx):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ho = gy.shape[2]
    wo = gy.shape[3]
    gx = np.zeros_like(x) if need_gx else np.zeros((0, 0, 0, 0), dtype=x.dtype)
    # per-column partial sums keep the inner loops free of scalar reductions
    accw = np.zeros((co, ci, kh, kw, wo))
    accb = np.zeros((co, wo))
    for i in range(n):
        for c in range(co):
            g = gy[i, c]
            ab = accb[c]
            for y in range(ho):
                grow = g[y]
                for xx in range(wo):
                    ab[xx] += grow[xx]
            for k in range(ci):
                xi = x[i, k]
                for dy in range(kh):
                    for dx in range(kw):
                        aw = accw[c, k, dy, dx]
                        for y in range(ho):
                            grow = g[y]
                            irow = xi[y * sh + dy]
                            if sw == 1:
                                for xx in range(wo):
                                    aw[xx] += grow[xx] * irow[xx + dx]
                            else:
                                for xx in range(wo):
                                    aw[xx] += grow[xx] * irow[xx * sw + dx]
                        if need_gx:
                            wv = w[c, k, dy, dx]
                            gxi = gx[i, k]
                            for y in range(ho):
                                grow = g[y]
                                orow = gxi[y * sh + dy]
                                for xx in range(wo):
                                    orow[xx * sw + dx] += grow[xx] * wv
    gw = np.zeros(w.shape, dtype=x.dtype)
    gb = np.zeros(co, dtype=x.dtype)
    for c in range(co):
        gb[c] = accb[c].sum()
        for k in range(ci):
            for dy in range(kh):
                for dx in range(kw):
                    gw[c, k, dy, dx] = accw[c, k, dy, dx].sum()
    return gx, gw, gb


def conv2d_backward_numba(x, w, gy, sh, sw, need_gx=True):
    gx, gw, gb = _conv2d_backward_numba(x, w, gy, sh, sw, need_gx)
    return (gx if need_gx else None), gw, gb


# -- batch norm over NCHW, statistics from a subset of samples ---------------------------


def bn_stats_numpy(x, sel):
    xs = x[sel]
    c = x.shape[1]
    flat = np.ascontiguousarray(xs.transpose(1, 0, 2, 3)).reshape(c, -1).astype(np.float64)
    mu = flat.mean(axis=1)
    var = ((flat - mu[:, None]) ** 2).mean(axis=1)
    return mu, var


@njit
def bn_stats_numba(x, sel):
    n, c, h, w = x.shape
    hw = h * w
    xf = x.reshape(n, c, hw)
    mu = np.zeros(c)
    var = np.zeros(c)
    m = 0
    for i in range(n):
        if sel[i]:
            m += 1
    m *= hw
    acc = np.empty(hw)
    for ch in range(c):
        acc[:] = 0.0
        for i in range(n):
            if sel[i]:
                plane = xf[i, ch]
                for j in range(hw):
                    acc[j] += plane[j]
        mc = acc.sum() / m
        mu[ch] = mc
        acc[:] = 0.0
        for i in range(n):
            if sel[i]:
                plane = xf[i, ch]
                for j in range(hw):
                    d = plane[j] - mc
                    acc[j] += d * d
        var[ch] = acc.sum() / m
    return mu, var


def bn_normalize_numpy(x, mu, rstd, gamma, beta):
    scale = (gamma * rstd).astype(np.float64)
    shift = beta - mu * scale
    return (x * scale[None, :, None, None] + shift[None, :, None, None]).astype(x.dtype)


@njit
def bn_normalize_numba(x, mu, rstd, gamma, beta):
    n, c, h, w = x.shape
    hw = h * w
    xf = x.reshape(n, c, hw)
    out = np.empty_like(x)
    of = out.reshape(n, c, hw)
    for ch in range(c):
        scale = gamma[ch] * rstd[ch]
        shift = beta[ch] - mu[ch] * scale
        for i in range(n):
            src = xf[i, ch]
            dst = of[i, ch]
            for j in range(hw):
                dst[j] = src[j] * scale + shift
    return out


def bn_backward_numpy(x, g, mu, rstd, gamma, sel, training):
    xhat = (x - mu[None, :, None, None]) * rstd[None, :, None, None]
    sg = g.sum(axis=(0, 2, 3), dtype=np.float64)
    sgx = (g * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    gx = g * (gamma * rstd)[None, :, None, None]
    if training:
        m = int(sel.sum()) * x.shape[2] * x.shape[3]
        gvar = -0.5 * gamma * sgx * rstd * rstd
        gmu = -gamma * sg * rstd
        corr = (2.0 * gvar[None, :, None, None] * (x - mu[None, :, None, None]) + gmu[None, :, None, None]) / m
        gx = gx + corr * sel[:, None, None, None]
    return gx.astype(x.dtype), sgx.astype(x.dtype), sg.astype(x.dtype)


@njit
def bn_backward_numba(x, g, mu, rstd, gamma, sel, training):
    n, c, h, w = x.shape
    hw = h * w
    xf = x.reshape(n, c, hw)
    gf = g.reshape(n, c, hw)
    gx = np.empty_like(x)
    gxf = gx.reshape(n, c, hw)
    sg = np.zeros(c)
    sgx = np.zeros(c)
    m = 0
    for i in range(n):
        if sel[i]:
            m += 1
    m *= hw
    acc_a = np.empty(hw)
    acc_b = np.empty(hw)
    for ch in range(c):
        mc = mu[ch]
        acc_a[:] = 0.0
        acc_b[:] = 0.0
        for i in range(n):
            gp = gf[i, ch]
            xp = xf[i, ch]
            for j in range(hw):
                acc_a[j] += gp[j]
                acc_b[j] += gp[j] * (xp[j] - mc)
        a = acc_a.sum()
        b = acc_b.sum() * rstd[ch]
        sg[ch] = a
        sgx[ch] = b
        k = gamma[ch] * rstd[ch]
        cvar = 0.0
        cmu = 0.0
        if training:
            cvar = -gamma[ch] * b * rstd[ch] * rstd[ch] / m
            cmu = -gamma[ch] * a * rstd[ch] / m
        for i in range(n):
            gp = gf[i, ch]
            xp = xf[i, ch]
            dst = gxf[i, ch]
            if training and sel[i]:
                for j in range(hw):
                    dst[j] = gp[j] * k + cvar * (xp[j] - mc) + cmu
            else:
                for j in range(hw):
                    dst[j] = gp[j] * k
    return gx, sgx.astype(x.dtype), sg.astype(x.dtype)


# -- sliding windows ------------------------------------------------------------


def extract_windows_numpy(pixels, width, stride, count):
    h, src_w = pixels.shape
    span = (count - 1) * stride + width
    padded = np.zeros((h, max(span, src_w)), dtype=pixels.dtype)
    padded[:, :src_w] = pixels
    view = sliding_window_view(padded, width, axis=1)[:, ::stride][:, :count]
    return np.ascontiguousarray(view.transpose(1, 0, 2))


@njit
def extract_windows_numba(pixels, width, stride, count):
    h, src_w = pixels.shape
    out = np.zeros((count, h, width), dtype=pixels.dtype)
    for k in range(count):
        start = k * stride
        stop = min(start + width, src_w)
        for y in range(h):
            for x in range(start, stop):
                out[k, y, x - start] = pixels[y, x]
    return out


# -- glyph compositing --------------------------------------------------------------


def composite_max_numpy(canvas, glyph, top, left):
    H, W = canvas.shape
    gh, gw = glyph.shape
    y0, x0 = max(top, 0), max(left, 0)
    y1, x1 = min(top + gh, H), min(left + gw, W)
    if y0 >= y1 or x0 >= x1:
        return
    region = canvas[y0:y1, x0:x1]
    np.maximum(region, glyph[y0 - top:y1 - top, x0 - left:x1 - left], out=region)


@njit
def composite_max_numba(canvas, glyph, top, left):
    H, W = canvas.shape
    gh, gw = glyph.shape
    for gy in range(gh):
        y = top + gy
        if y < 0 or y >= H:
            continue
        for gx in range(gw):
            x = left + gx
            if x < 0 or x >= W:
                continue
            v = glyph[gy, gx]
            if v > canvas[y, x]:
                canvas[y, x] = v


# -- sparse row accumulation (embedding backward) ---------------------------------------


def scatter_add_rows_numpy(dst, idx, src):
    np.add.at(dst, idx, src)


@njit
def scatter_add_rows_numba(dst, idx, src):
    d = dst.shape[1]
    for i in range(idx.shape[0]):
        r = idx[i]
        for j in range(d):
            dst[r, j] += src[i, j]


IMPLEMENTATIONS = {
    "numpy": {
        "conv2d_forward": conv2d_forward_numpy,
        "conv2d_backward": conv2d_backward_numpy,
        "extract_windows": extract_windows_numpy,
        "composite_max": composite_max_numpy,
        "scatter_add_rows": scatter_add_rows_numpy,
        "bn_stats": bn_stats_numpy,
        "bn_normalize": bn_normalize_numpy,
        "bn_backward": bn_backward_numpy,
    },
}
if HAVE_NUMBA:
    IMPLEMENTATIONS["numba"] = {
        "conv2d_forward": conv2d_forward_numba,
        "conv2d_backward": conv2d_backward_numba,
        "extract_windows": extract_windows_numba,
        "composite_max": composite_max_numba,
        "scatter_add_rows": scatter_add_rows_numba,
        "bn_stats": bn_stats_numba,
        "bn_normalize": bn_normalize_numba,
        "bn_backward": bn_backward_numba,
    }

_active = IMPLEMENTATIONS[BACKEND]
conv2d_forward = _active["conv2d_forward"]
conv2d_backward = _active["conv2d_backward"]
extract_windows = _active["extract_windows"]
composite_max = _active["composite_max"]
scatter_add_rows = _active["scatter_add_rows"]
bn_stats = _active["bn_stats"]
bn_normalize = _active["bn_normalize"]
bn_backward = _active["bn_backward"]
