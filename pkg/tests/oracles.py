"""Independent brute-force references used as test oracles.

Nothing here imports the package's numeric kernels.
"""

import numpy as np


def conv2d_loops(x, kernel, bias, stride=1, padding=None):
    n, c, h, w = x.shape
    o, _, k, _ = kernel.shape
    p = (k - 1) // 2 if padding is None else padding
    xp = np.zeros((n, c, h + 2 * p, w + 2 * p))
    xp[:, :, p : p + h, p : p + w] = x
    ho = (h + 2 * p - k) // stride + 1
    wo = (w + 2 * p - k) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = bias[oc]
                    for ic in range(c):
                        for di in range(k):
                            for dj in range(k):
                                acc += xp[b, ic, i * stride + di, j * stride + dj] * kernel[oc, ic, di, dj]
                    out[b, oc, i, j] = acc
    return out


def ssim_sliding_window(x, y, patch=13, c1=0.02, c2=0.03):
    """Per-pixel SSIM of two 2-D images with a uniform window and mirror borders."""
    r = patch // 2
    xp = np.pad(x, r, mode="reflect")
    yp = np.pad(y, r, mode="reflect")
    h, w = x.shape
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            px = xp[i : i + patch, j : j + patch]
            py = yp[i : i + patch, j : j + patch]
            mx, my = px.mean(), py.mean()
            vx = ((px - mx) ** 2).mean()
            vy = ((py - my) ** 2).mean()
            cxy = ((px - mx) * (py - my)).mean()
            out[i, j] = (2 * mx * my + c1) / (mx**2 + my**2 + c1) * (2 * cxy + c2) / (vx + vy + c2)
    return out


def numeric_grad(f, x, h=1e-5):
    """Central-difference gradient of scalar f at array x (x is restored)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g
