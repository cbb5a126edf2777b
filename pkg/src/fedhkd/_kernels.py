"""Hot inner loops, each in a numba and a numpy flavour.

The public names at the bottom of the module are bound to one flavour
according to :data:`fedhkd._accel.USE_NUMBA`. Both flavours are always
importable (``*_np`` / ``*_nb``) so tests and the benchmark can compare them.
"""

import math

import numpy as np

from ._accel import USE_NUMBA, njit

# ---------------------------------------------------------------- numpy path


def softmax_rows_np(z, inv_t):
    s = z * inv_t
    s = s - s.max(axis=1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=1, keepdims=True)


def bn_forward_np(x, scale, shift, eps):
    mean = x.mean(axis=0)
    var = ((x - mean) ** 2).mean(axis=0)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * scale + shift, xhat, mean, var, inv_std


def bn_backward_np(dout, xhat, scale, inv_std):
    b = dout.shape[0]
    dshift = dout.sum(axis=0)
    dscale = (dout * xhat).sum(axis=0)
    dxhat = dout * scale
    dx = (inv_std / b) * (b * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
    return dx, dscale, dshift


def adam_update_np(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


def weighted_sum_np(stack, weights):
    out = np.zeros(stack.shape[1:], dtype=np.float64)
    for k in range(stack.shape[0]):
        out += weights[k] * stack[k]
    return out


def class_sums_np(values, labels, n_classes):
    out = np.zeros((n_classes, values.shape[1]), dtype=np.float64)
    np.add.at(out, labels, values)
    counts = np.bincount(labels, minlength=n_classes).astype(np.int64)
    return out, counts


# ---------------------------------------------------------------- numba path


@njit
def softmax_rows_nb(z, inv_t):
    n, k = z.shape
    out = np.empty((n, k))
    for i in range(n):
        mx = z[i, 0] * inv_t
        for j in range(1, k):
            s = z[i, j] * inv_t
            if s > mx:
                mx = s
        tot = 0.0
        for j in range(k):
            e = math.exp(z[i, j] * inv_t - mx)
            out[i, j] = e
            tot += e
        for j in range(k):
            out[i, j] /= tot
    return out


@njit
def bn_forward_nb(x, scale, shift, eps):
    b, d = x.shape
    out = np.empty((b, d))
    xhat = np.empty((b, d))
    mean = np.zeros(d)
    var = np.zeros(d)
    inv_std = np.empty(d)
    for j in range(d):
        acc = 0.0
        for i in range(b):
            acc += x[i, j]
        mean[j] = acc / b
        acc = 0.0
        for i in range(b):
            c = x[i, j] - mean[j]
            acc += c * c
        var[j] = acc / b
        inv_std[j] = 1.0 / math.sqrt(var[j] + eps)
        for i in range(b):
            xh = (x[i, j] - mean[j]) * inv_std[j]
            xhat[i, j] = xh
            out[i, j] = xh * scale[j] + shift[j]
    return out, xhat, mean, var, inv_std


@njit
def bn_backward_nb(dout, xhat, scale, inv_std):
    b, d = dout.shape
    dx = np.empty((b, d))
    dscale = np.zeros(d)
    dshift = np.zeros(d)
    for j in range(d):
        s1 = 0.0
        s2 = 0.0
        for i in range(b):
            dshift[j] += dout[i, j]
            dscale[j] += dout[i, j] * xhat[i, j]
            dxh = dout[i, j] * scale[j]
            s1 += dxh
            s2 += dxh * xhat[i, j]
        for i in range(b):
            dxh = dout[i, j] * scale[j]
            dx[i, j] = (inv_std[j] / b) * (b * dxh - s1 - xhat[i, j] * s2)
    return dx, dscale, dshift


@njit
def adam_update_nb(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    pf = p.ravel()
    gf = g.ravel()
    mf = m.ravel()
    vf = v.ravel()
    for i in range(pf.size):
        gi = gf[i]
        mf[i] = beta1 * mf[i] + (1.0 - beta1) * gi
        vf[i] = beta2 * vf[i] + (1.0 - beta2) * (gi * gi)
        pf[i] -= lr * (mf[i] / bc1) / (math.sqrt(vf[i] / bc2) + eps)


@njit
def weighted_sum_nb(stack, weights):
    k = stack.shape[0]
    flat = stack.reshape(k, -1)
    out = np.zeros(flat.shape[1])
    for c in range(k):
        w = weights[c]
        for i in range(flat.shape[1]):
            out[i] += w * flat[c, i]
    return out.reshape(stack.shape[1:])


@njit
def class_sums_nb(values, labels, n_classes):
    n, d = values.shape
    out = np.zeros((n_classes, d))
    counts = np.zeros(n_classes, dtype=np.int64)
    for i in range(n):
        c = labels[i]
        counts[c] += 1
        for j in range(d):
            out[c, j] += values[i, j]
    return out, counts


if USE_NUMBA:
    softmax_rows = softmax_rows_nb
    bn_forward = bn_forward_nb
    bn_backward = bn_backward_nb
    adam_update = adam_update_nb
    weighted_sum = weighted_sum_nb
    class_sums = class_sums_nb
else:
    softmax_rows = softmax_rows_np
    bn_forward = bn_forward_np
    bn_backward = bn_backward_np
    adam_update = adam_update_np
    weighted_sum = weighted_sum_np
    class_sums = class_sums_np
