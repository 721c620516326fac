"""Pure-numpy conv2d kernels (im2col + BLAS matmul).

Fallback backend used when the compiled extension is unavailable.  All
arrays are C-contiguous float64; shape checks happen one level up in
`segmoe.tensor`.
"""

import numpy as np

BACKEND = "python"


def _im2col(x, kh, kw, stride, padding, oh, ow):
    n, c, h, w = x.shape
    if padding > 0:
        xp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
        xp[:, :, padding : padding + h, padding : padding + w] = x
    else:
        xp = x
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            cols[:, :, a, b, :, :] = xp[
                :, :, a : a + stride * (oh - 1) + 1 : stride, b : b + stride * (ow - 1) + 1 : stride
            ]
    return cols


def conv2d_forward(x, weight, stride, padding):
    """Cross-correlate x[N,C,H,W] with weight[F,C,kh,kw] -> y[N,F,OH,OW]."""
    n, c, h, w = x.shape
    f, _, kh, kw = weight.shape
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    cols = _im2col(x, kh, kw, stride, padding, oh, ow)
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    w2 = weight.reshape(f, c * kh * kw)
    y = np.matmul(w2, cols2)  # [N, F, OH*OW] via broadcasting over N
    return np.ascontiguousarray(y.reshape(n, f, oh, ow))


def conv2d_backward_input(dy, weight, stride, padding, h, w):
    """Gradient w.r.t. the conv input, given dy[N,F,OH,OW]."""
    n, f, oh, ow = dy.shape
    _, c, kh, kw = weight.shape
    w2 = weight.reshape(f, c * kh * kw)
    dy2 = dy.reshape(n, f, oh * ow)
    dcols2 = np.matmul(w2.T, dy2)  # [N, C*kh*kw, OH*OW]
    dcols = dcols2.reshape(n, c, kh, kw, oh, ow)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=np.float64)
    for a in range(kh):
        for b in range(kw):
            dxp[
                :, :, a : a + stride * (oh - 1) + 1 : stride, b : b + stride * (ow - 1) + 1 : stride
            ] += dcols[:, :, a, b, :, :]
    if padding > 0:
        return np.ascontiguousarray(dxp[:, :, padding : padding + h, padding : padding + w])
    return dxp


def conv2d_backward_weight(dy, x, kh, kw, stride, padding):
    """Gradient w.r.t. the conv weight, given dy[N,F,OH,OW]."""
    n, f, oh, ow = dy.shape
    c = x.shape[1]
    cols = _im2col(x, kh, kw, stride, padding, oh, ow)
    cols2 = cols.reshape(n, c * kh * kw, oh * ow)
    dy2 = dy.reshape(n, f, oh * ow)
    # sum over batch and output positions in one GEMM
    dyf = np.ascontiguousarray(dy2.transpose(1, 0, 2)).reshape(f, n * oh * ow)
    colsf = np.ascontiguousarray(cols2.transpose(1, 0, 2)).reshape(c * kh * kw, n * oh * ow)
    dw = np.matmul(dyf, colsf.T)
    return np.ascontiguousarray(dw.reshape(f, c, kh, kw))
