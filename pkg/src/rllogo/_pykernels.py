"""Pure numpy implementations of the hot kernels.

Used when the compiled extension is unavailable or ``RLLOGO_PURE_PYTHON=1``.
The arithmetic is ordered so results match ``_ckernels`` bit for bit.
"""

import numpy as np


def _axis_taps(start, step, n_out, n_in):
    src = start + (np.arange(n_out, dtype=np.float64) + 0.5) * step - 0.5
    src = np.minimum(np.maximum(src, 0.0), float(n_in - 1))
    i0 = np.minimum(np.floor(src).astype(np.intp), n_in - 2)
    return i0, src - i0


def crop_resize(img, x1, y1, x2, y2, out_side):
    h, w = img.shape[:2]
    c0, fx = _axis_taps(x1 * w, (x2 - x1) * w / out_side, out_side, w)
    r0, fy = _axis_taps(y1 * h, (y2 - y1) * h / out_side, out_side, h)
    fx = fx[None, :, None]
    fy = fy[:, None, None]
    rows0 = img[r0].astype(np.float64)
    rows1 = img[r0 + 1].astype(np.float64)
    top = (1.0 - fx) * rows0[:, c0] + fx * rows0[:, c0 + 1]
    bot = (1.0 - fx) * rows1[:, c0] + fx * rows1[:, c0 + 1]
    v = np.floor((1.0 - fy) * top + fy * bot + 0.5)
    return np.clip(v, 0.0, 255.0).astype(np.uint8)


def sgd_momentum_update(param, velocity, grad, lr, momentum, weight_decay):
    dt = param.dtype.type
    lr, momentum, weight_decay = dt(lr), dt(momentum), dt(weight_decay)
    t = momentum * velocity
    t += grad
    t += weight_decay * param
    velocity[...] = t
    param -= lr * t


def iou_pairs(a, b):
    iw = np.minimum(a[:, 2], b[:, 2]) - np.maximum(a[:, 0], b[:, 0])
    ih = np.minimum(a[:, 3], b[:, 3]) - np.maximum(a[:, 1], b[:, 1])
    hit = (iw > 0.0) & (ih > 0.0)
    inter = np.where(hit, iw * ih, 0.0)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    out = np.zeros(len(a), dtype=np.float64)
    np.divide(inter, area_a + area_b - inter, out=out, where=hit)
    return out
