# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Arithmetic order mirrors ``_pykernels`` exactly."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()


def crop_resize(const unsigned char[:, :, ::1] img, double x1, double y1,
                double x2, double y2, int out_side):
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1], nc = img.shape[2]
    cdef double bx = x1 * w, by = y1 * h
    cdef double sx = (x2 - x1) * w / out_side, sy = (y2 - y1) * h / out_side
    cdef Py_ssize_t i, j, c, r0, c0
    cdef double src, fx, fy, top, bot, v
    out_arr = np.empty((out_side, out_side, nc), dtype=np.uint8)
    cdef unsigned char[:, :, ::1] out = out_arr
    cdef cnp.intp_t[::1] col0 = np.empty(out_side, dtype=np.intp)
    cdef double[::1] colf = np.empty(out_side, dtype=np.float64)

    for j in range(out_side):
        src = bx + (j + 0.5) * sx - 0.5
        src = min(max(src, 0.0), <double>(w - 1))
        c0 = <Py_ssize_t>floor(src)
        if c0 > w - 2:
            c0 = w - 2
        col0[j] = c0
        colf[j] = src - c0

    for i in range(out_side):
        src = by + (i + 0.5) * sy - 0.5
        src = min(max(src, 0.0), <double>(h - 1))
        r0 = <Py_ssize_t>floor(src)
        if r0 > h - 2:
            r0 = h - 2
        fy = src - r0
        for j in range(out_side):
            c0 = col0[j]
            fx = colf[j]
            for c in range(nc):
                top = (1.0 - fx) * img[r0, c0, c] + fx * img[r0, c0 + 1, c]
                bot = (1.0 - fx) * img[r0 + 1, c0, c] + fx * img[r0 + 1, c0 + 1, c]
                v = floor((1.0 - fy) * top + fy * bot + 0.5)
                if v < 0.0:
                    v = 0.0
                elif v > 255.0:
                    v = 255.0
                out[i, j, c] = <unsigned char>v
    return out_arr


def sgd_momentum_update(float[::1] param, float[::1] velocity,
                        const float[::1] grad, float lr, float momentum,
                        float weight_decay):
    cdef Py_ssize_t i, n = param.shape[0]
    cdef float t, u
    for i in range(n):
        t = momentum * velocity[i]
        t = t + grad[i]
        u = weight_decay * param[i]
        t = t + u
        velocity[i] = t
        u = lr * t
        param[i] = param[i] - u


def iou_pairs(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t k, n = a.shape[0]
    cdef double iw, ih, inter, area_a, area_b
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    for k in range(n):
        iw = min(a[k, 2], b[k, 2]) - max(a[k, 0], b[k, 0])
        ih = min(a[k, 3], b[k, 3]) - max(a[k, 1], b[k, 1])
        if iw <= 0.0 or ih <= 0.0:
            out[k] = 0.0
            continue
        inter = iw * ih
        area_a = (a[k, 2] - a[k, 0]) * (a[k, 3] - a[k, 1])
        area_b = (b[k, 2] - b[k, 0]) * (b[k, 3] - b[k, 1])
        out[k] = inter / (area_a + area_b - inter)
    return out_arr
