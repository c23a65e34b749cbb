# cython: boundscheck=False, wraparound=False, cdivision=True
# cython: language_level=3
"""Direct-loop convolution kernels (compiled hot path).

Same padded-array contract as numpy_kernels; see that module's docstring.
"""

import numpy as np


def conv_forward_padded(double[:, :, :, ::1] xp, double[:, :, :, ::1] w,
                        double[::1] b):
    cdef Py_ssize_t n = xp.shape[0], cin = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t oh = hp - k + 1, ow = wp - k + 1
    out_arr = np.empty((n, cout, oh, ow), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t i, o, c, y, x, ky, kx
    cdef double wv, bias
    with nogil:
        for i in range(n):
            for o in range(cout):
                bias = b[o]
                for y in range(oh):
                    for x in range(ow):
                        out[i, o, y, x] = bias
                for c in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            wv = w[o, c, ky, kx]
                            for y in range(oh):
                                for x in range(ow):
                                    out[i, o, y, x] += wv * xp[i, c, y + ky, x + kx]
    return out_arr


def conv_backward_padded(double[:, :, :, ::1] xp, double[:, :, :, ::1] w,
                         double[:, :, :, ::1] gout):
    cdef Py_ssize_t n = xp.shape[0], cin = xp.shape[1]
    cdef Py_ssize_t hp = xp.shape[2], wp = xp.shape[3]
    cdef Py_ssize_t cout = w.shape[0], k = w.shape[2]
    cdef Py_ssize_t oh = hp - k + 1, ow = wp - k + 1
    dxp_arr = np.zeros((n, cin, hp, wp), dtype=np.float64)
    dw_arr = np.zeros((cout, cin, k, k), dtype=np.float64)
    db_arr = np.zeros(cout, dtype=np.float64)
    cdef double[:, :, :, ::1] dxp = dxp_arr
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef Py_ssize_t i, o, c, y, x, ky, kx
    cdef double g, wv, acc
    with nogil:
        for i in range(n):
            for o in range(cout):
                acc = 0.0
                for y in range(oh):
                    for x in range(ow):
                        acc += gout[i, o, y, x]
                db[o] += acc
                for c in range(cin):
                    for ky in range(k):
                        for kx in range(k):
                            wv = w[o, c, ky, kx]
                            acc = 0.0
                            for y in range(oh):
                                for x in range(ow):
                                    g = gout[i, o, y, x]
                                    acc += g * xp[i, c, y + ky, x + kx]
                                    dxp[i, c, y + ky, x + kx] += g * wv
                            dw[o, c, ky, kx] += acc
    return dxp_arr, dw_arr, db_arr
