# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels.

Direct-loop evaluation with per-pixel stack accumulators (no im2col
buffer); same entry points and channels-last layout as numpy_backend.
Channel counts are capped at 256, far above anything the denoiser uses.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

DEF MAXC = 256


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w, b, int stride, int pad):
    cdef int batch = x.shape[0], h = x.shape[1], wdt = x.shape[2], cin = x.shape[3]
    cdef int kh = w.shape[0], kw = w.shape[1], cout = w.shape[3]
    cdef int ho = (h + 2 * pad - kh) // stride + 1
    cdef int wo = (wdt + 2 * pad - kw) // stride + 1
    if cout > MAXC:
        raise ValueError(f"cout={cout} exceeds compiled limit {MAXC}")
    y_arr = np.empty((batch, ho, wo, cout), dtype=np.float64)
    cdef double[:, :, :, ::1] y = y_arr
    cdef double[::1] bias_view
    cdef const double* bias_ptr = NULL
    if b is not None:
        bias_view = np.ascontiguousarray(b, dtype=np.float64)
        bias_ptr = &bias_view[0]
    cdef double acc[MAXC]
    cdef const double* xrow
    cdef const double* wrow
    cdef double* yrow
    cdef int bb, oi, oj, ki, kj, ci, co, ii, jj
    cdef double xv
    with nogil:
        for bb in range(batch):
            for oi in range(ho):
                for oj in range(wo):
                    if bias_ptr != NULL:
                        for co in range(cout):
                            acc[co] = bias_ptr[co]
                    else:
                        for co in range(cout):
                            acc[co] = 0.0
                    for ki in range(kh):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(kw):
                            jj = oj * stride + kj - pad
                            if jj < 0 or jj >= wdt:
                                continue
                            xrow = &x[bb, ii, jj, 0]
                            wrow = &w[ki, kj, 0, 0]
                            for ci in range(cin):
                                xv = xrow[ci]
                                for co in range(cout):
                                    acc[co] += xv * wrow[co]
                                wrow += cout
                    yrow = &y[bb, oi, oj, 0]
                    for co in range(cout):
                        yrow[co] = acc[co]
    return y_arr


def conv2d_grad_input(double[:, :, :, ::1] dy, double[:, :, :, ::1] w, int stride, int pad,
                      int h, int wdt):
    cdef int batch = dy.shape[0], ho = dy.shape[1], wo = dy.shape[2], cout = dy.shape[3]
    cdef int kh = w.shape[0], kw = w.shape[1], cin = w.shape[2]
    if cin > MAXC:
        raise ValueError(f"cin={cin} exceeds compiled limit {MAXC}")
    dx_arr = np.zeros((batch, h, wdt, cin), dtype=np.float64)
    cdef double[:, :, :, ::1] dx = dx_arr
    cdef double acc
    cdef const double* dyrow
    cdef const double* wrow
    cdef double* dxrow
    cdef int bb, oi, oj, ki, kj, ci, co, ii, jj
    with nogil:
        for bb in range(batch):
            for oi in range(ho):
                for oj in range(wo):
                    dyrow = &dy[bb, oi, oj, 0]
                    for ki in range(kh):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(kw):
                            jj = oj * stride + kj - pad
                            if jj < 0 or jj >= wdt:
                                continue
                            dxrow = &dx[bb, ii, jj, 0]
                            wrow = &w[ki, kj, 0, 0]
                            for ci in range(cin):
                                acc = 0.0
                                for co in range(cout):
                                    acc += dyrow[co] * wrow[co]
                                dxrow[ci] += acc
                                wrow += cout
    return dx_arr


def conv2d_grad_weights(double[:, :, :, ::1] x, double[:, :, :, ::1] dy, int stride, int pad,
                        int kh, int kw):
    cdef int batch = x.shape[0], h = x.shape[1], wdt = x.shape[2], cin = x.shape[3]
    cdef int ho = dy.shape[1], wo = dy.shape[2], cout = dy.shape[3]
    dw_arr = np.zeros((kh, kw, cin, cout), dtype=np.float64)
    db_arr = np.zeros(cout, dtype=np.float64)
    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef const double* dyrow
    cdef const double* xrow
    cdef double* dwrow
    cdef int bb, oi, oj, ki, kj, ci, co, ii, jj
    cdef double xv
    with nogil:
        for bb in range(batch):
            for oi in range(ho):
                for oj in range(wo):
                    dyrow = &dy[bb, oi, oj, 0]
                    for co in range(cout):
                        db[co] += dyrow[co]
                    for ki in range(kh):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        for kj in range(kw):
                            jj = oj * stride + kj - pad
                            if jj < 0 or jj >= wdt:
                                continue
                            xrow = &x[bb, ii, jj, 0]
                            dwrow = &dw[ki, kj, 0, 0]
                            for ci in range(cin):
                                xv = xrow[ci]
                                for co in range(cout):
                                    dwrow[co] += xv * dyrow[co]
                                dwrow += cout
    return dw_arr, db_arr
