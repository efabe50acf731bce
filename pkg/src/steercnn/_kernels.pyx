# cython: language_level=3
"""Compiled inner loops: im2col/col2im for convolution, 2x2 max-pooling.

Every routine writes into caller-allocated C-contiguous float64 buffers and
must agree exactly with the numpy versions in ``_fallback``.
"""


def im2col(const double[:, :, :, ::1] xp, int kh, int kw, double[:, ::1] out):
    """Unfold padded input (B, C, Hp, Wp) into (C*kh*kw, B*Ho*Wo)."""
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t Ho = xp.shape[2] - kh + 1, Wo = xp.shape[3] - kw + 1
    cdef Py_ssize_t b, c, a, d, y, x, row, col0
    cdef double* dst
    cdef const double* src
    with nogil:
        for c in range(C):
            for a in range(kh):
                for d in range(kw):
                    row = (c * kh + a) * kw + d
                    for b in range(B):
                        col0 = b * Ho * Wo
                        for y in range(Ho):
                            dst = &out[row, col0 + y * Wo]
                            src = &xp[b, c, y + a, d]
                            for x in range(Wo):
                                dst[x] = src[x]


def col2im(const double[:, ::1] cols, int kh, int kw, double[:, :, :, ::1] out):
    """Accumulate (C*kh*kw, B*Ho*Wo) columns back into padded (B, C, Hp, Wp)."""
    cdef Py_ssize_t B = out.shape[0], C = out.shape[1]
    cdef Py_ssize_t Ho = out.shape[2] - kh + 1, Wo = out.shape[3] - kw + 1
    cdef Py_ssize_t b, c, a, d, y, x, row, col0
    cdef double* dst
    cdef const double* src
    with nogil:
        for b in range(B):
            col0 = b * Ho * Wo
            for c in range(C):
                for a in range(kh):
                    for d in range(kw):
                        row = (c * kh + a) * kw + d
                        for y in range(Ho):
                            dst = &out[b, c, y + a, d]
                            src = &cols[row, col0 + y * Wo]
                            for x in range(Wo):
                                dst[x] += src[x]


def max_pool2_forward(const double[:, :, :, ::1] x, double[:, :, :, ::1] out,
                      signed char[:, :, :, ::1] arg):
    """2x2 stride-2 max; ``arg`` records the winning window slot, first index wins."""
    cdef Py_ssize_t B = x.shape[0], C = x.shape[1]
    cdef Py_ssize_t Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t b, c, y, xx
    cdef double best, v
    cdef signed char k
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(Ho):
                    for xx in range(Wo):
                        best = x[b, c, 2 * y, 2 * xx]
                        k = 0
                        v = x[b, c, 2 * y, 2 * xx + 1]
                        if v > best:
                            best = v
                            k = 1
                        v = x[b, c, 2 * y + 1, 2 * xx]
                        if v > best:
                            best = v
                            k = 2
                        v = x[b, c, 2 * y + 1, 2 * xx + 1]
                        if v > best:
                            best = v
                            k = 3
                        out[b, c, y, xx] = best
                        arg[b, c, y, xx] = k


def max_pool2_backward(const double[:, :, :, ::1] dout, const signed char[:, :, :, ::1] arg,
                       double[:, :, :, ::1] dx):
    cdef Py_ssize_t B = dout.shape[0], C = dout.shape[1]
    cdef Py_ssize_t Ho = dout.shape[2], Wo = dout.shape[3]
    cdef Py_ssize_t b, c, y, xx
    cdef signed char k
    with nogil:
        for b in range(B):
            for c in range(C):
                for y in range(Ho):
                    for xx in range(Wo):
                        k = arg[b, c, y, xx]
                        dx[b, c, 2 * y + (k >> 1), 2 * xx + (k & 1)] += dout[b, c, y, xx]
