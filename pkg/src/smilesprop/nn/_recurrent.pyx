# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled GRU/LSTM recurrences.

All arrays are time-major and C-contiguous: inputs ``xp`` hold the input
projection (``x @ Wx + b``) for every step, shape (L, B, G*H).  Matrix
products go through BLAS gemm on row-major views; everything else is a plain
loop over the (B, H) slab of the current step.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf
from scipy.linalg.cython_blas cimport dgemm, sgemm

cnp.import_array()

cdef extern from *:
    """
    #if defined(__SSE__) || defined(__x86_64__)
    #include <xmmintrin.h>
    static unsigned int smp_enter_ftz(void) {
        unsigned int old = _mm_getcsr();
        _mm_setcsr(old | 0x8040);
        return old;
    }
    static void smp_leave_ftz(unsigned int old) { _mm_setcsr(old); }
    #else
    static unsigned int smp_enter_ftz(void) { return 0; }
    static void smp_leave_ftz(unsigned int old) { (void)old; }
    #endif
    """
    unsigned int smp_enter_ftz() nogil
    void smp_leave_ftz(unsigned int old) nogil

ctypedef fused real:
    float
    double


def enter_ftz():
    """Set flush-to-zero / denormals-are-zero for this thread; returns the old state."""
    return smp_enter_ftz()


def leave_ftz(unsigned int old):
    smp_leave_ftz(old)


cdef inline void _gemm(bint ta, bint tb, int m, int n, int k, real alpha,
                       real* a, int lda, real* b, int ldb, real beta,
                       real* c, int ldc) noexcept nogil:
    # row-major C(m, n) = alpha * op(A) @ op(B) + beta * C, run as the
    # column-major product C^T = op(B)^T @ op(A)^T
    cdef char tra = b'T' if ta else b'N'
    cdef char trb = b'T' if tb else b'N'
    if real is float:
        sgemm(&trb, &tra, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)
    else:
        dgemm(&trb, &tra, &n, &m, &k, &alpha, b, &ldb, a, &lda, &beta, c, &ldc)


# sigmoid and tanh are built on exp(), which is several times cheaper than
# libm tanh/tanhf here; float32 uses expf
cdef inline real _exp(real x) noexcept nogil:
    if real is float:
        return expf(x)
    else:
        return exp(x)


cdef inline real _sigmoid(real x) noexcept nogil:
    return 1 / (1 + _exp(-x))


cdef inline real _tanh(real x) noexcept nogil:
    cdef real e
    if x >= 0:
        e = _exp(-2 * x)
        return (1 - e) / (1 + e)
    e = _exp(2 * x)
    return (e - 1) / (1 + e)


def gru_forward(real[:, :, ::1] xp, real[:, ::1] wh, bint reverse):
    cdef Py_ssize_t L = xp.shape[0], B = xp.shape[1], H = wh.shape[0]
    cdef Py_ssize_t H3 = 3 * H
    if xp.shape[2] != H3 or wh.shape[1] != H3:
        raise ValueError("gate width mismatch")
    dtype = np.float32 if real is float else np.float64
    hs_a = np.empty((L, B, H), dtype=dtype)
    z_a = np.empty((L, B, H), dtype=dtype)
    r_a = np.empty((L, B, H), dtype=dtype)
    n_a = np.empty((L, B, H), dtype=dtype)
    zero_a = np.zeros((B, H), dtype=dtype)
    g_a = np.empty((B, 2 * H), dtype=dtype)
    rh_a = np.empty((B, H), dtype=dtype)
    c_a = np.empty((B, H), dtype=dtype)
    cdef real[:, :, ::1] hs = hs_a, zs = z_a, rs = r_a, ns = n_a
    cdef real[:, ::1] zero = zero_a, g = g_a, rh = rh_a, cand = c_a
    cdef real* hprev
    cdef Py_ssize_t step, t, b, j
    cdef real z, r, n, hp
    cdef unsigned int csr
    with nogil:
        # gradients decaying across long pad runs reach the denormal range,
        # where arithmetic is orders of magnitude slower
        csr = smp_enter_ftz()
        for step in range(L):
            t = L - 1 - step if reverse else step
            if step == 0:
                hprev = &zero[0, 0]
            elif reverse:
                hprev = &hs[t + 1, 0, 0]
            else:
                hprev = &hs[t - 1, 0, 0]
            _gemm(False, False, B, 2 * H, H, 1.0, hprev, H, &wh[0, 0], H3, 0.0, &g[0, 0], 2 * H)
            for b in range(B):
                for j in range(H):
                    z = _sigmoid(xp[t, b, j] + g[b, j])
                    r = _sigmoid(xp[t, b, H + j] + g[b, H + j])
                    zs[t, b, j] = z
                    rs[t, b, j] = r
                    rh[b, j] = r * hprev[b * H + j]
            _gemm(False, False, B, H, H, 1.0, &rh[0, 0], H, &wh[0, 2 * H], H3, 0.0, &cand[0, 0], H)
            for b in range(B):
                for j in range(H):
                    n = _tanh(xp[t, b, 2 * H + j] + cand[b, j])
                    ns[t, b, j] = n
                    z = zs[t, b, j]
                    hp = hprev[b * H + j]
                    hs[t, b, j] = (1.0 - z) * hp + z * n
        smp_leave_ftz(csr)
    return hs_a, z_a, r_a, n_a


def gru_backward(real[:, :, ::1] dhs, real[:, :, ::1] hs, real[:, :, ::1] zs,
                 real[:, :, ::1] rs, real[:, :, ::1] ns, real[:, ::1] wh,
                 bint reverse, bint need_wh_grad=True):
    cdef Py_ssize_t L = hs.shape[0], B = hs.shape[1], H = hs.shape[2]
    cdef Py_ssize_t H3 = 3 * H
    dtype = np.float32 if real is float else np.float64
    dxp_a = np.empty((L, B, H3), dtype=dtype)
    dwh_a = np.zeros((H, H3), dtype=dtype)
    carry_a = np.zeros((B, H), dtype=dtype)
    drh_a = np.empty((B, H), dtype=dtype)
    rh_a = np.empty((B, H), dtype=dtype)
    zero_a = np.zeros((B, H), dtype=dtype)
    cdef real[:, :, ::1] dxp = dxp_a
    cdef real[:, ::1] dwh = dwh_a, carry = carry_a, drh = drh_a, rh = rh_a, zero = zero_a
    cdef real* hprev
    cdef Py_ssize_t step, t, b, j
    cdef real dh, z, r, n, hp, dz, dn, dr
    cdef unsigned int csr
    with nogil:
        # gradients decaying across long pad runs reach the denormal range,
        # where arithmetic is orders of magnitude slower
        csr = smp_enter_ftz()
        for step in range(L - 1, -1, -1):
            t = L - 1 - step if reverse else step
            if step == 0:
                hprev = &zero[0, 0]
            elif reverse:
                hprev = &hs[t + 1, 0, 0]
            else:
                hprev = &hs[t - 1, 0, 0]
            for b in range(B):
                for j in range(H):
                    dh = dhs[t, b, j] + carry[b, j]
                    z = zs[t, b, j]
                    n = ns[t, b, j]
                    hp = hprev[b * H + j]
                    dz = dh * (n - hp)
                    dn = dh * z
                    carry[b, j] = dh * (1.0 - z)
                    dxp[t, b, 2 * H + j] = dn * (1.0 - n * n)
                    dxp[t, b, j] = dz * z * (1.0 - z)
                    rh[b, j] = rs[t, b, j] * hp
            # candidate path: d(r*h) = da_n @ Wn^T
            _gemm(False, True, B, H, H, 1.0, &dxp[t, 0, 2 * H], H3, &wh[0, 2 * H], H3, 0.0, &drh[0, 0], H)
            if need_wh_grad:
                _gemm(True, False, H, H, B, 1.0, &rh[0, 0], H, &dxp[t, 0, 2 * H], H3, 1.0, &dwh[0, 2 * H], H3)
            for b in range(B):
                for j in range(H):
                    r = rs[t, b, j]
                    dr = drh[b, j] * hprev[b * H + j]
                    carry[b, j] += drh[b, j] * r
                    dxp[t, b, H + j] = dr * r * (1.0 - r)
            # gate path
            _gemm(False, True, B, H, 2 * H, 1.0, &dxp[t, 0, 0], H3, &wh[0, 0], H3, 1.0, &carry[0, 0], H)
            if need_wh_grad and step > 0:
                _gemm(True, False, H, 2 * H, B, 1.0, hprev, H, &dxp[t, 0, 0], H3, 1.0, &dwh[0, 0], H3)
        smp_leave_ftz(csr)
    return dxp_a, dwh_a


def lstm_forward(real[:, :, ::1] xp, real[:, ::1] wh, bint reverse):
    cdef Py_ssize_t L = xp.shape[0], B = xp.shape[1], H = wh.shape[0]
    cdef Py_ssize_t H4 = 4 * H
    if xp.shape[2] != H4 or wh.shape[1] != H4:
        raise ValueError("gate width mismatch")
    dtype = np.float32 if real is float else np.float64
    hs_a = np.empty((L, B, H), dtype=dtype)
    cs_a = np.empty((L, B, H), dtype=dtype)
    gates_a = np.empty((L, B, H4), dtype=dtype)
    zero_a = np.zeros((B, H), dtype=dtype)
    g_a = np.empty((B, H4), dtype=dtype)
    cdef real[:, :, ::1] hs = hs_a, cs = cs_a, gates = gates_a
    cdef real[:, ::1] zero = zero_a, g = g_a
    cdef real* hprev
    cdef real* cprev
    cdef Py_ssize_t step, t, b, j
    cdef real i, f, gg, o, c
    cdef unsigned int csr
    with nogil:
        # gradients decaying across long pad runs reach the denormal range,
        # where arithmetic is orders of magnitude slower
        csr = smp_enter_ftz()
        for step in range(L):
            t = L - 1 - step if reverse else step
            if step == 0:
                hprev = &zero[0, 0]
                cprev = &zero[0, 0]
            elif reverse:
                hprev = &hs[t + 1, 0, 0]
                cprev = &cs[t + 1, 0, 0]
            else:
                hprev = &hs[t - 1, 0, 0]
                cprev = &cs[t - 1, 0, 0]
            _gemm(False, False, B, H4, H, 1.0, hprev, H, &wh[0, 0], H4, 0.0, &g[0, 0], H4)
            for b in range(B):
                for j in range(H):
                    i = _sigmoid(xp[t, b, j] + g[b, j])
                    f = _sigmoid(xp[t, b, H + j] + g[b, H + j])
                    gg = _tanh(xp[t, b, 2 * H + j] + g[b, 2 * H + j])
                    o = _sigmoid(xp[t, b, 3 * H + j] + g[b, 3 * H + j])
                    gates[t, b, j] = i
                    gates[t, b, H + j] = f
                    gates[t, b, 2 * H + j] = gg
                    gates[t, b, 3 * H + j] = o
                    c = f * cprev[b * H + j] + i * gg
                    cs[t, b, j] = c
                    hs[t, b, j] = o * _tanh(c)
        smp_leave_ftz(csr)
    return hs_a, cs_a, gates_a


def lstm_backward(real[:, :, ::1] dhs, real[:, :, ::1] hs, real[:, :, ::1] cs,
                  real[:, :, ::1] gates, real[:, ::1] wh, bint reverse,
                  bint need_wh_grad=True):
    cdef Py_ssize_t L = hs.shape[0], B = hs.shape[1], H = hs.shape[2]
    cdef Py_ssize_t H4 = 4 * H
    dtype = np.float32 if real is float else np.float64
    dxp_a = np.empty((L, B, H4), dtype=dtype)
    dwh_a = np.zeros((H, H4), dtype=dtype)
    dh_a = np.zeros((B, H), dtype=dtype)
    dc_a = np.zeros((B, H), dtype=dtype)
    zero_a = np.zeros((B, H), dtype=dtype)
    cdef real[:, :, ::1] dxp = dxp_a
    cdef real[:, ::1] dwh = dwh_a, dhc = dh_a, dcc = dc_a, zero = zero_a
    cdef real* hprev
    cdef real* cprev
    cdef Py_ssize_t step, t, b, j
    cdef real dh, dc, i, f, gg, o, tc
    cdef unsigned int csr
    with nogil:
        # gradients decaying across long pad runs reach the denormal range,
        # where arithmetic is orders of magnitude slower
        csr = smp_enter_ftz()
        for step in range(L - 1, -1, -1):
            t = L - 1 - step if reverse else step
            if step == 0:
                hprev = &zero[0, 0]
                cprev = &zero[0, 0]
            elif reverse:
                hprev = &hs[t + 1, 0, 0]
                cprev = &cs[t + 1, 0, 0]
            else:
                hprev = &hs[t - 1, 0, 0]
                cprev = &cs[t - 1, 0, 0]
            for b in range(B):
                for j in range(H):
                    i = gates[t, b, j]
                    f = gates[t, b, H + j]
                    gg = gates[t, b, 2 * H + j]
                    o = gates[t, b, 3 * H + j]
                    tc = _tanh(cs[t, b, j])
                    dh = dhs[t, b, j] + dhc[b, j]
                    dc = dcc[b, j] + dh * o * (1.0 - tc * tc)
                    dxp[t, b, j] = dc * gg * i * (1.0 - i)
                    dxp[t, b, H + j] = dc * cprev[b * H + j] * f * (1.0 - f)
                    dxp[t, b, 2 * H + j] = dc * i * (1.0 - gg * gg)
                    dxp[t, b, 3 * H + j] = dh * tc * o * (1.0 - o)
                    dcc[b, j] = dc * f
            _gemm(False, True, B, H, H4, 1.0, &dxp[t, 0, 0], H4, &wh[0, 0], H4, 0.0, &dhc[0, 0], H)
            if need_wh_grad and step > 0:
                _gemm(True, False, H, H4, B, 1.0, hprev, H, &dxp[t, 0, 0], H4, 1.0, &dwh[0, 0], H4)
        smp_leave_ftz(csr)
    return dxp_a, dwh_a
