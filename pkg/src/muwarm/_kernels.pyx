# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Same signatures and semantics as ``_kernels_py``.

Only kernels that beat numpy live here (see benchmarks/bench_kernels.py);
cross-entropy and Adam stay on numpy; gelu fuses the polynomial parts here
and borrows numpy's SIMD tanh.
"""

import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt, exp, INFINITY

cnp.import_array()

def layernorm_fwd(floating[:, ::1] x, floating[::1] gain, floating[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dt = np.float32 if floating is float else np.float64
    y_arr = np.empty((n, d), dtype=dt)
    mean_arr = np.empty(n, dtype=np.float64)
    rstd_arr = np.empty(n, dtype=np.float64)
    cdef floating[:, ::1] y = y_arr
    cdef double[::1] mean = mean_arr
    cdef double[::1] rstd = rstd_arr
    cdef double s, mu, r, c
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += x[i, j]
            mu = s / d
            s = 0.0
            for j in range(d):
                c = x[i, j] - mu
                s += c * c
            r = 1.0 / sqrt(s / d + eps)
            mean[i] = mu
            rstd[i] = r
            for j in range(d):
                y[i, j] = <floating>((x[i, j] - mu) * r * gain[j] + bias[j])
    return y_arr, mean_arr, rstd_arr


def layernorm_bwd(floating[:, ::1] gy, floating[:, ::1] x, double[::1] mean,
                  double[::1] rstd, floating[::1] gain):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    dt = np.float32 if floating is float else np.float64
    gx_arr = np.empty((n, d), dtype=dt)
    cdef floating[:, ::1] gx = gx_arr
    gg_acc = np.zeros(d, dtype=np.float64)
    gb_acc = np.zeros(d, dtype=np.float64)
    cdef double[::1] gg = gg_acc
    cdef double[::1] gb = gb_acc
    cdef double a, b, xh, gxh, mu, r
    with nogil:
        for i in range(n):
            mu = mean[i]
            r = rstd[i]
            a = 0.0
            b = 0.0
            for j in range(d):
                xh = (x[i, j] - mu) * r
                gxh = gy[i, j] * gain[j]
                a += gxh
                b += gxh * xh
                gg[j] += gy[i, j] * xh
                gb[j] += gy[i, j]
            a /= d
            b /= d
            for j in range(d):
                xh = (x[i, j] - mu) * r
                gx[i, j] = <floating>((gy[i, j] * gain[j] - a - xh * b) * r)
    return gx_arr, gg_acc.astype(dt), gb_acc.astype(dt)


cdef double GELU_C = 0.7978845608028654  # sqrt(2 / pi)


def gelu_fwd(x):
    x = np.ascontiguousarray(x)
    flat = x.reshape(-1)
    t = np.empty_like(flat)
    y = np.empty_like(flat)
    if x.dtype == np.float32:
        _gelu_inner[float](flat, t)
        np.tanh(t, out=t)
        _gelu_out[float](flat, t, y)
    else:
        _gelu_inner[double](flat, t)
        np.tanh(t, out=t)
        _gelu_out[double](flat, t, y)
    return y.reshape(x.shape), t.reshape(x.shape)


cdef void _gelu_inner(floating[::1] x, floating[::1] out) noexcept nogil:
    cdef Py_ssize_t i
    cdef floating v
    cdef floating c = <floating>GELU_C, k = <floating>0.044715
    for i in range(x.shape[0]):
        v = x[i]
        out[i] = c * (v + k * v * v * v)


cdef void _gelu_out(floating[::1] x, floating[::1] t, floating[::1] y) noexcept nogil:
    cdef Py_ssize_t i
    cdef floating h = <floating>0.5
    for i in range(x.shape[0]):
        y[i] = h * x[i] * (1 + t[i])


def gelu_bwd(gy, x, t):
    gy = np.ascontiguousarray(gy, dtype=x.dtype)
    gx = np.empty_like(gy)
    if x.dtype == np.float32:
        _gelu_grad[float](gy.reshape(-1), x.reshape(-1), t.reshape(-1), gx.reshape(-1))
    else:
        _gelu_grad[double](gy.reshape(-1), x.reshape(-1), t.reshape(-1), gx.reshape(-1))
    return gx


cdef void _gelu_grad(floating[::1] gy, floating[::1] x, floating[::1] t,
                     floating[::1] gx) noexcept nogil:
    cdef Py_ssize_t i
    cdef floating v, ti
    cdef floating h = <floating>0.5, c = <floating>GELU_C, k3 = <floating>(3 * 0.044715)
    for i in range(x.shape[0]):
        v = x[i]
        ti = t[i]
        gx[i] = gy[i] * (h * (1 + ti) + h * v * (1 - ti * ti) * c * (1 + k3 * v * v))


def causal_softmax_fwd(floating[:, :, ::1] x, double scale):
    cdef Py_ssize_t n = x.shape[0], t = x.shape[1], b, i, j
    dt = np.float32 if floating is float else np.float64
    p_arr = np.zeros((n, t, t), dtype=dt)
    cdef floating[:, :, ::1] p = p_arr
    cdef double mx, s, e
    with nogil:
        for b in range(n):
            for i in range(t):
                mx = -INFINITY
                for j in range(i + 1):
                    e = x[b, i, j] * scale
                    if e > mx:
                        mx = e
                s = 0.0
                for j in range(i + 1):
                    e = exp(x[b, i, j] * scale - mx)
                    p[b, i, j] = <floating>e
                    s += e
                s = 1.0 / s
                for j in range(i + 1):
                    p[b, i, j] = <floating>(p[b, i, j] * s)
    return p_arr


def causal_softmax_bwd(floating[:, :, ::1] gp, floating[:, :, ::1] p, double scale):
    cdef Py_ssize_t n = p.shape[0], t = p.shape[1], b, i, j
    dt = np.float32 if floating is float else np.float64
    gx_arr = np.zeros((n, t, t), dtype=dt)
    cdef floating[:, :, ::1] gx = gx_arr
    cdef double s
    with nogil:
        for b in range(n):
            for i in range(t):
                s = 0.0
                for j in range(i + 1):
                    s += gp[b, i, j] * p[b, i, j]
                for j in range(i + 1):
                    gx[b, i, j] = <floating>((gp[b, i, j] - s) * p[b, i, j] * scale)
    return gx_arr


def embedding_bwd(floating[:, ::1] gy, cnp.int64_t[::1] ids, Py_ssize_t vocab):
    cdef Py_ssize_t n = gy.shape[0], d = gy.shape[1], i, j, r
    dt = np.float32 if floating is float else np.float64
    out_arr = np.zeros((vocab, d), dtype=dt)
    cdef floating[:, ::1] out = out_arr
    with nogil:
        for i in range(n):
            r = ids[i]
            for j in range(d):
                out[r, j] += gy[i, j]
    return out_arr


def markov_walk(cnp.int64_t[::1] out, double[::1] uniforms, cnp.int64_t[::1] bucket_of,
                cnp.int64_t[:, ::1] cand, double[:, ::1] cand_cdf, double[::1] uni_cdf,
                double mix, Py_ssize_t alphabet):
    cdef Py_ssize_t n = out.shape[0], k = cand.shape[1], a = alphabet, i, j, b
    cdef double ui, r
    with nogil:
        for i in range(3, n):
            ui = uniforms[i]
            if ui < mix:
                b = bucket_of[(out[i - 3] * a + out[i - 2]) * a + out[i - 1]]
                r = ui / mix
                j = 0
                while j < k - 1 and r >= cand_cdf[b, j]:
                    j += 1
                out[i] = cand[b, j]
            else:
                r = (ui - mix) / (1.0 - mix)
                j = 0
                while j < a - 1 and r >= uni_cdf[j]:
                    j += 1
                out[i] = j
    return np.asarray(out)
