# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled layer kernels (same API as ``_kernels_py``).

Dense products go straight to BLAS ``dgemm`` through scipy's Cython
bindings; batch-norm, ReLU and the cross-entropy head are fused loops that
avoid the temporaries numpy would allocate for each elementwise step.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, exp, log
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

NAME = "cython"


cdef inline cnp.ndarray _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def dense_forward(x, W, b):
    cdef cnp.ndarray xa = _c(x)
    cdef cnp.ndarray Wa = _c(W)
    cdef double[::1] bv = _c(b)
    cdef int n = xa.shape[0], k = xa.shape[1], m = Wa.shape[1]
    cdef cnp.ndarray out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef int i, j
    for i in range(n):
        for j in range(m):
            ov[i, j] = bv[j]
    cdef double one = 1.0
    if n > 0 and m > 0 and k > 0:
        # row-major y = x W  <=>  column-major y^T = W^T x^T
        dgemm(b"N", b"N", &m, &n, &k, &one,
              <double*>cnp.PyArray_DATA(Wa), &m,
              <double*>cnp.PyArray_DATA(xa), &k,
              &one, <double*>cnp.PyArray_DATA(out), &m)
    return out


def dense_backward(x, W, dy):
    cdef cnp.ndarray xa = _c(x)
    cdef cnp.ndarray Wa = _c(W)
    cdef cnp.ndarray da = _c(dy)
    cdef int n = xa.shape[0], k = xa.shape[1], m = Wa.shape[1]
    cdef cnp.ndarray dx = np.zeros((n, k), dtype=np.float64)
    cdef cnp.ndarray dW = np.zeros((k, m), dtype=np.float64)
    cdef cnp.ndarray db = np.zeros(m, dtype=np.float64)
    cdef double one = 1.0, zero = 0.0
    cdef double[:, ::1] dv = da
    cdef double[::1] dbv = db
    cdef int i, j
    if n > 0 and m > 0 and k > 0:
        # dx^T (k x n) = W (k x m) dy^T (m x n)
        dgemm(b"T", b"N", &k, &n, &m, &one,
              <double*>cnp.PyArray_DATA(Wa), &m,
              <double*>cnp.PyArray_DATA(da), &m,
              &zero, <double*>cnp.PyArray_DATA(dx), &k)
        # dW^T (m x k) = dy^T (m x n) x (n x k)
        dgemm(b"N", b"T", &m, &k, &n, &one,
              <double*>cnp.PyArray_DATA(da), &m,
              <double*>cnp.PyArray_DATA(xa), &k,
              &zero, <double*>cnp.PyArray_DATA(dW), &m)
    for i in range(n):
        for j in range(m):
            dbv[j] += dv[i, j]
    return dx, dW, db


def relu_forward(x):
    cdef double[:, ::1] xv = _c(x)
    cdef Py_ssize_t n = xv.shape[0], m = xv.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    for i in range(n):
        for j in range(m):
            ov[i, j] = xv[i, j] if xv[i, j] > 0.0 else 0.0
    return out


def relu_backward(x, dy):
    cdef double[:, ::1] xv = _c(x)
    cdef double[:, ::1] dv = _c(dy)
    cdef Py_ssize_t n = xv.shape[0], m = xv.shape[1], i, j
    out = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] ov = out
    for i in range(n):
        for j in range(m):
            ov[i, j] = dv[i, j] if xv[i, j] > 0.0 else 0.0
    return out


def batch_moments(x):
    cdef double[:, ::1] xv = _c(x)
    cdef Py_ssize_t n = xv.shape[0], m = xv.shape[1], i, j
    mean = np.zeros(m, dtype=np.float64)
    var = np.zeros(m, dtype=np.float64)
    cdef double[::1] mv = mean, vv = var
    cdef double d
    for i in range(n):
        for j in range(m):
            mv[j] += xv[i, j]
    for j in range(m):
        mv[j] /= n
    for i in range(n):
        for j in range(m):
            d = xv[i, j] - mv[j]
            vv[j] += d * d
    for j in range(m):
        vv[j] /= n
    return mean, var


def bn_forward(x, gamma, beta, mean, var, double eps):
    cdef double[:, ::1] xv = _c(x)
    cdef double[::1] g = _c(gamma), bt = _c(beta), mu = _c(mean), s2 = _c(var)
    cdef Py_ssize_t n = xv.shape[0], m = xv.shape[1], i, j
    y = np.empty((n, m), dtype=np.float64)
    xhat = np.empty((n, m), dtype=np.float64)
    inv_std = np.empty(m, dtype=np.float64)
    cdef double[:, ::1] yv = y, hv = xhat
    cdef double[::1] iv = inv_std
    for j in range(m):
        iv[j] = 1.0 / sqrt(s2[j] + eps)
    for i in range(n):
        for j in range(m):
            hv[i, j] = (xv[i, j] - mu[j]) * iv[j]
            yv[i, j] = g[j] * hv[i, j] + bt[j]
    return y, xhat, inv_std


def bn_backward_train(dy, xhat, inv_std, gamma):
    cdef double[:, ::1] dv = _c(dy), hv = _c(xhat)
    cdef double[::1] iv = _c(inv_std), g = _c(gamma)
    cdef Py_ssize_t n = dv.shape[0], m = dv.shape[1], i, j
    dgamma = np.zeros(m, dtype=np.float64)
    dbeta = np.zeros(m, dtype=np.float64)
    s1 = np.zeros(m, dtype=np.float64)
    s2 = np.zeros(m, dtype=np.float64)
    dx = np.empty((n, m), dtype=np.float64)
    cdef double[::1] dg = dgamma, dbt = dbeta, a = s1, b = s2
    cdef double[:, ::1] ov = dx
    cdef double dh
    for i in range(n):
        for j in range(m):
            dg[j] += dv[i, j] * hv[i, j]
            dbt[j] += dv[i, j]
            dh = dv[i, j] * g[j]
            a[j] += dh
            b[j] += dh * hv[i, j]
    for i in range(n):
        for j in range(m):
            dh = dv[i, j] * g[j]
            ov[i, j] = (iv[j] / n) * (n * dh - a[j] - hv[i, j] * b[j])
    return dx, dgamma, dbeta


def bn_backward_eval(dy, xhat, inv_std, gamma):
    cdef double[:, ::1] dv = _c(dy), hv = _c(xhat)
    cdef double[::1] iv = _c(inv_std), g = _c(gamma)
    cdef Py_ssize_t n = dv.shape[0], m = dv.shape[1], i, j
    dgamma = np.zeros(m, dtype=np.float64)
    dbeta = np.zeros(m, dtype=np.float64)
    dx = np.empty((n, m), dtype=np.float64)
    cdef double[::1] dg = dgamma, dbt = dbeta
    cdef double[:, ::1] ov = dx
    for i in range(n):
        for j in range(m):
            dg[j] += dv[i, j] * hv[i, j]
            dbt[j] += dv[i, j]
            ov[i, j] = dv[i, j] * g[j] * iv[j]
    return dx, dgamma, dbeta


def softmax_xent(logits, labels):
    cdef double[:, ::1] zv = _c(logits)
    cdef long[::1] yv = np.ascontiguousarray(labels, dtype=np.int64)
    cdef Py_ssize_t n = zv.shape[0], m = zv.shape[1], i, j
    grad = np.empty((n, m), dtype=np.float64)
    cdef double[:, ::1] gv = grad
    cdef double mx, s, loss = 0.0
    for i in range(n):
        mx = zv[i, 0]
        for j in range(1, m):
            if zv[i, j] > mx:
                mx = zv[i, j]
        s = 0.0
        for j in range(m):
            gv[i, j] = exp(zv[i, j] - mx)
            s += gv[i, j]
        loss -= zv[i, yv[i]] - mx - log(s)
        for j in range(m):
            gv[i, j] = gv[i, j] / s / n
        gv[i, yv[i]] -= 1.0 / n
    return loss / n, grad
