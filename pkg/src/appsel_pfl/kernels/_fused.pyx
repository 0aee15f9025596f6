# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled fused kernels for the app-selection network.

Same contracts as ``fused_py``; records are processed one at a time with
plain loops over the real candidates only, so no masking is needed.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport tanh, exp, sqrt
from libc.stdlib cimport malloc, free
from libc.string cimport memset, memcpy

cnp.import_array()

BACKEND = "cython"


cdef struct Dims:
    int F, D, H, dh, N
    int oWi, obi, oqkv, oWo, obo, ows, obs, owe, obe, P


cdef struct Work:
    double* Z0
    double* H0
    double* Q
    double* K
    double* V
    double* A
    double* O
    double* H1
    double* s
    double* pooled
    double* dH1
    double* dO
    double* dH0
    double* dA
    double* dS
    double* dQ
    double* dK
    double* dV
    double* block


cdef Dims _dims(int F, int D, int H, int N):
    cdef Dims d
    d.F = F
    d.D = D
    d.H = H
    d.dh = D // H
    d.N = N
    d.oWi = 0
    d.obi = F * D
    d.oqkv = d.obi + D
    d.oWo = d.oqkv + H * 3 * D * d.dh
    d.obo = d.oWo + D * D
    d.ows = d.obo + D
    d.obs = d.ows + D
    d.owe = d.obs + 1
    d.obe = d.owe + D
    d.P = d.obe + 1
    return d


cdef int _work_alloc(Work* w, Dims* d) except -1:
    cdef int N = d.N, D = d.D, H = d.H, dh = d.dh
    cdef Py_ssize_t total = (8 * N * D + 3 * H * N * dh + H * N * N
                             + N + D + 2 * N * N + 3 * N * dh)
    w.block = <double*> malloc(total * sizeof(double))
    if w.block == NULL:
        raise MemoryError()
    cdef double* p = w.block
    w.Z0 = p; p += N * D
    w.H0 = p; p += N * D
    w.O = p; p += N * D
    w.H1 = p; p += N * D
    w.dH1 = p; p += N * D
    w.dO = p; p += N * D
    w.dH0 = p; p += N * D
    p += N * D
    w.Q = p; p += H * N * dh
    w.K = p; p += H * N * dh
    w.V = p; p += H * N * dh
    w.A = p; p += H * N * N
    w.s = p; p += N
    w.pooled = p; p += D
    w.dA = p; p += N * N
    w.dS = p; p += N * N
    w.dQ = p; p += N * dh
    w.dK = p; p += N * dh
    w.dV = p; p += N * dh
    return 0


cdef inline double _sigmoid(double z) nogil:
    return 0.5 * (1.0 + tanh(0.5 * z))


cdef double _record(const double* th, const double* x, int n, int label, Dims* d,
                    double cw, double* grad, double gscale, Work* w,
                    double* scores_out, double* conf_out) noexcept nogil:
    """Forward pass for one record; if ``grad`` is not NULL, add gscale * dloss."""
    cdef int F = d.F, D = d.D, H = d.H, dh = d.dh
    cdef int i, j, k, f, e, h, dd
    cdef double acc, mx, tot, scale = 1.0 / sqrt(<double> dh)
    cdef double inv_n = 1.0 / n
    cdef const double* Wi = th + d.oWi
    cdef const double* bi = th + d.obi
    cdef const double* Wo = th + d.oWo
    cdef const double* bo = th + d.obo
    cdef const double* ws = th + d.ows
    cdef const double* we = th + d.owe
    cdef const double* Wq
    cdef const double* Wk
    cdef const double* Wv
    cdef double* Qh
    cdef double* Kh
    cdef double* Vh
    cdef double* Ah

    for i in range(n):
        for dd in range(D):
            acc = bi[dd]
            for f in range(F):
                acc = acc + x[i * F + f] * Wi[f * D + dd]
            w.Z0[i * D + dd] = acc
            w.H0[i * D + dd] = acc if acc > 0.0 else 0.0

    for h in range(H):
        Wq = th + d.oqkv + h * 3 * D * dh
        Wk = Wq + D * dh
        Wv = Wk + D * dh
        Qh = w.Q + h * d.N * dh
        Kh = w.K + h * d.N * dh
        Vh = w.V + h * d.N * dh
        Ah = w.A + h * d.N * d.N
        for i in range(n):
            for k in range(dh):
                Qh[i * dh + k] = 0.0
                Kh[i * dh + k] = 0.0
                Vh[i * dh + k] = 0.0
            for dd in range(D):
                acc = w.H0[i * D + dd]
                if acc != 0.0:
                    for k in range(dh):
                        Qh[i * dh + k] += acc * Wq[dd * dh + k]
                        Kh[i * dh + k] += acc * Wk[dd * dh + k]
                        Vh[i * dh + k] += acc * Wv[dd * dh + k]
        for i in range(n):
            mx = -1e308
            for j in range(n):
                acc = 0.0
                for k in range(dh):
                    acc = acc + Qh[i * dh + k] * Kh[j * dh + k]
                acc = acc * scale
                Ah[i * n + j] = acc
                if acc > mx:
                    mx = acc
            tot = 0.0
            for j in range(n):
                Ah[i * n + j] = exp(Ah[i * n + j] - mx)
                tot = tot + Ah[i * n + j]
            for j in range(n):
                Ah[i * n + j] = Ah[i * n + j] / tot
            for k in range(dh):
                acc = 0.0
                for j in range(n):
                    acc = acc + Ah[i * n + j] * Vh[j * dh + k]
                w.O[i * D + h * dh + k] = acc

    for i in range(n):
        for dd in range(D):
            w.H1[i * D + dd] = w.H0[i * D + dd] + bo[dd]
        for e in range(D):
            acc = w.O[i * D + e]
            for dd in range(D):
                w.H1[i * D + dd] += acc * Wo[e * D + dd]

    for dd in range(D):
        w.pooled[dd] = 0.0
    cdef double loss = 0.0, diff
    for i in range(n):
        acc = th[d.obs]
        for dd in range(D):
            acc = acc + w.H1[i * D + dd] * ws[dd]
            w.pooled[dd] += w.H1[i * D + dd]
        w.s[i] = _sigmoid(acc)
        if scores_out != NULL:
            scores_out[i] = w.s[i]
        diff = w.s[i] - (1.0 if i == label else 0.0)
        loss = loss + diff * diff
    acc = th[d.obe]
    for dd in range(D):
        w.pooled[dd] = w.pooled[dd] * inv_n
        acc = acc + w.pooled[dd] * we[dd]
    cdef double c = _sigmoid(acc)
    if conf_out != NULL:
        conf_out[0] = c
    loss = loss * inv_n + cw * (c - 1.0) * (c - 1.0)
    if grad == NULL:
        return loss

    cdef double dzc = 2.0 * cw * (c - 1.0) * c * (1.0 - c)
    cdef double dzs, si
    cdef double* g = grad
    for dd in range(D):
        g[d.owe + dd] += gscale * w.pooled[dd] * dzc
    g[d.obe] += gscale * dzc
    for i in range(n):
        si = w.s[i]
        dzs = 2.0 * inv_n * (si - (1.0 if i == label else 0.0)) * si * (1.0 - si)
        g[d.obs] += gscale * dzs
        for dd in range(D):
            g[d.ows + dd] += gscale * w.H1[i * D + dd] * dzs
            w.dH1[i * D + dd] = dzs * ws[dd] + dzc * inv_n * we[dd]

    for i in range(n):
        for dd in range(D):
            acc = w.dH1[i * D + dd]
            g[d.obo + dd] += gscale * acc
            w.dH0[i * D + dd] = acc
        for e in range(D):
            acc = 0.0
            tot = gscale * w.O[i * D + e]
            for dd in range(D):
                acc = acc + w.dH1[i * D + dd] * Wo[e * D + dd]
                g[d.oWo + e * D + dd] += tot * w.dH1[i * D + dd]
            w.dO[i * D + e] = acc

    cdef int go
    for h in range(H):
        go = d.oqkv + h * 3 * D * dh
        Wq = th + go
        Wk = Wq + D * dh
        Wv = Wk + D * dh
        Qh = w.Q + h * d.N * dh
        Kh = w.K + h * d.N * dh
        Vh = w.V + h * d.N * dh
        Ah = w.A + h * d.N * d.N
        for i in range(n):
            for j in range(n):
                acc = 0.0
                for k in range(dh):
                    acc = acc + w.dO[i * D + h * dh + k] * Vh[j * dh + k]
                w.dA[i * n + j] = acc
        for j in range(n):
            for k in range(dh):
                acc = 0.0
                for i in range(n):
                    acc = acc + Ah[i * n + j] * w.dO[i * D + h * dh + k]
                w.dV[j * dh + k] = acc
        for i in range(n):
            tot = 0.0
            for j in range(n):
                tot = tot + w.dA[i * n + j] * Ah[i * n + j]
            for j in range(n):
                w.dS[i * n + j] = Ah[i * n + j] * (w.dA[i * n + j] - tot) * scale
        for i in range(n):
            for k in range(dh):
                acc = 0.0
                mx = 0.0
                for j in range(n):
                    acc = acc + w.dS[i * n + j] * Kh[j * dh + k]
                    mx = mx + w.dS[j * n + i] * Qh[j * dh + k]
                w.dQ[i * dh + k] = acc
                w.dK[i * dh + k] = mx
        for i in range(n):
            for dd in range(D):
                tot = gscale * w.H0[i * D + dd]
                acc = 0.0
                for k in range(dh):
                    if tot != 0.0:
                        g[go + dd * dh + k] += tot * w.dQ[i * dh + k]
                        g[go + D * dh + dd * dh + k] += tot * w.dK[i * dh + k]
                        g[go + 2 * D * dh + dd * dh + k] += tot * w.dV[i * dh + k]
                    acc = acc + (w.dQ[i * dh + k] * Wq[dd * dh + k]
                                 + w.dK[i * dh + k] * Wk[dd * dh + k]
                                 + w.dV[i * dh + k] * Wv[dd * dh + k])
                w.dH0[i * D + dd] += acc

    for i in range(n):
        for dd in range(D):
            if w.Z0[i * D + dd] > 0.0:
                acc = gscale * w.dH0[i * D + dd]
                g[d.obi + dd] += acc
                for f in range(F):
                    g[d.oWi + f * D + dd] += x[i * F + f] * acc
    return loss


cdef Dims _check(object theta, object X, object ncand, int F, int D, int H) except *:
    cdef Dims d = _dims(F, D, H, X.shape[1])
    if theta.shape[0] != d.P:
        raise ValueError(f"theta has {theta.shape[0]} entries, layout needs {d.P}")
    if X.shape[2] != F:
        raise ValueError(f"features have width {X.shape[2]}, expected {F}")
    if ncand.shape[0] != X.shape[0]:
        raise ValueError("ncand and X disagree on the record count")
    if X.shape[0] and (np.min(ncand) < 1 or np.max(ncand) > X.shape[1]):
        raise ValueError("candidate counts out of range")
    return d


def predict(const double[::1] theta, const double[:, :, ::1] X, const int[::1] ncand,
            int F, int D, int H):
    cdef Dims d = _check(np.asarray(theta), np.asarray(X), np.asarray(ncand), F, D, H)
    cdef Py_ssize_t R = X.shape[0], r
    scores_arr = np.zeros((R, d.N))
    conf_arr = np.zeros(R)
    cdef double[:, ::1] scores = scores_arr
    cdef double[::1] conf = conf_arr
    cdef Work w
    _work_alloc(&w, &d)
    try:
        with nogil:
            for r in range(R):
                _record(&theta[0], &X[r, 0, 0], ncand[r], -1, &d, 0.0, NULL, 0.0,
                        &w, &scores[r, 0], &conf[r])
    finally:
        free(w.block)
    return scores_arr, conf_arr


def loss_grad(const double[::1] theta, const double[:, :, ::1] X, const int[::1] ncand,
              const long[::1] labels, int F, int D, int H, double conf_weight):
    cdef Dims d = _check(np.asarray(theta), np.asarray(X), np.asarray(ncand), F, D, H)
    cdef Py_ssize_t R = X.shape[0], r
    if R == 0:
        raise ValueError("empty batch")
    grad_arr = np.zeros(d.P)
    cdef double[::1] grad = grad_arr
    cdef double total = 0.0, inv = 1.0 / R
    cdef Work w
    _work_alloc(&w, &d)
    try:
        with nogil:
            for r in range(R):
                total += _record(&theta[0], &X[r, 0, 0], ncand[r], <int> labels[r], &d,
                                 conf_weight, &grad[0], inv, &w, NULL, NULL)
    finally:
        free(w.block)
    return total * inv, grad_arr


def local_train_cohort(const double[::1] theta, const cnp.uint8_t[::1] trainable,
                       const double[:, :, ::1] X, const int[::1] ncand,
                       const long[::1] labels, const long[::1] offsets,
                       int F, int D, int H, double lr, int epochs, double conf_weight):
    cdef Dims d = _check(np.asarray(theta), np.asarray(X), np.asarray(ncand), F, D, H)
    cdef Py_ssize_t B = offsets.shape[0] - 1, b, r, p
    cdef int epoch
    cdef long count
    for b in range(B):
        if offsets[b + 1] - offsets[b] < 1:
            raise ValueError("every client needs at least one record")
    deltas_arr = np.empty((B, d.P))
    losses_arr = np.zeros(B)
    cdef double[:, ::1] deltas = deltas_arr
    cdef double[::1] losses = losses_arr
    cdef double* local = <double*> malloc(d.P * sizeof(double))
    cdef double* gbuf = <double*> malloc(d.P * sizeof(double))
    cdef double total, inv
    cdef Work w
    if local == NULL or gbuf == NULL:
        free(local)
        free(gbuf)
        raise MemoryError()
    _work_alloc(&w, &d)
    try:
        with nogil:
            for b in range(B):
                memcpy(local, &theta[0], d.P * sizeof(double))
                count = offsets[b + 1] - offsets[b]
                inv = 1.0 / count
                for epoch in range(epochs):
                    memset(gbuf, 0, d.P * sizeof(double))
                    total = 0.0
                    for r in range(offsets[b], offsets[b + 1]):
                        total += _record(local, &X[r, 0, 0], ncand[r], <int> labels[r], &d,
                                         conf_weight, gbuf, inv, &w, NULL, NULL)
                    if epoch == 0:
                        losses[b] = total * inv
                    for p in range(d.P):
                        if trainable[p]:
                            local[p] = local[p] - lr * gbuf[p]
                for p in range(d.P):
                    deltas[b, p] = local[p] - theta[p]
    finally:
        free(w.block)
        free(local)
        free(gbuf)
    return deltas_arr, losses_arr
