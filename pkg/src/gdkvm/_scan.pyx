# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled token scan for the memory write; mirrors ``_scan_py`` exactly."""

import numpy as np
cimport cython
from cython cimport floating


def scan_forward(S0, K, V, erase, write):
    S = np.array(S0, copy=True, order="C")
    K = np.ascontiguousarray(K, dtype=S.dtype)
    V = np.ascontiguousarray(V, dtype=S.dtype)
    erase = np.ascontiguousarray(erase, dtype=S.dtype)
    write = np.ascontiguousarray(write, dtype=S.dtype)
    hist = np.empty((K.shape[0], K.shape[1], S.shape[1], S.shape[2]), dtype=S.dtype)
    u = np.empty(S.shape[1], dtype=S.dtype)
    if S.dtype == np.float64:
        _fwd[double](S, K, V, erase, write, hist, u)
    else:
        _fwd[float](S, K, V, erase, write, hist, u)
    return S, hist


cdef void _fwd(floating[:, :, ::1] S, floating[:, :, ::1] K, floating[:, :, ::1] V,
               floating[::1] erase, floating[::1] write, floating[:, :, :, ::1] hist,
               floating[::1] u) noexcept nogil:
    cdef Py_ssize_t n, p, i, j
    cdef Py_ssize_t N = K.shape[0], P = K.shape[1], Ck = K.shape[2], Cv = V.shape[2]
    cdef floating acc, e, w
    for n in range(N):
        e = erase[n]
        w = write[n]
        for p in range(P):
            for i in range(Cv):
                acc = 0
                for j in range(Ck):
                    hist[n, p, i, j] = S[n, i, j]
                    acc = acc + S[n, i, j] * K[n, p, j]
                u[i] = w * V[n, p, i] - e * acc
            for i in range(Cv):
                for j in range(Ck):
                    S[n, i, j] = S[n, i, j] + u[i] * K[n, p, j]


def scan_backward(hist, K, V, erase, write, G):
    G = np.array(G, copy=True, order="C")
    dt = G.dtype
    hist = np.ascontiguousarray(hist, dtype=dt)
    K = np.ascontiguousarray(K, dtype=dt)
    V = np.ascontiguousarray(V, dtype=dt)
    erase = np.ascontiguousarray(erase, dtype=dt)
    write = np.ascontiguousarray(write, dtype=dt)
    dK = np.empty_like(K)
    dV = np.empty_like(V)
    derase = np.zeros(K.shape[0], dtype=dt)
    dwrite = np.zeros(K.shape[0], dtype=dt)
    cv = V.shape[2]
    scratch = np.empty((3, cv), dtype=dt)
    if dt == np.float64:
        _bwd[double](hist, K, V, erase, write, G, dK, dV, derase, dwrite, scratch)
    else:
        _bwd[float](hist, K, V, erase, write, G, dK, dV, derase, dwrite, scratch)
    return G, dK, dV, derase, dwrite


cdef void _bwd(floating[:, :, :, ::1] hist, floating[:, :, ::1] K, floating[:, :, ::1] V,
               floating[::1] erase, floating[::1] write, floating[:, :, ::1] G,
               floating[:, :, ::1] dK, floating[:, :, ::1] dV, floating[::1] derase,
               floating[::1] dwrite, floating[:, ::1] scratch) noexcept nogil:
    cdef Py_ssize_t n, p, i, j
    cdef Py_ssize_t N = K.shape[0], P = K.shape[1], Ck = K.shape[2], Cv = V.shape[2]
    cdef floating e, w, a_u, a_g, acc
    # scratch rows: u = S k, gk = G k, upd = w v - e u
    for n in range(N):
        e = erase[n]
        w = write[n]
        for p in range(P - 1, -1, -1):
            for i in range(Cv):
                a_u = 0
                a_g = 0
                for j in range(Ck):
                    a_u = a_u + hist[n, p, i, j] * K[n, p, j]
                    a_g = a_g + G[n, i, j] * K[n, p, j]
                scratch[0, i] = a_u
                scratch[1, i] = a_g
                scratch[2, i] = w * V[n, p, i] - e * a_u
                dV[n, p, i] = w * a_g
                dwrite[n] = dwrite[n] + V[n, p, i] * a_g
                derase[n] = derase[n] - a_u * a_g
            for j in range(Ck):
                acc = 0
                for i in range(Cv):
                    # G^T upd + S_b^T du with du = -e gk
                    acc = acc + G[n, i, j] * scratch[2, i] - e * hist[n, p, i, j] * scratch[1, i]
                dK[n, p, j] = acc
            for i in range(Cv):
                for j in range(Ck):
                    G[n, i, j] = G[n, i, j] - e * scratch[1, i] * K[n, p, j]
