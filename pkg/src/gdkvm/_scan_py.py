"""Pure-NumPy memory-write scan, used when the compiled extension is missing.

Shapes: ``S0`` is ``(N, Cv, Ck)``, ``K`` is ``(N, P, Ck)``, ``V`` is
``(N, P, Cv)``, ``erase`` and ``write`` are ``(N,)``. Tokens are consumed in
order; token ``p`` applies ``S <- S + (write v_p - erase (S k_p)) k_p^T``.
"""

import numpy as np


def scan_forward(S0, K, V, erase, write):
    n, p_count, _ = K.shape
    S = np.array(S0, copy=True)
    hist = np.empty((n, p_count) + S.shape[1:], dtype=S.dtype)
    e = erase[:, None]
    w = write[:, None]
    for p in range(p_count):
        hist[:, p] = S
        k = K[:, p]
        u = np.einsum("nij,nj->ni", S, k)
        S += (w * V[:, p] - e * u)[:, :, None] * k[:, None, :]
    return S, hist


def scan_backward(hist, K, V, erase, write, G):
    n, p_count, _ = K.shape
    G = np.array(G, copy=True)
    dK = np.empty_like(K)
    dV = np.empty_like(V)
    derase = np.zeros(n, dtype=G.dtype)
    dwrite = np.zeros(n, dtype=G.dtype)
    e = erase[:, None]
    w = write[:, None]
    for p in range(p_count - 1, -1, -1):
        Sb = hist[:, p]
        k = K[:, p]
        v = V[:, p]
        u = np.einsum("nij,nj->ni", Sb, k)
        gk = np.einsum("nij,nj->ni", G, k)
        upd = w * v - e * u
        du = -e * gk
        dK[:, p] = np.einsum("nij,ni->nj", G, upd) + np.einsum("nij,ni->nj", Sb, du)
        dV[:, p] = w * gk
        dwrite += np.einsum("ni,ni->n", v, gk)
        derase -= np.einsum("ni,ni->n", u, gk)
        G += du[:, :, None] * k[:, None, :]
    return G, dK, dV, derase, dwrite
