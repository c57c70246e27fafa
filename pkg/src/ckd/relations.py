"""Pair-wise and triple-wise relations among representation vectors.

The pair relation is either cosine similarity or Euclidean distance. The
triple relation is the cosine of the angle at the middle vector. Triples are
evaluated in a band: for every vertex ``j`` only neighbours ``i, k`` with
``|i - j| <= delta`` and ``|k - j| <= delta`` are visited, so the scratch
buffer of unit relative vectors is ``(n, 2*delta + 1, d)`` instead of the
``(n, n, d)`` tensor a full evaluation needs.

Window-indexed triple tensors have shape ``(B, n, W, W)`` with
``W = 2 * min(delta, n - 1) + 1``; entry ``[b, j, a, c]`` is the angle for
``i = j + a - delta'`` and ``k = j + c - delta'``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._jit import njit, numba_enabled

EPS = 1e-8
PAIR_KINDS = ("cosine", "l2")


# -- scalar definitions -------------------------------------------------------

def pair_relation(ri, rj, kind: str = "l2") -> float:
    ri, rj = np.asarray(ri, dtype=float), np.asarray(rj, dtype=float)
    if ri.shape != rj.shape:
        raise ValueError("vectors must have equal dimensions")
    if kind == "l2":
        return float(np.sqrt(((ri - rj) ** 2).sum()))
    if kind == "cosine":
        ni, nj = np.sqrt((ri * ri).sum()), np.sqrt((rj * rj).sum())
        if ni <= EPS or nj <= EPS:
            return 0.0
        return float((ri * rj).sum() / (ni * nj))
    raise ValueError(f"unknown pair kind {kind!r}")


def triple_angle(ri, rj, rk) -> float:
    """Cosine of the angle at ``rj``; 0 when either arm has zero length."""
    ri, rj, rk = (np.asarray(v, dtype=float) for v in (ri, rj, rk))
    if not ri.shape == rj.shape == rk.shape:
        raise ValueError("vectors must have equal dimensions")
    u, v = ri - rj, rk - rj
    nu, nv = np.sqrt((u * u).sum()), np.sqrt((v * v).sum())
    if nu <= EPS or nv <= EPS:
        return 0.0
    return float(np.clip((u / nu * (v / nv)).sum(), -1.0, 1.0))


def locality_weights(n: int, delta: int, mask=None):
    """Band masks ``w_ij`` (n, n) and vertex-centred ``w_ijk`` (n, n, n).

    Padded positions (``mask`` False) get weight 0. Index-degenerate
    triples are not removed here.
    """
    if delta < 0:
        raise ValueError("delta must be >= 0")
    valid = np.ones(n, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    idx = np.arange(n)
    near = np.abs(idx[:, None] - idx[None, :]) <= delta
    pair = near & valid[:, None] & valid[None, :]
    # w_ijk: |i-j| <= delta and |k-j| <= delta
    triple = near[:, :, None] & near.T[None, :, :] & valid[:, None, None] & valid[None, :, None] & valid[None, None, :]
    return pair.astype(np.int8), triple.astype(np.int8)


# -- pair kernels (Gram-matrix form, no (n, n, d) intermediate) -------------

def pair_matrix(X, kind: str = "l2"):
    """All pair relations of ``X`` (B, n, d) -> ((B, n, n), cache)."""
    gram = X @ X.transpose(0, 2, 1)
    sq = np.einsum("bnd,bnd->bn", X, X)
    if kind == "l2":
        d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * gram
        # cancellation noise in the Gram identity is ~1e-16 * (|ri|^2 + |rj|^2)
        tiny = 1e-13 * (sq[:, :, None] + sq[:, None, :])
        d2 = np.where(d2 <= tiny, 0.0, d2)
        dist = np.sqrt(d2)
        return dist, ("l2", dist)
    if kind == "cosine":
        nrm = np.sqrt(sq)
        inv = np.where(nrm > EPS, 1.0 / np.maximum(nrm, EPS), 0.0)
        cos = gram * inv[:, :, None] * inv[:, None, :]
        return cos, ("cosine", cos, inv)
    raise ValueError(f"unknown pair kind {kind!r}")


def pair_matrix_backward(G, X, cache):
    """Gradient w.r.t. ``X`` of ``sum(G * pair_matrix(X))``."""
    kind = cache[0]
    Gs = G + G.transpose(0, 2, 1)
    if kind == "l2":
        dist = cache[1]
        w = np.where(dist > EPS, G / np.maximum(dist, EPS), 0.0)
        w = w + w.transpose(0, 2, 1)
        return w.sum(-1)[:, :, None] * X - w @ X
    cos, inv = cache[1], cache[2]
    # d cos_ij / d r_i = r_j inv_i inv_j - cos_ij r_i inv_i^2
    t = Gs * inv[:, :, None] * inv[:, None, :]
    return t @ X - (Gs * cos).sum(-1)[:, :, None] * (inv * inv)[:, :, None] * X


# -- triple kernels -----------------------------------------------------------

@njit
def _triple_fwd_nb(X, valid, dw, E, nrm, ok, out):
    B, n, d = X.shape
    W = 2 * dw + 1
    ops = 0
    degenerate = 0
    for b in range(B):
        for j in range(n):
            for a in range(W):
                i = j + a - dw
                if i < 0 or i >= n or a == dw or not valid[b, i] or not valid[b, j]:
                    ok[b, j, a] = False
                    nrm[b, j, a] = 0.0
                    for t in range(d):
                        E[b, j, a, t] = 0.0
                    continue
                ok[b, j, a] = True
                s = 0.0
                for t in range(d):
                    u = X[b, i, t] - X[b, j, t]
                    E[b, j, a, t] = u
                    s += u * u
                s = np.sqrt(s)
                nrm[b, j, a] = s
                if s > 1e-8:
                    for t in range(d):
                        E[b, j, a, t] /= s
                else:
                    degenerate += 1
                    for t in range(d):
                        E[b, j, a, t] = 0.0
            for a in range(W):
                for c in range(W):
                    if ok[b, j, a] and ok[b, j, c]:
                        if c < a:
                            out[b, j, a, c] = out[b, j, c, a]
                            continue
                        s = 0.0
                        for t in range(d):
                            s += E[b, j, a, t] * E[b, j, c, t]
                        ops += d
                        if s > 1.0:
                            s = 1.0
                        elif s < -1.0:
                            s = -1.0
                        out[b, j, a, c] = s
                    else:
                        out[b, j, a, c] = 0.0
    return ops, degenerate


@njit
def _triple_bwd_nb(G, E, nrm, ok, dw, dX):
    B, n, W, d = E.shape
    g = np.empty(d)
    for b in range(B):
        for j in range(n):
            for a in range(W):
                if not ok[b, j, a] or nrm[b, j, a] <= 1e-8:
                    continue
                for t in range(d):
                    g[t] = 0.0
                for c in range(W):
                    if not ok[b, j, c]:
                        continue
                    w = G[b, j, a, c] + G[b, j, c, a]
                    if w != 0.0:
                        for t in range(d):
                            g[t] += w * E[b, j, c, t]
                proj = 0.0
                for t in range(d):
                    proj += g[t] * E[b, j, a, t]
                inv = 1.0 / nrm[b, j, a]
                i = j + a - dw
                for t in range(d):
                    gu = (g[t] - proj * E[b, j, a, t]) * inv
                    dX[b, i, t] += gu
                    dX[b, j, t] -= gu


def _window_geometry(n, delta):
    dw = int(min(delta, n - 1))
    off = np.arange(-dw, dw + 1)
    idx = np.arange(n)[:, None] + off[None, :]
    inwin = (idx >= 0) & (idx < n) & (off[None, :] != 0)
    return dw, off, np.clip(idx, 0, n - 1), inwin


@dataclass
class TripleCache:
    E: np.ndarray  # unit relative vectors (B, n, W, d)
    nrm: np.ndarray  # their lengths (B, n, W)
    ok: np.ndarray  # relative vector exists (index-valid) (B, n, W)
    dw: int
    n: int
    ops: int = 0
    aux_elements: int = 0
    degenerate: int = 0


def triple_window(X, valid, delta: int, use_numba: bool | None = None):
    """Windowed triple angles of ``X`` (B, n, d).

    Returns ``(angles, mask, cache)``; ``mask`` marks triples with
    ``i != j``, ``k != j`` inside the window over real tokens.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    valid = np.ascontiguousarray(valid, dtype=np.bool_)
    B, n, d = X.shape
    if delta < 0:
        raise ValueError("delta must be >= 0")
    dw, off, idx, inwin = _window_geometry(n, delta)
    W = 2 * dw + 1
    use_numba = numba_enabled() if use_numba is None else use_numba
    if use_numba:
        E = np.empty((B, n, W, d))
        nrm = np.empty((B, n, W))
        ok = np.empty((B, n, W), dtype=np.bool_)
        out = np.empty((B, n, W, W))
        ops, degenerate = _triple_fwd_nb(X, valid, dw, E, nrm, ok, out)
        aux = E.size + nrm.size
    else:
        ok = inwin[None] & valid[:, idx] & valid[:, :, None]
        E = X[:, idx, :]
        E -= X[:, :, None, :]
        nrm = np.sqrt(np.einsum("bjwd,bjwd->bjw", E, E))
        good = ok & (nrm > EPS)
        E *= (good / np.where(good, nrm, 1.0))[..., None]
        degenerate = int((ok & ~good).sum())
        out = np.clip(E @ E.transpose(0, 1, 3, 2), -1.0, 1.0)
        tm = ok[..., :, None] & ok[..., None, :]
        out *= tm
        cnt = ok.sum(-1)
        ops = int((cnt * (cnt + 1) // 2).sum()) * d
        aux = E.size + nrm.size
    mask = ok[..., :, None] & ok[..., None, :]
    cache = TripleCache(E, nrm, ok, dw, n, int(ops), int(aux), int(degenerate))
    return out, mask, cache


def triple_window_backward(G, cache: TripleCache, use_numba: bool | None = None):
    """Gradient w.r.t. ``X`` of ``sum(G * angles)``."""
    E, nrm, ok, dw, n = cache.E, cache.nrm, cache.ok, cache.dw, cache.n
    B, _, W, d = E.shape
    G = np.ascontiguousarray(G, dtype=np.float64)
    use_numba = numba_enabled() if use_numba is None else use_numba
    dX = np.zeros((B, n, d))
    if use_numba:
        _triple_bwd_nb(G, E, nrm, ok, dw, dX)
        return dX
    gm = (G + G.transpose(0, 1, 3, 2)) * (ok[..., :, None] & ok[..., None, :])
    gE = gm @ E
    proj = np.einsum("bjwd,bjwd->bjw", gE, E)
    good = ok & (nrm > EPS)
    inv = np.where(good, 1.0 / np.where(good, nrm, 1.0), 0.0)
    gU = (gE - proj[..., None] * E) * inv[..., None]
    for a in range(W):
        o = a - dw
        if o == 0:
            continue
        lo, hi = max(0, -o), min(n, n - o)
        if lo >= hi:
            continue
        g = gU[:, lo:hi, a]
        dX[:, lo + o:hi + o] += g
        dX[:, lo:hi] -= g
    return dX


def triple_full(X, valid):
    """Unwindowed angles over all (i, j, k): ``(B, n_j, n_i, n_k)``.

    Materialises every relative vector, ``(B, n, n, d)`` scratch.
    Returns ``(angles, mask, ops, aux_elements)``.
    """
    X = np.asarray(X, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    B, n, d = X.shape
    U = X[:, None, :, :] - X[:, :, None, :]  # [b, j, i] = r_i - r_j
    nrm = np.sqrt(np.einsum("bjid,bjid->bji", U, U))
    good = nrm > EPS
    U *= (good / np.where(good, nrm, 1.0))[..., None]
    out = np.clip(U @ U.transpose(0, 1, 3, 2), -1.0, 1.0)
    eye = np.eye(n, dtype=bool)
    ok = ~eye[None] & valid[:, None, :] & valid[:, :, None]
    mask = ok[..., :, None] & ok[..., None, :]
    out *= mask
    return out, mask, B * n * n * n * d, U.size + nrm.size


def window_to_dense(vals, mask, dw):
    """Scatter a window-indexed ``(B, n, W, W)`` tensor to ``(B, n_j, n_i, n_k)``."""
    B, n, W, _ = vals.shape
    dense = np.zeros((B, n, n, n))
    dmask = np.zeros((B, n, n, n), dtype=bool)
    for j in range(n):
        for a in range(W):
            i = j + a - dw
            if not 0 <= i < n:
                continue
            for c in range(W):
                k = j + c - dw
                if 0 <= k < n:
                    dense[:, j, i, k] = vals[:, j, a, c]
                    dmask[:, j, i, k] = mask[:, j, a, c]
    return dense, dmask


# -- combined -------------------------------------------------------------------

@dataclass
class RelationSet:
    pair_vals: np.ndarray  # (B, n, n)
    pair_mask: np.ndarray  # (B, n, n) bool, i != j
    triple_vals: np.ndarray  # (B, n, W, W) window-indexed
    triple_mask: np.ndarray
    delta: int
    kind: str
    ops: int = 0
    aux_elements: int = 0
    degenerate: int = 0
    _caches: tuple = field(default=None, repr=False)

    @property
    def window(self) -> int:
        return (self.triple_vals.shape[-1] - 1) // 2

    def triple_dense(self):
        return window_to_dense(self.triple_vals, self.triple_mask, self.window)


def pair_mask(valid, delta: int | None):
    """Mask of pairs ``i != j`` over real tokens, banded when ``delta`` is given."""
    valid = np.asarray(valid, dtype=bool)
    n = valid.shape[-1]
    idx = np.arange(n)
    m = idx[:, None] != idx[None, :]
    if delta is not None:
        m = m & (np.abs(idx[:, None] - idx[None, :]) <= delta)
    return m[None] & valid[:, :, None] & valid[:, None, :]


def windowed_relations(R, delta: int, kind: str = "l2", mask=None, pair_window: bool = True,
                       use_numba: bool | None = None) -> RelationSet:
    """All masked pair and triple relations of ``R``.

    ``R`` is ``(n, d)`` or ``(B, n, d)``; ``mask`` marks real tokens.
    """
    if delta < 1:
        raise ValueError("windowed_relations needs delta >= 1")
    R = np.asarray(R, dtype=np.float64)
    single = R.ndim == 2
    if single:
        R = R[None]
    valid = np.ones(R.shape[:2], dtype=bool) if mask is None else np.asarray(mask, dtype=bool).reshape(R.shape[:2])
    pv, pc = pair_matrix(R, kind)
    pm = pair_mask(valid, delta if pair_window else None)
    tv, tm, tc = triple_window(R, valid, delta, use_numba)
    return RelationSet(pv * pm, pm, tv, tm, delta, kind, tc.ops, tc.aux_elements, tc.degenerate, (pc, tc))
