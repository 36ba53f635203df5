"""Pareto dominance and exact hypervolume (minimization).

Two independent exact routines are provided: a sort-and-sweep for two
objectives and recursive slicing along the last objective for any ``M``.
A compiled kernel (``hvi_samples``) evaluates hypervolume improvements of
many sampled points for up to four objectives; it uses an incremental
staircase sweep instead of the slicing recursion.
"""

from __future__ import annotations

import logging

import numba as nb
import numpy as np

logger = logging.getLogger(__name__)


def dominates(a, b) -> bool:
    """True iff ``a`` is no worse than ``b`` everywhere and strictly better somewhere."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return bool(np.all(a <= b) and np.any(a < b))


def pareto_front(points) -> np.ndarray:
    """Indices of the non-dominated rows; equal rows are all kept."""
    P = np.atleast_2d(np.asarray(points, float))
    if P.size == 0:
        return np.zeros(0, dtype=int)
    le = np.all(P[:, None, :] <= P[None, :, :], axis=2)  # le[i, j]: i <= j everywhere
    lt = np.any(P[:, None, :] < P[None, :, :], axis=2)
    dominated = np.any(le & lt, axis=0)
    return np.flatnonzero(~dominated)


def split_by_reference(points, ref):
    """Rows strictly better than ``ref`` in every objective, and the excluded count."""
    P = np.atleast_2d(np.asarray(points, float))
    if P.size == 0:
        return P.reshape(0, np.size(ref)), 0
    keep = np.all(P < np.asarray(ref, float), axis=1)
    return P[keep], int(np.sum(~keep))


def _hv_sweep2(P, r) -> float:
    P = P[np.lexsort((P[:, 1], P[:, 0]))]
    total, best_y = 0.0, r[1]
    for x, y in P:
        if y < best_y:
            total += (r[0] - x) * (best_y - y)
            best_y = y
    return total


def _hv_slice(P, r) -> float:
    M = P.shape[1]
    if P.shape[0] == 0:
        return 0.0
    if M == 1:
        return float(r[0] - P[:, 0].min())
    order = np.argsort(P[:, -1], kind="stable")
    P = P[order]
    z = np.r_[P[:, -1], r[-1]]
    total = 0.0
    for i in range(P.shape[0]):
        depth = z[i + 1] - z[i]
        if depth > 0:
            total += depth * _hv_slice(P[:i + 1, :-1], r[:-1])
    return total


def hypervolume(points, ref, method: str = "auto", warn: bool = True) -> float:
    """Lebesgue measure dominated by ``points`` and bounded by ``ref``.

    Points that do not strictly dominate ``ref`` are left out and counted in
    a warning. ``method`` is ``"sweep"`` (two objectives), ``"slice"`` or
    ``"auto"``.
    """
    r = np.asarray(ref, float)
    P, excluded = split_by_reference(points, r)
    if excluded and warn:
        logger.warning("%d point(s) do not dominate the reference point and were excluded", excluded)
    if P.shape[0] == 0:
        return 0.0
    P = P[pareto_front(P)]
    if method == "auto":
        method = "sweep" if r.size == 2 else "slice"
    if method == "sweep":
        if r.size != 2:
            raise ValueError("the sweep algorithm handles two objectives")
        return float(_hv_sweep2(P, r))
    if method == "slice":
        return float(_hv_slice(P, r))
    raise ValueError(f"unknown method {method!r}")


def hvi(new_points, front, ref) -> float:
    """Hypervolume gained by adding ``new_points`` to ``front``."""
    F = np.atleast_2d(np.asarray(front, float)).reshape(-1, np.size(ref))
    N = np.atleast_2d(np.asarray(new_points, float)).reshape(-1, np.size(ref))
    # new points outside the reference box simply add nothing
    gain = hypervolume(np.vstack([F, N]), ref, warn=False) - hypervolume(F, ref, warn=False)
    return max(gain, 0.0)


# ----------------------------------------------------------------------
# compiled kernel for sampled improvements
# ----------------------------------------------------------------------


@nb.njit(cache=True)
def _area2(xs, ys, k, rx, ry):
    # staircase sorted by x ascending with y strictly descending
    total = 0.0
    for i in range(k):
        x_next = xs[i + 1] if i + 1 < k else rx
        total += (x_next - xs[i]) * (ry - ys[i])
    return total


@nb.njit(cache=True)
def _hv3_sorted(P, n, r0, r1, r2, xs, ys):
    """``P[:n]`` sorted by the third column; incremental 2-D staircase."""
    k = 0
    total = 0.0
    for i in range(n):
        x, y = P[i, 0], P[i, 1]
        # skip if weakly dominated by the staircase
        dominated = False
        for j in range(k):
            if xs[j] <= x and ys[j] <= y:
                dominated = True
                break
        if not dominated:
            # drop staircase points dominated by (x, y), then insert keeping x order
            m = 0
            for j in range(k):
                if not (x <= xs[j] and y <= ys[j]):
                    xs[m] = xs[j]
                    ys[m] = ys[j]
                    m += 1
            k = m
            pos = k
            for j in range(k):
                if xs[j] > x:
                    pos = j
                    break
            for j in range(k, pos, -1):
                xs[j] = xs[j - 1]
                ys[j] = ys[j - 1]
            xs[pos] = x
            ys[pos] = y
            k += 1
        z_next = P[i + 1, 2] if i + 1 < n else r2
        depth = z_next - P[i, 2]
        if depth > 0.0:
            total += depth * _area2(xs, ys, k, r0, r1)
    return total


@nb.njit(cache=True)
def _hv_small(P, r):
    """Exact hypervolume of the rows of ``P`` (all strictly below ``r``) for ``M <= 4``."""
    n, M = P.shape
    if n == 0:
        return 0.0
    xs = np.empty(n + 1)
    ys = np.empty(n + 1)
    if M == 1:
        return r[0] - P[:, 0].min()
    if M == 2:
        order = np.argsort(P[:, 2 - 1])
        Q = np.empty((n, 3))
        for i in range(n):
            Q[i, 0] = P[order[i], 0]
            Q[i, 1] = 0.0
            Q[i, 2] = P[order[i], 1]
        return _hv3_sorted(Q, n, r[0], 1.0, r[1], xs, ys)
    if M == 3:
        order = np.argsort(P[:, 2])
        Q = P[order]
        return _hv3_sorted(Q, n, r[0], r[1], r[2], xs, ys)
    order = np.argsort(P[:, 3])
    Q = P[order]
    total = 0.0
    for i in range(n):
        w_next = Q[i + 1, 3] if i + 1 < n else r[3]
        depth = w_next - Q[i, 3]
        if depth > 0.0:
            sub = Q[:i + 1, :3]
            sub = sub[np.argsort(sub[:, 2])]
            total += depth * _hv3_sorted(sub, i + 1, r[0], r[1], r[2], xs, ys)
    return total


@nb.njit(cache=True)
def _hvi_point(y, F, r, buf):
    M = y.size
    box = 1.0
    for m in range(M):
        if y[m] >= r[m]:
            return 0.0
        box *= r[m] - y[m]
    nF = F.shape[0]
    k = 0
    for i in range(nF):
        weak = True
        for m in range(M):
            if F[i, m] > y[m]:
                weak = False
                break
        if weak:
            return 0.0
        for m in range(M):
            buf[k, m] = F[i, m] if F[i, m] > y[m] else y[m]
        k += 1
    k = _nondominated_inplace(buf, k, M)
    return box - _hv_small(buf[:k], r)


@nb.njit(cache=True)
def _nondominated_inplace(buf, k, M):
    # clipping collapses many points onto the faces of [y, r]; drop the dominated ones
    keep = np.ones(k, dtype=np.bool_)
    for i in range(k):
        if not keep[i]:
            continue
        for j in range(k):
            if i == j or not keep[j]:
                continue
            le = True
            for m in range(M):
                if buf[j, m] > buf[i, m]:
                    le = False
                    break
            if le:  # j weakly dominates i; keep the first of equal rows
                eq = True
                for m in range(M):
                    if buf[j, m] != buf[i, m]:
                        eq = False
                        break
                if not eq or j < i:
                    keep[i] = False
                    break
    m_out = 0
    for i in range(k):
        if keep[i]:
            for m in range(M):
                buf[m_out, m] = buf[i, m]
            m_out += 1
    return m_out


@nb.njit(cache=True)
def hvi_samples(Y, F, r):
    """``HVI(y_s)`` for every row of ``Y`` against front ``F`` (rows strictly below ``r``)."""
    S = Y.shape[0]
    out = np.zeros(S)
    buf = np.empty((max(F.shape[0], 1), Y.shape[1]))
    for s in range(S):
        out[s] = _hvi_point(Y[s], F, r, buf)
    return out


@nb.njit(cache=True)
def ehvi_batch(mu, sd, eps, F, r):
    """Monte-Carlo EHVI for candidates ``mu, sd`` (``C x M``) with shared draws ``eps``."""
    C, M = mu.shape
    S = eps.shape[0]
    out = np.zeros(C)
    buf = np.empty((max(F.shape[0], 1), M))
    y = np.empty(M)
    for c in range(C):
        acc = 0.0
        for s in range(S):
            for m in range(M):
                y[m] = mu[c, m] + sd[c, m] * eps[s, m]
            acc += _hvi_point(y, F, r, buf)
        out[c] = acc / S
    return out


def hypervolume_compiled(points, ref) -> float:
    """Hypervolume through the compiled kernel (``M <= 4``)."""
    r = np.asarray(ref, float)
    P, _ = split_by_reference(points, r)
    if r.size > 4:
        raise ValueError("compiled kernel supports at most four objectives")
    return float(_hv_small(np.ascontiguousarray(P[pareto_front(P)]) if P.size else P.reshape(0, r.size), r))


# ----------------------------------------------------------------------
# disjoint boxes of the non-dominated region
# ----------------------------------------------------------------------


def _nd_boxes(P, lo, hi):
    M = lo.size
    if P.shape[0]:
        P = P[np.all(P < hi, axis=1)]
    if P.shape[0] == 0:
        return [(lo.copy(), hi.copy())]
    if M == 1:
        top = max(lo[0], P[:, 0].min())
        return [(lo.copy(), np.array([top]))] if top > lo[0] else []
    cuts = np.unique(np.r_[lo[-1], P[:, -1], hi[-1]])
    cuts = cuts[(cuts >= lo[-1]) & (cuts <= hi[-1])]
    boxes, live = [], {}
    for a, b in zip(cuts[:-1], cuts[1:]):
        cross = _nd_boxes(P[P[:, -1] <= a][:, :-1], lo[:-1], hi[:-1])
        nxt = {}
        for l, u in cross:
            key = (tuple(l), tuple(u))
            # a cross-section box unchanged from the previous slab is extruded
            nxt[key] = (live[key][0], b) if key in live else (a, b)
        for key, (za, zb) in live.items():
            if key not in nxt:
                boxes.append((np.r_[key[0], za], np.r_[key[1], zb]))
        live = nxt
    for key, (za, zb) in live.items():
        boxes.append((np.r_[key[0], za], np.r_[key[1], zb]))
    return boxes


def nondominated_boxes(front, ref):
    """Disjoint boxes ``[L_j, U_j]`` whose union is the part of ``(-inf, ref]`` not dominated by ``front``.

    Returns:
        ``(L, U)`` arrays of shape ``(n_boxes, M)``; lower corners may be ``-inf``.
    """
    r = np.asarray(ref, float)
    F, _ = split_by_reference(front, r)
    if F.shape[0]:
        F = F[pareto_front(F)]
    boxes = _nd_boxes(F, np.full(r.size, -np.inf), r)
    boxes = [(l, u) for l, u in boxes if np.all(u > l)]
    if not boxes:
        return np.zeros((0, r.size)), np.zeros((0, r.size))
    return np.array([b[0] for b in boxes]), np.array([b[1] for b in boxes])


@nb.njit(cache=True)
def _box_hvi(y, L, U):
    total = 0.0
    for j in range(L.shape[0]):
        vol = 1.0
        for m in range(y.size):
            low = y[m] if y[m] > L[j, m] else L[j, m]
            side = U[j, m] - low
            if side <= 0.0:
                vol = 0.0
                break
            vol *= side
        total += vol
    return total


@nb.njit(cache=True)
def ehvi_boxes(mu, sd, eps, L, U):
    """Monte-Carlo EHVI using a box decomposition of the non-dominated region."""
    C, M = mu.shape
    S = eps.shape[0]
    out = np.zeros(C)
    y = np.empty(M)
    for c in range(C):
        acc = 0.0
        for s in range(S):
            for m in range(M):
                y[m] = mu[c, m] + sd[c, m] * eps[s, m]
            acc += _box_hvi(y, L, U)
        out[c] = acc / S
    return out


def hvi_boxes(Y, L, U) -> np.ndarray:
    Y = np.atleast_2d(np.asarray(Y, float))
    return ehvi_boxes(Y, np.zeros_like(Y), np.zeros((1, Y.shape[1])), L, U)
