"""Hot inner loops: CTC forward-backward and Levenshtein distance.

Each kernel has a numba ``@njit`` version and a pure-numpy/python fallback
with identical semantics. The numba path is used unless numba is missing or
``CLFT_DISABLE_NUMBA=1`` is set in the environment.
"""
from __future__ import annotations

import os

import numpy as np

NEG_INF = -np.inf

try:  # pragma: no cover - exercised implicitly by the import
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("CLFT_DISABLE_NUMBA", "0") not in ("1", "true", "yes")
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# CTC
# ---------------------------------------------------------------------------

def _extend(target: np.ndarray, blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def ctc_forward_backward_numpy(logp: np.ndarray, target: np.ndarray, blank: int = 0):
    """Return ``(nll, grad)`` where ``grad = d nll / d logp``.

    ``logp`` is ``[T, K]`` log-probabilities, ``target`` the label indices
    (no blanks). ``nll`` is ``inf`` when no alignment exists.
    """
    T, K = logp.shape
    ext = _extend(target, blank)
    S = ext.shape[0]
    # skip transitions s-2 -> s are allowed for non-blank labels differing from ext[s-2]
    skip = np.zeros(S, dtype=bool)
    if S > 2:
        skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    emit = logp[:, ext]  # [T, S]

    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if S > 1:
        alpha[0, 1] = emit[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        a = prev.copy()
        a[1:] = np.logaddexp(a[1:], prev[:-1])
        a[2:] = np.where(skip[2:], np.logaddexp(a[2:], prev[:-2]), a[2:])
        alpha[t] = a + emit[t]

    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = emit[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = emit[T - 1, S - 2]
    skip_next = np.zeros(S, dtype=bool)
    if S > 2:
        skip_next[:-2] = skip[2:]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        b = nxt.copy()
        b[:-1] = np.logaddexp(b[:-1], nxt[1:])
        b[:-2] = np.where(skip_next[:-2], np.logaddexp(b[:-2], nxt[2:]), b[:-2])
        beta[t] = b + emit[t]

    ll = alpha[T - 1, S - 1]
    if S > 1:
        ll = np.logaddexp(ll, alpha[T - 1, S - 2])
    grad = np.zeros((T, K))
    if not np.isfinite(ll):
        return np.inf, grad
    occ = alpha + beta - emit - ll  # log posterior occupancy per extended state
    for k in np.unique(ext):
        cols = occ[:, ext == k]
        grad[:, k] = -np.exp(np.logaddexp.reduce(cols, axis=1))
    return float(-ll), grad


def edit_distance_python(a: np.ndarray, b: np.ndarray) -> int:
    n, m = len(a), len(b)
    prev = list(range(m + 1))
    for i in range(1, n + 1):
        cur = [i] + [0] * m
        ai = a[i - 1]
        for j in range(1, m + 1):
            cost = 0 if ai == b[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[m]


if HAVE_NUMBA:

    @njit(cache=True, nogil=True)
    def _lae(a, b):
        if a == NEG_INF:
            return b
        if b == NEG_INF:
            return a
        if a > b:
            return a + np.log1p(np.exp(b - a))
        return b + np.log1p(np.exp(a - b))

    @njit(cache=True, nogil=True)
    def ctc_forward_backward_numba(logp, target, blank=0):
        T, K = logp.shape
        L = target.shape[0]
        S = 2 * L + 1
        ext = np.full(S, blank, dtype=np.int64)
        for i in range(L):
            ext[2 * i + 1] = target[i]
        alpha = np.full((T, S), NEG_INF)
        beta = np.full((T, S), NEG_INF)
        alpha[0, 0] = logp[0, ext[0]]
        if S > 1:
            alpha[0, 1] = logp[0, ext[1]]
        for t in range(1, T):
            for s in range(S):
                a = alpha[t - 1, s]
                if s >= 1:
                    a = _lae(a, alpha[t - 1, s - 1])
                if s >= 2 and ext[s] != blank and ext[s] != ext[s - 2]:
                    a = _lae(a, alpha[t - 1, s - 2])
                if a != NEG_INF:
                    a += logp[t, ext[s]]
                alpha[t, s] = a
        beta[T - 1, S - 1] = logp[T - 1, ext[S - 1]]
        if S > 1:
            beta[T - 1, S - 2] = logp[T - 1, ext[S - 2]]
        for t in range(T - 2, -1, -1):
            for s in range(S):
                b = beta[t + 1, s]
                if s + 1 < S:
                    b = _lae(b, beta[t + 1, s + 1])
                if s + 2 < S and ext[s + 2] != blank and ext[s + 2] != ext[s]:
                    b = _lae(b, beta[t + 1, s + 2])
                if b != NEG_INF:
                    b += logp[t, ext[s]]
                beta[t, s] = b
        ll = alpha[T - 1, S - 1]
        if S > 1:
            ll = _lae(ll, alpha[T - 1, S - 2])
        grad = np.zeros((T, K))
        if ll == NEG_INF:
            return np.inf, grad
        acc = np.full((T, K), NEG_INF)
        for t in range(T):
            for s in range(S):
                v = alpha[t, s] + beta[t, s] - logp[t, ext[s]]
                acc[t, ext[s]] = _lae(acc[t, ext[s]], v)
        for t in range(T):
            for k in range(K):
                if acc[t, k] != NEG_INF:
                    grad[t, k] = -np.exp(acc[t, k] - ll)
        return -ll, grad

    @njit(cache=True, nogil=True)
    def edit_distance_numba(a, b):
        n = a.shape[0]
        m = b.shape[0]
        prev = np.arange(m + 1)
        cur = np.zeros(m + 1, dtype=prev.dtype)
        for i in range(1, n + 1):
            cur[0] = i
            for j in range(1, m + 1):
                cost = 0 if a[i - 1] == b[j - 1] else 1
                v = prev[j] + 1
                if cur[j - 1] + 1 < v:
                    v = cur[j - 1] + 1
                if prev[j - 1] + cost < v:
                    v = prev[j - 1] + cost
                cur[j] = v
            prev, cur = cur, prev
        return prev[m]


def ctc_forward_backward(logp: np.ndarray, target: np.ndarray, blank: int = 0):
    logp = np.ascontiguousarray(logp, dtype=np.float64)
    target = np.ascontiguousarray(target, dtype=np.int64)
    if USE_NUMBA:
        nll, grad = ctc_forward_backward_numba(logp, target, blank)
        return float(nll), grad
    return ctc_forward_backward_numpy(logp, target, blank)


def edit_distance(a, b) -> int:
    """Levenshtein distance between two integer sequences."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if USE_NUMBA:
        return int(edit_distance_numba(a, b))
    return edit_distance_python(a, b)
