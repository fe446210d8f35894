"""Hot inner loops of the selective scan.

Every kernel exists twice: a numba ``@njit`` version and a pure-numpy version
with an identical signature and identical floating-point semantics for the
per-element arithmetic.  The active path is chosen once at import time:

* ``SEPM_DISABLE_NUMBA=1`` forces the numpy path;
* numba missing from the environment also falls back to numpy;
* ``SEPM_THREADS=n`` (n > 1) switches the numba kernels to their ``prange``
  variants, which split work over independent channels only, so results do
  not depend on the thread count.

:func:`set_backend` overrides the choice at runtime (used by the benchmarks
to time both paths in one process).
"""

from __future__ import annotations

import contextlib
import math
import os
import warnings

import numpy as np

try:
    import numba
    from numba import njit, prange

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    numba = None
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f

    prange = range


# below this |z| the ZOH helpers switch to their Taylor series
SERIES_THRESHOLD = 1e-4
# the second helper loses ~eps/|z| relative accuracy; switch much earlier
_GRAD_SERIES_THRESHOLD = 1e-2


def _env_flag(name: str) -> bool:
    return os.environ.get(name, "").strip().lower() not in ("", "0", "false", "no")


def _env_threads() -> int:
    raw = os.environ.get("SEPM_THREADS", "").strip()
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        warnings.warn(f"ignoring non-integer SEPM_THREADS={raw!r}")
        return 1
    return max(1, n)


_BACKEND = "numba" if HAVE_NUMBA and not _env_flag("SEPM_DISABLE_NUMBA") else "numpy"
_THREADS = _env_threads()
if HAVE_NUMBA and _THREADS > 1:
    numba.set_num_threads(min(_THREADS, numba.config.NUMBA_NUM_THREADS))


def get_backend() -> str:
    return _BACKEND


def get_threads() -> int:
    return _THREADS


def set_backend(name: str) -> None:
    global _BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    _BACKEND = name


def set_threads(n: int) -> None:
    global _THREADS
    _THREADS = max(1, int(n))
    if HAVE_NUMBA and _THREADS > 1:
        numba.set_num_threads(min(_THREADS, numba.config.NUMBA_NUM_THREADS))


@contextlib.contextmanager
def use_backend(name: str):
    previous = _BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


# ---------------------------------------------------------------------------
# zero-order-hold helpers
#   phi1(z) = (e^z - 1) / z           B_bar = delta * phi1(delta * a) * B
#   phi2(z) = (z e^z - e^z + 1) / z^2 dB_bar/da = delta^2 * phi2(delta * a) * B


@njit(cache=True)
def _phi1_scalar(z):
    if abs(z) < SERIES_THRESHOLD:
        return 1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0)))
    return math.expm1(z) / z


@njit(cache=True)
def _phi2_scalar(z):
    if abs(z) < _GRAD_SERIES_THRESHOLD:
        return 0.5 + z * (1 / 3 + z * (1 / 8 + z * (1 / 30 + z * (1 / 144 + z * (1 / 840)))))
    return (z * math.exp(z) - math.expm1(z)) / (z * z)


def phi1(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    small = np.abs(z) < SERIES_THRESHOLD
    safe = np.where(small, 1.0, z).astype(z.dtype, copy=False)
    out = np.expm1(safe) / safe
    series = 1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0)))
    return np.where(small, series, out).astype(z.dtype, copy=False)


def phi2(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z)
    small = np.abs(z) < _GRAD_SERIES_THRESHOLD
    safe = np.where(small, 1.0, z).astype(z.dtype, copy=False)
    out = (safe * np.exp(safe) - np.expm1(safe)) / (safe * safe)
    series = 0.5 + z * (1 / 3 + z * (1 / 8 + z * (1 / 30 + z * (1 / 144 + z * (1 / 840)))))
    return np.where(small, series, out).astype(z.dtype, copy=False)


# ---------------------------------------------------------------------------
# first-order linear recurrence  h[t] = a[t] * h[t-1] + b[t]


@njit(cache=True)
def _recurrence_nb(a, b, h0):
    L, M = a.shape
    out = np.empty_like(b)
    h = h0.copy()
    for t in range(L):
        for m in range(M):
            h[m] = a[t, m] * h[m] + b[t, m]
            out[t, m] = h[m]
    return out


@njit(cache=True, parallel=True)
def _recurrence_nb_par(a, b, h0):
    L, M = a.shape
    out = np.empty_like(b)
    chunk = 64
    n_chunks = (M + chunk - 1) // chunk
    for c in prange(n_chunks):
        lo = c * chunk
        hi = min(M, lo + chunk)
        h = h0[lo:hi].copy()
        for t in range(L):
            for m in range(lo, hi):
                h[m - lo] = a[t, m] * h[m - lo] + b[t, m]
                out[t, m] = h[m - lo]
    return out


def _recurrence_np(a, b, h0):
    out = np.empty_like(b)
    h = h0.copy()
    for t in range(a.shape[0]):
        h = a[t] * h + b[t]
        out[t] = h
    return out


@njit(cache=True)
def _reverse_recurrence_nb(a, g, carry):
    L, M = a.shape
    out = np.empty_like(g)
    d = carry.copy()
    for t in range(L - 1, -1, -1):
        for m in range(M):
            if t < L - 1:
                d[m] = g[t, m] + a[t + 1, m] * d[m]
            else:
                d[m] = g[t, m] + d[m]
            out[t, m] = d[m]
    return out


@njit(cache=True, parallel=True)
def _reverse_recurrence_nb_par(a, g, carry):
    L, M = a.shape
    out = np.empty_like(g)
    chunk = 64
    n_chunks = (M + chunk - 1) // chunk
    for c in prange(n_chunks):
        lo = c * chunk
        hi = min(M, lo + chunk)
        d = carry[lo:hi].copy()
        for t in range(L - 1, -1, -1):
            for m in range(lo, hi):
                if t < L - 1:
                    d[m - lo] = g[t, m] + a[t + 1, m] * d[m - lo]
                else:
                    d[m - lo] = g[t, m] + d[m - lo]
                out[t, m] = d[m - lo]
    return out


def _reverse_recurrence_np(a, g, carry):
    L = a.shape[0]
    out = np.empty_like(g)
    d = g[L - 1] + carry
    out[L - 1] = d
    for t in range(L - 2, -1, -1):
        d = g[t] + a[t + 1] * d
        out[t] = d
    return out


def _as_2d(x):
    return np.ascontiguousarray(x.reshape(x.shape[0], -1))


def linear_recurrence(a: np.ndarray, b: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """All states of ``h[t] = a[t] * h[t-1] + b[t]`` along axis 0.

    ``a`` and ``b`` share shape ``(L, ...)``; ``h0`` has the trailing shape.
    """
    shape = b.shape
    a2, b2 = _as_2d(a), _as_2d(b)
    h2 = np.ascontiguousarray(h0.reshape(-1), dtype=b.dtype)
    if _BACKEND == "numba":
        kern = _recurrence_nb_par if _THREADS > 1 else _recurrence_nb
        out = kern(a2, b2, h2)
    else:
        out = _recurrence_np(a2, b2, h2)
    return out.reshape(shape)


def reverse_linear_recurrence(a: np.ndarray, g: np.ndarray, carry: np.ndarray | None = None) -> np.ndarray:
    """Adjoint sweep ``d[t] = g[t] + a[t+1] * d[t+1]`` with ``d[L-1] = g[L-1] + carry``."""
    shape = g.shape
    a2, g2 = _as_2d(a), _as_2d(g)
    if carry is None:
        c2 = np.zeros(g2.shape[1], dtype=g.dtype)
    else:
        c2 = np.ascontiguousarray(carry.reshape(-1), dtype=g.dtype)
    if _BACKEND == "numba":
        kern = _reverse_recurrence_nb_par if _THREADS > 1 else _reverse_recurrence_nb
        out = kern(a2, g2, c2)
    else:
        out = _reverse_recurrence_np(a2, g2, c2)
    return out.reshape(shape)


# ---------------------------------------------------------------------------
# associative (Hillis-Steele) scan over the pair monoid
#   (a1, b1) . (a2, b2) = (a2 * a1, a2 * b1 + b2)


def combine(first, second):
    a1, b1 = first
    a2, b2 = second
    return a2 * a1, a2 * b1 + b2


def associative_recurrence(a: np.ndarray, b: np.ndarray, h0: np.ndarray) -> np.ndarray:
    """Same result as :func:`linear_recurrence` in ceil(log2 L) vectorised sweeps."""
    A = a.copy()
    Bv = b.copy()
    # fold the initial state into the first element
    Bv[0] = a[0] * h0 + b[0]
    A[0] = 0.0
    L = a.shape[0]
    shift = 1
    while shift < L:
        A_prev = A[:-shift]
        B_prev = Bv[:-shift]
        newB = A[shift:] * B_prev + Bv[shift:]
        newA = A[shift:] * A_prev
        Bv[shift:] = newB
        A[shift:] = newA
        shift *= 2
    return Bv


def associative_reverse_recurrence(a: np.ndarray, g: np.ndarray, carry: np.ndarray | None = None) -> np.ndarray:
    # d[t] = a[t+1] d[t+1] + g[t]  is a forward recurrence in reversed time
    a_next = np.empty_like(a)
    a_next[:-1] = a[1:]
    a_next[-1] = 1.0
    init = np.zeros(g.shape[1:], dtype=g.dtype) if carry is None else carry
    rev = associative_recurrence(a_next[::-1], g[::-1], init)
    return rev[::-1].copy()


# ---------------------------------------------------------------------------
# fused selective scan for inference: never materialises (L, E, N) buffers
#   u, delta: (E, L)   A: (E, N)   B, C: (N, L)   D: (E,)   h: (E, N)


@njit(cache=True)
def _fused_scan_rows(u, delta, A, Bt, Ct, D, h, y, lo, hi):
    L = u.shape[1]
    N = A.shape[1]
    for e in range(lo, hi):
        he = h[e]
        Ae = A[e]
        for t in range(L):
            dt = delta[e, t]
            ut = u[e, t]
            acc = 0.0
            for n in range(N):
                z = dt * Ae[n]
                em1 = math.expm1(z)
                f = 1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0))) if abs(z) < SERIES_THRESHOLD else em1 / z
                hn = (em1 + 1.0) * he[n] + (dt * f * Bt[t, n]) * ut
                he[n] = hn
                acc += Ct[t, n] * hn
            y[e, t] = acc + D[e] * ut


@njit(cache=True)
def _fused_scan_nb(u, delta, A, Bt, Ct, D, h):
    y = np.empty_like(u)
    _fused_scan_rows(u, delta, A, Bt, Ct, D, h, y, 0, u.shape[0])
    return y


@njit(cache=True, parallel=True)
def _fused_scan_nb_par(u, delta, A, Bt, Ct, D, h):
    E = u.shape[0]
    y = np.empty_like(u)
    for e in prange(E):
        _fused_scan_rows(u, delta, A, Bt, Ct, D, h, y, e, e + 1)
    return y


def _fused_scan_np(u, delta, A, B, C, D, h):
    E, L = u.shape
    y = np.empty_like(u)
    for t in range(L):
        dt = delta[:, t : t + 1]
        z = dt * A
        h[...] = np.exp(z) * h + (dt * phi1(z) * B[None, :, t]) * u[:, t : t + 1]
        y[:, t] = h @ C[:, t] + D * u[:, t]
    return y


def fused_selective_scan(u, delta, A, B, C, D, h0):
    """Inference-only scan; returns ``(y, h_last)`` and leaves ``h0`` untouched."""
    dtype = u.dtype
    h = np.array(h0, dtype=dtype, copy=True)
    args = [np.ascontiguousarray(v, dtype=dtype) for v in (u, delta, A, B, C, D)]
    if _BACKEND == "numba":
        u_, d_, A_, B_, C_, D_ = args
        kern = _fused_scan_nb_par if _THREADS > 1 else _fused_scan_nb
        y = kern(u_, d_, A_, np.ascontiguousarray(B_.T), np.ascontiguousarray(C_.T), D_, h)
    else:
        y = _fused_scan_np(*args, h)
    return y, h


# ---------------------------------------------------------------------------
# selective scan backward
#   given dL/dy, returns gradients w.r.t. (u, delta, A, B, C, D).  The numba
#   version recomputes one channel's states at a time, so memory stays O(L*N).


@njit(cache=True)
def _scan_bwd_channels(u, delta, A, Bt, Ct, D, h0, g, du, ddelta, dA, dBt, dCt, dD, lo, hi):
    # Bt, Ct, dBt, dCt are (L, N).  The forward sweep caches exp(z) and
    # phi1(z) so the reverse sweep needs no transcendental calls.
    L = u.shape[1]
    N = A.shape[1]
    hs = np.empty((L, N))
    ezs = np.empty((L, N))
    fs = np.empty((L, N))
    h = np.empty(N)
    dh = np.empty(N)
    dAe = np.empty(N)
    for e in range(lo, hi):
        Ae = A[e]
        for n in range(N):
            h[n] = h0[e, n]
        for t in range(L):
            dt = delta[e, t]
            ut = u[e, t]
            for n in range(N):
                z = dt * Ae[n]
                em1 = math.expm1(z)
                f = 1.0 + z * (0.5 + z * (1.0 / 6.0 + z * (1.0 / 24.0))) if abs(z) < SERIES_THRESHOLD else em1 / z
                ezs[t, n] = em1 + 1.0
                fs[t, n] = f
                h[n] = (em1 + 1.0) * h[n] + (dt * f * Bt[t, n]) * ut
                hs[t, n] = h[n]
        for n in range(N):
            dh[n] = 0.0
            dAe[n] = 0.0
        dDe = 0.0
        for t in range(L - 1, -1, -1):
            dt = delta[e, t]
            ut = u[e, t]
            gt = g[e, t]
            du_acc = D[e] * gt
            dd_acc = 0.0
            for n in range(N):
                a = Ae[n]
                z = dt * a
                ez = ezs[t, n]
                f = fs[t, n]
                if abs(z) < _GRAD_SERIES_THRESHOLD:
                    f2 = 0.5 + z * (1 / 3 + z * (1 / 8 + z * (1 / 30 + z * (1 / 144 + z * (1 / 840)))))
                else:
                    f2 = (ez - f) / z
                b = Bt[t, n]
                dCt[t, n] += gt * hs[t, n]
                dhn = dh[n] + Ct[t, n] * gt
                hprev = hs[t - 1, n] if t > 0 else h0[e, n]
                dz = dhn * hprev * ez
                dbb = dhn * ut
                du_acc += dhn * (dt * f * b)
                dd_acc += dz * a + dbb * b * ez
                dAe[n] += dz * dt + dbb * b * dt * dt * f2
                dBt[t, n] += dbb * dt * f
                dh[n] = dhn * ez
            du[e, t] = du_acc
            ddelta[e, t] = dd_acc
            dDe += gt * ut
        for n in range(N):
            dA[e, n] = dAe[n]
        dD[e] = dDe


_BWD_CHUNKS = 8


@njit(cache=True)
def _scan_bwd_nb(u, delta, A, Bt, Ct, D, h0, g):
    # same chunked reduction as the parallel variant, so the bits agree
    E, L = u.shape
    N = A.shape[1]
    du = np.empty_like(u)
    ddelta = np.empty_like(u)
    dA = np.empty_like(A)
    dD = np.empty_like(D)
    n_chunks = min(_BWD_CHUNKS, E)
    dBp = np.zeros((n_chunks, L, N), dtype=Bt.dtype)
    dCp = np.zeros((n_chunks, L, N), dtype=Ct.dtype)
    step = (E + n_chunks - 1) // n_chunks
    for c in range(n_chunks):
        lo = c * step
        hi = min(E, lo + step)
        _scan_bwd_channels(u, delta, A, Bt, Ct, D, h0, g, du, ddelta, dA, dBp[c], dCp[c], dD, lo, hi)
    dBt = np.zeros_like(Bt)
    dCt = np.zeros_like(Ct)
    for c in range(n_chunks):
        dBt += dBp[c]
        dCt += dCp[c]
    return du, ddelta, dA, dBt, dCt, dD


@njit(cache=True, parallel=True)
def _scan_bwd_nb_par(u, delta, A, Bt, Ct, D, h0, g):
    E, L = u.shape
    N = A.shape[1]
    du = np.empty_like(u)
    ddelta = np.empty_like(u)
    dA = np.empty_like(A)
    dD = np.empty_like(D)
    n_chunks = min(_BWD_CHUNKS, E)
    dBp = np.zeros((n_chunks, L, N), dtype=Bt.dtype)
    dCp = np.zeros((n_chunks, L, N), dtype=Ct.dtype)
    step = (E + n_chunks - 1) // n_chunks
    for c in prange(n_chunks):
        lo = c * step
        hi = min(E, lo + step)
        _scan_bwd_channels(u, delta, A, Bt, Ct, D, h0, g, du, ddelta, dA, dBp[c], dCp[c], dD, lo, hi)
    # fixed-order reduction keeps results independent of scheduling
    dBt = np.zeros_like(Bt)
    dCt = np.zeros_like(Ct)
    for c in range(n_chunks):
        dBt += dBp[c]
        dCt += dCp[c]
    return du, ddelta, dA, dBt, dCt, dD


def materialized_scan_states(u, delta, A, B, h0, recurrence=None):
    """``(z, A_bar, phi1(z), B_bar, h)`` with shapes ``(L, E, N)``."""
    dt = delta.T[:, :, None]
    z = dt * A[None]
    dA = np.exp(z)
    f = phi1(z)
    bbar = dt * f * B.T[:, None, :]
    rec = linear_recurrence if recurrence is None else recurrence
    h = rec(dA, bbar * u.T[:, :, None], h0)
    return z, dA, f, bbar, h


def materialized_scan_backward(u, delta, A, B, C, D, h0, g, reverse=None):
    z, dA, f, bbar, h = materialized_scan_states(
        u, delta, A, B, h0, None if reverse is None else associative_recurrence
    )
    rev = reverse_linear_recurrence if reverse is None else reverse
    dt = delta.T[:, :, None]
    Bt = B.T[:, None, :]
    ut = u.T[:, :, None]
    gT = g.T
    dC = np.einsum("len,le->nl", h, gT)
    dh = rev(dA, C.T[:, None, :] * gT[:, :, None])
    h_prev = np.concatenate([h0[None], h[:-1]], axis=0)
    dz = dh * h_prev * dA
    dbb = dh * ut
    du = (dh * bbar).sum(axis=2).T + D[:, None] * g
    ddelta = ((dz * A[None]).sum(axis=2) + (dbb * Bt * dA).sum(axis=2)).T
    dAc = (dz * dt).sum(axis=0) + (dbb * Bt * dt * dt * phi2(z)).sum(axis=0)
    dB = (dbb * dt * f).sum(axis=1).T
    dD = (g * u).sum(axis=1)
    return du, ddelta, dAc, dB, dC, dD


def selective_scan_backward(u, delta, A, B, C, D, h0, g):
    """Gradients ``(du, ddelta, dA, dB, dC, dD)`` of the sequential scan."""
    dtype = u.dtype
    args = [np.ascontiguousarray(v, dtype=dtype) for v in (u, delta, A, B, C, D, h0, g)]
    if _BACKEND == "numba":
        u_, d_, A_, B_, C_, D_, h_, g_ = args
        kern = _scan_bwd_nb_par if _THREADS > 1 else _scan_bwd_nb
        du, dd, dA, dBt, dCt, dD = kern(u_, d_, A_, np.ascontiguousarray(B_.T), np.ascontiguousarray(C_.T), D_, h_, g_)
        return du, dd, dA, np.ascontiguousarray(dBt.T), np.ascontiguousarray(dCt.T), dD
    return materialized_scan_backward(*args)
