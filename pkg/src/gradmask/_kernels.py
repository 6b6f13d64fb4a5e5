"""Hot inner loops, compiled with numba when available.

Every kernel exists twice: a ``@njit`` version and a pure-numpy version with
the same signature. The module-level names resolve to the numba versions
unless ``GRADMASK_DISABLE_NUMBA=1`` is set (or numba cannot be imported).
Both implementations stay importable as ``numba_impl`` / ``numpy_impl`` so
tests and ``benchmarks/bench_kernels.py`` can compare them directly.
"""
from __future__ import annotations

import os
from types import SimpleNamespace

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_INV53 = 1.0 / 9007199254740992.0  # 2**-53


def _env_disabled() -> bool:
    return os.environ.get("GRADMASK_DISABLE_NUMBA", "").strip().lower() in {"1", "true", "yes", "on"}


try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _np_im2col(x, k, pad):
    n, c, h, w = x.shape
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            cols[:, ki, kj] = xp[:, :, ki:ki + ho, kj:kj + wo].transpose(1, 0, 2, 3)
    return cols.reshape(c * k * k, n * ho * wo)


def _np_col2im(cols, n, c, h, w, k, pad):
    ho = h + 2 * pad - k + 1
    wo = w + 2 * pad - k + 1
    cols = cols.reshape(c, k, k, n, ho, wo)
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(k):
        for kj in range(k):
            xp[:, :, ki:ki + ho, kj:kj + wo] += cols[:, ki, kj].transpose(1, 0, 2, 3)
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])


def _np_filter_valid(img, taps):
    # separable correlation, 'valid' extent, rows then columns
    kt = taps.shape[0]
    h, w = img.shape
    tmp = np.zeros((h - kt + 1, w), dtype=np.float64)
    for t in range(kt):
        tmp += taps[t] * img[t:t + h - kt + 1, :]
    out = np.zeros((h - kt + 1, w - kt + 1), dtype=np.float64)
    for t in range(kt):
        out += taps[t] * tmp[:, t:t + w - kt + 1]
    return out


def _np_splitmix(z):
    z = z ^ (z >> np.uint64(30))
    z = z * _M1
    z = z ^ (z >> np.uint64(27))
    z = z * _M2
    return z ^ (z >> np.uint64(31))


def _np_counter_uniform(key, start, count):
    with np.errstate(over="ignore"):
        idx = np.arange(start, start + count, dtype=np.uint64)
        z = np.uint64(key) + (idx + np.uint64(1)) * _GOLDEN
        bits = _np_splitmix(z) >> np.uint64(11)
    return bits.astype(np.float64) * _INV53


def _np_nan_mean(stack, fallback):
    # Values are summed in ascending order so the result does not depend on
    # the order of submissions.
    srt = np.sort(stack, axis=0)  # NaN sorts last
    count = np.sum(~np.isnan(stack), axis=0)
    acc = np.zeros(stack.shape[1], dtype=np.float64)
    for i in range(stack.shape[0]):
        live = i < count
        acc = np.where(live, acc + np.where(live, srt[i], 0.0), acc)
    out = np.where(count > 0, acc / np.maximum(count, 1), fallback)
    return out


def _np_nan_median(stack, fallback):
    srt = np.sort(stack, axis=0)
    count = np.sum(~np.isnan(stack), axis=0)
    cols = np.arange(stack.shape[1])
    safe = np.maximum(count, 1)
    lo = srt[(safe - 1) // 2, cols]
    hi = srt[safe // 2, cols]
    mid = np.where(safe % 2 == 1, lo, (lo + hi) / 2.0)
    return np.where(count > 0, mid, fallback)


numpy_impl = SimpleNamespace(
    im2col=_np_im2col,
    col2im=_np_col2im,
    filter_valid=_np_filter_valid,
    counter_uniform=_np_counter_uniform,
    nan_mean=_np_nan_mean,
    nan_median=_np_nan_median,
)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _nb_im2col(x, k, pad):
        n, c, h, w = x.shape
        ho = h + 2 * pad - k + 1
        wo = w + 2 * pad - k + 1
        cols = np.zeros((c * k * k, n * ho * wo), dtype=x.dtype)
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    for b in range(n):
                        base = b * ho * wo
                        for i in range(ho):
                            si = i + ki - pad
                            if si < 0 or si >= h:
                                continue
                            for j in range(wo):
                                sj = j + kj - pad
                                if sj >= 0 and sj < w:
                                    cols[row, base + i * wo + j] = x[b, ci, si, sj]
        return cols

    @njit(cache=True)
    def _nb_col2im(cols, n, c, h, w, k, pad):
        ho = h + 2 * pad - k + 1
        wo = w + 2 * pad - k + 1
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        for ci in range(c):
            for ki in range(k):
                for kj in range(k):
                    row = (ci * k + ki) * k + kj
                    for b in range(n):
                        base = b * ho * wo
                        for i in range(ho):
                            si = i + ki - pad
                            if si < 0 or si >= h:
                                continue
                            for j in range(wo):
                                sj = j + kj - pad
                                if sj >= 0 and sj < w:
                                    out[b, ci, si, sj] += cols[row, base + i * wo + j]
        return out

    @njit(cache=True)
    def _nb_filter_valid(img, taps):
        kt = taps.shape[0]
        h, w = img.shape
        tmp = np.zeros((h - kt + 1, w))
        for i in range(h - kt + 1):
            for j in range(w):
                s = 0.0
                for t in range(kt):
                    s += taps[t] * img[i + t, j]
                tmp[i, j] = s
        out = np.zeros((h - kt + 1, w - kt + 1))
        for i in range(h - kt + 1):
            for j in range(w - kt + 1):
                s = 0.0
                for t in range(kt):
                    s += taps[t] * tmp[i, j + t]
                out[i, j] = s
        return out

    @njit(cache=True)
    def _nb_counter_uniform(key, start, count):
        out = np.empty(count)
        k = np.uint64(key)
        for i in range(count):
            z = k + np.uint64(start + i + 1) * np.uint64(0x9E3779B97F4A7C15)
            z = z ^ (z >> np.uint64(30))
            z = z * np.uint64(0xBF58476D1CE4E5B9)
            z = z ^ (z >> np.uint64(27))
            z = z * np.uint64(0x94D049BB133111EB)
            z = z ^ (z >> np.uint64(31))
            out[i] = np.float64(z >> np.uint64(11)) * (1.0 / 9007199254740992.0)
        return out

    @njit(cache=True)
    def _nb_sorted_column(cols, j, buf):
        # insertion sort: columns hold one value per client, so they are short
        m = 0
        for i in range(cols.shape[1]):
            v = cols[j, i]
            if np.isnan(v):
                continue
            q = m
            while q > 0 and buf[q - 1] > v:
                buf[q] = buf[q - 1]
                q -= 1
            buf[q] = v
            m += 1
        return m

    @njit(cache=True)
    def _nb_nan_mean(stack, fallback):
        n, d = stack.shape
        cols = np.ascontiguousarray(stack.T)
        out = np.empty(d)
        buf = np.empty(n)
        for j in range(d):
            m = _nb_sorted_column(cols, j, buf)
            if m == 0:
                out[j] = fallback[j]
            else:
                s = 0.0
                for i in range(m):
                    s += buf[i]
                out[j] = s / m
        return out

    @njit(cache=True)
    def _nb_nan_median(stack, fallback):
        n, d = stack.shape
        cols = np.ascontiguousarray(stack.T)
        out = np.empty(d)
        buf = np.empty(n)
        for j in range(d):
            m = _nb_sorted_column(cols, j, buf)
            if m == 0:
                out[j] = fallback[j]
            elif m % 2 == 1:
                out[j] = buf[(m - 1) // 2]
            else:
                out[j] = (buf[m // 2 - 1] + buf[m // 2]) / 2.0
        return out

    numba_impl = SimpleNamespace(
        im2col=_nb_im2col,
        col2im=_nb_col2im,
        filter_valid=_nb_filter_valid,
        counter_uniform=_nb_counter_uniform,
        nan_mean=_nb_nan_mean,
        nan_median=_nb_nan_median,
    )
else:  # pragma: no cover
    numba_impl = None


USE_NUMBA = HAVE_NUMBA and not _env_disabled()
active = numba_impl if USE_NUMBA else numpy_impl


def im2col(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Unfold stride-1 ``k``x``k`` patches of ``x`` (N, C, H, W).

    Returns an array of shape ``(C*k*k, N*Ho*Wo)``; row index is
    ``(c*k + ki)*k + kj`` and column index ``(n*Ho + i)*Wo + j``.
    """
    return active.im2col(np.ascontiguousarray(x), int(k), int(pad))


def col2im(cols: np.ndarray, shape: tuple, k: int, pad: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back to ``shape``."""
    n, c, h, w = shape
    return active.col2im(np.ascontiguousarray(cols), n, c, h, w, int(k), int(pad))


def filter_valid(img: np.ndarray, taps: np.ndarray) -> np.ndarray:
    return active.filter_valid(np.ascontiguousarray(img, dtype=np.float64),
                               np.ascontiguousarray(taps, dtype=np.float64))


def counter_uniform(key: int, start: int, count: int) -> np.ndarray:
    """Uniform [0, 1) draws ``u[i] = H(key, start + i)``; stateless and order-free."""
    return active.counter_uniform(np.uint64(key), int(start), int(count))


def nan_mean(stack: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    return active.nan_mean(np.ascontiguousarray(stack, dtype=np.float64),
                           np.ascontiguousarray(fallback, dtype=np.float64))


def nan_median(stack: np.ndarray, fallback: np.ndarray) -> np.ndarray:
    return active.nan_median(np.ascontiguousarray(stack, dtype=np.float64),
                             np.ascontiguousarray(fallback, dtype=np.float64))


def mix_key(*parts: int) -> int:
    """Fold integers into one 64-bit key with splitmix64 rounds."""
    with np.errstate(over="ignore"):
        z = np.uint64(0)
        for p in parts:
            z = _np_splitmix(z + np.uint64(int(p) & 0xFFFFFFFFFFFFFFFF) + _GOLDEN)
    return int(z)
