"""Hot kernels for the map decoder: windowed argmax and region growing.

Two interchangeable backends produce bit-identical results:

- ``numba``: @njit loops, used by default when numba imports cleanly.
- ``numpy``: vectorized sliding windows plus scipy connected components.

Set ``LITERATI_NUMBA=0`` to force the numpy path. ``default_backend()``
reports what will be used.
"""

from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import ndimage

try:
    from numba import njit
    _HAVE_NUMBA = True
except ImportError:
    _HAVE_NUMBA = False


def available_backends() -> tuple[str, ...]:
    return ("numba", "numpy") if _HAVE_NUMBA else ("numpy",)


def default_backend() -> str:
    if _HAVE_NUMBA and os.environ.get("LITERATI_NUMBA", "1") != "0":
        return "numba"
    return "numpy"


def _resolve(backend: str | None) -> str:
    if backend is None:
        return default_backend()
    if backend not in ("numba", "numpy"):
        raise ValueError(f"unknown backend {backend!r}")
    if backend == "numba" and not _HAVE_NUMBA:
        raise ValueError("numba backend requested but numba is not installed")
    return backend


# ---------------------------------------------------------------------------
# windowed argmax: for every cell, the row-major index of the best cell in
# its (2d+1) x (2d+1) Chebyshev window, "best" meaning highest value with
# ties going to the lowest index. Separable: a horizontal then a vertical
# pass over (value, index) pairs.

def _numpy_window_winner(p: np.ndarray, d: int) -> np.ndarray:
    H, W = p.shape
    sentinel = H * W  # never wins: paired with -inf value
    idx = np.arange(H * W, dtype=np.int64).reshape(H, W)
    L = 2 * d + 1

    pv = np.pad(p, ((0, 0), (d, d)), constant_values=-np.inf)
    pi = np.pad(idx, ((0, 0), (d, d)), constant_values=sentinel)
    wv = sliding_window_view(pv, L, axis=1)
    wi = sliding_window_view(pi, L, axis=1)
    bv = wv.max(axis=2)
    bi = np.where(wv == bv[:, :, None], wi, sentinel).min(axis=2)

    bvp = np.pad(bv, ((d, d), (0, 0)), constant_values=-np.inf)
    bip = np.pad(bi, ((d, d), (0, 0)), constant_values=sentinel)
    wv2 = sliding_window_view(bvp, L, axis=0)
    wi2 = sliding_window_view(bip, L, axis=0)
    bv2 = wv2.max(axis=2)
    return np.where(wv2 == bv2[:, :, None], wi2, sentinel).min(axis=2)


# ---------------------------------------------------------------------------
# region growing: seeds are processed in the given order; each unclaimed
# seed floods 8-connected unclaimed cells with alpha*peak <= p <= peak.
# A seed landing on an already-claimed cell is merged into that region.

def _numpy_assign_regions(p: np.ndarray, seeds: np.ndarray, alpha: float):
    claimed = np.full(p.shape, -1, dtype=np.int32)
    seed_region = np.empty(len(seeds), dtype=np.int32)
    eight = np.ones((3, 3), dtype=bool)
    next_id = 0
    for i, (r, c) in enumerate(seeds):
        if claimed[r, c] != -1:
            seed_region[i] = claimed[r, c]
            continue
        peak = p[r, c]
        mask = (claimed == -1) & (p >= alpha * peak) & (p <= peak)
        labels, _ = ndimage.label(mask, structure=eight)
        claimed[labels == labels[r, c]] = next_id
        seed_region[i] = next_id
        next_id += 1
    return claimed, seed_region


if _HAVE_NUMBA:

    @njit(cache=False)
    def _numba_window_winner(p, d):  # pragma: no cover - exercised via dispatch
        H, W = p.shape
        bv = np.empty((H, W), np.float64)
        bi = np.empty((H, W), np.int64)
        for r in range(H):
            for c in range(W):
                best_v = p[r, c]
                best_i = r * W + c
                lo = c - d if c - d > 0 else 0
                hi = c + d if c + d < W - 1 else W - 1
                for cc in range(lo, hi + 1):
                    v = p[r, cc]
                    i = r * W + cc
                    if v > best_v or (v == best_v and i < best_i):
                        best_v = v
                        best_i = i
                bv[r, c] = best_v
                bi[r, c] = best_i
        out = np.empty((H, W), np.int64)
        for r in range(H):
            for c in range(W):
                best_v = bv[r, c]
                best_i = bi[r, c]
                lo = r - d if r - d > 0 else 0
                hi = r + d if r + d < H - 1 else H - 1
                for rr in range(lo, hi + 1):
                    v = bv[rr, c]
                    i = bi[rr, c]
                    if v > best_v or (v == best_v and i < best_i):
                        best_v = v
                        best_i = i
                out[r, c] = best_i
        return out

    @njit(cache=False)
    def _numba_assign_regions(p, seeds, alpha):  # pragma: no cover
        H, W = p.shape
        claimed = np.full((H, W), -1, np.int32)
        n = seeds.shape[0]
        seed_region = np.empty(n, np.int32)
        stack_r = np.empty(H * W, np.int32)
        stack_c = np.empty(H * W, np.int32)
        next_id = 0
        for s in range(n):
            r0 = seeds[s, 0]
            c0 = seeds[s, 1]
            if claimed[r0, c0] != -1:
                seed_region[s] = claimed[r0, c0]
                continue
            peak = p[r0, c0]
            lo = alpha * peak
            rid = next_id
            next_id += 1
            seed_region[s] = rid
            claimed[r0, c0] = rid
            stack_r[0] = r0
            stack_c[0] = c0
            top = 1
            while top > 0:
                top -= 1
                r = stack_r[top]
                c = stack_c[top]
                for dr in range(-1, 2):
                    for dc in range(-1, 2):
                        if dr == 0 and dc == 0:
                            continue
                        rr = r + dr
                        cc = c + dc
                        if rr < 0 or rr >= H or cc < 0 or cc >= W:
                            continue
                        if claimed[rr, cc] != -1:
                            continue
                        v = p[rr, cc]
                        if v >= lo and v <= peak:
                            claimed[rr, cc] = rid
                            stack_r[top] = rr
                            stack_c[top] = cc
                            top += 1
        return claimed, seed_region


def window_winner(p: np.ndarray, d: int, backend: str | None = None) -> np.ndarray:
    if _resolve(backend) == "numba":
        return _numba_window_winner(p, d)
    return _numpy_window_winner(p, d)


def assign_regions(p: np.ndarray, seeds: np.ndarray, alpha: float, backend: str | None = None):
    if len(seeds) == 0:
        return np.full(p.shape, -1, dtype=np.int32), np.empty(0, dtype=np.int32)
    if _resolve(backend) == "numba":
        return _numba_assign_regions(p, seeds, alpha)
    return _numpy_assign_regions(p, seeds, alpha)
