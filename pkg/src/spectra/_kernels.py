"""
Convolution kernels
===================

Stride-1 convolutions over pre-padded inputs, forward and both backward
products, for any number of spatial axes (the model uses 2-D
``[B, C, H, W]`` and 3-D ``[B, C, D, H, W]``).

Every product is computed "shift and multiply": the padded input is
laid out channels-first as one ``[C, B*P]`` matrix (``P`` = padded
voxels per sample). A kernel tap at flat offset ``o`` then reads the
column slice ``[o, o + N)`` of that matrix, so each tap is one BLAS
product on a strided view and no unfolded copy of the input is built.
Inputs with few channels (the single-channel 3-D stage) would make those
products rank-thin, so there the shifted slices are stacked into column
blocks and multiplied once per block instead. Results land on the padded grid and the valid region is gathered out.

The matrix products always go through numpy. The two backends differ
in the layout work around them (channels-first packing, scattering the
output gradient onto the padded grid, gathering the valid region):

* ``numba``: fused ``@njit`` loops (the default when numba imports),
* ``numpy``: transposes, fancy indexing and ``np.zeros`` fills.

The backend is picked at import from the ``SPECTRA_NUMBA`` environment
variable (``0``/``false``/``off``/``no`` selects numpy) and can be
switched with :func:`set_backend`. Both backends feed identical
matrices to identical products, so they agree bitwise.
"""

from __future__ import annotations

import os
from functools import lru_cache
from itertools import product

import numpy as np

try:
    import numba

    HAS_NUMBA = True
except ImportError:  # pragma: no cover
    HAS_NUMBA = False


def _env_wants_numba() -> bool:
    flag = os.environ.get("SPECTRA_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


# ------------------------------------------------------------ layout helpers


def _np_pack(x3):
    """``[B, C, P]`` -> ``[C, B*P]``."""
    B, C, P = x3.shape
    return np.ascontiguousarray(x3.transpose(1, 0, 2)).reshape(C, B * P)


def _np_unpack(m, B):
    """``[C, B*P]`` -> ``[B, C, P]``."""
    C = m.shape[0]
    return np.ascontiguousarray(m.reshape(C, B, -1).transpose(1, 0, 2))


def _np_scatter(g3, idx, P):
    """Place ``[B, C, Q]`` values at padded positions ``idx``, giving ``[C, B*P]``."""
    B, C, _ = g3.shape
    out = np.zeros((C, B, P))
    out[:, :, idx] = g3.transpose(1, 0, 2)
    return out.reshape(C, B * P)


def _np_gather(m, idx, B):
    """Pull the ``idx`` positions of ``[C, B*P]`` back out as ``[B, C, Q]``."""
    C = m.shape[0]
    return np.ascontiguousarray(m.reshape(C, B, -1)[:, :, idx].transpose(1, 0, 2))


if HAS_NUMBA:

    @numba.njit(cache=True, nogil=True)
    def _nb_pack(x3):
        B, C, P = x3.shape
        out = np.empty((C, B * P))
        for c in range(C):
            for b in range(B):
                base = b * P
                for p in range(P):
                    out[c, base + p] = x3[b, c, p]
        return out

    @numba.njit(cache=True, nogil=True)
    def _nb_unpack(m, B):
        C = m.shape[0]
        P = m.shape[1] // B
        out = np.empty((B, C, P))
        for b in range(B):
            base = b * P
            for c in range(C):
                for p in range(P):
                    out[b, c, p] = m[c, base + p]
        return out

    @numba.njit(cache=True, nogil=True)
    def _nb_scatter(g3, idx, P):
        B, C, Q = g3.shape
        out = np.zeros((C, B * P))
        for c in range(C):
            for b in range(B):
                base = b * P
                for q in range(Q):
                    out[c, base + idx[q]] = g3[b, c, q]
        return out

    @numba.njit(cache=True, nogil=True)
    def _nb_gather(m, idx, B):
        C = m.shape[0]
        P = m.shape[1] // B
        Q = idx.shape[0]
        out = np.empty((B, C, Q))
        for b in range(B):
            base = b * P
            for c in range(C):
                for q in range(Q):
                    out[b, c, q] = m[c, base + idx[q]]
        return out


_LAYOUT = {"numpy": (_np_pack, _np_unpack, _np_scatter, _np_gather)}
if HAS_NUMBA:
    _LAYOUT["numba"] = (_nb_pack, _nb_unpack, _nb_scatter, _nb_gather)

_backend = "numba" if HAS_NUMBA and _env_wants_numba() else "numpy"


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    """Select ``"numba"`` or ``"numpy"`` layout kernels for subsequent calls."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError(f"unknown kernel backend {name!r}")
    if name == "numba" and not HAS_NUMBA:
        raise RuntimeError("numba is not installed")
    _backend = name


# ----------------------------------------------------------------- geometry


@lru_cache(maxsize=64)
def _geometry(padded: tuple, kernel: tuple):
    """Tap offsets and valid-output positions on one flattened padded sample."""
    strides = [int(np.prod(padded[i + 1 :])) for i in range(len(padded))]
    offsets = tuple(
        sum(a * s for a, s in zip(tap, strides)) for tap in product(*map(range, kernel))
    )
    out_ext = tuple(e - k + 1 for e, k in zip(padded, kernel))
    grids = np.meshgrid(*[np.arange(n) for n in out_ext], indexing="ij")
    idx = sum(g.ravel() * s for g, s in zip(grids, strides)).astype(np.int64)
    return offsets, idx, out_ext, int(np.prod(padded))


def _taps(w):
    """``[Co, Ci, *k]`` -> contiguous ``[T, Co, Ci]``, one matrix per tap."""
    Co, Ci = w.shape[:2]
    return np.ascontiguousarray(w.reshape(Co, Ci, -1).transpose(2, 0, 1))


# ------------------------------------------------------------------ kernels

# Below this many input channels a per-tap product is too thin to keep BLAS
# busy; the shifted slices are stacked into ``[T*C, block]`` columns instead.
_NARROW = 16
_BLOCK = 8192


def _stack(X, offsets, lo, hi):
    C = X.shape[0]
    cols = np.empty((len(offsets) * C, hi - lo))
    for t, off in enumerate(offsets):
        cols[t * C : (t + 1) * C] = X[:, lo + off : hi + off]
    return cols


def conv_forward(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid correlation of padded ``xp [B, C, *E]`` with ``w [Co, C, *k]``."""
    pack, _, _, gather = _LAYOUT[_backend]
    B, C = xp.shape[:2]
    Co = w.shape[0]
    offsets, idx, out_ext, P = _geometry(tuple(xp.shape[2:]), tuple(w.shape[2:]))
    X = pack(np.ascontiguousarray(xp).reshape(B, C, P))
    n = X.shape[1] - max(offsets)
    taps = _taps(w)
    acc = np.zeros((Co, X.shape[1]))
    if C < _NARROW:
        wm = np.ascontiguousarray(taps.transpose(1, 0, 2)).reshape(Co, -1)
        for lo in range(0, n, _BLOCK):
            hi = min(n, lo + _BLOCK)
            np.matmul(wm, _stack(X, offsets, lo, hi), out=acc[:, lo:hi])
    else:
        tmp = np.empty((Co, n))
        for t, off in enumerate(offsets):
            np.matmul(taps[t], X[:, off : off + n], out=tmp)
            acc[:, :n] += tmp
    return gather(acc, idx, B).reshape((B, Co) + out_ext)


def conv_backward_weight(xp: np.ndarray, gout: np.ndarray, kshape) -> np.ndarray:
    pack, _, scatter, _ = _LAYOUT[_backend]
    B, C = xp.shape[:2]
    Co = gout.shape[1]
    kshape = tuple(int(k) for k in kshape)
    offsets, idx, _, P = _geometry(tuple(xp.shape[2:]), kshape)
    X = pack(np.ascontiguousarray(xp).reshape(B, C, P))
    G = scatter(np.ascontiguousarray(gout).reshape(B, Co, -1), idx, P)
    n = X.shape[1] - max(offsets)
    Gn = G[:, :n]
    if C < _NARROW:
        flat = np.zeros((Co, len(offsets) * C))
        for lo in range(0, n, _BLOCK):
            hi = min(n, lo + _BLOCK)
            flat += Gn[:, lo:hi] @ _stack(X, offsets, lo, hi).T
        gw = flat.reshape(Co, len(offsets), C).transpose(1, 0, 2)
    else:
        gw = np.empty((len(offsets), Co, C))
        for t, off in enumerate(offsets):
            np.matmul(Gn, X[:, off : off + n].T, out=gw[t])
    return np.ascontiguousarray(gw.transpose(1, 2, 0)).reshape((Co, C) + kshape)


def conv_backward_input(gout: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Gradient w.r.t. the *padded* input."""
    _, unpack, scatter, _ = _LAYOUT[_backend]
    B, Co = gout.shape[:2]
    C = w.shape[1]
    padded = tuple(o + k - 1 for o, k in zip(gout.shape[2:], w.shape[2:]))
    offsets, idx, _, P = _geometry(padded, tuple(w.shape[2:]))
    G = scatter(np.ascontiguousarray(gout).reshape(B, Co, -1), idx, P)
    n = G.shape[1] - max(offsets)
    Gn = G[:, :n]
    taps_t = np.ascontiguousarray(_taps(w).transpose(0, 2, 1))
    gx = np.zeros((C, G.shape[1]))
    tmp = np.empty((C, n))
    for t, off in enumerate(offsets):
        np.matmul(taps_t[t], Gn, out=tmp)
        gx[:, off : off + n] += tmp
    return unpack(gx, B).reshape((B, C) + padded)
