"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The active implementation is picked once at import time.  Set the
environment variable ``STRUCTPRUNE_NUMBA=0`` to force the numpy path (or run
without numba installed).  Both implementations are always importable as
``NUMPY_KERNELS`` / ``NUMBA_KERNELS`` so they can be benchmarked and
cross-checked against each other.
"""
import logging
import os
import warnings
from types import SimpleNamespace

import numpy as np

log = logging.getLogger(__name__)

try:
    from numba import njit, prange

    logging.getLogger("numba").setLevel(logging.WARNING)
    warnings.filterwarnings("ignore", message="The TBB threading layer")
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _flag_enabled():
    val = os.environ.get("STRUCTPRUNE_NUMBA", "1").strip().lower()
    return val not in ("0", "false", "no", "off")


USE_NUMBA = HAVE_NUMBA and _flag_enabled()


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def _out_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def im2col_numpy(x, k, stride, pad):
    """(N, C, H, W) -> (N, C*k*k, Ho*Wo) patch matrix."""
    n, c, h, w = x.shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride][:, :, :ho, :wo]
    # (N, C, Ho, Wo, k, k) -> (N, C, k, k, Ho, Wo)
    cols = win.transpose(0, 1, 4, 5, 2, 3)
    return np.ascontiguousarray(cols).reshape(n, c * k * k, ho * wo)


def col2im_numpy(cols, shape, k, stride, pad):
    """Adjoint of :func:`im2col_numpy` (scatter-add of patches)."""
    n, c, h, w = shape
    ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def gn_accumulate_numpy(proj, probs):
    """Sum over samples of P_n^T R_n P_n for projections ``proj`` (N, D, S).

    ``probs`` is None for the identity R (squared loss) or the (N, D) softmax
    probabilities for cross-entropy, where R_n = diag(p) - p p^T.
    """
    n, d, s = proj.shape
    flat = proj.reshape(n * d, s)
    if probs is None:
        return flat.T @ flat
    # centred per sample: R_n = diag(p) - p p^T becomes C^T diag(p) C with C = proj - p^T proj
    tot = probs.sum(axis=1)        # 1 up to rounding; dividing keeps the centring exact
    u = np.einsum("nd,nds->ns", probs, proj) / tot[:, None]
    cen = proj - u[:, None, :]
    weighted = (cen * (probs / tot[:, None])[:, :, None]).reshape(n * d, s)
    return weighted.T @ cen.reshape(n * d, s)


def greedy_select_numpy(q, m, layer_of, layer_limit):
    """Incremental greedy minimisation over a pairwise cost matrix ``q``.

    Each step picks, among unpicked structures whose layer has not reached
    ``layer_limit``, the argmin of ``q[s, s] + 2 * sum_{t picked} q[s, t]``.
    Ties go to the lowest index.  Stops early when nothing is eligible;
    returns ``(order, scores)`` truncated to the number actually picked.
    """
    s = q.shape[0]
    running = np.zeros(s)
    diag = np.diag(q).copy()
    taken = np.zeros(s, dtype=bool)
    used = np.zeros(len(layer_limit), dtype=np.int64)
    order = np.empty(m, dtype=np.int64)
    scores = np.empty(m)
    count = 0
    for step in range(m):
        blocked = taken | (used[layer_of] >= layer_limit[layer_of])
        if blocked.all():
            break
        score = diag + 2.0 * running
        score[blocked] = np.inf
        best = int(np.argmin(score))
        order[step] = best
        scores[step] = score[best]
        taken[best] = True
        used[layer_of[best]] += 1
        running += q[:, best]
        count += 1
    return order[:count], scores[:count]


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _im2col_nb(x, k, stride, pad, ho, wo):
        n, c, h, w = x.shape
        cols = np.empty((n, c * k * k, ho * wo), dtype=x.dtype)
        for bc in prange(n * c):
            b = bc // c
            ch = bc - b * c
            for i in range(k):
                for j in range(k):
                    row = (ch * k + i) * k + j
                    for oy in range(ho):
                        iy = oy * stride + i - pad
                        base = oy * wo
                        if iy < 0 or iy >= h:
                            for ox in range(wo):
                                cols[b, row, base + ox] = 0.0
                            continue
                        for ox in range(wo):
                            ix = ox * stride + j - pad
                            cols[b, row, base + ox] = x[b, ch, iy, ix] if 0 <= ix < w else 0.0
        return cols

    @njit(parallel=True, cache=True)
    def _col2im_nb(cols, n, c, h, w, k, stride, pad, ho, wo):
        out = np.zeros((n, c, h, w), dtype=cols.dtype)
        for b in prange(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ch * k + i) * k + j
                        for oy in range(ho):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(wo):
                                ix = ox * stride + j - pad
                                if 0 <= ix < w:
                                    out[b, ch, iy, ix] += cols[b, row, oy * wo + ox]
        return out

    @njit(parallel=True, cache=True)
    def _gn_centre_nb(proj, probs):
        # per sample: c = proj - p^T proj / sum(p), a = c * p / sum(p); rows of both are (b, j)
        n, d, s = proj.shape
        cen = np.empty((n * d, s))
        wcen = np.empty((n * d, s))
        for b in prange(n):
            tot = 0.0
            for j in range(d):
                tot += probs[b, j]
            u = np.zeros(s)
            for j in range(d):
                pj = probs[b, j]
                for t in range(s):
                    u[t] += pj * proj[b, j, t]
            for j in range(d):
                wj = probs[b, j] / tot
                for t in range(s):
                    c = proj[b, j, t] - u[t] / tot
                    cen[b * d + j, t] = c
                    wcen[b * d + j, t] = c * wj
        return cen, wcen

    @njit(cache=True)
    def _greedy_nb(q, m, layer_of, layer_limit):
        s = q.shape[0]
        running = np.zeros(s)
        taken = np.zeros(s, dtype=np.bool_)
        used = np.zeros(layer_limit.shape[0], dtype=np.int64)
        order = np.empty(m, dtype=np.int64)
        scores = np.empty(m)
        count = 0
        for step in range(m):
            best = -1
            best_score = np.inf
            for i in range(s):
                if taken[i] or used[layer_of[i]] >= layer_limit[layer_of[i]]:
                    continue
                sc = q[i, i] + 2.0 * running[i]
                if best < 0 or sc < best_score:
                    best_score = sc
                    best = i
            if best < 0:
                break
            order[step] = best
            scores[step] = best_score
            taken[best] = True
            used[layer_of[best]] += 1
            for i in range(s):
                running[i] += q[i, best]
            count += 1
        return order[:count], scores[:count]

    def im2col_numba(x, k, stride, pad):
        n, c, h, w = x.shape
        ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
        return _im2col_nb(np.ascontiguousarray(x), k, stride, pad, ho, wo)

    def col2im_numba(cols, shape, k, stride, pad):
        n, c, h, w = shape
        ho, wo = _out_size(h, k, stride, pad), _out_size(w, k, stride, pad)
        return _col2im_nb(np.ascontiguousarray(cols), n, c, h, w, k, stride, pad, ho, wo)

    def gn_accumulate_numba(proj, probs):
        # centring is compiled; the S x S product goes to BLAS, which beats any hand loop
        proj = np.ascontiguousarray(proj, dtype=np.float64)
        n, d, s = proj.shape
        if probs is None:
            flat = proj.reshape(n * d, s)
            return flat.T @ flat
        cen, wcen = _gn_centre_nb(proj, np.ascontiguousarray(probs, dtype=np.float64))
        return wcen.T @ cen

    def greedy_select_numba(q, m, layer_of, layer_limit):
        return _greedy_nb(np.ascontiguousarray(q, dtype=np.float64), int(m),
                          np.ascontiguousarray(layer_of, dtype=np.int64),
                          np.ascontiguousarray(layer_limit, dtype=np.int64))


NUMPY_KERNELS = SimpleNamespace(
    name="numpy",
    im2col=im2col_numpy,
    col2im=col2im_numpy,
    gn_accumulate=gn_accumulate_numpy,
    greedy_select=greedy_select_numpy,
)

if HAVE_NUMBA:
    NUMBA_KERNELS = SimpleNamespace(
        name="numba",
        im2col=im2col_numba,
        col2im=col2im_numba,
        gn_accumulate=gn_accumulate_numba,
        greedy_select=greedy_select_numba,
    )
else:  # pragma: no cover
    NUMBA_KERNELS = None

kernels = NUMBA_KERNELS if USE_NUMBA else NUMPY_KERNELS


def backend_name():
    return kernels.name
