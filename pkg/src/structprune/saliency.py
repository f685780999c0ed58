"""Structure saliencies: first-order terms, SOSP-H scores and the SOSP-I matrix.

SOSP-H pairs one gradient with one exact Hessian-vector product against
theta_struc.  SOSP-I builds the pairwise sensitivity matrix from a
Gauss-Newton approximation: per-sample projected vectors phi(x_n) theta_s
contracted through the loss curvature R_n in O(D) per pair.
"""
from __future__ import annotations

import json
import struct
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _accel
from .autodiff import channel_output_projections, gradient, hvp, softmax
from .data import Batch
from .errors import InputError
from .models import Network
from .structures import Segmentation, theta_struc

DEFAULT_CHUNK = 250


# ---------------------------------------------------------------------------
# loss curvature factor R_n
# ---------------------------------------------------------------------------

@dataclass
class RMatrix:
    """Per-sample curvature of the loss w.r.t. the outputs.

    ``kind == "identity"`` for squared loss; ``"softmax"`` stores the
    probabilities p and stands for diag(p) - p p^T.
    """
    kind: str
    probs: Optional[np.ndarray] = None

    def dense(self, d=None):
        if self.kind == "identity":
            return np.eye(d)
        p = self.probs
        return np.diag(p) - np.outer(p, p)


def r_matrix(output, kind) -> RMatrix:
    if kind == "squared":
        return RMatrix("identity")
    if kind == "cross_entropy":
        return RMatrix("softmax", softmax(np.asarray(output, dtype=np.float64)))
    raise InputError(f"unknown loss kind {kind!r}")


def contract_r(u, v, R: RMatrix):
    """u^T R v in O(D)."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if R.kind == "identity":
        return float(u @ v)
    p = R.probs
    # centred form sum_i p_i (u_i - <u>)(v_i - <v>): no cancellation when p saturates.
    # Dividing by sum(p) absorbs the rounding in the normalisation of p.
    tot = p.sum()
    return float(np.sum(p * (u - (u @ p) / tot) * (v - (v @ p) / tot)) / tot)


# ---------------------------------------------------------------------------
# result containers
# ---------------------------------------------------------------------------

@dataclass
class SaliencyVector:
    first_order: np.ndarray
    second_order: np.ndarray
    method: str = "sosp_h"
    total: np.ndarray = field(init=False)

    def __post_init__(self):
        self.first_order = np.asarray(self.first_order, dtype=np.float64)
        self.second_order = np.asarray(self.second_order, dtype=np.float64)
        self.total = self.first_order + self.second_order

    def __len__(self):
        return self.total.size

    def to_dict(self):
        return {"method": self.method,
                "first_order": self.first_order.tolist(),
                "second_order": self.second_order.tolist(),
                "total": self.total.tolist()}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        return cls(d["first_order"], d["second_order"], d.get("method", "sosp_h"))


@dataclass
class QMatrix:
    values: np.ndarray                 # (S, S)
    first_order: np.ndarray            # lambda_1(s), already on the diagonal of values
    method: str = "sosp_i"

    @property
    def S(self):
        return self.values.shape[0]

    def to_dict(self):
        return {"method": self.method, "S": self.S,
                "first_order": self.first_order.tolist(),
                "values": self.values.tolist()}

    def to_json(self):
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["values"], dtype=np.float64),
                   np.asarray(d["first_order"], dtype=np.float64), d.get("method", "sosp_i"))

    def save(self, path):
        write_matrix(path, self.values)


def write_matrix(path, mat):
    """Binary matrix file: uint64 S, then S*S row-major little-endian doubles."""
    mat = np.ascontiguousarray(mat, dtype="<f8")
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise InputError("expected a square matrix")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", mat.shape[0]))
        fh.write(mat.tobytes())


def read_matrix(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    (s,) = struct.unpack_from("<Q", raw, 0)
    if len(raw) != 8 + 8 * s * s:
        raise InputError(f"{path}: truncated matrix file")
    return np.frombuffer(raw, "<f8", s * s, 8).reshape(s, s).astype(np.float64)


# ---------------------------------------------------------------------------
# batched derivative helpers
# ---------------------------------------------------------------------------

def batch_gradient(net, params, batch: Batch, kind, buffers=None, chunk=DEFAULT_CHUNK):
    """Mean-loss gradient over ``batch``, accumulated chunk by chunk in order."""
    n = len(batch)
    g = np.zeros(net.P)
    for part in batch.chunks(chunk):
        g += gradient(net, params, part.inputs, part.targets, kind, buffers) * (len(part) / n)
    return g


def batch_hvp(net, params, batch: Batch, kind, v, buffers=None, chunk=DEFAULT_CHUNK):
    n = len(batch)
    h = np.zeros(net.P)
    for part in batch.chunks(chunk):
        h += hvp(net, params, part.inputs, part.targets, kind, v, buffers) * (len(part) / n)
    return h


def first_order_terms(params, grad, seg: Segmentation):
    """lambda_1(s) = |theta_s . dL/dtheta| for every structure."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise InputError("gradient and parameter vectors differ in length")
    return np.abs(seg.sparse_dots(params, grad))


def structure_projections(net: Network, params, x, seg: Segmentation, buffers=None,
                          chunk=DEFAULT_CHUNK):
    """phi(x_n) theta_s for all samples and structures -> ((N, D, S), outputs).

    Uses one reverse pass per output dimension and per-channel contractions
    of activations with their cotangents; phi(x_n) is never formed.
    """
    ops = {}
    for lay in seg.layers:
        ids = np.asarray(seg.by_layer[lay])
        ops[net.layer_main_op[lay]] = ids
        if lay in net.layer_bn_op:
            ops[net.layer_bn_op[lay]] = ids
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0]
    proj = np.zeros((n, net.output_dim, seg.S))
    outs = np.zeros((n, net.output_dim))
    for lo in range(0, n, chunk):
        part = x[lo:lo + chunk]
        res, out = channel_output_projections(net, params, part, list(ops), buffers)
        outs[lo:lo + len(part)] = out
        for op_id, ids in ops.items():
            proj[lo:lo + len(part), :, ids] += res[op_id]
    return proj, outs


def q_matrix(net: Network, params, batch: Batch, seg: Segmentation, kind, buffers=None,
             grad=None, chunk=DEFAULT_CHUNK, kernels=None, timings=None):
    """Pairwise sensitivity matrix Q.

    Q[s, t] = 1/2 |mean_n (phi_n theta_s)^T R_n (phi_n theta_t)| + lambda_1(s) [s == t].
    ``grad`` overrides the gradient used for the first-order terms.  When
    ``timings`` is a dict, the projection and accumulation phases are timed.
    """
    if len(batch) < 1:
        raise InputError("empty batch")
    kernels = kernels or _accel.kernels
    params = np.asarray(params, dtype=np.float64)
    t0 = time.perf_counter()
    if grad is None:
        grad = batch_gradient(net, params, batch, kind, buffers, chunk)
    lam1 = first_order_terms(params, grad, seg)
    proj, outs = structure_projections(net, params, batch.inputs, seg, buffers, chunk)
    probs = softmax(outs) if kind == "cross_entropy" else None
    t1 = time.perf_counter()
    gn = kernels.gn_accumulate(proj, probs) / len(batch)
    q = 0.5 * np.abs(gn)
    q[np.diag_indices_from(q)] += lam1
    if timings is not None:
        timings["projections"] = t1 - t0
        timings["accumulate"] = time.perf_counter() - t1
    return QMatrix(q, lam1)


def sosp_h_saliency(net: Network, params, batch: Batch, seg: Segmentation, kind, buffers=None,
                    chunk=DEFAULT_CHUNK, hvp_fn=None):
    """|theta_s . g| + 1/2 |theta_s . (H theta_struc)| per structure (exact Hessian)."""
    params = np.asarray(params, dtype=np.float64)
    g = batch_gradient(net, params, batch, kind, buffers, chunk)
    ts = theta_struc(params, seg)
    if hvp_fn is None:
        h = batch_hvp(net, params, batch, kind, ts, buffers, chunk)
    else:
        h = hvp_fn(ts)
    first = np.abs(seg.sparse_dots(params, g))
    second = 0.5 * np.abs(seg.sparse_dots(params, h))
    return SaliencyVector(first, second, "sosp_h")


def first_order_saliency(net: Network, params, batch: Batch, seg: Segmentation, kind,
                         buffers=None, chunk=DEFAULT_CHUNK):
    g = batch_gradient(net, params, batch, kind, buffers, chunk)
    first = first_order_terms(params, g, seg)
    return SaliencyVector(first, np.zeros_like(first), "first_order")
