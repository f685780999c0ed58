"""Segmentation of a network's parameters into prunable structures."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _accel
from .autodiff import _conv, _pool, run_forward
from .errors import ConfigurationError, StructureIndexError, UnsupportedModelError
from .models import Network


@dataclass(frozen=True)
class Structure:
    id: int
    layer: int          # spec layer index
    channel: int        # output channel / neuron index in that layer
    indices: np.ndarray  # owned parameter indices, strictly increasing
    kernel: int = 1     # linear kernel size (1 for dense layers)


@dataclass
class SparseParamVector:
    indices: np.ndarray
    values: np.ndarray
    size: int

    def to_dense(self):
        out = np.zeros(self.size, dtype=self.values.dtype if self.values.size else np.float64)
        out[self.indices] = self.values
        return out

    def norm(self, ord=2):
        return float(np.linalg.norm(self.values, ord))


class Segmentation:
    """Immutable list of structures plus fast lookup tables.

    Structure ids are 0-based and ordered by (layer, channel).
    """

    def __init__(self, net: Network, structures):
        self.net = net
        self.structures = tuple(structures)
        self.S = len(self.structures)
        self.layer_of = np.array([s.layer for s in self.structures], dtype=np.int64)
        self.channel_of = np.array([s.channel for s in self.structures], dtype=np.int64)
        self.kernel_of = np.array([s.kernel for s in self.structures], dtype=np.float64)
        self.layers = sorted(set(self.layer_of.tolist()))
        self.by_layer = {lay: [s.id for s in self.structures if s.layer == lay] for lay in self.layers}
        sizes = [s.indices.size for s in self.structures]
        self.ptr = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self.flat_indices = (np.concatenate([s.indices for s in self.structures])
                             if self.structures else np.zeros(0, dtype=np.int64))
        self.owner = np.full(net.P, -1, dtype=np.int64)
        for s in self.structures:
            self.owner[s.indices] = s.id
        self.ids_of_flat = np.repeat(np.arange(self.S), sizes)

    def __len__(self):
        return self.S

    def __getitem__(self, s):
        return self.structures[s]

    def owned_mask(self):
        return self.owner >= 0

    def layer_sizes(self):
        return {lay: len(ids) for lay, ids in self.by_layer.items()}

    def sparse_dots(self, theta, vec):
        """theta_s . vec for every structure, via the owned-index table."""
        prod = theta[self.flat_indices] * vec[self.flat_indices]
        return np.add.reduceat(prod, self.ptr[:-1]) if self.S else np.zeros(0)

    def check(self, s):
        if not (0 <= int(s) < self.S):
            raise StructureIndexError(f"unknown structure id {s} (have {self.S})")
        return int(s)


def segment(model) -> Segmentation:
    """One structure per output channel / neuron of each prunable layer.

    Each structure owns its incoming weights, its bias entry and its
    batch-norm scale/shift.  The classifier and downsample paths own nothing.
    """
    net = model if isinstance(model, Network) else Network(model)
    spec = net.spec
    layers = spec.prunable_layers()
    if not layers:
        raise ConfigurationError(f"model {spec.name!r} has no prunable layers")
    structures = []
    for lay in layers:
        main = net.ops[net.layer_main_op[lay]]
        wblk = main.params["weight"]
        row = int(np.prod(wblk.shape[1:]))
        extra = [main.params.get("bias")]
        if lay in net.layer_bn_op:
            bn = net.ops[net.layer_bn_op[lay]]
            extra += [bn.params["bn_weight"], bn.params["bn_bias"]]
        kern = main.kernel if main.kind == "conv" else 1
        for c in range(wblk.shape[0]):
            idx = [wblk.offset + c * row + np.arange(row)]
            idx += [np.array([blk.offset + c]) for blk in extra if blk is not None]
            idx = np.sort(np.concatenate(idx)).astype(np.int64)
            structures.append(Structure(len(structures), lay, c, idx, kern))
    return Segmentation(net, structures)


def extract_theta_s(params, seg: Segmentation, s) -> SparseParamVector:
    s = seg.check(s)
    idx = seg.structures[s].indices
    return SparseParamVector(idx.copy(), np.asarray(params)[idx].copy(), len(params))


def theta_struc(params, seg: Segmentation):
    """Sum of all structure vectors: params on owned indices, zero elsewhere."""
    params = np.asarray(params)
    out = np.zeros_like(params)
    mask = seg.owned_mask()
    out[mask] = params[mask]
    return out


def masked_forward_single_structure(net: Network, params, seg: Segmentation, s, x):
    """f_{theta^s}(x) with the original network's ReLU gating held fixed.

    theta^s keeps every layer except the one containing ``s``, where all
    channels other than ``s`` are zeroed.  Only defined for bias-free,
    batch-norm-free feed-forward ReLU networks.
    """
    s = seg.check(s)
    params = np.asarray(params, dtype=np.float64)
    if net.has_batchnorm():
        raise UnsupportedModelError("output-correlation identity needs a model without batch norm")
    if net.spec.residuals:
        raise UnsupportedModelError("output-correlation identity is defined for feed-forward models")
    for blk in net.layout:
        if blk.role == "bias" and np.any(params[net.block_slice(blk)]):
            raise UnsupportedModelError("output-correlation identity needs zero biases")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == len(net.input_shape)
    if single:
        x = x[None]
    st = seg.structures[s]
    tr = run_forward(net, params, x)
    target = net.layer_main_op[st.layer]
    theta_s = np.zeros_like(params)
    keep = st.indices
    blk = net.ops[target].params["weight"]
    lo, hi = blk.offset, blk.offset + blk.size
    theta_s[lo:hi] = 0.0
    theta_s[keep] = params[keep]
    n = x.shape[0]

    h = None
    for i, op in enumerate(net.ops):
        if i < target:
            continue
        if i == target:
            a = x if op.inputs[0] < 0 else tr.vals[op.inputs[0]]
            w = theta_s[lo:hi].reshape(blk.shape)
            if op.kind == "dense":
                h = a @ w.T
            else:
                cols = _accel.kernels.im2col(a, op.kernel, op.stride, op.padding)
                h = _conv(cols, w, op.shape, n)
            continue
        if op.kind in ("dense", "conv"):
            w = params[op.params["weight"].offset:op.params["weight"].offset
                       + op.params["weight"].size].reshape(op.params["weight"].shape)
            if op.kind == "dense":
                h = h @ w.T
            else:
                cols = _accel.kernels.im2col(h, op.kernel, op.stride, op.padding)
                h = _conv(cols, w, op.shape, n)
        elif op.kind == "relu":
            h = h * tr.caches[i]
        elif op.kind == "avgpool":
            h = _pool(h, op.kernel)
        elif op.kind == "gap":
            h = h.mean(axis=(2, 3))
        elif op.kind == "flatten":
            h = h.reshape(n, -1)
        else:  # pragma: no cover - excluded above
            raise UnsupportedModelError(op.kind)
    return h[0] if single else h
