"""Applying masks: compact rebuilds, parameter/MAC counting and width transforms.

Channel survival is tracked per graph node.  A residual add keeps every
channel alive in either branch (identity skips), so the width seen by the
next layer is the size of a union of survivor sets.  Downsample paths are
never pruned and therefore keep all their channels alive.
"""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from . import _accel
from .autodiff import _conv, _pool
from .errors import InputError, StructuralError
from .models import BN_EPS, ModelSpec, Network
from .selection import PruningMask
from .structures import Segmentation

log = logging.getLogger(__name__)

CSV_COLUMNS = ("model", "method", "ratio", "exact_params", "exact_macs", "approx_params", "approx_macs")


# ---------------------------------------------------------------------------
# survivor propagation
# ---------------------------------------------------------------------------

def _full(n):
    return np.arange(n, dtype=np.int64)


def _ds_consumer(net: Network):
    """Map each downsample op (conv and bn) to the add op it feeds."""
    out = {}
    for i, op in enumerate(net.ops):
        if op.kind == "add":
            j = op.inputs[1]
            while j >= 0 and net.ops[j].layer < 0:
                out[j] = i
                j = net.ops[j].inputs[0]
    return out


def propagate_survivors(net: Network, kept: dict):
    """Exact survivor channel set of every node.

    ``kept`` maps prunable spec layer -> surviving output channels.
    """
    surv = []
    in_shape = net.input_shape

    def node(j):
        return _full(in_shape[0]) if j < 0 else surv[j]

    for i, op in enumerate(net.ops):
        if op.kind in ("conv", "dense"):
            if op.layer >= 0 and net.layer_main_op.get(op.layer) == i and op.layer in kept:
                s = np.asarray(sorted(kept[op.layer]), dtype=np.int64)
            else:
                s = _full(op.shape[0])
        elif op.kind == "add":
            s = np.union1d(node(op.inputs[0]), node(op.inputs[1]))
        elif op.kind == "flatten":
            src = node(op.inputs[0])
            shp = in_shape if op.inputs[0] < 0 else net.ops[op.inputs[0]].shape
            hw = int(np.prod(shp[1:]))
            s = (src[:, None] * hw + np.arange(hw)[None, :]).reshape(-1)
        else:
            s = node(op.inputs[0])
        surv.append(s)
    return surv


def propagate_widths_approx(net: Network, kept: dict):
    """Chain-rule widths: next layer input = previous layer output count."""
    width = []
    consumer = _ds_consumer(net)
    in_w = net.input_shape[0]

    def node(j):
        return in_w if j < 0 else width[j]

    # downsample widths depend on the add they feed, which comes later in op order
    pending = {}
    for i, op in enumerate(net.ops):
        if op.kind in ("conv", "dense"):
            if op.layer >= 0 and net.layer_main_op.get(op.layer) == i and op.layer in kept:
                w = len(kept[op.layer])
            elif i in consumer:
                w = None
                pending[i] = consumer[i]
            else:
                w = op.shape[0]
        elif op.kind == "add":
            w = node(op.inputs[0])
        elif op.kind == "flatten":
            shp = net.input_shape if op.inputs[0] < 0 else net.ops[op.inputs[0]].shape
            w = node(op.inputs[0]) * int(np.prod(shp[1:]))
        elif op.kind == "bn" and i in consumer:
            w = None
            pending[i] = consumer[i]
        else:
            w = node(op.inputs[0])
        width.append(w)
    for i, add in pending.items():
        width[i] = width[add]
    return width


# ---------------------------------------------------------------------------
# pruned architectures
# ---------------------------------------------------------------------------

@dataclass
class PrunedArch:
    net: Network
    kept: dict                      # prunable layer -> sorted surviving channels
    survivors: list = field(init=False)

    def __post_init__(self):
        prunable = set(self.net.spec.prunable_layers())
        for lay, chans in self.kept.items():
            if lay not in prunable:
                raise StructuralError(f"layer {lay} is not prunable and must keep all channels")
            width = self.net.spec.layers[lay].out
            if any(not (0 <= int(c) < width) for c in chans) or len(set(chans)) != len(chans):
                raise StructuralError(f"layer {lay}: survivor set is not a subset of its {width} channels")
        self.survivors = propagate_survivors(self.net, self.kept)

    @property
    def spec(self):
        return self.net.spec

    def layer_io(self, approx=False):
        """Per parametric op: (op id, F_in, F_out)."""
        if approx:
            w = propagate_widths_approx(self.net, self.kept)
            get = lambda j: self.net.input_shape[0] if j < 0 else w[j]  # noqa: E731
            return [(i, get(op.inputs[0]), w[i]) for i, op in enumerate(self.net.ops)
                    if op.kind in ("conv", "dense", "bn")]
        s = self.survivors
        get = lambda j: self.net.input_shape[0] if j < 0 else len(s[j])  # noqa: E731
        return [(i, get(op.inputs[0]), len(s[i])) for i, op in enumerate(self.net.ops)
                if op.kind in ("conv", "dense", "bn")]

    def to_dict(self):
        return {"model": self.spec.to_dict(),
                "survivors": {str(k): [int(c) for c in v] for k, v in sorted(self.kept.items())}}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d):
        net = Network(ModelSpec.from_dict(d["model"]))
        return cls(net, {int(k): list(v) for k, v in d["survivors"].items()})


def kept_channels(seg: Segmentation, pruned_ids):
    pruned = set(int(s) for s in pruned_ids)
    kept = {}
    for lay in seg.layers:
        kept[lay] = [seg.structures[s].channel for s in seg.by_layer[lay] if s not in pruned]
    return kept


def _check_mask(mask, seg):
    ids = mask.structures if isinstance(mask, PruningMask) else list(mask)
    for pos, s in enumerate(ids):
        if not (0 <= int(s) < seg.S):
            raise InputError(f"mask references structure {s}, which is not prunable")
        if isinstance(mask, PruningMask) and mask.layers and int(mask.layers[pos]) != seg.layer_of[int(s)]:
            raise InputError(f"mask entry {s} claims layer {mask.layers[pos]}, which holds no such structure")
    if len(set(int(s) for s in ids)) != len(ids):
        raise InputError("mask contains duplicate structures")
    return [int(s) for s in ids]


def zero_structures(params, seg: Segmentation, ids):
    """theta minus the sum of theta_s over ``ids``."""
    out = np.array(params, copy=True)
    for s in ids:
        out[seg.structures[s].indices] = 0.0
    return out


def apply_mask(net: Network, params, mask, seg: Segmentation):
    """Return (PrunedArch, zeroed parameter vector)."""
    ids = _check_mask(mask, seg)
    arch = PrunedArch(net, kept_channels(seg, ids))
    return arch, zero_structures(params, seg, ids)


class CompactNet:
    """Survivor-only rebuild of a pruned network (eval-mode forward only)."""

    def __init__(self, arch: PrunedArch, params, buffers=None):
        self.arch = arch
        net = arch.net
        params = np.asarray(params, dtype=np.float64)
        buffers = net.init_buffers() if buffers is None else np.asarray(buffers, dtype=np.float64)
        surv = arch.survivors
        self.weights = []
        for i, op in enumerate(net.ops):
            src = _full(net.input_shape[0]) if op.inputs[0] < 0 else surv[op.inputs[0]]
            out = surv[i]
            entry = {}
            if op.kind in ("conv", "dense"):
                blk = op.params["weight"]
                w = params[net.block_slice(blk)].reshape(blk.shape)
                entry["weight"] = np.ascontiguousarray(w[out][:, src])
                if "bias" in op.params:
                    entry["bias"] = params[net.block_slice(op.params["bias"])][out]
            elif op.kind == "bn":
                for role in ("bn_weight", "bn_bias"):
                    entry[role] = params[net.block_slice(op.params[role])][out]
                for name in ("mean", "var"):
                    off, size = op.buffers[name]
                    entry[name] = buffers[off:off + size][out]
            elif op.kind == "add":
                u = out
                entry["pos"] = [np.searchsorted(u, surv[j]) for j in op.inputs]
            self.weights.append(entry)

    def n_params(self):
        total = 0
        for i, e in enumerate(self.weights):
            for k in ("weight", "bias", "bn_weight", "bn_bias"):
                if k in e:
                    total += e[k].size
        return total

    def forward(self, x):
        net = self.arch.net
        x = np.asarray(x, dtype=np.float64)
        vals = []
        n = x.shape[0]
        for i, op in enumerate(net.ops):
            e = self.weights[i]
            a = x if op.inputs[0] < 0 else vals[op.inputs[0]]
            if op.kind == "dense":
                y = a @ e["weight"].T
                if "bias" in e:
                    y = y + e["bias"]
            elif op.kind == "conv":
                cols = _accel.kernels.im2col(np.ascontiguousarray(a), op.kernel, op.stride, op.padding)
                y = _conv(cols, e["weight"], (e["weight"].shape[0],) + op.shape[1:], n)
                if "bias" in e:
                    y = y + e["bias"][None, :, None, None]
            elif op.kind == "bn":
                shp = (1, -1) + (1,) * (a.ndim - 2)
                s = np.sqrt(e["var"] + BN_EPS)
                y = (a - e["mean"].reshape(shp)) / s.reshape(shp) * e["bn_weight"].reshape(shp) \
                    + e["bn_bias"].reshape(shp)
            elif op.kind == "relu":
                y = np.maximum(a, 0.0)
            elif op.kind == "avgpool":
                y = _pool(a, op.kernel)
            elif op.kind == "gap":
                y = a.mean(axis=(2, 3))
            elif op.kind == "flatten":
                y = a.reshape(n, -1)
            elif op.kind == "add":
                u = self.arch.survivors[i]
                y = np.zeros((n, len(u)) + a.shape[2:])
                for j, pos in zip(op.inputs, e["pos"]):
                    y[:, pos] += vals[j]
            vals.append(y)
        return vals[-1]


# ---------------------------------------------------------------------------
# counting
# ---------------------------------------------------------------------------

@dataclass
class CountReport:
    exact_params: int
    exact_macs: int
    approx_params: int
    approx_macs: int
    per_layer: list = field(default_factory=list)

    def to_dict(self):
        return {"exact_params": self.exact_params, "exact_macs": self.exact_macs,
                "approx_params": self.approx_params, "approx_macs": self.approx_macs,
                "per_layer": self.per_layer}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def csv_row(self, model, method, ratio):
        return [model, method, ratio, self.exact_params, self.exact_macs,
                self.approx_params, self.approx_macs]

    def to_csv(self, model, method, ratio, header=True):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(CSV_COLUMNS)
        w.writerow(self.csv_row(model, method, ratio))
        return buf.getvalue()


def _op_counts(net: Network, io_list):
    rows = []
    for i, f_in, f_out in io_list:
        op = net.ops[i]
        if op.kind == "conv":
            k2 = op.kernel * op.kernel
            params = f_in * f_out * k2 + (f_out if "bias" in op.params else 0)
            macs = f_in * f_out * k2 * op.shape[1] * op.shape[2]
        elif op.kind == "dense":
            params = f_in * f_out + (f_out if "bias" in op.params else 0)
            macs = f_in * f_out
        else:  # bn: scale and shift per channel, no MACs counted
            params = 2 * f_out
            macs = 0
        rows.append({"op": i, "kind": op.kind, "layer": op.layer, "f_in": int(f_in),
                     "f_out": int(f_out), "params": int(params), "macs": int(macs)})
    return rows


def count_exact(arch: PrunedArch):
    rows = _op_counts(arch.net, arch.layer_io(approx=False))
    return sum(r["params"] for r in rows), sum(r["macs"] for r in rows), rows


def count_approx(arch: PrunedArch):
    rows = _op_counts(arch.net, arch.layer_io(approx=True))
    return sum(r["params"] for r in rows), sum(r["macs"] for r in rows), rows


def count_report(arch: PrunedArch) -> CountReport:
    ep, em, erows = count_exact(arch)
    ap, am, arows = count_approx(arch)
    per = []
    for e, a in zip(erows, arows):
        per.append(dict(e, approx_f_in=a["f_in"], approx_f_out=a["f_out"],
                        approx_params=a["params"], approx_macs=a["macs"]))
    return CountReport(ep, em, ap, am, per)


def unpruned_counts(net: Network):
    arch = PrunedArch(net, {})
    p, m, _ = count_exact(arch)
    return p, m


# ---------------------------------------------------------------------------
# layer ratios and bottlenecks
# ---------------------------------------------------------------------------

@dataclass
class LayerRatioHistogram:
    layers: list
    pruned: list
    totals: list
    blocks: list = field(default_factory=list)

    @property
    def ratios(self):
        return [p / t for p, t in zip(self.pruned, self.totals)]

    def to_rows(self):
        rows = []
        for i, lay in enumerate(self.layers):
            rows.append({"layer": lay, "block": self.blocks[i] if self.blocks else None,
                         "pruned": self.pruned[i], "total": self.totals[i],
                         "ratio": self.pruned[i] / self.totals[i]})
        return rows

    def to_dict(self):
        return {"layers": self.layers, "pruned": self.pruned, "totals": self.totals,
                "blocks": self.blocks}

    @classmethod
    def from_dict(cls, d):
        return cls(d["layers"], d["pruned"], d["totals"], d.get("blocks", []))


def layer_ratios(mask, seg: Segmentation) -> LayerRatioHistogram:
    ids = mask.structures if isinstance(mask, PruningMask) else list(mask)
    counts = {lay: 0 for lay in seg.layers}
    for s in ids:
        counts[int(seg.layer_of[s])] += 1
    spec = seg.net.spec
    return LayerRatioHistogram(list(seg.layers), [counts[lay] for lay in seg.layers],
                               [len(seg.by_layer[lay]) for lay in seg.layers],
                               [spec.layers[lay].block for lay in seg.layers])


def detect_bottlenecks(hist: LayerRatioHistogram, threshold_fraction=0.5, by_block=None):
    """Units whose pruning ratio is below ``threshold_fraction`` x median ratio.

    Aggregates per residual block when ``by_block`` is true (default: when
    the histogram carries block labels).
    """
    if not (0.0 < threshold_fraction < 1.0):
        raise InputError("threshold_fraction must lie in (0, 1)")
    if by_block is None:
        by_block = bool(hist.blocks) and all(b is not None for b in hist.blocks)
    if by_block:
        agg = {}
        for b, p, t in zip(hist.blocks, hist.pruned, hist.totals):
            ap, at = agg.get(b, (0, 0))
            agg[b] = (ap + p, at + t)
        units = sorted(agg)
        ratios = np.array([agg[b][0] / agg[b][1] for b in units])
    else:
        units = list(hist.layers)
        ratios = np.array(hist.ratios)
    if ratios.size == 0:
        return set()
    med = float(np.median(ratios))
    return {u for u, r in zip(units, ratios) if r < threshold_fraction * med}


# ---------------------------------------------------------------------------
# width transforms
# ---------------------------------------------------------------------------

def _scaled(width, multiplier):
    if multiplier == 1:
        return width
    return max(int(np.floor(width * multiplier + 0.5)), width + 1)


def expand(spec: ModelSpec, targets, multiplier=2.0, blocks=False) -> ModelSpec:
    """Multiply the width of target layers (or residual blocks)."""
    if multiplier < 1:
        raise InputError("multiplier must be >= 1")
    new = spec.copy()
    if multiplier == 1:
        return new
    prunable = set(spec.prunable_layers())
    if blocks:
        tset = set(targets)
        layer_ids = [i for i in prunable if spec.layers[i].block in tset]
    else:
        layer_ids = list(targets)
    for i in layer_ids:
        if i not in prunable:
            raise InputError(f"layer {i} is not a prunable layer")
        new.layers[i].out = _scaled(spec.layers[i].out, multiplier)
    new.name = f"{spec.name}_x{multiplier:g}"
    try:
        Network(new)
    except StructuralError as exc:
        raise StructuralError(f"{exc}; expand the whole residual block instead of single layers "
                              "(pass blocks=True)") from exc
    return new


def _uniform(spec: ModelSpec, multiplier):
    new = spec.copy()
    for i in spec.prunable_layers():
        new.layers[i].out = max(1, int(np.floor(spec.layers[i].out * multiplier + 0.5)))
    new.name = f"{spec.name}_w{multiplier:.4g}"
    return new


def param_count(spec: ModelSpec):
    return Network(spec).P


def widen_uniform(spec: ModelSpec, target_param_count):
    """Single width multiplier for every prunable layer matching a parameter budget.

    Returns ``(new_spec, multiplier)``.  Widths are ``round(w * m)``; the
    search runs over the breakpoints of that step function, so the achieved
    count is the closest possible (lower count wins exact ties).
    """
    base = param_count(spec)
    if target_param_count < base:
        raise InputError(f"target {target_param_count} below the original count {base}")
    widths = [spec.layers[i].out for i in spec.prunable_layers()]
    hi = 2.0
    while param_count(_uniform(spec, hi)) < target_param_count:
        hi *= 2
    cands = {1.0}
    for w in widths:
        k = np.arange(np.floor(w * 1.0), np.ceil(w * hi) + 1)
        m = (k + 0.5) / w
        cands.update(float(v) for v in m[(m > 1.0) & (m <= hi)])
    cands = np.array(sorted(cands))
    counts = {}

    def count_at(idx):
        if idx not in counts:
            counts[idx] = param_count(_uniform(spec, cands[idx]))
        return counts[idx]

    lo_i, hi_i = 0, len(cands) - 1
    # first breakpoint whose count reaches the target
    while lo_i < hi_i:
        mid = (lo_i + hi_i) // 2
        if count_at(mid) >= target_param_count:
            hi_i = mid
        else:
            lo_i = mid + 1
    best = lo_i
    if best > 0 and abs(count_at(best - 1) - target_param_count) <= abs(count_at(best) - target_param_count):
        best -= 1
    # smallest multiplier giving that count
    c = count_at(best)
    while best > 0 and count_at(best - 1) == c:
        best -= 1
    mult = float(cands[best])
    return _uniform(spec, mult), mult
