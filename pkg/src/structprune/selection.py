"""Turning saliencies into pruning masks."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _accel
from .errors import ConfigurationError, InputError
from .saliency import QMatrix, SaliencyVector
from .structures import Segmentation

log = logging.getLogger(__name__)

METHODS = ("sosp_h", "sosp_i", "first_order", "sosp_i_diag", "random")


@dataclass
class SelectionPolicy:
    method: str = "sosp_h"
    kernel_scaling: bool = False
    layer_cap: Optional[float] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown selection method {self.method!r}")
        if self.layer_cap is not None and not (0.0 < self.layer_cap <= 1.0):
            raise ConfigurationError("layer_cap must lie in (0, 1]")


@dataclass
class PruningMask:
    method: str
    ratio: float
    structures: list            # selection order
    scores: list
    layers: list
    seed: Optional[int] = None
    requested: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.structures)

    def __contains__(self, s):
        return s in set(self.structures)

    @property
    def shortfall(self):
        return self.requested - len(self.structures)

    def ids(self):
        return np.asarray(self.structures, dtype=np.int64)

    def to_dict(self):
        return {
            "method": self.method,
            "ratio": self.ratio,
            "seed": self.seed,
            "entries": [{"structure": int(s), "layer": int(lay), "score": float(sc)}
                        for s, lay, sc in zip(self.structures, self.layers, self.scores)],
            "requested": self.requested,
            "meta": self.meta,
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d):
        ent = d["entries"]
        return cls(d["method"], d["ratio"], [e["structure"] for e in ent], [e["score"] for e in ent],
                   [e["layer"] for e in ent], d.get("seed"), d.get("requested", len(ent)),
                   d.get("meta", {}))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def target_count(ratio, S):
    """round(ratio * S), halves rounded up."""
    if not (0.0 <= ratio <= 1.0):
        raise InputError(f"pruning ratio {ratio} outside [0, 1]")
    return int(np.floor(ratio * S + 0.5))


def layer_limits(seg: Segmentation, cap):
    """Max number of prunable structures per layer, as an array over layer rank."""
    limits = []
    for lay in seg.layers:
        n = len(seg.by_layer[lay])
        limits.append(n if cap is None else int(np.floor(cap * n + 1e-9)))
    return np.asarray(limits, dtype=np.int64)


def _layer_rank(seg):
    rank = {lay: r for r, lay in enumerate(seg.layers)}
    return np.asarray([rank[lay] for lay in seg.layer_of], dtype=np.int64)


def _finish(method, ratio, order, scores, seg, m, seed=None, policy=None):
    order = [int(s) for s in order]
    mask = PruningMask(method, float(ratio), order, [float(x) for x in scores],
                       [int(seg.layer_of[s]) for s in order], seed, m)
    if policy is not None:
        mask.meta["kernel_scaling"] = policy.kernel_scaling
        mask.meta["layer_cap"] = policy.layer_cap
    if mask.shortfall:
        mask.meta["shortfall"] = mask.shortfall
        log.warning("layer caps left %d of %d requested structures unpruned", mask.shortfall, m)
    counts = np.bincount(_layer_rank(seg)[order], minlength=len(seg.layers)) if order else []
    collapsed = [lay for lay, c in zip(seg.layers, counts) if c == len(seg.by_layer[lay])]
    if collapsed:
        mask.meta["collapsed_layers"] = collapsed
        log.warning("mask removes every structure of layer(s) %s", collapsed)
    return mask


def _sorted_select(scores, seg, policy, ratio, method, seed=None):
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (seg.S,):
        raise InputError(f"expected {seg.S} scores, got {scores.shape}")
    if policy.kernel_scaling:
        scores = scores / seg.kernel_of
    m = target_count(ratio, seg.S)
    order = np.argsort(scores, kind="stable")
    rank = _layer_rank(seg)
    limits = layer_limits(seg, policy.layer_cap)
    used = np.zeros_like(limits)
    picked = []
    for s in order:
        if len(picked) == m:
            break
        r = rank[s]
        if used[r] >= limits[r]:
            continue
        used[r] += 1
        picked.append(s)
    return _finish(method, ratio, picked, scores[picked], seg, m, seed, policy)


def select_sosp_h(sal, seg: Segmentation, policy: SelectionPolicy, ratio):
    """Prune the structures with the smallest total saliency."""
    total = sal.total if isinstance(sal, SaliencyVector) else sal
    return _sorted_select(total, seg, policy, ratio, "sosp_h")


def select_first_order(first, seg: Segmentation, policy: SelectionPolicy, ratio):
    """Sort by |theta_s . g| alone (SOSP-H/SOSP-I with the Hessian set to zero)."""
    if isinstance(first, SaliencyVector):
        first = first.first_order
    elif isinstance(first, QMatrix):
        first = first.first_order
    return _sorted_select(first, seg, policy, ratio, "first_order")


def select_sosp_i_diag(q, seg: Segmentation, policy: SelectionPolicy, ratio):
    """Sort by the diagonal of Q, ignoring cross-structure correlations."""
    vals = q.values if isinstance(q, QMatrix) else np.asarray(q)
    return _sorted_select(np.diag(vals).copy(), seg, policy, ratio, "sosp_i_diag")


def select_sosp_i(q, seg: Segmentation, policy: SelectionPolicy, ratio, kernels=None):
    """Greedy minimisation of the pairwise objective with running column sums."""
    kernels = kernels or _accel.kernels
    vals = q.values if isinstance(q, QMatrix) else np.asarray(q, dtype=np.float64)
    if vals.shape != (seg.S, seg.S):
        raise InputError(f"Q must be {seg.S}x{seg.S}")
    if policy.kernel_scaling:
        vals = vals / seg.kernel_of[:, None]
    m = target_count(ratio, seg.S)
    order, scores = kernels.greedy_select(vals, m, _layer_rank(seg), layer_limits(seg, policy.layer_cap))
    return _finish("sosp_i", ratio, order, scores, seg, m, None, policy)


def select_random(seg: Segmentation, ratio, seed, policy: Optional[SelectionPolicy] = None):
    policy = policy or SelectionPolicy("random")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(seg.S)
    # rank by position in the permutation, then reuse the capped sorted walk
    pos = np.empty(seg.S)
    pos[perm] = np.arange(seg.S)
    mask = _sorted_select(pos, seg, SelectionPolicy("random", False, policy.layer_cap), ratio, "random", seed)
    mask.scores = [0.0] * len(mask)
    return mask


def shuffle_within_layers(mask: PruningMask, seg: Segmentation, seed):
    """Keep per-layer pruned counts, resample which structures in each layer."""
    rng = np.random.default_rng(seed)
    counts = {}
    for s in mask.structures:
        lay = int(seg.layer_of[s])
        counts[lay] = counts.get(lay, 0) + 1
    picked = []
    for lay in seg.layers:
        k = counts.get(lay, 0)
        if k:
            ids = np.asarray(seg.by_layer[lay])
            picked.extend(sorted(rng.choice(ids, size=k, replace=False).tolist()))
    out = PruningMask(mask.method + "_shuffled", mask.ratio, picked, [0.0] * len(picked),
                      [int(seg.layer_of[s]) for s in picked], seed, mask.requested,
                      dict(mask.meta, shuffled_from=mask.method))
    return out


def select(policy: SelectionPolicy, seg: Segmentation, ratio, saliency=None, q=None, seed=None):
    """Dispatch on ``policy.method``."""
    meth = policy.method
    if meth == "sosp_h":
        return select_sosp_h(saliency, seg, policy, ratio)
    if meth == "first_order":
        return select_first_order(saliency if saliency is not None else q, seg, policy, ratio)
    if meth == "sosp_i":
        return select_sosp_i(q, seg, policy, ratio)
    if meth == "sosp_i_diag":
        return select_sosp_i_diag(q, seg, policy, ratio)
    return select_random(seg, ratio, seed, policy)
