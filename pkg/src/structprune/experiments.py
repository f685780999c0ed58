"""Pipelines: train, prune + fine-tune, prune at init, expand-prune, timing, report."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import _accel
from .arch import (apply_mask, CompactNet, count_report, detect_bottlenecks, expand, layer_ratios,
                   LayerRatioHistogram, widen_uniform)
from .data import Batch, linear_blobs, load_image_set, subsample, synthetic_images
from .errors import ConfigurationError, DataError, InputError
from .models import build, load_checkpoint, mlp_toy, Network, save_checkpoint
from .saliency import first_order_saliency, q_matrix, sosp_h_saliency
from .selection import PruningMask, select, SelectionPolicy
from .structures import segment
from .training import evaluate, train as sgd_train, TrainConfig

log = logging.getLogger(__name__)

# layer cap applied when the config leaves it unset (VGG-style models)
LAYER_CAP_PRESETS = {"convnet_toy": 0.95, "convnet_bottleneck": 0.95}

# fields that never influence results and stay out of the config hash
_HASH_EXCLUDE = ("out_dir", "workers")


@dataclass
class ExperimentConfig:
    model: str = "convnet_toy"
    model_kwargs: dict = field(default_factory=dict)
    dataset: dict = field(default_factory=lambda: {"kind": "synthetic", "n_train": 2000, "n_test": 1000,
                                                   "shape": [3, 16, 16], "classes": 10, "noise": 1.0})
    loss: str = "cross_entropy"
    train: dict = field(default_factory=dict)          # TrainConfig overrides
    finetune_epochs: Optional[int] = None             # None: repeat the training schedule
    method: str = "sosp_h"
    kernel_scaling: bool = False
    layer_cap: Optional[float] = None
    ratios: list = field(default_factory=lambda: [0.5])
    n_prime: int = 1000
    seeds: list = field(default_factory=lambda: [0])
    bottleneck_threshold: float = 0.5
    expand_multiplier: float = 2.0
    sosp_i_max_structures: int = 4096
    out_dir: str = "runs"
    workers: int = 1

    def __post_init__(self):
        for r in self.ratios:
            if not (0.0 <= r < 1.0):
                raise ConfigurationError(f"pruning ratio {r} outside [0, 1)")
        if self.n_prime < 1:
            raise ConfigurationError("n_prime must be >= 1")
        if not self.seeds:
            raise ConfigurationError("at least one seed is required")
        if self.finetune_epochs is not None and self.finetune_epochs < 0:
            raise ConfigurationError("finetune_epochs must be >= 0")
        self.policy()
        self.train_config()

    def resolved_cap(self):
        return self.layer_cap if self.layer_cap is not None else LAYER_CAP_PRESETS.get(self.model)

    def policy(self):
        return SelectionPolicy(self.method, self.kernel_scaling, self.resolved_cap())

    def train_config(self, epochs=None):
        kw = dict(self.train)
        if epochs is not None:
            kw["epochs"] = epochs
        return TrainConfig(**kw)

    def ft_epochs(self):
        return self.train_config().epochs if self.finetune_epochs is None else self.finetune_epochs

    def ft_config(self):
        """Fine-tuning schedule, or None when fine-tuning is disabled."""
        ep = self.ft_epochs()
        return self.train_config(ep) if ep else None

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), sort_keys=True, **kw)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        bad = set(d) - known
        if bad:
            raise ConfigurationError(f"unknown config fields: {sorted(bad)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                return cls.from_dict(json.load(fh))
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return ExperimentConfig.from_dict(d)

    def hash(self):
        d = self.to_dict()
        for k in _HASH_EXCLUDE:
            d.pop(k, None)
        # resolved training schedule so that defaults are covered too
        d["train"] = self.train_config().to_dict()
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    config_hash: str
    pipeline: str
    model: str
    method: str
    ratio: float
    seed: int
    acc_unpruned: float = float("nan")
    acc_before_ft: float = float("nan")
    acc_after_ft: float = float("nan")
    best_acc_ft: float = float("nan")
    train_history: list = field(default_factory=list)
    ft_history: list = field(default_factory=list)
    mask: dict = field(default_factory=dict)
    layer_ratios: dict = field(default_factory=dict)
    counts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict) or "pipeline" not in d or "mask" not in d:
            raise DataError("not a run record (expected a JSON object with pipeline and mask fields)")
        try:
            return cls(**d)
        except TypeError as exc:
            raise DataError(f"malformed run record: {exc}") from None

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as fh:
            fh.write(self.to_json(indent=1))

    @classmethod
    def load(cls, path):
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: not valid JSON ({exc})") from None
        try:
            return cls.from_dict(raw)
        except DataError as exc:
            raise DataError(f"{path}: {exc}") from None

    def comparable(self):
        """Everything except wall-clock fields."""
        d = self.to_dict()
        d.pop("timings")
        return d


# ---------------------------------------------------------------------------
# data and models
# ---------------------------------------------------------------------------

def load_data(cfg: ExperimentConfig):
    ds = dict(cfg.dataset)
    kind = ds.get("kind", "synthetic")
    if kind == "synthetic":
        shape = tuple(ds.get("shape", (3, 16, 16)))
        kw = {"classes": ds.get("classes", 10), "noise": ds.get("noise", 1.0),
              "proto_seed": ds.get("proto_seed", 1234)}
        tr = synthetic_images(ds.get("n_train", 2000), shape, seed=ds.get("seed_train", 0), **kw)
        te = synthetic_images(ds.get("n_test", 1000), shape, seed=ds.get("seed_test", 1), **kw)
        return tr, te
    if kind == "blobs":
        d = ds.get("d", 8)
        kw = {"classes": ds.get("classes", 2), "margin": ds.get("margin", 3.0)}
        # same centres for both splits: the split differs only in the sample seed
        allb = linear_blobs(ds.get("n_train", 500) + ds.get("n_test", 200), d, seed=ds.get("seed_train", 0), **kw)
        n = ds.get("n_train", 500)
        return allb.take(slice(0, n)), allb.take(slice(n, None))
    if kind == "file":
        tr = load_image_set(ds["train"])
        te = load_image_set(ds["test"]) if ds.get("test") else tr
        return tr, te
    raise ConfigurationError(f"unknown dataset kind {kind!r}")


def model_spec(cfg: ExperimentConfig, train_data: Batch | None = None):
    kw = dict(cfg.model_kwargs)
    if train_data is not None:
        shape = tuple(train_data.inputs.shape[1:])
        if cfg.model == "mlp_toy":
            kw.setdefault("d", int(np.prod(shape)))
        else:
            kw.setdefault("input_shape", shape)
        if cfg.loss == "cross_entropy":
            kw.setdefault("D", int(train_data.targets.max()) + 1)
    return build(cfg.model, **kw)


def _flatten_for(net: Network, batch: Batch):
    if batch.inputs.ndim - 1 != len(net.input_shape):
        return Batch(batch.inputs.reshape(len(batch), -1), batch.targets)
    return batch


@dataclass
class Trained:
    net: Network
    params: np.ndarray
    buffers: np.ndarray
    history: list


def train_model(cfg: ExperimentConfig, seed, spec=None, data=None) -> Trained:
    tr, te = data if data is not None else load_data(cfg)
    spec = spec or model_spec(cfg, tr)
    net = Network(spec)
    tr, te = _flatten_for(net, tr), _flatten_for(net, te)
    res = sgd_train(net, net.init_params(seed), net.init_buffers(), tr, cfg.train_config(), seed=seed,
                    kind=cfg.loss, test=te)
    return Trained(net, res.params, res.buffers, res.history)


def train(cfg: ExperimentConfig, seed=None, path=None) -> Trained:
    """Train one model and write its checkpoint to ``path`` (if given)."""
    seed = cfg.seeds[0] if seed is None else seed
    out = train_model(cfg, seed)
    if path is not None:
        save_checkpoint(path, out.net, out.params, out.buffers)
    return out


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------

def compute_mask(net, params, buffers, data: Batch, cfg: ExperimentConfig, ratio, seed, method=None):
    """Subsample, saliency and selection -> (mask, timings)."""
    policy = cfg.policy() if method is None else SelectionPolicy(method, cfg.kernel_scaling, cfg.resolved_cap())
    seg = segment(net)
    if policy.method in ("sosp_i", "sosp_i_diag") and seg.S > cfg.sosp_i_max_structures:
        raise ConfigurationError(f"{policy.method} needs an {seg.S}x{seg.S} matrix; the configured "
                                 f"limit is {cfg.sosp_i_max_structures} structures")
    n_prime = min(cfg.n_prime, len(data))
    sub = subsample(data, n_prime, seed)
    timings = {}
    sal = q = None
    t0 = time.perf_counter()
    if policy.method == "sosp_h":
        sal = sosp_h_saliency(net, params, sub, seg, cfg.loss, buffers)
    elif policy.method == "first_order":
        sal = first_order_saliency(net, params, sub, seg, cfg.loss, buffers)
    elif policy.method in ("sosp_i", "sosp_i_diag"):
        q = q_matrix(net, params, sub, seg, cfg.loss, buffers, timings=timings)
    t1 = time.perf_counter()
    mask = select(policy, seg, ratio, saliency=sal, q=q, seed=seed)
    t2 = time.perf_counter()
    if q is not None:
        # the pairwise accumulation belongs to the selection phase
        timings["saliency"] = timings["projections"]
        timings["selection"] = timings["accumulate"] + (t2 - t1)
    else:
        timings["saliency"] = t1 - t0
        timings["selection"] = t2 - t1
    timings["total"] = timings["saliency"] + timings["selection"]
    return mask, seg, timings


def _zero_indices(seg, mask: PruningMask):
    if not len(mask):
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([seg.structures[s].indices for s in mask.structures])


def prune_pipeline(cfg: ExperimentConfig, trained: Trained, seed, ratio, method=None, data=None,
                   record_compact=True) -> RunRecord:
    """Saliency -> mask -> apply -> evaluate -> masked fine-tune -> evaluate -> count."""
    tr, te = data if data is not None else load_data(cfg)
    net = trained.net
    tr, te = _flatten_for(net, tr), _flatten_for(net, te)
    method = method or cfg.method
    acc0 = evaluate(net, trained.params, trained.buffers, te, cfg.loss)[1]
    mask, seg, timings = compute_mask(net, trained.params, trained.buffers, tr, cfg, ratio, seed, method)
    arch, pz = apply_mask(net, trained.params, mask, seg)
    acc_b = evaluate(net, pz, trained.buffers, te, cfg.loss)[1]
    meta = {"S": seg.S, "P": net.P, "backend": _accel.backend_name()}
    if record_compact:
        out = CompactNet(arch, pz, trained.buffers).forward(te.inputs)
        meta["acc_compact"] = float(np.mean(out.argmax(axis=1) == te.targets)) if cfg.loss == "cross_entropy" \
            else float("nan")
    counts = count_report(arch)
    ft_cfg = cfg.ft_config()
    ft_hist = []
    params, buffers = pz, trained.buffers
    if ft_cfg is not None and len(mask) < seg.S:
        res = sgd_train(net, pz, trained.buffers, tr, ft_cfg, seed=seed, kind=cfg.loss,
                        zero_idx=_zero_indices(seg, mask), test=te, epoch_offset=10_000)
        params, buffers, ft_hist = res.params, res.buffers, res.history
    acc_a = evaluate(net, params, buffers, te, cfg.loss)[1]
    best = max([h["test_acc"] for h in ft_hist], default=acc_a)
    meta["counts_after_ft"] = count_report(apply_mask(net, params, mask, seg)[0]).to_dict() == counts.to_dict()
    return RunRecord(cfg.hash(), "prune", net.spec.name, method, float(ratio), int(seed),
                     acc0, acc_b, acc_a, best, list(trained.history), ft_hist, mask.to_dict(),
                     layer_ratios(mask, seg).to_dict(), counts.to_dict(), timings, meta)


def init_prune_pipeline(cfg: ExperimentConfig, seed, ratio, method=None, data=None, spec=None) -> RunRecord:
    """Mask from a randomly initialised network, then two full training cycles."""
    tr, te = data if data is not None else load_data(cfg)
    spec = spec or model_spec(cfg, tr)
    net = Network(spec)
    tr, te = _flatten_for(net, tr), _flatten_for(net, te)
    method = method or cfg.method
    params, buffers = net.init_params(seed), net.init_buffers()
    mask, seg, timings = compute_mask(net, params, buffers, tr, cfg, ratio, seed, method)
    arch, pz = apply_mask(net, params, mask, seg)
    tcfg = cfg.train_config()
    total = tcfg.epochs + cfg.ft_epochs()
    zidx = _zero_indices(seg, mask)
    hist = []
    p, b = pz, buffers
    for cycle, ep in enumerate((tcfg.epochs, cfg.ft_epochs())):
        if ep == 0:
            continue
        res = sgd_train(net, p, b, tr, cfg.train_config(ep), seed=seed, kind=cfg.loss, zero_idx=zidx,
                        test=te, epoch_offset=cycle * 10_000)
        p, b = res.params, res.buffers
        hist += res.history
    if len(hist) != total:
        raise ConfigurationError("epoch budget mismatch between init-prune and prune pipelines")
    acc = evaluate(net, p, b, te, cfg.loss)[1]
    counts = count_report(arch)
    return RunRecord(cfg.hash(), "init_prune", spec.name, method, float(ratio), int(seed),
                     float("nan"), float("nan"), acc, max([h["test_acc"] for h in hist], default=acc),
                     [], hist, mask.to_dict(), layer_ratios(mask, seg).to_dict(), counts.to_dict(),
                     timings, {"total_epochs": total, "S": seg.S, "P": net.P})


@dataclass
class ExpandRecord:
    seed: int
    bottlenecks: list
    multiplier: float
    widen_multiplier: float
    expanded: Optional[RunRecord]
    widened: RunRecord
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return {"seed": self.seed, "bottlenecks": self.bottlenecks, "multiplier": self.multiplier,
                "widen_multiplier": self.widen_multiplier,
                "expanded": None if self.expanded is None else self.expanded.to_dict(),
                "widened": self.widened.to_dict(), "meta": self.meta}

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)


def expand_prune_pipeline(cfg: ExperimentConfig, base: RunRecord, data=None, spec=None) -> ExpandRecord:
    """Bottleneck detection on ``base``'s layer ratios, expansion, and the widen baseline."""
    if not base.layer_ratios:
        raise InputError("base record carries no layer ratios")
    tr, te = data if data is not None else load_data(cfg)
    spec = spec or model_spec(cfg, tr)
    seed, ratio = base.seed, base.ratio
    hist = LayerRatioHistogram.from_dict(base.layer_ratios)
    by_block = bool(spec.residuals)
    targets = sorted(detect_bottlenecks(hist, cfg.bottleneck_threshold, by_block=by_block))
    meta = {"base_config_hash": base.config_hash}
    if targets:
        exp_spec = expand(spec, targets, cfg.expand_multiplier, blocks=by_block)
    else:
        meta["note"] = "no bottleneck found; expansion skipped"
        exp_spec = spec
    target_p = Network(exp_spec).P
    wide_spec, wmult = widen_uniform(spec, target_p)
    meta["expanded_params"] = target_p
    meta["widened_params"] = Network(wide_spec).P

    def run(s):
        trained = train_model(cfg, seed, s, (tr, te))
        rec = prune_pipeline(cfg, trained, seed, ratio, data=(tr, te))
        rec.pipeline = "expand_prune"
        return rec

    expanded = run(exp_spec) if targets else None
    widened = run(wide_spec)
    widened.meta["role"] = "widen_baseline"
    if expanded is not None:
        expanded.meta["role"] = "expanded"
        expanded.meta["targets"] = targets
    return ExpandRecord(seed, targets, cfg.expand_multiplier if targets else 1.0, wmult,
                        expanded, widened, meta)


# ---------------------------------------------------------------------------
# timing sweep
# ---------------------------------------------------------------------------

TIMING_COLUMNS = ("family", "multiplier", "S", "P", "method", "saliency_s", "selection_s", "total_s")


def timing_sweep(family="mlp_toy", multipliers=(1, 2, 4, 8), methods=("sosp_h", "sosp_i"), n_prime=1000,
                 ratio=0.5, repeats=1, seed=0, base_kwargs=None):
    """Wall-clock of saliency + selection per method and width -> list of row dicts."""
    if any(m < 1 for m in multipliers):
        raise InputError("width multipliers must be >= 1")
    base_kwargs = dict(base_kwargs or {})
    rows = []
    for mult in multipliers:
        if family == "mlp_toy":
            d = base_kwargs.get("d", 768)
            hidden = tuple(int(round(h * mult)) for h in base_kwargs.get("hidden", (64, 64)))
            spec = mlp_toy(d=d, D=base_kwargs.get("D", 10), hidden=hidden)
        else:
            kw = dict(base_kwargs)
            widths = kw.pop("widths", (16, 16, 32, 32, 64, 64))
            kw["widths"] = tuple(int(round(w * mult)) for w in widths)
            spec = build(family, **kw)
        net = Network(spec)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(n_prime,) + net.input_shape)
        y = rng.integers(0, net.output_dim, size=n_prime)
        batch = Batch(x, y)
        params, buffers = net.init_params(seed), net.init_buffers()
        cfg = ExperimentConfig(model=family, n_prime=n_prime, sosp_i_max_structures=10 ** 9)
        for meth in methods:
            best = None
            for _ in range(repeats):
                _, seg, t = compute_mask(net, params, buffers, batch, cfg, ratio, seed, meth)
                if best is None or t["total"] < best["total"]:
                    best = t
            rows.append({"family": family, "multiplier": mult, "S": seg.S, "P": net.P, "method": meth,
                         "saliency_s": best["saliency"], "selection_s": best["selection"],
                         "total_s": best["total"]})
    return rows


def loglog_slope(xs, ys):
    lx, ly = np.log(np.asarray(xs, float)), np.log(np.asarray(ys, float))
    return float(np.polyfit(lx, ly, 1)[0])


def write_csv(path_or_buf, rows, columns):
    own = isinstance(path_or_buf, (str, os.PathLike))
    fh = open(path_or_buf, "w", newline="", encoding="utf-8") if own else path_or_buf
    try:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n", extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow(r)
    finally:
        if own:
            fh.close()


def csv_text(rows, columns):
    buf = io.StringIO()
    write_csv(buf, rows, columns)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

SUMMARY_COLUMNS = ("pipeline", "model", "method", "ratio", "n", "acc_before_ft_mean", "acc_before_ft_std",
                   "acc_after_ft_mean", "acc_after_ft_std", "best_acc_ft_mean", "best_acc_ft_std",
                   "exact_params_mean", "exact_macs_mean")


def mean_std(vals):
    """Mean and sample standard deviation (0 for a single value)."""
    v = np.asarray(vals, dtype=float)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


@dataclass
class ReportBundle:
    summary: list
    acc_vs_params: list
    acc_vs_macs: list
    histograms: dict

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, "summary.csv"), self.summary, SUMMARY_COLUMNS)
        write_csv(os.path.join(out_dir, "acc_vs_params.csv"), self.acc_vs_params,
                  ("pipeline", "model", "method", "ratio", "seed", "exact_params", "acc_after_ft"))
        write_csv(os.path.join(out_dir, "acc_vs_macs.csv"), self.acc_vs_macs,
                  ("pipeline", "model", "method", "ratio", "seed", "exact_macs", "acc_after_ft"))
        paths = [os.path.join(out_dir, n) for n in ("summary.csv", "acc_vs_params.csv", "acc_vs_macs.csv")]
        for name, rows in self.histograms.items():
            p = os.path.join(out_dir, f"layer_ratios_{name}.csv")
            write_csv(p, rows, ("layer", "block", "pruned", "total", "ratio"))
            paths.append(p)
        return paths


def report(records) -> ReportBundle:
    records = [r if isinstance(r, RunRecord) else RunRecord.from_dict(r) for r in records]
    if not records:
        raise InputError("cannot build a report from an empty record set")
    groups = {}
    for r in records:
        groups.setdefault((r.pipeline, r.model, r.method, r.ratio), []).append(r)
    summary = []
    for (pipe, model, meth, ratio), rs in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0]))):
        row = {"pipeline": pipe, "model": model, "method": meth, "ratio": ratio, "n": len(rs)}
        for key in ("acc_before_ft", "acc_after_ft", "best_acc_ft"):
            row[key + "_mean"], row[key + "_std"] = mean_std([getattr(r, key) for r in rs])
        row["exact_params_mean"] = mean_std([r.counts.get("exact_params", np.nan) for r in rs])[0]
        row["exact_macs_mean"] = mean_std([r.counts.get("exact_macs", np.nan) for r in rs])[0]
        summary.append(row)
    avp, avm, hists = [], [], {}
    for r in records:
        base = {"pipeline": r.pipeline, "model": r.model, "method": r.method, "ratio": r.ratio,
                "seed": r.seed, "acc_after_ft": r.acc_after_ft}
        avp.append(dict(base, exact_params=r.counts.get("exact_params")))
        avm.append(dict(base, exact_macs=r.counts.get("exact_macs")))
        if r.layer_ratios:
            name = f"{r.pipeline}_{r.model}_{r.method}_{r.ratio:g}_s{r.seed}"
            hists[name] = LayerRatioHistogram.from_dict(r.layer_ratios).to_rows()
    return ReportBundle(summary, avp, avm, hists)


# ---------------------------------------------------------------------------
# batch execution
# ---------------------------------------------------------------------------

def _run_seed(job):
    cfg_dict, seed, methods = job
    cfg = ExperimentConfig.from_dict(cfg_dict)
    data = load_data(cfg)
    trained = train_model(cfg, seed, data=data)
    return [prune_pipeline(cfg, trained, seed, r, m, data=data).to_dict()
            for r in cfg.ratios for m in methods]


def run_grid(cfg: ExperimentConfig, methods=None, workers=None):
    """prune_pipeline over seeds x ratios x methods.

    One trained model per seed is shared by its ratios and methods; seeds run
    in independent worker processes when ``workers`` > 1.
    """
    methods = list(methods or [cfg.method])
    jobs = [(cfg.to_dict(), s, methods) for s in cfg.seeds]
    workers = cfg.workers if workers is None else workers
    if workers <= 1:
        out = [_run_seed(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers) as ex:
            out = list(ex.map(_run_seed, jobs))
    return [RunRecord.from_dict(d) for part in out for d in part]


def load_trained(path):
    net, params, buffers = load_checkpoint(path)
    return Trained(net, params, buffers, [])

