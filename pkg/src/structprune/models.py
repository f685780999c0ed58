"""Model descriptions, compilation to an op graph, the toy zoo and checkpoints."""
from __future__ import annotations

import copy
import io
import json
import struct
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigurationError, DataError, DimensionError, StructuralError

LAYER_TYPES = ("dense", "conv", "relu", "avgpool", "gap", "flatten")
RESIDUAL_KINDS = ("identity_skip", "downsample")
BN_EPS = 1e-5


@dataclass
class LayerSpec:
    type: str
    out: Optional[int] = None          # dense features / conv channels
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    bias: bool = True
    batchnorm: bool = False
    prunable: bool = True
    trainable: bool = True
    block: Optional[int] = None        # residual stage label, used for block-level expansion
    name: str = ""

    def to_dict(self):
        d = asdict(self)
        if self.type not in ("dense", "conv"):
            d = {"type": self.type, "kernel": self.kernel, "name": self.name}
        return d


@dataclass
class Residual:
    source: int     # spec layer index whose output feeds the skip (-1 = model input)
    target: int     # skip is added to this layer's output
    kind: str = "identity_skip"
    stride: int = 1
    batchnorm: bool = True


@dataclass
class ModelSpec:
    name: str
    input_shape: tuple
    output_dim: int
    layers: list
    residuals: list = field(default_factory=list)

    def to_dict(self):
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "output_dim": self.output_dim,
            "layers": [lay.to_dict() for lay in self.layers],
            "residuals": [asdict(r) for r in self.residuals],
        }

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, d):
        layers = [LayerSpec(**lay) for lay in d["layers"]]
        res = [Residual(**r) for r in d.get("residuals", [])]
        return cls(d["name"], tuple(d["input_shape"]), int(d["output_dim"]), layers, res)

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def copy(self):
        return copy.deepcopy(self)

    def param_layers(self):
        return [i for i, lay in enumerate(self.layers) if lay.type in ("dense", "conv")]

    def classifier_index(self):
        return self.param_layers()[-1]

    def prunable_layers(self):
        last = self.classifier_index()
        return [i for i in self.param_layers() if i != last and self.layers[i].prunable]


# ---------------------------------------------------------------------------
# compiled graph
# ---------------------------------------------------------------------------

@dataclass
class ParamBlock:
    name: str
    offset: int
    shape: tuple
    layer: int          # spec layer index, or -(r+1) for the downsample path of residual r
    role: str           # weight | bias | bn_weight | bn_bias
    kernel: int = 1

    @property
    def size(self):
        return int(np.prod(self.shape))


@dataclass
class Op:
    kind: str                     # dense conv bn relu avgpool gap flatten add
    inputs: list                  # node ids; -1 is the network input
    shape: tuple                  # per-sample output shape
    layer: int                    # owning spec layer (or -(r+1) for downsample ops)
    params: dict = field(default_factory=dict)   # role -> ParamBlock
    buffers: dict = field(default_factory=dict)  # name -> (offset, size)
    kernel: int = 1
    stride: int = 1
    padding: int = 0


class Network:
    """A ModelSpec compiled to a flat op list plus parameter/buffer layouts.

    Node ``i`` is the output of ``ops[i]``; node ``-1`` is the input.  The
    parameter vector is a flat float array of length ``P`` described by
    ``layout``; batch-norm running statistics live in a separate buffer
    vector of length ``B``.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.ops: list[Op] = []
        self.layout: list[ParamBlock] = []
        self.layer_main_op: dict[int, int] = {}
        self.layer_bn_op: dict[int, int] = {}
        self.layer_out_node: dict[int, int] = {}
        self.layer_in_node: dict[int, int] = {}
        self.downsample_ops: dict[int, tuple] = {}
        self.P = 0
        self.B = 0
        self._compile()

    # -- construction -----------------------------------------------------

    def _add_param(self, name, shape, layer, role, kernel=1):
        blk = ParamBlock(name, self.P, tuple(int(s) for s in shape), layer, role, kernel)
        self.layout.append(blk)
        self.P += blk.size
        return blk

    def _add_op(self, op):
        self.ops.append(op)
        return len(self.ops) - 1

    def _shape_of(self, node):
        return tuple(self.spec.input_shape) if node < 0 else self.ops[node].shape

    def _bn_op(self, node, layer, tag):
        shape = self._shape_of(node)
        c = shape[0]
        op = Op("bn", [node], shape, layer)
        op.params["bn_weight"] = self._add_param(f"{tag}.bn.weight", (c,), layer, "bn_weight")
        op.params["bn_bias"] = self._add_param(f"{tag}.bn.bias", (c,), layer, "bn_bias")
        op.buffers["mean"] = (self.B, c)
        op.buffers["var"] = (self.B + c, c)
        self.B += 2 * c
        return self._add_op(op)

    def _conv_op(self, node, out, k, stride, pad, bias, layer, tag):
        shape = self._shape_of(node)
        if len(shape) != 3:
            raise DimensionError(f"conv expects a (C, H, W) input, got {shape}", layer)
        cin, h, w = shape
        ho, wo = (h + 2 * pad - k) // stride + 1, (w + 2 * pad - k) // stride + 1
        if ho < 1 or wo < 1:
            raise DimensionError(f"kernel {k} does not fit input {shape}", layer)
        op = Op("conv", [node], (out, ho, wo), layer, kernel=k, stride=stride, padding=pad)
        op.params["weight"] = self._add_param(f"{tag}.weight", (out, cin, k, k), layer, "weight", k * k)
        if bias:
            op.params["bias"] = self._add_param(f"{tag}.bias", (out,), layer, "bias")
        return self._add_op(op)

    def _compile(self):
        spec = self.spec
        if not spec.layers:
            raise ConfigurationError("model has no layers")
        for lay in spec.layers:
            if lay.type not in LAYER_TYPES:
                raise ConfigurationError(f"unknown layer type {lay.type!r}")
        plist = spec.param_layers()
        if not plist or spec.layers[plist[-1]].type != "dense":
            raise ConfigurationError("the last parametric layer must be a dense classifier")
        if spec.layers[plist[-1]].out != spec.output_dim:
            raise ConfigurationError("classifier width must equal output_dim")
        by_target: dict[int, list[int]] = {}
        for r_idx, r in enumerate(spec.residuals):
            if r.kind not in RESIDUAL_KINDS:
                raise ConfigurationError(f"unknown residual kind {r.kind!r}")
            if not (-1 <= r.source < r.target < len(spec.layers)):
                raise StructuralError(f"residual {r_idx}: need -1 <= source < target")
            by_target.setdefault(r.target, []).append(r_idx)

        node = -1
        for i, lay in enumerate(spec.layers):
            self.layer_in_node[i] = node
            tag = lay.name or f"layer{i}"
            shape = self._shape_of(node)
            if lay.type == "dense":
                if len(shape) != 1:
                    raise DimensionError(f"dense expects a flat input, got {shape}", i)
                op = Op("dense", [node], (lay.out,), i)
                op.params["weight"] = self._add_param(f"{tag}.weight", (lay.out, shape[0]), i, "weight")
                if lay.bias:
                    op.params["bias"] = self._add_param(f"{tag}.bias", (lay.out,), i, "bias")
                node = self._add_op(op)
                self.layer_main_op[i] = node
                if lay.batchnorm:
                    node = self._bn_op(node, i, tag)
                    self.layer_bn_op[i] = node
            elif lay.type == "conv":
                node = self._conv_op(node, lay.out, lay.kernel, lay.stride, lay.padding, lay.bias, i, tag)
                self.layer_main_op[i] = node
                if lay.batchnorm:
                    node = self._bn_op(node, i, tag)
                    self.layer_bn_op[i] = node
            elif lay.type == "relu":
                node = self._add_op(Op("relu", [node], shape, i))
            elif lay.type == "avgpool":
                k = lay.kernel
                if len(shape) != 3 or shape[1] % k or shape[2] % k:
                    raise DimensionError(f"avgpool {k} does not tile input {shape}", i)
                node = self._add_op(Op("avgpool", [node], (shape[0], shape[1] // k, shape[2] // k), i, kernel=k))
            elif lay.type == "gap":
                if len(shape) != 3:
                    raise DimensionError(f"gap expects (C, H, W), got {shape}", i)
                node = self._add_op(Op("gap", [node], (shape[0],), i))
            elif lay.type == "flatten":
                node = self._add_op(Op("flatten", [node], (int(np.prod(shape)),), i))

            for r_idx in by_target.get(i, []):
                node = self._residual(r_idx, node)
            self.layer_out_node[i] = node
        if self._shape_of(node) != (spec.output_dim,):
            raise DimensionError(f"network output shape {self._shape_of(node)} != ({spec.output_dim},)")

    def _residual(self, r_idx, node):
        r = self.spec.residuals[r_idx]
        src = -1 if r.source < 0 else self.layer_out_node[r.source]
        src_shape = self._shape_of(src)
        tgt_shape = self._shape_of(node)
        lay_id = -(r_idx + 1)
        if r.kind == "identity_skip":
            if src_shape != tgt_shape:
                raise StructuralError(
                    f"residual {r_idx}: identity skip shape {src_shape} != {tgt_shape}; "
                    "expand the whole block so both ends keep equal width")
            skip = src
        else:
            if len(src_shape) != 3:
                raise StructuralError(f"residual {r_idx}: downsample needs a conv feature map")
            skip = self._conv_op(src, tgt_shape[0], 1, r.stride, 0, False, lay_id, f"res{r_idx}.downsample")
            conv_op = skip
            bn_op = None
            if r.batchnorm:
                skip = self._bn_op(skip, lay_id, f"res{r_idx}.downsample")
                bn_op = skip
            self.downsample_ops[r_idx] = (conv_op, bn_op)
            if self._shape_of(skip) != tgt_shape:
                raise StructuralError(
                    f"residual {r_idx}: downsample output {self._shape_of(skip)} != {tgt_shape}")
        return self._add_op(Op("add", [node, skip], tgt_shape, r.target))

    # -- helpers ----------------------------------------------------------

    @property
    def output_dim(self):
        return self.spec.output_dim

    @property
    def input_shape(self):
        return tuple(self.spec.input_shape)

    def has_batchnorm(self):
        return any(op.kind == "bn" for op in self.ops)

    def has_bias(self):
        return any(b.role == "bias" for b in self.layout)

    def block_slice(self, blk):
        return slice(blk.offset, blk.offset + blk.size)

    def frozen_mask(self):
        mask = np.zeros(self.P, dtype=bool)
        for blk in self.layout:
            if blk.layer >= 0 and not self.spec.layers[blk.layer].trainable:
                mask[self.block_slice(blk)] = True
        return mask

    def init_params(self, seed=0, dtype=np.float64):
        """He-normal weights, zero biases, unit BN scale."""
        rng = np.random.default_rng(seed)
        theta = np.zeros(self.P, dtype=dtype)
        for blk in self.layout:
            sl = self.block_slice(blk)
            if blk.role == "weight":
                fan_in = int(np.prod(blk.shape[1:]))
                theta[sl] = rng.normal(0.0, np.sqrt(2.0 / fan_in), blk.size)
            elif blk.role == "bn_weight":
                theta[sl] = 1.0
        return theta

    def init_buffers(self, dtype=np.float64):
        buf = np.zeros(self.B, dtype=dtype)
        for op in self.ops:
            if op.kind == "bn":
                off, c = op.buffers["var"]
                buf[off:off + c] = 1.0
        return buf

    def describe(self):
        lines = []
        for i, op in enumerate(self.ops):
            lines.append(f"{i:3d} {op.kind:8s} in={op.inputs} shape={op.shape} layer={op.layer}")
        return "\n".join(lines)


def compile_model(spec: ModelSpec) -> Network:
    return Network(spec)


# ---------------------------------------------------------------------------
# zoo
# ---------------------------------------------------------------------------

def mlp_toy(d=8, D=3, hidden=(64, 64), bias=True, name="mlp_toy"):
    layers = []
    for i, h in enumerate(hidden):
        layers.append(LayerSpec("dense", out=h, bias=bias, name=f"fc{i + 1}"))
        layers.append(LayerSpec("relu", name=f"relu{i + 1}"))
    layers.append(LayerSpec("dense", out=D, bias=bias, prunable=False, name="classifier"))
    return ModelSpec(name, (d,), D, layers)


def convnet_toy(input_shape=(3, 16, 16), D=10, widths=(16, 16, 32, 32, 64, 64),
                batchnorm=True, bias=False, name="convnet_toy"):
    """VGG-style stack: conv pairs separated by 2x2 average pooling."""
    layers = []
    for i, w in enumerate(widths):
        layers.append(LayerSpec("conv", out=int(w), kernel=3, padding=1, bias=bias,
                                batchnorm=batchnorm, name=f"conv{i + 1}"))
        layers.append(LayerSpec("relu", name=f"relu{i + 1}"))
        if i % 2 == 1 and i < len(widths) - 1:
            layers.append(LayerSpec("avgpool", kernel=2, name=f"pool{i // 2 + 1}"))
    layers.append(LayerSpec("gap", name="gap"))
    layers.append(LayerSpec("dense", out=D, bias=True, prunable=False, name="classifier"))
    return ModelSpec(name, tuple(input_shape), D, layers)


def restoy(input_shape=(3, 16, 16), D=10, widths=(8, 16, 32), blocks=2,
           batchnorm=True, name="restoy"):
    """Three-stage basic-block ResNet.

    Stage 1 keeps the stem width and resolution, so all its skips are identity
    skips fed by prunable layers.  Stages 2 and 3 open with a stride-2 block
    whose skip is a 1x1 downsample convolution.
    """
    layers = [LayerSpec("conv", out=widths[0], kernel=3, padding=1, bias=False,
                        batchnorm=batchnorm, block=1, name="stem"),
              LayerSpec("relu", name="stem.relu")]
    residuals = []
    prev_out = 1          # index of the layer whose output is the current trunk
    for st, w in enumerate(widths, start=1):
        for b in range(blocks):
            first = b == 0 and st > 1
            stride = 2 if first else 1
            tag = f"s{st}b{b + 1}"
            layers.append(LayerSpec("conv", out=w, kernel=3, stride=stride, padding=1, bias=False,
                                    batchnorm=batchnorm, block=st, name=f"{tag}.conv1"))
            layers.append(LayerSpec("relu", name=f"{tag}.relu1"))
            layers.append(LayerSpec("conv", out=w, kernel=3, padding=1, bias=False,
                                    batchnorm=batchnorm, block=st, name=f"{tag}.conv2"))
            conv2 = len(layers) - 1
            kind = "downsample" if first else "identity_skip"
            residuals.append(Residual(prev_out, conv2, kind, stride=stride, batchnorm=batchnorm))
            layers.append(LayerSpec("relu", name=f"{tag}.relu2"))
            prev_out = len(layers) - 1
    layers.append(LayerSpec("gap", name="gap"))
    layers.append(LayerSpec("dense", out=D, bias=True, prunable=False, name="classifier"))
    return ModelSpec(name, tuple(input_shape), D, layers, residuals)


def bottleneck_convnet(input_shape=(3, 16, 16), D=10, width=32, narrow=4, narrow_layer=2,
                       name="convnet_bottleneck"):
    """ConvNet-toy with one deliberately narrow layer (0-based conv index)."""
    widths = [width] * 6
    widths[narrow_layer] = narrow
    return convnet_toy(input_shape, D, tuple(widths), name=name)


ZOO = {"mlp_toy": mlp_toy, "convnet_toy": convnet_toy, "restoy": restoy,
       "convnet_bottleneck": bottleneck_convnet}


def build(name, **kw) -> ModelSpec:
    try:
        return ZOO[name](**kw)
    except KeyError:
        raise ConfigurationError(f"unknown model {name!r}; choose from {sorted(ZOO)}") from None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MAGIC = b"SPRNCKPT"
VERSION = 1


def save_checkpoint(path, net: Network, params, buffers=None):
    """Write spec JSON, layout header, buffers and params (little-endian f8)."""
    params = np.asarray(params, dtype="<f8")
    if params.shape != (net.P,):
        raise DimensionError(f"params length {params.size} != P={net.P}")
    buffers = net.init_buffers() if buffers is None else buffers
    buffers = np.asarray(buffers, dtype="<f8")
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<IQ", VERSION, net.P))
    spec_bytes = net.spec.to_json(sort_keys=True).encode("utf-8")
    out.write(struct.pack("<I", len(spec_bytes)))
    out.write(spec_bytes)
    out.write(struct.pack("<I", len(net.layout)))
    for blk in net.layout:
        name = blk.name.encode("utf-8")
        out.write(struct.pack("<H", len(name)))
        out.write(name)
        out.write(struct.pack("<QB", blk.offset, len(blk.shape)))
        out.write(struct.pack(f"<{len(blk.shape)}Q", *blk.shape))
        out.write(struct.pack("<I", blk.kernel))
    out.write(struct.pack("<Q", buffers.size))
    out.write(buffers.tobytes())
    out.write(params.tobytes())
    with open(path, "wb") as fh:
        fh.write(out.getvalue())


def load_checkpoint(path):
    """Return ``(network, params, buffers)``."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        return _parse_checkpoint(path, raw)
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise DataError(f"{path}: corrupt checkpoint ({exc})") from exc


def _parse_checkpoint(path, raw):
    view = memoryview(raw)
    pos = 0

    def take(fmt):
        nonlocal pos
        vals = struct.unpack_from(fmt, view, pos)
        pos += struct.calcsize(fmt)
        return vals

    if bytes(view[:8]) != MAGIC:
        raise DataError(f"{path}: bad checkpoint magic")
    pos = 8
    version, p = take("<IQ")
    if version != VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    (n,) = take("<I")
    spec = ModelSpec.from_json(bytes(view[pos:pos + n]).decode("utf-8"))
    pos += n
    net = Network(spec)
    (nrec,) = take("<I")
    if nrec != len(net.layout) or p != net.P:
        raise DataError(f"{path}: layout header does not match the stored model")
    for blk in net.layout:
        (ln,) = take("<H")
        name = bytes(view[pos:pos + ln]).decode("utf-8")
        pos += ln
        off, ndim = take("<QB")
        shape = take(f"<{ndim}Q")
        (kern,) = take("<I")
        if name != blk.name or off != blk.offset or tuple(shape) != blk.shape:
            raise DataError(f"{path}: layout record {name} inconsistent")
    (nb,) = take("<Q")
    buffers = np.frombuffer(raw, dtype="<f8", count=nb, offset=pos).astype(np.float64)
    pos += 8 * nb
    params = np.frombuffer(raw, dtype="<f8", count=p, offset=pos).astype(np.float64)
    if pos + 8 * p != len(raw):
        raise DataError(f"{path}: trailing bytes after the parameter block")
    return net, params, buffers
