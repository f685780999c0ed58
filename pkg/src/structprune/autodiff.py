"""Forward evaluation, losses and exact derivatives for compiled networks.

Every op is either elementwise-linear given a fixed gating (relu, pooling,
add, flatten) or bilinear in (input, parameters) (dense, conv, eval-mode
batch norm).  That lets one reverse pass provide gradients and, run on top of
a forward tangent pass, exact Hessian-vector products (Pearlmutter's
R-operator, i.e. forward-over-reverse).  ReLU is given zero curvature.

Batch norm runs either in ``"eval"`` mode (running statistics, a per-channel
affine map) or ``"train"`` mode (batch statistics).  Only gradients are
available in train mode; everything second order requires eval mode.
"""
from __future__ import annotations

import numpy as np

from . import _accel
from .errors import DimensionError, InputError
from .models import BN_EPS, Network

LOSS_KINDS = ("squared", "cross_entropy")


# ---------------------------------------------------------------------------
# small helpers
# ---------------------------------------------------------------------------

def _chan(a, ndim):
    """Reshape a per-channel vector to broadcast against an activation."""
    return a.reshape((1, -1) + (1,) * (ndim - 2))


def _chan_sum(a):
    return a.sum(axis=(0,) + tuple(range(2, a.ndim)))


def _padd(a, b):
    if a is None:
        return b
    if b is None:
        return a
    return a + b


def _pget(net, params, op, role):
    blk = op.params.get(role)
    if blk is None:
        return None
    return params[blk.offset:blk.offset + blk.size].reshape(blk.shape)


def _bget(buffers, op, name):
    off, size = op.buffers[name]
    return buffers[off:off + size]


def _conv(cols, w, out_shape, n):
    """Apply a conv weight to im2col patches -> (N, Cout, Ho, Wo)."""
    cout = w.shape[0]
    y = np.matmul(w.reshape(cout, -1), cols)
    return y.reshape((n,) + tuple(out_shape))


def _conv_dw(dy, cols, wshape):
    n, cout = dy.shape[:2]
    dyr = dy.reshape(n, cout, -1)
    return np.tensordot(dyr, cols, axes=([0, 2], [0, 2])).reshape(wshape)


def _conv_dx(dy, w, in_shape, op):
    n, cout = dy.shape[:2]
    dcols = np.matmul(w.reshape(cout, -1).T, dy.reshape(n, cout, -1))
    return _accel.kernels.col2im(dcols, (n,) + tuple(in_shape), op.kernel, op.stride, op.padding)


def _pool(x, k):
    n, c, h, w = x.shape
    return x.reshape(n, c, h // k, k, w // k, k).mean(axis=(3, 5))


def _unpool(dy, k):
    return np.repeat(np.repeat(dy, k, axis=2), k, axis=3) / (k * k)


class Trace:
    """Values and caches recorded by a forward pass."""

    def __init__(self, n):
        self.vals = [None] * n
        self.caches = [None] * n
        self.batch_stats = {}


def _in_shape(net, node):
    return net.input_shape if node < 0 else net.ops[node].shape


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def _check_inputs(net: Network, params, x):
    if params.shape != (net.P,):
        raise DimensionError(f"parameter vector has length {params.size}, model has P={net.P}")
    if x.ndim != len(net.input_shape) + 1 or tuple(x.shape[1:]) != net.input_shape:
        raise DimensionError(f"input shape {tuple(x.shape[1:])} does not match model input "
                             f"{net.input_shape}", 0)


def run_forward(net: Network, params, x, buffers=None, mode="eval") -> Trace:
    """Evaluate every op, keeping what the backward passes need."""
    params = np.asarray(params)
    x = np.asarray(x, dtype=params.dtype)
    _check_inputs(net, params, x)
    if buffers is None:
        buffers = net.init_buffers(dtype=params.dtype)
    tr = Trace(len(net.ops))
    vals, caches = tr.vals, tr.caches
    n = x.shape[0]
    for i, op in enumerate(net.ops):
        xs = [x if j < 0 else vals[j] for j in op.inputs]
        a = xs[0]
        k = op.kind
        if k == "dense":
            w = _pget(net, params, op, "weight")
            b = _pget(net, params, op, "bias")
            y = a @ w.T
            if b is not None:
                y = y + b
        elif k == "conv":
            w = _pget(net, params, op, "weight")
            b = _pget(net, params, op, "bias")
            cols = _accel.kernels.im2col(a, op.kernel, op.stride, op.padding)
            caches[i] = cols
            y = _conv(cols, w, op.shape, n)
            if b is not None:
                y = y + _chan(b, y.ndim)
        elif k == "bn":
            g = _pget(net, params, op, "bn_weight")
            beta = _pget(net, params, op, "bn_bias")
            if mode == "train":
                mu = a.mean(axis=(0,) + tuple(range(2, a.ndim)))
                var = a.var(axis=(0,) + tuple(range(2, a.ndim)))
                tr.batch_stats[i] = (mu, var, a.size // a.shape[1])
            else:
                mu = _bget(buffers, op, "mean")
                var = _bget(buffers, op, "var")
            s = np.sqrt(var + BN_EPS)
            xhat = (a - _chan(mu, a.ndim)) / _chan(s, a.ndim)
            caches[i] = (xhat, s, mode)
            y = xhat * _chan(g, a.ndim) + _chan(beta, a.ndim)
        elif k == "relu":
            mask = a > 0
            caches[i] = mask
            y = a * mask
        elif k == "avgpool":
            y = _pool(a, op.kernel)
        elif k == "gap":
            y = a.mean(axis=(2, 3))
        elif k == "flatten":
            y = a.reshape(n, -1)
        elif k == "add":
            y = xs[0] + xs[1]
        else:  # pragma: no cover
            raise ValueError(k)
        vals[i] = y
    return tr


def forward(net: Network, params, x, buffers=None, mode="eval"):
    """Network outputs f_theta(x) for a batch ``x`` -> (N, D)."""
    return run_forward(net, params, x, buffers, mode).vals[-1]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_targets(outputs, targets, kind):
    if kind not in LOSS_KINDS:
        raise InputError(f"unknown loss kind {kind!r}")
    n, d = outputs.shape
    if kind == "cross_entropy":
        t = np.asarray(targets)
        if not np.issubdtype(t.dtype, np.integer):
            raise InputError("cross_entropy needs integer class labels")
        if t.shape != (n,) or t.min(initial=0) < 0 or t.max(initial=0) >= d:
            raise InputError(f"labels must be {n} integers in [0, {d})")
        return t
    t = np.asarray(targets, dtype=outputs.dtype)
    if t.shape != (n, d):
        raise InputError(f"squared loss needs targets of shape {(n, d)}, got {t.shape}")
    return t


def softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def loss(outputs, targets, kind):
    """Mean loss over the batch."""
    outputs = np.asarray(outputs, dtype=float)
    t = _check_targets(outputs, targets, kind)
    if kind == "squared":
        r = outputs - t
        return 0.5 * float(np.mean(np.sum(r * r, axis=1)))
    zmax = outputs.max(axis=1, keepdims=True)
    lse = np.log(np.exp(outputs - zmax).sum(axis=1)) + zmax[:, 0]
    return float(np.mean(lse - outputs[np.arange(len(t)), t]))


def loss_grad(outputs, targets, kind):
    """d(mean loss)/d outputs."""
    t = _check_targets(outputs, targets, kind)
    n = outputs.shape[0]
    if kind == "squared":
        return (outputs - t) / n
    p = softmax(outputs)
    p[np.arange(n), t] -= 1.0
    return p / n


def loss_hess_vec(outputs, tangent, kind):
    """Second derivative of the mean loss w.r.t. outputs applied to ``tangent``."""
    n = outputs.shape[0]
    if kind == "squared":
        return tangent / n
    p = softmax(outputs)
    return (p * tangent - p * np.sum(p * tangent, axis=1, keepdims=True)) / n


# ---------------------------------------------------------------------------
# reverse pass
# ---------------------------------------------------------------------------

def _op_backward(net, params, op, i, tr, xs, dy):
    """Return (input grads list, {role: param grad})."""
    k = op.kind
    caches = tr.caches
    if k == "dense":
        w = _pget(net, params, op, "weight")
        dp = {"weight": dy.T @ xs[0]}
        if "bias" in op.params:
            dp["bias"] = dy.sum(axis=0)
        return [dy @ w], dp
    if k == "conv":
        w = _pget(net, params, op, "weight")
        dp = {"weight": _conv_dw(dy, caches[i], w.shape)}
        if "bias" in op.params:
            dp["bias"] = _chan_sum(dy)
        dx = _conv_dx(dy, w, _in_shape(net, op.inputs[0]), op) if op.inputs[0] >= 0 else None
        return [dx], dp
    if k == "bn":
        g = _pget(net, params, op, "bn_weight")
        xhat, s, mode = caches[i]
        nd = dy.ndim
        dp = {"bn_weight": _chan_sum(dy * xhat), "bn_bias": _chan_sum(dy)}
        if mode == "train":
            m = tr.batch_stats[i][2]
            dxhat = dy * _chan(g, nd)
            dx = (m * dxhat - _chan(_chan_sum(dxhat), nd)
                  - xhat * _chan(_chan_sum(dxhat * xhat), nd)) / (m * _chan(s, nd))
        else:
            dx = dy * _chan(g / s, nd)
        return [dx], dp
    if k == "relu":
        return [dy * caches[i]], {}
    if k == "avgpool":
        return [_unpool(dy, op.kernel)], {}
    if k == "gap":
        h, w = xs[0].shape[2:]
        return [np.broadcast_to(dy[:, :, None, None] / (h * w), xs[0].shape)], {}
    if k == "flatten":
        return [dy.reshape(xs[0].shape)], {}
    if k == "add":
        return [dy, dy], {}
    raise ValueError(k)  # pragma: no cover


def _write(grad, op, dp):
    for role, val in dp.items():
        blk = op.params[role]
        grad[blk.offset:blk.offset + blk.size] += val.reshape(-1)


def run_backward(net: Network, params, x, tr: Trace, dout, hook=None):
    """Reverse pass from output cotangent ``dout``; returns the flat gradient.

    ``hook(i, op, dy)`` is called with the cotangent of every op output.
    """
    grad = np.zeros(net.P, dtype=params.dtype)
    gnodes = [None] * len(net.ops)
    gnodes[-1] = dout
    for i in range(len(net.ops) - 1, -1, -1):
        dy = gnodes[i]
        if dy is None:
            continue
        op = net.ops[i]
        if hook is not None:
            hook(i, op, dy)
        xs = [x if j < 0 else tr.vals[j] for j in op.inputs]
        dxs, dp = _op_backward(net, params, op, i, tr, xs, dy)
        _write(grad, op, dp)
        for j, dx in zip(op.inputs, dxs):
            if j >= 0 and dx is not None:
                gnodes[j] = dx if gnodes[j] is None else gnodes[j] + dx
    return grad


def gradient(net: Network, params, x, targets, kind, buffers=None, mode="eval", return_loss=False):
    """dL/dtheta of the mean loss; frozen layers get zero gradient."""
    params = np.asarray(params)
    tr = run_forward(net, params, x, buffers, mode)
    out = tr.vals[-1]
    dout = loss_grad(out, targets, kind)
    g = run_backward(net, params, np.asarray(x, dtype=params.dtype), tr, dout)
    frozen = net.frozen_mask()
    if frozen.any():
        g[frozen] = 0.0
    if return_loss:
        return g, loss(out, targets, kind), tr
    return g


# ---------------------------------------------------------------------------
# forward-mode tangents
# ---------------------------------------------------------------------------

def _op_jvp(net, params, tparams, op, i, tr, xs, txs):
    """Tangent of op output given input tangents ``txs`` and param tangent."""
    k = op.kind
    tx = txs[0]
    if k == "dense":
        w = _pget(net, params, op, "weight")
        tw = _pget(net, tparams, op, "weight")
        tb = _pget(net, tparams, op, "bias")
        ty = None if tx is None else tx @ w.T
        if tw is not None and np.any(tw):
            ty = _padd(ty, xs[0] @ tw.T)
        if tb is not None and np.any(tb):
            ty = _padd(ty, np.broadcast_to(tb, (xs[0].shape[0], tb.size)))
        return ty, None
    if k == "conv":
        w = _pget(net, params, op, "weight")
        tw = _pget(net, tparams, op, "weight")
        tb = _pget(net, tparams, op, "bias")
        n = xs[0].shape[0]
        tcols = None
        ty = None
        if tx is not None:
            tcols = _accel.kernels.im2col(tx, op.kernel, op.stride, op.padding)
            ty = _conv(tcols, w, op.shape, n)
        if tw is not None and np.any(tw):
            ty = _padd(ty, _conv(tr.caches[i], tw, op.shape, n))
        if tb is not None and np.any(tb):
            ty = _padd(ty, np.broadcast_to(_chan(tb, 4), (n,) + op.shape))
        return ty, tcols
    if k == "bn":
        g = _pget(net, params, op, "bn_weight")
        tg = _pget(net, tparams, op, "bn_weight")
        tb = _pget(net, tparams, op, "bn_bias")
        xhat, s, mode = tr.caches[i]
        if mode != "eval":
            raise ValueError("tangents through batch norm need eval mode")
        nd = xhat.ndim
        ty = None if tx is None else tx * _chan(g / s, nd)
        if np.any(tg):
            ty = _padd(ty, xhat * _chan(tg, nd))
        if np.any(tb):
            ty = _padd(ty, np.broadcast_to(_chan(tb, nd), xhat.shape))
        return ty, None
    if tx is None and k != "add":
        return None, None
    if k == "relu":
        return tx * tr.caches[i], None
    if k == "avgpool":
        return _pool(tx, op.kernel), None
    if k == "gap":
        return tx.mean(axis=(2, 3)), None
    if k == "flatten":
        return tx.reshape(tx.shape[0], -1), None
    if k == "add":
        return _padd(txs[0], txs[1]), None
    raise ValueError(k)  # pragma: no cover


def run_tangent(net: Network, params, x, tr: Trace, tparams):
    """Forward-mode pass along parameter direction ``tparams`` (input fixed)."""
    tvals = [None] * len(net.ops)
    tcaches = [None] * len(net.ops)
    for i, op in enumerate(net.ops):
        xs = [x if j < 0 else tr.vals[j] for j in op.inputs]
        txs = [None if j < 0 else tvals[j] for j in op.inputs]
        tvals[i], tcaches[i] = _op_jvp(net, params, tparams, op, i, tr, xs, txs)
    return tvals, tcaches


def jvp(net: Network, params, x, v, buffers=None):
    """Directional derivative of the outputs, phi(x) v, for a batch -> (N, D)."""
    params = np.asarray(params, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (net.P,):
        raise DimensionError(f"tangent has length {v.size}, model has P={net.P}")
    x = np.asarray(x, dtype=np.float64)
    tr = run_forward(net, params, x, buffers, "eval")
    tvals, _ = run_tangent(net, params, x, tr, v)
    out = tvals[-1]
    return np.zeros_like(tr.vals[-1]) if out is None else np.array(out)


def jacobian(net: Network, params, x, buffers=None):
    """Full output Jacobian at a single input -> (D, P).  Oracle-sized models only."""
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if x.shape == net.input_shape:
        x = x[None]
    if x.shape[0] != 1:
        raise InputError("jacobian takes a single input point")
    tr = run_forward(net, params, x, buffers, "eval")
    d = net.output_dim
    jac = np.zeros((d, net.P))
    for j in range(d):
        e = np.zeros((1, d))
        e[0, j] = 1.0
        jac[j] = run_backward(net, params, x, tr, e)
    return jac


# ---------------------------------------------------------------------------
# Hessian-vector products
# ---------------------------------------------------------------------------

def _op_rbackward(net, params, tparams, op, i, tr, xs, txs, tcache, dy, rdy):
    """R-operator of :func:`_op_backward`: returns (R{input grads}, R{param grads})."""
    k = op.kind
    tx = txs[0]
    if k == "dense":
        w = _pget(net, params, op, "weight")
        tw = _pget(net, tparams, op, "weight")
        rdx = _padd(None if rdy is None else rdy @ w, dy @ tw)
        rdw = dy.T @ tx if tx is not None else None
        if rdy is not None:
            rdw = _padd(rdw, rdy.T @ xs[0])
        dp = {"weight": rdw}
        if "bias" in op.params:
            dp["bias"] = None if rdy is None else rdy.sum(axis=0)
        return [rdx], dp
    if k == "conv":
        w = _pget(net, params, op, "weight")
        tw = _pget(net, tparams, op, "weight")
        in_shape = _in_shape(net, op.inputs[0])
        rdx = None
        if op.inputs[0] >= 0:
            n, cout = dy.shape[:2]
            dcols = np.matmul(tw.reshape(cout, -1).T, dy.reshape(n, cout, -1))
            if rdy is not None:
                dcols = dcols + np.matmul(w.reshape(cout, -1).T, rdy.reshape(n, cout, -1))
            rdx = _accel.kernels.col2im(dcols, (n,) + tuple(in_shape), op.kernel, op.stride, op.padding)
        rdw = None if tcache is None else _conv_dw(dy, tcache, w.shape)
        if rdy is not None:
            rdw = _padd(rdw, _conv_dw(rdy, tr.caches[i], w.shape))
        dp = {"weight": rdw}
        if "bias" in op.params:
            dp["bias"] = None if rdy is None else _chan_sum(rdy)
        return [rdx], dp
    if k == "bn":
        g = _pget(net, params, op, "bn_weight")
        tg = _pget(net, tparams, op, "bn_weight")
        xhat, s, mode = tr.caches[i]
        nd = dy.ndim
        rdx = dy * _chan(tg / s, nd)
        if rdy is not None:
            rdx = rdx + rdy * _chan(g / s, nd)
        rdg = None if tx is None else _chan_sum(dy * tx) / s
        if rdy is not None:
            rdg = _padd(rdg, _chan_sum(rdy * xhat))
        return [rdx], {"bn_weight": rdg, "bn_bias": None if rdy is None else _chan_sum(rdy)}
    if rdy is None:
        return [None] * len(op.inputs), {}
    dxs, _ = _op_backward(net, params, op, i, tr, xs, rdy)
    return dxs, {}


def hvp(net: Network, params, x, targets, kind, v, buffers=None):
    """Exact H(theta) v for the mean loss over the batch (eval-mode BN)."""
    params = np.asarray(params, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (net.P,):
        raise DimensionError(f"vector has length {v.size}, model has P={net.P}")
    x = np.asarray(x, dtype=np.float64)
    tr = run_forward(net, params, x, buffers, "eval")
    tvals, tcaches = run_tangent(net, params, x, tr, v)
    out = tr.vals[-1]
    tout = tvals[-1]
    gnodes = [None] * len(net.ops)
    rnodes = [None] * len(net.ops)
    gnodes[-1] = loss_grad(out, targets, kind)
    rnodes[-1] = None if tout is None else loss_hess_vec(out, tout, kind)
    hv = np.zeros(net.P)
    for i in range(len(net.ops) - 1, -1, -1):
        dy = gnodes[i]
        if dy is None:
            continue
        op = net.ops[i]
        xs = [x if j < 0 else tr.vals[j] for j in op.inputs]
        txs = [None if j < 0 else tvals[j] for j in op.inputs]
        dxs, _ = _op_backward(net, params, op, i, tr, xs, dy)
        rdxs, rdp = _op_rbackward(net, params, v, op, i, tr, xs, txs, tcaches[i], dy, rnodes[i])
        _write(hv, op, {r: val for r, val in rdp.items() if val is not None})
        for j, dx, rdx in zip(op.inputs, dxs, rdxs):
            if j < 0:
                continue
            gnodes[j] = dx if gnodes[j] is None else gnodes[j] + dx
            if rdx is not None:
                rnodes[j] = rdx if rnodes[j] is None else rnodes[j] + rdx
    frozen = net.frozen_mask()
    if frozen.any():
        hv[frozen] = 0.0
    return hv


# ---------------------------------------------------------------------------
# per-sample channel contractions
# ---------------------------------------------------------------------------

def channel_output_projections(net: Network, params, x, op_ids, buffers=None):
    """phi(x_n) restricted to per-channel parameter groups, contracted with theta.

    For each op in ``op_ids`` (dense, conv or eval-mode bn) the op output is
    homogeneous of degree one in the parameters feeding each output channel,
    so the derivative of output ``j`` along "this channel's own parameters"
    equals ``<d f_j / d y[:, c], y[:, c]>`` summed over spatial positions.
    Returns ``{op_id: array (N, D, C)}`` using one reverse pass per output.
    """
    params = np.asarray(params, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    tr = run_forward(net, params, x, buffers, "eval")
    n = x.shape[0]
    d = net.output_dim
    wanted = set(op_ids)
    res = {i: np.zeros((n, d, net.ops[i].shape[0])) for i in wanted}
    for j in range(d):
        e = np.zeros((n, d))
        e[:, j] = 1.0

        def hook(i, op, dy, j=j):
            if i in wanted:
                y = tr.vals[i]
                prod = dy * y
                res[i][:, j, :] = prod.reshape(n, prod.shape[1], -1).sum(axis=2)

        run_backward(net, params, x, tr, e, hook=hook)
    return res, tr.vals[-1]
