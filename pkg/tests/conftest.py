import warnings

import numpy as np
import pytest

from structprune.models import LayerSpec, ModelSpec, Network, convnet_toy, mlp_toy, restoy

warnings.filterwarnings("ignore", message="The TBB threading layer")

_ACCEPT = {}


def small_zoo():
    """Reduced variants of every zoo model, each under 5000 parameters."""
    return {
        "mlp_toy": mlp_toy(d=8, D=3, hidden=(64, 64)),
        "convnet_toy": convnet_toy((3, 8, 8), D=4, widths=(4, 4, 6, 6, 8, 8)),
        "restoy": restoy((3, 8, 8), D=4, widths=(4, 6, 8), blocks=1),
    }


def tiny_inputs(net, n, rng):
    return rng.normal(size=(n,) + net.input_shape)


def trained_like_params(net, seed):
    """Random params with non-degenerate BN buffers."""
    rng = np.random.default_rng(seed)
    params = net.init_params(seed)
    buffers = net.init_buffers()
    for op in net.ops:
        if op.kind == "bn":
            off_m, c = op.buffers["mean"]
            off_v, _ = op.buffers["var"]
            buffers[off_m:off_m + c] = rng.normal(0, 0.1, c)
            buffers[off_v:off_v + c] = rng.uniform(0.5, 2.0, c)
            for role in ("bn_weight", "bn_bias"):
                blk = op.params[role]
                params[net.block_slice(blk)] += rng.normal(0, 0.1, blk.size)
    for blk in net.layout:
        if blk.role == "bias":
            params[net.block_slice(blk)] = rng.normal(0, 0.1, blk.size)
    return params, buffers


def linear_net(d=4, h=5, D=3):
    """dense(prunable) -> dense classifier, no activation: linear in the first layer."""
    spec = ModelSpec("linear", (d,), D, [LayerSpec("dense", out=h, name="fc1"),
                                          LayerSpec("dense", out=D, prunable=False, name="classifier")])
    return Network(spec)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_runtest_logreport(report):
    if "test_acceptance.py" in report.nodeid and report.when == "call":
        _ACCEPT[report.nodeid] = report.outcome
    elif "test_acceptance.py" in report.nodeid and report.outcome == "failed":
        _ACCEPT[report.nodeid] = "failed"


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPT:
        return
    terminalreporter.section("acceptance criteria")
    for nodeid, outcome in sorted(_ACCEPT.items(), key=lambda kv: _crit_no(kv[0])):
        name = nodeid.split("::")[-1]
        terminalreporter.write_line(f"{'PASS' if outcome == 'passed' else 'FAIL'}  {name}")


def _crit_no(nodeid):
    name = nodeid.split("::")[-1]
    digits = "".join(ch for ch in name.split("_")[1] if ch.isdigit()) if "_" in name else ""
    return int(digits) if digits else 0
