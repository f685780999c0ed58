import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from structprune import _accel
from structprune.errors import ConfigurationError, InputError
from structprune.models import LayerSpec, ModelSpec, Network, mlp_toy
from structprune.saliency import QMatrix, SaliencyVector
from structprune.selection import (PruningMask, SelectionPolicy, select, select_first_order, select_random,
                                   select_sosp_h, select_sosp_i, select_sosp_i_diag, shuffle_within_layers,
                                   target_count)
from structprune.structures import segment


def seg_with(widths, kernels=None):
    """Segmentation over dense (or conv) layers of the given widths."""
    kernels = kernels or [1] * len(widths)
    if all(k == 1 for k in kernels):
        return segment(mlp_toy(2, 2, tuple(widths)))
    layers = []
    for w, k in zip(widths, kernels):
        layers += [LayerSpec("conv", out=w, kernel=k, padding=k // 2), LayerSpec("relu")]
    layers += [LayerSpec("gap"), LayerSpec("dense", out=2, prunable=False)]
    return segment(Network(ModelSpec("c", (1, 5, 5), 2, layers)))


def literal_greedy(q, m, layer_of=None, limits=None):
    """Recompute the full objective sum_{s,t in M+{c}} q[s,t] for every candidate."""
    picked = []
    S = q.shape[0]
    for _ in range(m):
        best, best_val = None, None
        for c in range(S):
            if c in picked:
                continue
            if layer_of is not None and sum(layer_of[p] == layer_of[c] for p in picked) >= limits[layer_of[c]]:
                continue
            idx = picked + [c]
            val = q[np.ix_(idx, idx)].sum()
            if best_val is None or val < best_val - 1e-12 * max(1.0, abs(val)):
                best, best_val = c, val
        if best is None:
            break
        picked.append(best)
    return picked


# -- examples ---------------------------------------------------------------

def test_sosp_h_prunes_smallest_first():
    seg = seg_with([3])
    mask = select_sosp_h(np.array([3.0, 1.0, 2.0]), seg, SelectionPolicy(), 1 / 3)
    assert mask.structures == [1]
    mask = select_sosp_h(np.array([3.0, 1.0, 2.0]), seg, SelectionPolicy(), 2 / 3)
    assert mask.structures == [1, 2]


def test_ties_go_to_lowest_id():
    seg = seg_with([4])
    assert select_sosp_h(np.array([2.0, 1.0, 1.0, 1.0]), seg, SelectionPolicy(), 0.5).structures == [1, 2]
    q = np.diag([1.0, 1.0, 1.0, 1.0])
    assert select_sosp_i(q, seg, SelectionPolicy("sosp_i"), 0.5).structures == [0, 1]


def test_kernel_scaling_example():
    # scores (2, 3) with kernel sizes (1, 3): scaled scores 2 and 1, so the second goes first
    seg = seg_with([1, 1], kernels=[1, 3])
    assert seg.kernel_of.tolist() == [1.0, 3.0]
    plain = select_sosp_h(np.array([2.0, 3.0]), seg, SelectionPolicy(), 0.5)
    scaled = select_sosp_h(np.array([2.0, 3.0]), seg, SelectionPolicy(kernel_scaling=True), 0.5)
    assert plain.structures == [0]
    assert scaled.structures == [1]


def test_greedy_example_scores():
    seg = seg_with([2])
    mask = select_sosp_i(np.array([[1.0, 5.0], [5.0, 2.0]]), seg, SelectionPolicy("sosp_i"), 1.0)
    assert mask.structures == [0, 1]
    assert mask.scores == [1.0, 12.0]


def test_diag_and_full_disagree_when_correlations_matter():
    # 0 and 1 are cheap alone but strongly correlated; 2 is moderately expensive and independent
    q = np.array([[1.0, 10.0, 0.0], [10.0, 1.0, 0.0], [0.0, 0.0, 3.0]])
    seg = seg_with([3])
    full = select_sosp_i(q, seg, SelectionPolicy("sosp_i"), 2 / 3)
    diag = select_sosp_i_diag(q, seg, SelectionPolicy("sosp_i_diag"), 2 / 3)
    assert sorted(full.structures) == [0, 2]
    assert sorted(diag.structures) == [0, 1]


def test_target_count_rounding():
    assert target_count(0.5, 5) == 3
    assert target_count(0.0, 7) == 0
    assert target_count(1.0, 7) == 7
    assert target_count(0.25, 10) == 3
    with pytest.raises(InputError):
        target_count(1.5, 10)


def test_layer_cap_shortfall_is_recorded():
    seg = seg_with([2, 2])
    mask = select_sosp_h(np.array([0.0, 0.0, 0.0, 0.0]), seg, SelectionPolicy(layer_cap=0.5), 1.0)
    assert len(mask) == 2
    assert mask.shortfall == 2
    assert mask.meta["shortfall"] == 2
    assert sorted(mask.layers) == [0, 2]


def test_collapsed_layer_is_flagged():
    seg = seg_with([2, 3])
    mask = select_sosp_h(np.array([0.0, 0.0, 5.0, 5.0, 5.0]), seg, SelectionPolicy(), 0.4)
    assert mask.meta["collapsed_layers"] == [0]


def test_policy_validation():
    with pytest.raises(ConfigurationError):
        SelectionPolicy("magnitude")
    with pytest.raises(ConfigurationError):
        SelectionPolicy(layer_cap=0.0)


def test_mask_json_round_trip():
    seg = seg_with([3, 2])
    mask = select_sosp_h(np.arange(5.0)[::-1].copy(), seg, SelectionPolicy(), 0.4)
    back = PruningMask.from_json(mask.to_json())
    assert back.structures == mask.structures
    assert back.layers == mask.layers
    assert back.requested == mask.requested


def test_score_length_mismatch():
    seg = seg_with([3])
    with pytest.raises(InputError):
        select_sosp_h(np.ones(4), seg, SelectionPolicy(), 0.5)
    with pytest.raises(InputError):
        select_sosp_i(np.ones((4, 4)), seg, SelectionPolicy("sosp_i"), 0.5)


def test_dispatcher():
    seg = seg_with([4])
    sal = SaliencyVector(np.array([4.0, 3.0, 2.0, 1.0]), np.zeros(4))
    q = QMatrix(np.diag([4.0, 3.0, 2.0, 1.0]), np.array([4.0, 3.0, 2.0, 1.0]))
    for meth in ("sosp_h", "first_order", "sosp_i", "sosp_i_diag"):
        m = select(SelectionPolicy(meth), seg, 0.5, saliency=sal, q=q)
        assert sorted(m.structures) == [2, 3], meth
    assert len(select(SelectionPolicy("random"), seg, 0.5, seed=0)) == 2


# -- properties ------------------------------------------------------------

def _random_q(rng, S):
    a = rng.normal(size=(S, S))
    return np.abs(a + a.T) * rng.uniform(0.1, 3)


@settings(max_examples=60, deadline=None)
@given(S=st.integers(1, 10), seed=st.integers(0, 10 ** 6), frac=st.floats(0, 1))
def test_greedy_matches_literal_recomputation(S, seed, frac):
    rng = np.random.default_rng(seed)
    q = _random_q(rng, S)
    seg = seg_with([S])
    m = target_count(frac, S)
    mask = select_sosp_i(q, seg, SelectionPolicy("sosp_i"), frac)
    assert mask.structures == literal_greedy(q, m)


@settings(max_examples=40, deadline=None)
@given(widths=st.lists(st.integers(1, 5), min_size=1, max_size=3), seed=st.integers(0, 10 ** 6),
       cap=st.floats(0.1, 1.0), frac=st.floats(0, 1))
def test_layer_caps_respected(widths, seed, cap, frac):
    rng = np.random.default_rng(seed)
    seg = seg_with(widths)
    pol_h = SelectionPolicy("sosp_h", layer_cap=cap)
    pol_i = SelectionPolicy("sosp_i", layer_cap=cap)
    q = _random_q(rng, seg.S)
    for mask in (select_sosp_h(rng.uniform(size=seg.S), seg, pol_h, frac),
                 select_sosp_i(q, seg, pol_i, frac),
                 select_random(seg, frac, seed, pol_h)):
        for lay in seg.layers:
            n = len(seg.by_layer[lay])
            assert sum(1 for x in mask.layers if x == lay) <= int(np.floor(cap * n + 1e-9))
        assert len(mask) + mask.shortfall == target_count(frac, seg.S)


@settings(max_examples=40, deadline=None)
@given(S=st.integers(1, 12), seed=st.integers(0, 10 ** 6), frac=st.floats(0, 1))
def test_first_order_reduction(S, seed, frac):
    rng = np.random.default_rng(seed)
    lam = rng.uniform(size=S)
    if seed % 3 == 0:
        lam = np.round(lam, 1)        # force ties
    seg = seg_with([S])
    pol = SelectionPolicy("sosp_i")
    a = select_sosp_i(np.diag(lam), seg, pol, frac)
    b = select_sosp_h(SaliencyVector(lam, np.zeros(S)), seg, SelectionPolicy(), frac)
    c = select_first_order(lam, seg, SelectionPolicy("first_order"), frac)
    assert a.structures == b.structures == c.structures


@settings(max_examples=30, deadline=None)
@given(S=st.integers(2, 10), seed=st.integers(0, 10 ** 6), scale=st.floats(1e-3, 1e3))
def test_selection_is_scale_invariant(S, seed, scale):
    rng = np.random.default_rng(seed)
    q = _random_q(rng, S)
    seg = seg_with([S])
    a = select_sosp_i(q, seg, SelectionPolicy("sosp_i"), 0.5).structures
    b = select_sosp_i(q * scale, seg, SelectionPolicy("sosp_i"), 0.5).structures
    assert a == b


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10 ** 6))
def test_kernel_scaling_neutral_for_equal_kernels(seed):
    rng = np.random.default_rng(seed)
    seg = seg_with([3, 3], kernels=[3, 3])
    s = rng.uniform(size=6)
    a = select_sosp_h(s, seg, SelectionPolicy(), 0.5).structures
    b = select_sosp_h(s, seg, SelectionPolicy(kernel_scaling=True), 0.5).structures
    assert a == b


def test_random_is_uniform_and_deterministic():
    seg = seg_with([4])
    counts = np.zeros(4)
    for seed in range(4000):
        counts[select_random(seg, 0.5, seed).structures] += 1
    np.testing.assert_allclose(counts / 4000, 0.5, atol=0.04)
    assert select_random(seg, 0.5, 7).structures == select_random(seg, 0.5, 7).structures


def test_shuffle_preserves_layer_counts_and_is_uniform():
    seg = seg_with([4, 3])
    base = PruningMask("sosp_h", 0.43, [0, 1, 4], [0, 0, 0], [0, 0, 2], None, 3)
    seen = {}
    for seed in range(3000):
        sh = shuffle_within_layers(base, seg, seed)
        assert sorted(sh.layers) == [0, 0, 2]
        key = tuple(s for s in sh.structures if seg.layer_of[s] == 0)
        seen[key] = seen.get(key, 0) + 1
    # all C(4, 2) = 6 subsets of layer 0 appear with roughly equal frequency
    assert set(seen) == set(itertools.combinations(range(4), 2))
    freq = np.array(list(seen.values())) / 3000
    np.testing.assert_allclose(freq, 1 / 6, atol=0.03)


def test_greedy_backends_agree_on_caps():
    rng = np.random.default_rng(0)
    q = _random_q(rng, 9)
    layer_of = np.array([0, 0, 0, 1, 1, 1, 2, 2, 2])
    lim = np.array([1, 2, 3])
    a = _accel.NUMPY_KERNELS.greedy_select(q, 9, layer_of, lim)
    assert len(a[0]) == 6
    assert a[0].tolist() == literal_greedy(q, 9, layer_of, lim)
    if _accel.NUMBA_KERNELS is not None:
        b = _accel.NUMBA_KERNELS.greedy_select(q, 9, layer_of, lim)
        assert a[0].tolist() == b[0].tolist()
