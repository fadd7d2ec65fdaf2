import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nnxtract.extracted import ExtractedLayer, ExtractedModel
from nnxtract.model import (AmbiguousRegionError, VictimModel, forward,
                            forward_batch, forward_prefix, local_linear_map,
                            verify_extraction, victim_prefix_layers)
from conftest import random_victim


def brute_forward(Ws, bs, x):
    """Independent oracle: literal loop evaluation."""
    h = np.asarray(x, dtype=float)
    for i, (W, b) in enumerate(zip(Ws, bs)):
        h = W @ h + b
        if i != len(Ws) - 1:
            h = np.where(h > 0, h, 0.0)
    return float(h[0])


def test_forward_zero_model():
    m = VictimModel.from_arrays([np.zeros((3, 2)), np.zeros((1, 3))],
                                [np.zeros(3), np.zeros(1)])
    assert forward(m, [1.7, -2.3]) == 0.0


def test_forward_relu_clamps_negative():
    m = VictimModel.from_arrays([np.array([[2.0]]), np.array([[1.0]])],
                                [np.array([-1.0]), np.array([0.0])])
    assert forward(m, [0.25]) == 0.0


def test_forward_worked_example(tiny_victim):
    # ReLU(0.2) + 2*ReLU(0.4) + 0.5, expected value frozen from the brute
    # force evaluator
    expected = brute_forward(tiny_victim.weights, tiny_victim.biases, [0.3, 0.1])
    assert expected == pytest.approx(1.5, abs=1e-15)
    assert forward(tiny_victim, [0.3, 0.1]) == pytest.approx(expected, abs=0)


def test_forward_matches_brute_force_randomly():
    m = random_victim((6, 4, 3, 1), seed=3)
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = rng.standard_normal(6)
        assert forward(m, x) == pytest.approx(
            brute_forward(m.weights, m.biases, x), rel=1e-12)


def test_forward_batch_matches_single(victim_10551):
    rng = np.random.default_rng(1)
    X = rng.standard_normal((40, 10))
    ys = forward_batch(victim_10551, X)
    for i in range(40):
        assert ys[i] == pytest.approx(forward(victim_10551, X[i]), rel=1e-12)


def test_forward_rejects_bad_input(victim_10551):
    with pytest.raises(ValueError):
        forward(victim_10551, np.zeros(3))
    with pytest.raises(ValueError):
        forward(victim_10551, np.full(10, np.nan))


def test_forward_deterministic(victim_10551):
    x = np.random.default_rng(2).standard_normal(10)
    outs = {forward(victim_10551, x) for _ in range(10)}
    assert len(outs) == 1


def test_forward_prefix_identity_at_zero(tiny_victim):
    x = np.array([0.3, 0.1])
    assert np.array_equal(forward_prefix(tiny_victim, x, 0), x)


def test_forward_prefix_worked_example(tiny_victim):
    h = forward_prefix(tiny_victim, [0.3, 0.1], 1)
    assert h == pytest.approx([0.2, 0.4], abs=1e-15)


def test_forward_prefix_range_check(tiny_victim):
    with pytest.raises(ValueError):
        forward_prefix(tiny_victim, [0.0, 0.0], 5)


def test_local_linear_map_first_layer(tiny_victim):
    M, m = local_linear_map(victim_prefix_layers(tiny_victim, 1), [0.3, 0.1])
    assert np.allclose(M, [[1.0, -1.0], [1.0, 1.0]])


def test_local_linear_map_masks_inactive():
    m = VictimModel.from_arrays(
        [np.array([[1.0, 0.0], [0.0, 1.0]]), np.array([[1.0, 1.0]])],
        [np.zeros(2), np.zeros(1)])
    M, _ = local_linear_map(victim_prefix_layers(m, 1), [1.0, -1.0])
    assert np.allclose(M, [[1.0, 0.0], [0.0, 0.0]])


def test_local_linear_map_ambiguous_region(tiny_victim):
    with pytest.raises(AmbiguousRegionError):
        local_linear_map(victim_prefix_layers(tiny_victim, 1), [0.0, 0.0])


def test_local_linear_map_consistency(victim_10551):
    rng = np.random.default_rng(5)
    layers = victim_prefix_layers(victim_10551, 2)
    checked = 0
    while checked < 20:
        x = rng.standard_normal(10)
        try:
            M, m0 = local_linear_map(layers, x)
        except AmbiguousRegionError:
            continue
        v = rng.standard_normal(10) * 1e-7
        lhs = forward_prefix(victim_10551, x + v, 2)
        rhs = forward_prefix(victim_10551, x, 2) + M @ v
        assert np.linalg.norm(lhs - rhs) <= 1e-9 * (1 + np.linalg.norm(lhs))
        checked += 1


def _extracted_from_truth(m: VictimModel, scales, flip_sign_of=None, perturb=None):
    layers = []
    for li in range(m.n_layers - 1):
        W = m.weights[li].copy() * np.asarray(scales[li])[:, None]
        b = m.biases[li].copy() * np.asarray(scales[li])
        if perturb and perturb[0] == li:
            W[perturb[1], perturb[2]] += perturb[3]
        signs = np.ones(W.shape[0], dtype=int)
        if flip_sign_of and flip_sign_of[0] == li:
            signs[flip_sign_of[1]] = -1
        layers.append(ExtractedLayer(
            layer_index=li + 1, signatures=W * signs[:, None],
            signs=signs, bias_multiples=b * signs,
            confidence=np.ones(W.shape[0]), status=["easy"] * W.shape[0],
            achieved_precision=np.zeros(W.shape[0])))
    return ExtractedModel(layers=layers, final_weights=m.weights[-1][0].copy(),
                          final_bias=float(m.biases[-1][0]),
                          alignment=[[1.0] * l.width for l in layers])


def test_verify_scale_invariance(victim_10551):
    ext = _extracted_from_truth(victim_10551, [[1 / 3.7] * 5, [1.0] * 5])
    # the hidden rescaling changes the function; compare structure only
    res = verify_extraction(victim_10551, _extracted_from_truth(
        victim_10551, [[1.0] * 5, [1.0] * 5]))
    assert res.all_matched and res.all_signs_correct
    assert res.max_aligned_error() < 1e-12
    assert res.functional_max_err < 1e-9
    per_layer = verify_extraction(victim_10551, ext).layers[0]
    assert all(nv.max_rel_error < 1e-12 for nv in per_layer)
    assert all(nv.sign_correct for nv in per_layer)


def test_verify_detects_negated_row(victim_10551):
    ext = _extracted_from_truth(victim_10551, [[1.0] * 5, [1.0] * 5],
                                flip_sign_of=(0, 2))
    res = verify_extraction(victim_10551, ext)
    assert not res.layers[0][2].sign_correct
    others = [nv.sign_correct for k, nv in enumerate(res.layers[0]) if k != 2]
    assert all(others)


def test_verify_reports_small_perturbation(victim_10551):
    ext = _extracted_from_truth(victim_10551, [[1.0] * 5, [1.0] * 5],
                                perturb=(0, 1, 3, 1e-9))
    res = verify_extraction(victim_10551, ext)
    err = res.layers[0][1].max_rel_error
    assert 1e-10 < err < 1e-7


def test_verify_invariant_under_permutation(victim_10551):
    ext = _extracted_from_truth(victim_10551, [[1.0] * 5, [1.0] * 5])
    perm = [3, 1, 4, 0, 2]
    l0 = ext.layers[0]
    l0.signatures = l0.signatures[perm]
    l0.bias_multiples = l0.bias_multiples[perm]
    # fix layer 2 inputs accordingly so the function is unchanged
    ext.layers[1].signatures = ext.layers[1].signatures[:, perm]
    res = verify_extraction(victim_10551, ext)
    assert res.all_matched and res.all_signs_correct
    assert res.max_aligned_error() < 1e-12
    assert res.functional_max_err < 1e-9


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_forward_property_brute_force(seed):
    m = random_victim((4, 3, 1), seed=seed % 1000)
    x = np.random.default_rng(seed).standard_normal(4)
    assert forward(m, x) == pytest.approx(
        brute_forward(m.weights, m.biases, x), rel=1e-11, abs=1e-12)
