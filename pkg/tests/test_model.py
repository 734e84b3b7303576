import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepwriter.errors import DomainError, ShapeError
from deepwriter.layers import softmax_cross_entropy
from deepwriter.model import (ArchitectureSpec, FC, build_network, deepwriter_spec, kernel_variant,
                              output_shapes, param_count, parse_layer, scaled)
from deepwriter.tensor import DOUBLE

from gradcheck import numeric_grad, rel_error

SPATIAL = [113, 55, 27, 27, 13, 13, 13, 13, 6]


def reduced(classes=4, **kw):
    return deepwriter_spec(classes, 33, scale=0.125, **kw)


def spatial_trace(spec):
    """Sides after input, conv1, pool1, conv2, pool2, conv3, conv4, conv5, pool5."""
    trace = output_shapes(spec)
    keep = [dims for tok, dims in trace if tok == "input" or ":" in tok and tok.startswith("conv") or tok.startswith("M")]
    return [d[1] for d in keep]


def test_default_trace_and_widths():
    spec = deepwriter_spec(10)
    assert spatial_trace(spec) == SPATIAL
    trace = dict((tok, dims) for tok, dims in output_shapes(spec))
    assert trace["fc6:1024"] == (1024,) and trace["fc7:1024"] == (1024,)
    assert trace["fc8:classes"] == (10,)
    assert spec.layers[-1] == FC("fc8")


def test_flatten_is_9216():
    pool5 = [dims for tok, dims in output_shapes(deepwriter_spec(10)) if tok == "M3S2"][-1]
    assert int(np.prod(pool5)) == 9216


def test_variant_131_conv1_side():
    trace = output_shapes(kernel_variant("alexnet131", 10))
    assert trace[1] == ("conv1:96C11S4", (96, 31, 31))


def test_variant_227_builds():
    spec = kernel_variant("alexnet227", 5, scale=0.125)
    net = build_network(spec, 1, 0)
    assert net.predict_proba(np.zeros((1, 1, 227, 227), np.float32)).shape == (1, 5)


def test_fc_only_spec_trace():
    spec = ArchitectureSpec((FC("a", 7), FC("b", 3), FC("out")), 2, input_side=1)
    assert [d for _, d in output_shapes(spec)[1:]] == [(7,), (3,), (2,)]


def test_scaled_preset():
    spec = reduced()
    net = build_network(spec, 1, 0)
    assert net.params["conv1"].weights.shape == (12, 1, 5, 5)
    assert net.params["fc6"].weights.shape[0] == 128 and net.params["fc7"].weights.shape[0] == 128
    assert spatial_trace(spec) == [33, 15, 7, 7, 3, 3, 3, 3, 1]
    assert scaled(3, 0.01) == 1 and scaled(96, 0.125) == 12 and scaled(5, 0.5) == 3


def test_non_positive_spatial_dims_fail_at_build():
    with pytest.raises(ShapeError):
        build_network(deepwriter_spec(3, 20), 1, 0)


def test_layer_tokens_round_trip():
    for layer in deepwriter_spec(3).layers:
        assert parse_layer(layer.token()) == layer
    with pytest.raises(DomainError):
        parse_layer("nonsense")


def test_spec_dict_round_trip_and_fingerprint():
    spec = reduced()
    assert ArchitectureSpec.from_dict(spec.to_dict()) == spec
    assert spec.fingerprint() == reduced().fingerprint()
    assert spec.fingerprint() != reduced(5).fingerprint()


# -- parameter counts ----------------------------------------------------------

def test_param_count_formulas():
    net = build_network(deepwriter_spec(10), 1, 0)
    assert net.params["conv1"].size == 96 * 25 + 96 == 2496
    assert net.params["fc6"].size == 9216 * 1024 + 1024 == 9_438_208


@pytest.mark.parametrize("scale", [1.0, 0.5, 0.25, 0.125])
def test_parameter_parity(scale):
    spec = deepwriter_spec(10, scale=scale)
    half = build_network(spec, 1, 0)
    deep = build_network(spec, 2, 0)
    assert param_count(half) == param_count(deep) == param_count(spec)
    assert list(half.params) == list(deep.params)


def test_build_is_seed_deterministic():
    a, b = build_network(reduced(), 2, 3), build_network(reduced(), 2, 3)
    for k, v in a.named_tensors().items():
        np.testing.assert_array_equal(v, b.named_tensors()[k])
    c = build_network(reduced(), 2, 4)
    assert not np.array_equal(a.params["conv1"].weights, c.params["conv1"].weights)


def test_gaussian_init_std():
    net = build_network(deepwriter_spec(10, scale=0.5), 1, 0, init="gaussian")
    w = net.params["fc6"].weights
    assert abs(float(w.std()) - 0.01) < 2e-4 and abs(float(w.mean())) < 1e-4
    assert all(not p.biases.any() for p in net.params.values())
    with pytest.raises(DomainError):
        build_network(reduced(), 1, 0, init="uniform")


# -- forward -------------------------------------------------------------------

def test_forward_single_scores():
    net = build_network(reduced(), 1, 0)
    patch = np.random.default_rng(1).standard_normal((1, 33, 33)).astype(np.float32)
    p = net.forward_single(patch)
    assert p.shape == (4,) and abs(float(p.sum()) - 1) <= 1e-5 and np.all(p >= 0)
    np.testing.assert_array_equal(p, net.forward_single(patch.copy()))
    with pytest.raises(ShapeError):
        net.forward_single(np.zeros((1, 32, 33), np.float32))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_forward_pair_is_order_symmetric(seed):
    rng = np.random.default_rng(seed)
    net = build_network(reduced(), 2, 0)
    a, b = (rng.standard_normal((1, 33, 33)).astype(np.float32) * 3 for _ in range(2))
    ab, ba = net.forward_pair(a, b), net.forward_pair(b, a)
    np.testing.assert_array_equal(ab, ba)
    assert abs(float(ab.sum()) - 1) <= 1e-5


def test_stream_count_guards():
    with pytest.raises(DomainError):
        build_network(reduced(), 3, 0)
    with pytest.raises(DomainError):
        build_network(reduced(), 1, 0).forward_pair(np.zeros((1, 33, 33)), np.zeros((1, 33, 33)))
    with pytest.raises(DomainError):
        build_network(reduced(), 2, 0).forward_single(np.zeros((1, 33, 33)))


def test_pair_fusion_is_sum_of_stream_features():
    rng = np.random.default_rng(2)
    net = build_network(reduced(), 2, 0, dtype=DOUBLE)
    x1, x2 = rng.standard_normal((3, 1, 33, 33)), rng.standard_normal((3, 1, 33, 33))
    logits, _ = net.forward((x1, x2))
    expected = net.classify(net.stream_features(x1) + net.stream_features(x2))
    np.testing.assert_allclose(logits, expected, rtol=1e-12, atol=1e-12)


def test_preprocess_normalises():
    net = build_network(reduced(), 1, 0)
    net.pixel_mean = 0.5
    x = net.preprocess(np.array([[[0, 255]]], np.uint8))
    assert x.shape == (1, 1, 1, 2) and x.dtype == np.float32
    np.testing.assert_allclose(x.ravel(), [-0.5, 0.5])


# -- gradients -----------------------------------------------------------------

@pytest.mark.parametrize("streams", [1, 2])
def test_end_to_end_gradients(streams):
    rng = np.random.default_rng(10 + streams)
    net = build_network(reduced(), streams, rng, dtype=DOUBLE)
    shape = (3, 1, 33, 33)
    x = (rng.standard_normal(shape), rng.standard_normal(shape)) if streams == 2 else rng.standard_normal(shape)
    y = np.array([0, 3, 1])
    loss_fn = lambda: net.loss_and_grads(x, y, np.random.default_rng(99))[0]
    _, grads, _ = net.loss_and_grads(x, y, np.random.default_rng(99))
    for name, layer in net.params.items():
        for part, arr in (("weight", layer.weights), ("bias", layer.biases)):
            g = grads[f"{name}.{part}"].reshape(-1)
            # Probe entries whose gradient clears FD round-off; dead units give exact zeros.
            live = np.flatnonzero(np.abs(g) > 1e-3 * np.abs(g).max())
            idx = rng.choice(live, size=min(live.size, 12), replace=False)
            num = numeric_grad(loss_fn, arr, indices=idx)
            ana = g[idx]
            assert rel_error(ana, num.reshape(-1)[idx]) <= 1e-4, f"{name}.{part}"


def test_shared_gradient_is_sum_of_stream_contributions():
    rng = np.random.default_rng(5)
    # No dropout, so the fused pass and the per-stream passes see the same activations.
    net = build_network(reduced(dropout=0.0), 2, rng, dtype=DOUBLE)
    x1, x2 = rng.standard_normal((2, 1, 33, 33)), rng.standard_normal((2, 1, 33, 33))
    y = np.array([1, 2])
    _, grads, _ = net.loss_and_grads((x1, x2), y, rng)
    # Gradient flowing through one stream while the other stream's features are held fixed.
    head = build_network(reduced(dropout=0.0), 2, 0, dtype=DOUBLE)
    head.params = net.params
    contributions = []
    for xa, xb in [(x1, x2), (x2, x1)]:
        stape, htape, part = [], [], {}
        logits = head.classify(head.stream_features(xa, tape=stape) + head.stream_features(xb), tape=htape)
        dfused = head._unwind(htape, softmax_cross_entropy(logits, y)[2], {})
        head._unwind(stape, dfused, part, need_input_grad=False)
        contributions.append(part)
    stream_keys = [k for k in grads if not k.startswith("fc8.")]
    assert len(stream_keys) == 14
    for k in stream_keys:
        np.testing.assert_allclose(grads[k], contributions[0][k] + contributions[1][k], rtol=1e-10, atol=1e-13)
