import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deepwriter import checkpoint as C
from deepwriter.data import Sample
from deepwriter.errors import DomainError, TrainingDiverged, TransferError
from deepwriter.model import build_network, deepwriter_spec
from deepwriter.optim import TrainConfig
from deepwriter.patching import PatchPlan, make_pairs, sample_indices, scan_patches
from deepwriter.pipeline import (aggregate_scores, as_samples, evaluate, evaluate_adjacent, finetune,
                                 identify, pair_scores, patch_scores, train, transfer)
from deepwriter.synth import synthesize

SIDE = 33


def reduced(classes=2, **kw):
    return deepwriter_spec(classes, SIDE, scale=0.125, **kw)


def constant_net(probs, streams=1):
    """A real network whose output ignores its input: zero classifier weights, log-prob biases."""
    net = build_network(reduced(len(probs)), streams, 0)
    fc8 = net.params["fc8"]
    fc8.weights[...] = 0
    fc8.biases[...] = np.log(np.asarray(probs, np.float32))
    return net


class BrightnessOracle:
    """Stand-in network: class 1 for bright patches, class 0 for dark ones."""

    spec = reduced()
    streams = 1
    num_classes = 2

    def preprocess(self, patches):
        return patches.astype(np.float64)[:, None]

    def predict_proba(self, x):
        bright = x.mean(axis=(1, 2, 3)) > 127
        return np.stack([np.where(bright, 0.0, 1.0), np.where(bright, 1.0, 0.0)], axis=1)


def flat_image(value, width=100):
    return np.full((SIDE, width), value, np.uint8)


# -- aggregation ---------------------------------------------------------------

def test_aggregate_examples():
    v = np.array([0.3, 0.7])
    np.testing.assert_array_equal(aggregate_scores([v]), v)
    np.testing.assert_allclose(aggregate_scores([[0.6, 0.4], [0.2, 0.8]]), [0.4, 0.6], rtol=0, atol=1e-15)
    with pytest.raises(DomainError):
        aggregate_scores([])
    with pytest.raises(DomainError):
        aggregate_scores([[0.5, 0.5], [1.0]])


def distributions(n, k):
    return st.lists(st.lists(st.floats(0.01, 1.0), min_size=k, max_size=k), min_size=n, max_size=n).map(
        lambda rows: [np.array(r) / sum(r) for r in rows])


@given(st.integers(1, 8).flatmap(lambda n: distributions(n, 4)), st.randoms())
def test_aggregate_permutation_invariant_and_normalised(scores, rnd):
    shuffled = list(scores)
    rnd.shuffle(shuffled)
    a, b = aggregate_scores(scores), aggregate_scores(shuffled)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)
    assert abs(a.sum() - 1) <= 1e-12 and np.all(a >= 0)
    np.testing.assert_allclose(aggregate_scores(scores + scores), a, rtol=0, atol=1e-15)


# -- identify / evaluate -------------------------------------------------------

@pytest.mark.parametrize("width", [SIDE, 70, 200, 500])
def test_identify_constant_net(width):
    net = constant_net([0.9, 0.1])
    img = np.random.default_rng(width).integers(0, 256, (SIDE, width)).astype(np.uint8)
    idx, scores = identify(net, img, PatchPlan.for_side(SIDE, 0.5))
    assert idx == 0
    np.testing.assert_allclose(scores, [0.9, 0.1], atol=1e-6)


def test_identify_is_deterministic():
    net = build_network(reduced(3), 2, 1)
    img = np.random.default_rng(0).integers(0, 256, (40, 300)).astype(np.uint8)
    plan = PatchPlan.for_side(SIDE, 0.3)
    a, b = identify(net, img, plan), identify(net, img, plan)
    assert a[0] == b[0]
    np.testing.assert_array_equal(a[1], b[1])


def test_two_stream_scores_are_sampled_adjacent_pairs():
    net = build_network(reduced(3), 2, 1)
    img = np.random.default_rng(1).integers(0, 256, (SIDE, SIDE * 9 + 5)).astype(np.uint8)
    plan = PatchPlan.for_side(SIDE, 0.25)
    patches = scan_patches(img, plan)
    pairs = make_pairs(list(range(len(patches))))
    picked = [pairs[i] for i in sample_indices(len(pairs), 0.25)]
    scores = patch_scores(net, img, plan)
    assert scores.shape == (len(picked), 3)
    norm = lambda p: net.preprocess(p[None])[0]
    for row, (a, b) in zip(scores, picked):
        np.testing.assert_allclose(row, net.forward_pair(norm(patches[a]), norm(patches[b])), atol=1e-6)
    np.testing.assert_allclose(pair_scores(net, patches, picked), scores, rtol=0, atol=0)


def test_evaluate_toy_nets():
    samples = [Sample(flat_image(30), 0, "a"), Sample(flat_image(220), 1, "b"),
               Sample(flat_image(10, 150), 0, "c"), Sample(flat_image(250, 70), 1, "d")]
    plan = PatchPlan.for_side(SIDE, 1.0)
    perfect = evaluate(BrightnessOracle(), samples, plan)
    assert perfect.accuracy == 1.0 and perfect.correct == 4
    assert [(r.path, r.predicted, r.true) for r in perfect.rows] == [("a", 0, 0), ("b", 1, 1), ("c", 0, 0), ("d", 1, 1)]
    const = evaluate(constant_net([0.2, 0.8]), samples, plan)
    assert const.accuracy == 0.5 == const.correct / len(const.rows)
    with pytest.raises(DomainError):
        evaluate(constant_net([0.5, 0.5]), [Sample(flat_image(0), 2, "x")], plan)


def test_evaluate_adjacent_windows():
    samples = [Sample(flat_image(30, SIDE * 4), 0, "a"), Sample(flat_image(220, SIDE * 4), 1, "b")]
    for streams in (1, 2):
        net = constant_net([0.7, 0.3], streams)
        assert evaluate_adjacent(net, samples, 3) == 0.5
    with pytest.raises(DomainError):
        evaluate_adjacent(constant_net([0.7, 0.3]), samples, 5)


# -- training ------------------------------------------------------------------

@pytest.fixture(scope="module")
def tiny_corpus():
    corpus, _ = synthesize(3, 4, corpus_seed=3)
    return as_samples(corpus)


def short_config(**kw):
    base = dict(batch_size=8, base_lr=0.01, lr_step=10, stop_iter=20, seed=5)
    base.update(kw)
    return TrainConfig(**base)


def test_same_seed_bit_identical_checkpoints(tiny_corpus):
    samples, labels = tiny_corpus
    runs = [train(reduced(3), 2, short_config(), samples, labels=labels, log_every=5) for _ in range(2)]
    assert C.encode(runs[0].checkpoint()) == C.encode(runs[1].checkpoint())
    assert [r.line() for r in runs[0].trace] == [r.line() for r in runs[1].trace]
    assert all(np.isfinite(r.loss) for r in runs[0].trace)
    other = train(reduced(3), 2, short_config(seed=6), samples, labels=labels)
    assert C.encode(other.checkpoint()) != C.encode(runs[0].checkpoint())


def test_train_errors(tiny_corpus):
    samples, _ = tiny_corpus
    with pytest.raises(DomainError):
        train(reduced(3), 1, short_config(), [])
    with pytest.raises(DomainError):
        train(reduced(2), 1, short_config(), samples)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_raises(tiny_corpus):
    samples, _ = tiny_corpus
    with pytest.raises(TrainingDiverged) as info:
        train(reduced(3), 1, short_config(base_lr=1e6, momentum=0.0), samples)
    assert info.value.iteration >= 1


def test_overfit_single_writer_toy_set():
    corpus, _ = synthesize(2, 3, corpus_seed=9)
    samples = [s for s in as_samples(corpus)[0] if s.label == 0]
    result = train(reduced(2), 1, short_config(stop_iter=60, lr_step=60), samples)
    net = result.network
    img = samples[0].image
    idx, scores = identify(net, img, PatchPlan.for_side(SIDE, 1.0))
    assert idx == 0 and scores[0] > 0.99


def test_trace_records_and_validation(tiny_corpus):
    samples, labels = tiny_corpus
    seen = []
    result = train(reduced(3), 1, short_config(), samples, val=samples[:3], labels=labels,
                   log_every=10, val_every=10, on_record=seen.append)
    assert [r.iteration for r in result.trace] == [10, 20] and seen == result.trace
    assert result.trace[-1].val_acc is not None
    assert result.trace[0].line().startswith("iter=10 lr=0.01 loss=")
    assert result.network.labels == labels and result.state.iteration == 20


# -- transfer ------------------------------------------------------------------

def test_half_to_deep_transfer_and_class_change():
    half = build_network(reduced(300), 1, 0)
    ckpt = C.from_network(half)
    deep = transfer(ckpt, reduced(301), 2, seed=3)
    assert deep.streams == 2 and deep.params["fc8"].weights.shape == (301, 128)
    assert deep.params["fc8"].lr_mult == 10.0 and deep.params["fc7"].lr_mult == 1.0
    for name in ("conv1", "conv5", "fc6", "fc7"):
        np.testing.assert_array_equal(deep.params[name].weights, half.params[name].weights)


def test_transfer_lists_mismatched_layers():
    source = C.from_network(build_network(deepwriter_spec(3, SIDE, scale=0.125, conv2="256C5S1P2"), 1, 0))
    with pytest.raises(TransferError, match="conv2") as info:
        transfer(source, reduced(3), 1)
    assert info.value.mismatched == ["conv2"]


def test_finetune_starts_from_source(tiny_corpus):
    samples, labels = tiny_corpus
    source = train(reduced(3), 1, short_config(), samples, labels=labels).checkpoint()
    cfg = short_config(stop_iter=1, classifier_lr_mult=10.0, base_lr=1e-9)
    tuned = finetune(reduced(3), 2, source, cfg, samples, labels=labels).network
    np.testing.assert_allclose(tuned.params["conv1"].weights, source.params()["conv1.weight"], atol=1e-6)
    assert tuned.params["fc8"].lr_mult == 10.0


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_score_vectors_are_distributions(seed):
    rng = np.random.default_rng(seed)
    net = build_network(reduced(5), 2, 0)
    img = rng.integers(0, 256, (int(rng.integers(SIDE, 60)), int(rng.integers(SIDE, 300)))).astype(np.uint8)
    _, scores = identify(net, img, PatchPlan.for_side(SIDE, float(rng.uniform(0.05, 1.0))))
    assert abs(float(scores.sum()) - 1) <= 1e-5 and np.all(scores >= 0)
