"""Training, finetuning, score averaging and evaluation."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint as ckpt_mod
from .checkpoint import Checkpoint
from .data import Sample
from .errors import DomainError, ShapeError, TrainingDiverged, TransferError
from .layers import softmax
from .model import DEFAULT_INIT, ArchitectureSpec, Network, build_network, init_layer
from .optim import OptimState, TrainConfig, lr_at, sgd_update
from .patching import (PatchPlan, make_pairs, random_adjacent_pair, random_crop,
                       resize_min_side, sample_indices, scan_patches)
from .tensor import argmax

log = logging.getLogger(__name__)


def as_samples(images_by_writer: dict, labels: Sequence[str] = None) -> Tuple[List[Sample], List[str]]:
    """``{writer: [images]}`` -> samples with sorted-label class indices."""
    labels = list(labels) if labels is not None else sorted(images_by_writer)
    index = {w: i for i, w in enumerate(labels)}
    samples = [Sample(img, index[w], f"{w}/{k}")
               for w in sorted(images_by_writer) for k, img in enumerate(images_by_writer[w])]
    return samples, labels


# -- scoring -------------------------------------------------------------------

def aggregate_scores(scores) -> np.ndarray:
    """Mean of per-patch score vectors: ``f_j = (1/N) sum_i f_ij``."""
    scores = [np.asarray(s) for s in scores]
    if not scores:
        raise DomainError("cannot aggregate an empty list of score vectors")
    if any(s.shape != scores[0].shape or s.ndim != 1 for s in scores):
        raise DomainError("score vectors differ in length")
    return np.mean(np.stack(scores), axis=0)


def patch_scores(net: Network, img: np.ndarray, plan: PatchPlan) -> np.ndarray:
    """Score vectors ``(n, K)`` for the sampled patches (or adjacent pairs) of an image.

    Two-stream networks pair consecutive patches of the full scan first and
    then sample pairs, so every scored pair is truly adjacent.
    """
    if plan.patch_side != net.spec.input_side:
        raise ShapeError(f"plan patch side {plan.patch_side} != network input {net.spec.input_side}")
    patches = scan_patches(resize_min_side(img, plan.patch_side), plan)
    if net.streams == 1:
        picked = [patches[i] for i in sample_indices(len(patches), plan.sample_ratio)]
        return net.predict_proba(net.preprocess(np.stack(picked)))
    pairs = make_pairs(list(range(len(patches))))
    picked = [pairs[i] for i in sample_indices(len(pairs), plan.sample_ratio)]
    return pair_scores(net, patches, picked)


def pair_scores(net: Network, patches: Sequence[np.ndarray], pairs: Sequence[Tuple[int, int]]) -> np.ndarray:
    """Scores for index pairs into ``patches``; each patch's stream runs once."""
    needed = sorted({i for pair in pairs for i in pair})
    where = {p: k for k, p in enumerate(needed)}
    feats = net.stream_features(net.preprocess(np.stack([patches[i] for i in needed])))
    fused = np.stack([feats[where[a]] + feats[where[b]] for a, b in pairs])
    return softmax(net.classify(fused))


def identify(net: Network, img: np.ndarray, plan: PatchPlan) -> Tuple[int, np.ndarray]:
    """Writer index with the highest averaged score, and the averaged scores."""
    scores = aggregate_scores(patch_scores(net, img, plan))
    return argmax(scores), scores


@dataclass
class EvalRow:
    path: str
    predicted: int
    true: int
    scores: np.ndarray
    patches: int


@dataclass
class EvalReport:
    rows: List[EvalRow]

    @property
    def correct(self) -> int:
        return sum(r.predicted == r.true for r in self.rows)

    @property
    def accuracy(self) -> float:
        return self.correct / len(self.rows) if self.rows else 0.0

    @property
    def patch_counts(self) -> List[int]:
        return [r.patches for r in self.rows]


def evaluate(net: Network, samples: Sequence[Sample], plan: PatchPlan) -> EvalReport:
    rows = []
    for s in samples:
        if not 0 <= s.label < net.num_classes:
            raise DomainError(f"label {s.label} outside [0, {net.num_classes})")
        per_patch = patch_scores(net, s.image, plan)
        agg = aggregate_scores(per_patch)
        rows.append(EvalRow(s.path, argmax(agg), s.label, agg, len(per_patch)))
    return EvalReport(rows)


def evaluate_adjacent(net: Network, samples: Sequence[Sample], k: int, side: int = None) -> float:
    """Accuracy when only ``k`` adjacent patches of text are available.

    Every run of ``k`` consecutive non-overlapping patches in every image is
    one trial. A two-stream network scores the ``k - 1`` adjacent pairs of
    the run and averages them; a one-stream network averages the ``k``
    single-patch scores.
    """
    if k < 1:
        raise DomainError("k must be >= 1")
    side = side or net.spec.input_side
    plan = PatchPlan.for_side(side, 1.0)
    hits = trials = 0
    for s in samples:
        patches = scan_patches(resize_min_side(s.image, side), plan)
        for start in range(0, len(patches) - k + 1):
            run = list(range(start, start + k))
            if net.streams == 2:
                scores = pair_scores(net, patches, make_pairs(run))
            else:
                scores = net.predict_proba(net.preprocess(np.stack([patches[i] for i in run])))
            hits += argmax(aggregate_scores(scores)) == s.label
            trials += 1
    if trials == 0:
        raise DomainError(f"no image holds {k} adjacent patches")
    return hits / trials


# -- training ------------------------------------------------------------------

@dataclass(frozen=True)
class RunPhase:
    kind: str = "scratch"
    source: Optional[Checkpoint] = None

    def __post_init__(self):
        if self.kind not in ("scratch", "finetune"):
            raise DomainError(f"unknown phase {self.kind!r}")
        if self.kind == "finetune" and self.source is None:
            raise DomainError("a finetune phase needs a source checkpoint")


@dataclass
class TraceRecord:
    iteration: int
    lr: float
    loss: float
    batch_acc: float
    val_acc: Optional[float] = None

    def line(self) -> str:
        s = f"iter={self.iteration} lr={self.lr:.6g} loss={self.loss:.6f}"
        return s if self.val_acc is None else s + f" val_acc={self.val_acc:.4f}"


@dataclass
class TrainResult:
    network: Network
    state: OptimState
    trace: List[TraceRecord] = field(default_factory=list)

    def checkpoint(self, include_velocities: bool = True) -> Checkpoint:
        return ckpt_mod.from_network(self.network, self.state if include_velocities else None)


def pixel_mean(images: Sequence[np.ndarray]) -> float:
    total = sum(int(img.sum(dtype=np.int64)) for img in images)
    count = sum(img.size for img in images)
    return float(np.float32(total / count / 255.0))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    """Endless stream of index batches drawn from shuffled epochs."""
    order, pos = rng.permutation(n), 0
    while True:
        batch = []
        while len(batch) < batch_size:
            if pos == n:
                order, pos = rng.permutation(n), 0
            take = min(batch_size - len(batch), n - pos)
            batch.extend(order[pos:pos + take].tolist())
            pos += take
        yield batch


def train(spec: ArchitectureSpec, streams: int, config: TrainConfig, data: Sequence[Sample],
          phase: RunPhase = RunPhase(), *, val: Sequence[Sample] = (), plan: PatchPlan = None,
          labels: Sequence[str] = (), log_every: int = 100, val_every: int = None,
          init: str = DEFAULT_INIT, on_record: Callable[[TraceRecord], None] = None) -> TrainResult:
    """Run ``config.stop_iter`` SGD iterations over random crops of ``data``.

    Everything random (initialisation, epoch order, crop positions, dropout)
    derives from ``config.seed``, so equal inputs give bit-identical results.
    """
    if not data:
        raise DomainError("training data is empty")
    if any(not 0 <= s.label < spec.num_classes for s in data):
        raise DomainError(f"training labels must lie in [0, {spec.num_classes})")
    side = spec.input_side
    images = [resize_min_side(s.image, side) for s in data]
    targets = np.array([s.label for s in data], dtype=np.int64)

    if phase.kind == "finetune":
        net = transfer(phase.source, spec, streams, seed=config.seed, init=init,
                       classifier_lr_mult=config.classifier_lr_mult)
    else:
        net = build_network(spec, streams, np.random.default_rng([config.seed, 0]), init=init)
        net.params[spec.classifier.name].lr_mult = config.classifier_lr_mult
    net.pixel_mean = pixel_mean(images)
    net.labels = list(labels)

    state = OptimState.zeros_like(net.params)
    batches = _batches(len(images), config.batch_size, np.random.default_rng([config.seed, 1]))
    crop_rng = np.random.default_rng([config.seed, 2])
    drop_rng = np.random.default_rng([config.seed, 3])
    plan = plan or PatchPlan.for_side(side, 1.0)
    val_every = val_every or max(1, config.lr_step // 10)
    result = TrainResult(net, state)

    for it in range(config.stop_iter):
        idx = next(batches)
        if streams == 2:
            pairs = [random_adjacent_pair(images[i], side, crop_rng) for i in idx]
            x = (net.preprocess(np.stack([p[0] for p in pairs])),
                 net.preprocess(np.stack([p[1] for p in pairs])))
        else:
            x = net.preprocess(np.stack([random_crop(images[i], side, crop_rng) for i in idx]))
        loss, grads, probs = net.loss_and_grads(x, targets[idx], drop_rng)
        if not np.isfinite(loss):
            raise TrainingDiverged(it, loss)
        lr = lr_at(it, config)
        sgd_update(net.params, grads, state, config)

        last = it + 1 == config.stop_iter
        do_val = bool(val) and ((it + 1) % val_every == 0 or last)
        if (it + 1) % log_every == 0 or do_val or last:
            rec = TraceRecord(it + 1, lr, loss, float(np.mean(probs.argmax(1) == targets[idx])))
            if do_val:
                rec.val_acc = evaluate(net, val, plan).accuracy
            result.trace.append(rec)
            log.info(rec.line())
            if on_record:
                on_record(rec)
    return result


def transfer(source: Checkpoint, spec: ArchitectureSpec, streams: int, *, seed: int = 0,
             init: str = DEFAULT_INIT, classifier_lr_mult: float = 10.0) -> Network:
    """Build a network for ``spec`` whose stream parameters come from ``source``.

    The classifier is freshly initialised for ``spec.num_classes`` and gets
    ``classifier_lr_mult``. Every other layer must match by name and dims.
    """
    net = build_network(spec, streams, np.random.default_rng([seed, 0]), init=init)
    src = source.params()
    classifier = spec.classifier.name
    mismatched = []
    for name, layer in net.params.items():
        if name == classifier:
            continue
        w, b = src.get(f"{name}.weight"), src.get(f"{name}.bias")
        if w is None or b is None or w.shape != layer.weights.shape or b.shape != layer.biases.shape:
            mismatched.append(name)
    if mismatched:
        raise TransferError(mismatched)
    for name, layer in net.params.items():
        if name != classifier:
            layer.weights[...] = src[f"{name}.weight"]
            layer.biases[...] = src[f"{name}.bias"]
    fresh = init_layer(net.params[classifier].weights.shape, np.random.default_rng([seed, 4]),
                       net.dtype, init)
    fresh.lr_mult = classifier_lr_mult
    net.params[classifier] = fresh
    return net


def finetune(target_spec: ArchitectureSpec, streams: int, source: Checkpoint, config: TrainConfig,
             data: Sequence[Sample], **kw) -> TrainResult:
    """Train from ``source``'s stream weights with a new classifier (see :func:`transfer`)."""
    return train(target_spec, streams, config, data, RunPhase("finetune", source), **kw)
