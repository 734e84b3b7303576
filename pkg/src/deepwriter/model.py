"""Architecture description and the single/two-stream network.

A network is an ordered stack of layers. The last entry is the classifier;
everything before it is the *stream*. Half DeepWriter runs the stream once
per patch, DeepWriter runs the same stream (same parameter objects) over two
adjacent patches and sums the two stream outputs before the classifier.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import layers as L
from .errors import DomainError, ShapeError
from .layers import ConvSpec, LayerParams, PoolSpec
from .tensor import SINGLE, elementwise_sum


@dataclass(frozen=True)
class Conv:
    name: str
    conv: ConvSpec

    def token(self) -> str:
        return f"{self.name}:{self.conv}"


@dataclass(frozen=True)
class Pool:
    pool: PoolSpec

    def token(self) -> str:
        return str(self.pool)


@dataclass(frozen=True)
class FC:
    """Fully-connected layer. ``width=None`` marks the classifier (num_classes)."""

    name: str
    width: Optional[int] = None

    def token(self) -> str:
        return f"{self.name}:{'classes' if self.width is None else self.width}"


@dataclass(frozen=True)
class ReLU:
    def token(self) -> str:
        return "relu"


@dataclass(frozen=True)
class Dropout:
    ratio: float = 0.5

    def token(self) -> str:
        return f"dropout:{self.ratio!r}"


Layer = Union[Conv, Pool, FC, ReLU, Dropout]


def parse_layer(token: str) -> Layer:
    if token == "relu":
        return ReLU()
    if token.startswith("dropout:"):
        return Dropout(float(token.split(":", 1)[1]))
    if token.startswith("M"):
        return Pool(PoolSpec.parse(token))
    name, _, arg = token.partition(":")
    if not arg:
        raise DomainError(f"cannot parse layer token {token!r}")
    if "C" in arg:
        return Conv(name, ConvSpec.parse(arg))
    return FC(name, None if arg == "classes" else int(arg))


def scaled(width: int, scale: float) -> int:
    """Desk-scale width: ``width * scale`` rounded half-up, at least 1."""
    return max(1, int(np.floor(width * scale + 0.5)))


@dataclass(frozen=True)
class ArchitectureSpec:
    layers: Tuple[Layer, ...]
    num_classes: int
    input_side: int = 113
    input_channels: int = 1
    scale: float = 1.0

    def __post_init__(self):
        if not self.layers or not isinstance(self.layers[-1], FC) or self.layers[-1].width is not None:
            raise DomainError("the final layer must be the classifier FC (width=None)")
        if self.num_classes < 2:
            raise DomainError("num_classes must be >= 2")
        if self.input_side < 1 or self.input_channels < 1 or self.scale <= 0:
            raise DomainError("input_side, input_channels and scale must be positive")
        names = [l.name for l in self.layers if isinstance(l, (Conv, FC))]
        if len(set(names)) != len(names):
            raise DomainError(f"duplicate layer names in {names}")

    @property
    def classifier(self) -> FC:
        return self.layers[-1]

    @property
    def stream(self) -> Tuple[Layer, ...]:
        return self.layers[:-1]

    def width_of(self, layer: Union[Conv, FC]) -> int:
        if isinstance(layer, Conv):
            return scaled(layer.conv.out_channels, self.scale)
        if layer.width is None:
            return self.num_classes
        return scaled(layer.width, self.scale)

    def effective_conv(self, layer: Conv) -> ConvSpec:
        return replace(layer.conv, out_channels=self.width_of(layer))

    def with_classes(self, num_classes: int) -> "ArchitectureSpec":
        return replace(self, num_classes=num_classes)

    def to_dict(self) -> dict:
        return {
            "layers": [l.token() for l in self.layers],
            "num_classes": self.num_classes,
            "input_side": self.input_side,
            "input_channels": self.input_channels,
            "scale": self.scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(tuple(parse_layer(t) for t in d["layers"]), int(d["num_classes"]),
                   int(d["input_side"]), int(d["input_channels"]), float(d["scale"]))

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# -- presets -------------------------------------------------------------------

def deepwriter_spec(num_classes: int, input_side: int = 113, *, conv1: str = "96C5S2",
                    conv2: str = "256C3S1P1", fc_width: int = 1024, dropout: float = 0.5,
                    input_channels: int = 1, scale: float = 1.0) -> ArchitectureSpec:
    """The DeepWriter / Half DeepWriter stream with an AlexNet-pattern trunk.

    Conv1, Conv2 and the FC6/FC7 width are the tunable pieces; Conv3-5 and
    the pooling placement follow the AlexNet layout without LRN.
    """
    relu, pool = ReLU(), Pool(PoolSpec(3, 2))
    stack = [
        Conv("conv1", ConvSpec.parse(conv1)), relu, pool,
        Conv("conv2", ConvSpec.parse(conv2)), relu, pool,
        Conv("conv3", ConvSpec(384, 3, 1, 1)), relu,
        Conv("conv4", ConvSpec(384, 3, 1, 1)), relu,
        Conv("conv5", ConvSpec(256, 3, 1, 1)), relu, pool,
        FC("fc6", fc_width), relu, Dropout(dropout),
        FC("fc7", fc_width), relu, Dropout(dropout),
        FC("fc8"),
    ]
    return ArchitectureSpec(tuple(stack), num_classes, input_side, input_channels, scale)


# Kernel-size ablation rows: (input side, conv1, conv2).
KERNEL_VARIANTS = {
    "alexnet227": (227, "96C11S4", "256C5S1P2"),
    "alexnet131": (131, "96C11S4", "256C5S1P2"),
    "deepwriter113": (113, "96C5S2", "256C3S1P1"),
}

NEURON_VARIANTS = (4096, 1024, 512)


def kernel_variant(name: str, num_classes: int, **kw) -> ArchitectureSpec:
    side, c1, c2 = KERNEL_VARIANTS[name]
    return deepwriter_spec(num_classes, side, conv1=c1, conv2=c2, **kw)


def output_shapes(spec: ArchitectureSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    """Dims after every layer, as ``(token, dims)`` pairs (input first)."""
    dims: Tuple[int, ...] = (spec.input_channels, spec.input_side, spec.input_side)
    trace = [("input", dims)]
    for layer in spec.layers:
        if isinstance(layer, Conv):
            if len(dims) != 3:
                raise ShapeError(f"{layer.name} needs a spatial input, got {list(dims)}")
            cs = spec.effective_conv(layer)
            dims = (cs.out_channels, cs.output_side(dims[1]), cs.output_side(dims[2]))
        elif isinstance(layer, Pool):
            if len(dims) != 3:
                raise ShapeError(f"pooling needs a spatial input, got {list(dims)}")
            dims = (dims[0], layer.pool.output_side(dims[1]), layer.pool.output_side(dims[2]))
        elif isinstance(layer, FC):
            dims = (spec.width_of(layer),)
        trace.append((layer.token(), dims))
    return trace


def _fan_in(spec: ArchitectureSpec) -> Dict[str, Tuple[int, ...]]:
    """Weight dims for every parametrised layer."""
    shapes = {}
    dims: Tuple[int, ...] = (spec.input_channels, spec.input_side, spec.input_side)
    for (token, out), layer in zip(output_shapes(spec)[1:], spec.layers):
        if isinstance(layer, Conv):
            k = layer.conv.kernel
            shapes[layer.name] = (out[0], dims[0], k, k)
        elif isinstance(layer, FC):
            shapes[layer.name] = (out[0], int(np.prod(dims)))
        dims = out
    return shapes


# -- network -------------------------------------------------------------------

@dataclass
class Network:
    spec: ArchitectureSpec
    params: Dict[str, LayerParams]
    streams: int = 1
    pixel_mean: float = 0.0
    labels: List[str] = field(default_factory=list)

    def __post_init__(self):
        if self.streams not in (1, 2):
            raise DomainError("streams must be 1 or 2")

    @property
    def dtype(self):
        return next(iter(self.params.values())).weights.dtype

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def named_tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, p in self.params.items():
            out[f"{name}.weight"] = p.weights
            out[f"{name}.bias"] = p.biases
        return out

    def preprocess(self, patches: np.ndarray) -> np.ndarray:
        """uint8 patches ``(N, H, W)`` -> normalised ``(N, 1, H, W)`` input."""
        x = patches.astype(self.dtype) / self.dtype.type(255.0)
        x -= self.dtype.type(self.pixel_mean)
        return x[:, None] if x.ndim == 3 else x

    # -- passes ----------------------------------------------------------------

    def _check_input(self, x: np.ndarray) -> None:
        want = (self.spec.input_channels, self.spec.input_side, self.spec.input_side)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ShapeError(f"input dims {list(x.shape)} do not match [N, {', '.join(map(str, want))}]")

    def _run(self, layers: Sequence[Layer], x: np.ndarray, train: bool, rng, tape: Optional[list]):
        for layer in layers:
            if isinstance(layer, Conv):
                x, cache = L.conv2d_forward(x, self.params[layer.name], self.spec.effective_conv(layer))
            elif isinstance(layer, Pool):
                x, cache = L.maxpool2d_forward(x, layer.pool)
            elif isinstance(layer, FC):
                if x.ndim != 2:
                    # (C, H, W, N) -> (N, C*H*W), row-major per sample.
                    cache_shape = x.shape
                    x = x.reshape(-1, x.shape[-1]).T
                    if tape is not None:
                        tape.append(("flatten", cache_shape))
                x, cache = L.fc_forward(x, self.params[layer.name])
            elif isinstance(layer, ReLU):
                x, cache = L.relu_forward(x)
            else:
                x, cache = L.dropout_forward(x, layer.ratio, train, rng)
            if tape is not None:
                tape.append((layer, cache))
        return x

    def stream_features(self, x: np.ndarray, train: bool = False, rng=None, tape=None) -> np.ndarray:
        """Run the shared stream on an ``(N, C, H, W)`` batch; returns ``(N, D)`` vectors."""
        self._check_input(x)
        x = np.ascontiguousarray(x.transpose(1, 2, 3, 0))
        return self._run(self.spec.stream, x, train, rng, tape)

    def classify(self, features: np.ndarray, train: bool = False, rng=None, tape=None) -> np.ndarray:
        return self._run(self.spec.layers[-1:], features, train, rng, tape)

    def forward(self, x, train: bool = False, rng=None):
        """Logits for a batch and the tape needed by :meth:`backward`.

        ``x`` is ``(N, C, H, W)`` for one stream or a pair of such arrays for
        two streams. Both streams run as one 2N batch through the shared
        parameters and are summed before the classifier.
        """
        stream_tape: list = []
        if self.streams == 2:
            x1, x2 = x
            if x1.shape != x2.shape:
                raise ShapeError(f"pair dims differ: {list(x1.shape)} vs {list(x2.shape)}")
            n = x1.shape[0]
            feats = self.stream_features(np.concatenate([x1, x2]), train, rng, stream_tape)
            fused = elementwise_sum(feats[:n], feats[n:])
        else:
            fused = self.stream_features(x, train, rng, stream_tape)
        head_tape: list = []
        logits = self.classify(fused, train, rng, head_tape)
        return logits, (stream_tape, head_tape)

    def _unwind(self, tape: list, dx: np.ndarray, grads: Dict[str, np.ndarray],
                need_input_grad: bool = True) -> np.ndarray:
        for pos in range(len(tape) - 1, -1, -1):
            layer, cache = tape[pos]
            if layer == "flatten":
                dx = np.ascontiguousarray(dx.T).reshape(cache)
            elif isinstance(layer, Conv):
                dx, dw, db = L.conv2d_backward(dx, cache, need_dx=need_input_grad or pos > 0)
                grads[f"{layer.name}.weight"] = grads.get(f"{layer.name}.weight", 0) + dw
                grads[f"{layer.name}.bias"] = grads.get(f"{layer.name}.bias", 0) + db
            elif isinstance(layer, FC):
                dx, dw, db = L.fc_backward(dx, cache)
                grads[f"{layer.name}.weight"] = grads.get(f"{layer.name}.weight", 0) + dw
                grads[f"{layer.name}.bias"] = grads.get(f"{layer.name}.bias", 0) + db
            elif isinstance(layer, Pool):
                dx = L.maxpool2d_backward(dx, cache)
            elif isinstance(layer, ReLU):
                dx = L.relu_backward(dx, cache)
            else:
                dx = L.dropout_backward(dx, cache)
        return dx

    def backward(self, dlogits: np.ndarray, tape) -> Dict[str, np.ndarray]:
        """Parameter gradients keyed ``"<layer>.weight"`` / ``"<layer>.bias"``."""
        stream_tape, head_tape = tape
        grads: Dict[str, np.ndarray] = {}
        dfused = self._unwind(head_tape, dlogits, grads)
        if self.streams == 2:
            # The sum sends the same gradient to both halves of the 2N batch.
            dfused = np.concatenate([dfused, dfused])
        self._unwind(stream_tape, dfused, grads, need_input_grad=False)
        return grads

    def loss_and_grads(self, x, labels, rng=None):
        """Mean cross-entropy of a training batch and its parameter gradients."""
        logits, tape = self.forward(x, train=True, rng=rng)
        probs, loss, dlogits = L.softmax_cross_entropy(logits, labels)
        return loss, self.backward(dlogits, tape), probs

    # -- inference -------------------------------------------------------------

    def predict_proba(self, x) -> np.ndarray:
        """Test-mode score vectors ``(N, num_classes)``."""
        return L.softmax(self.forward(x, train=False)[0])

    def forward_single(self, patch: np.ndarray) -> np.ndarray:
        """Score vector for one normalised ``(C, H, W)`` patch."""
        if self.streams != 1:
            raise DomainError("forward_single needs a one-stream network; use forward_pair")
        return self.predict_proba(patch[None])[0]

    def forward_pair(self, patch1: np.ndarray, patch2: np.ndarray) -> np.ndarray:
        """Score vector for an adjacent pair of normalised ``(C, H, W)`` patches."""
        if self.streams != 2:
            raise DomainError("forward_pair needs a two-stream network")
        # Each stream runs as its own batch so the result is independent of order.
        f1 = self.stream_features(patch1[None])
        f2 = self.stream_features(patch2[None])
        return L.softmax(self.classify(elementwise_sum(f1, f2)))[0]

    def with_streams(self, streams: int) -> "Network":
        """A view of the same parameters with a different stream count."""
        return Network(self.spec, self.params, streams, self.pixel_mean, list(self.labels))


INITS = ("msra", "gaussian")
DEFAULT_INIT = "msra"


def init_layer(shape: Tuple[int, ...], rng: np.random.Generator, dtype, init: str) -> LayerParams:
    if init == "gaussian":
        std = 0.01
    elif init == "msra":
        std = float(np.sqrt(2.0 / np.prod(shape[1:])))
    else:
        raise DomainError(f"unknown init {init!r}")
    w = (rng.standard_normal(shape) * std).astype(dtype)
    return LayerParams(w, np.zeros(shape[0], dtype=dtype))


def build_network(spec: ArchitectureSpec, streams: int = 1, rng=None, *,
                  dtype=SINGLE, init: str = DEFAULT_INIT) -> Network:
    """Allocate and initialise a network for ``spec``.

    ``init="msra"`` (default) uses std sqrt(2 / fan_in); ``"gaussian"`` draws
    every weight from N(0, 0.01^2), which stalls on the reduced nets. Biases
    start at zero.
    """
    if rng is None or isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    params = {name: init_layer(shape, rng, dtype, init) for name, shape in _fan_in(spec).items()}
    return Network(spec, params, streams)


def param_count(net_or_spec) -> int:
    if isinstance(net_or_spec, Network):
        return net_or_spec.param_count()
    return sum(int(np.prod(s)) + s[0] for s in _fan_in(net_or_spec).values())
