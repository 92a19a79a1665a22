"""Forward-only MLP models with a designated cut layer.

A model is a stack of dense layers (optional elementwise activation) ending
in softmax cross-entropy over class logits. Parameters live in one flat
vector, layer-major, weights before bias within a layer; every perturbation,
update and checkpoint uses that same ascending order. The cut index splits
the stack into a lower block (layers ``[0, cut)``) and an upper block
(``[cut, n)``): running the lower block once, caching its output, and
feeding the upper block reproduces the full forward pass bit for bit, which
is what the split training step relies on.

An analytic backprop path exists for the same models; it is used as the
gradient oracle in tests and as the first-order federated baseline.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ContractViolation, NumericError
from .prng import GaussianStream

ACTIVATIONS = ("none", "tanh", "relu")

CHECKPOINT_MAGIC = b"FSPZ"
CHECKPOINT_VERSION = 1
_CHECKPOINT_HEADER = struct.Struct("<4sIBQI")

#: Stored in the checkpoint cut field for models without a split.
_NO_CUT = 0


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "none"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ConfigError(f"layer dims must be positive, got {self.in_dim}x{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}, expected one of {ACTIVATIONS}")

    @property
    def num_params(self) -> int:
        return self.in_dim * self.out_dim + self.out_dim


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    cut: int | None = None
    precision: int = 64

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("model needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ConfigError(f"layer dims do not chain: {a.out_dim} -> {b.in_dim}")
        if self.cut is not None and not 1 <= self.cut <= len(self.layers) - 1:
            raise ConfigError(
                f"cut must be strictly inside the layer list (1..{len(self.layers) - 1}), got {self.cut}")
        if self.precision not in (32, 64):
            raise ConfigError(f"precision must be 32 or 64, got {self.precision}")

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    @property
    def feature_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_dim

    @property
    def num_params(self) -> int:
        return sum(l.num_params for l in self.layers)

    def span_params(self, start: int, stop: int) -> int:
        return sum(l.num_params for l in self.layers[start:stop])

    def span_forward_flops(self, start: int, stop: int, batch_size: int) -> int:
        """Dense cost 2*in*out per sample plus one op per activated element."""
        flops = 0
        for layer in self.layers[start:stop]:
            flops += 2 * layer.in_dim * layer.out_dim * batch_size
            if layer.activation != "none":
                flops += layer.out_dim * batch_size
        return flops

    def layer_output_sizes(self, batch_size: int) -> list[int]:
        return [layer.out_dim * batch_size for layer in self.layers]


@dataclass(frozen=True)
class BlockSplit:
    """Parameter counts of the two blocks induced by a cut."""

    cut: int
    d1: int
    d2: int

    @classmethod
    def from_spec(cls, spec: ModelSpec) -> "BlockSplit":
        if spec.cut is None:
            raise ConfigError("model spec has no cut layer")
        d1 = spec.span_params(0, spec.cut)
        return cls(cut=spec.cut, d1=d1, d2=spec.num_params - d1)


@dataclass(frozen=True)
class Batch:
    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        if self.inputs.ndim != 2 or self.labels.ndim != 1:
            raise ConfigError("batch needs 2-d inputs and 1-d labels")
        if self.inputs.shape[0] != self.labels.shape[0]:
            raise ConfigError("batch inputs and labels disagree on size")
        if self.inputs.shape[0] < 1:
            raise ConfigError("batch must contain at least one sample")

    @property
    def size(self) -> int:
        return self.inputs.shape[0]


def mlp_spec(feature_dim, hidden, num_classes, activation="tanh", cut="auto", precision=64) -> ModelSpec:
    """Dense stack feature_dim -> hidden... -> num_classes, logits un-activated.

    ``cut="auto"`` places the cut before the final classifier layer (the
    upper block stays small), or disables the split for single-layer models.
    """
    dims = [int(feature_dim), *[int(h) for h in hidden], int(num_classes)]
    layers = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        last = i == len(dims) - 2
        layers.append(LayerSpec(a, b, "none" if last else activation))
    if cut == "auto":
        cut = len(layers) - 1 if len(layers) >= 2 else None
    return ModelSpec(layers=tuple(layers), cut=cut, precision=precision)


def default_model_spec(precision: int = 64) -> ModelSpec:
    """Shipped default: 32 -> 512 -> 32 -> 4, cut before the classifier."""
    return mlp_spec(32, (512, 32), 4, precision=precision)


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Flat parameter vector: weights N(0, 1/in_dim), biases zero."""
    values = np.empty(spec.num_params, dtype=spec.dtype)
    stream = GaussianStream(seed)
    lo = 0
    for layer in spec.layers:
        nw = layer.in_dim * layer.out_dim
        w = stream.next_block(nw) / np.sqrt(layer.in_dim)
        values[lo:lo + nw] = w.astype(spec.dtype)
        lo += nw
        values[lo:lo + layer.out_dim] = 0.0
        lo += layer.out_dim
    return values


def _check_span(spec: ModelSpec, theta: np.ndarray, start: int, stop: int) -> None:
    want = spec.span_params(start, stop)
    if theta.shape[0] != want:
        raise ConfigError(
            f"parameter vector has {theta.shape[0]} entries, layers [{start}:{stop}] need {want}")


def _layer_views(spec: ModelSpec, theta: np.ndarray, start: int, stop: int):
    """(W, b) views per layer; reshapes of contiguous slices, no copies."""
    out = []
    lo = 0
    for layer in spec.layers[start:stop]:
        nw = layer.in_dim * layer.out_dim
        w = theta[lo:lo + nw].reshape(layer.in_dim, layer.out_dim)
        b = theta[lo + nw:lo + nw + layer.out_dim]
        out.append((layer, w, b))
        lo += nw + layer.out_dim
    return out


def _run_span(spec, theta, start, stop, x, counters):
    h = x
    for idx, (layer, w, b) in enumerate(_layer_views(spec, theta, start, stop), start=start):
        h = h @ w + b
        if layer.activation == "tanh":
            h = np.tanh(h)
        elif layer.activation == "relu":
            h = np.maximum(h, 0)
        if not np.all(np.isfinite(h)):
            raise NumericError("non-finite activation", layer=idx)
    if counters is not None:
        counters.add_forward(spec.span_forward_flops(start, stop, x.shape[0]))
    return h


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    """Mean softmax cross-entropy over the batch, numerically stable."""
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    picked = logits[np.arange(logits.shape[0]), labels]
    return float(np.mean(lse - picked))


def _check_batch(spec: ModelSpec, batch: Batch) -> None:
    if batch.inputs.shape[1] != spec.feature_dim:
        raise ConfigError(
            f"batch feature dim {batch.inputs.shape[1]} != model feature dim {spec.feature_dim}")
    if batch.labels.min() < 0 or batch.labels.max() >= spec.num_classes:
        raise ConfigError("batch labels outside [0, num_classes)")


def forward_block1(spec: ModelSpec, theta1: np.ndarray, batch: Batch, counters=None) -> np.ndarray:
    """Output of the cut layer for the lower block's parameters."""
    if spec.cut is None:
        raise ConfigError("model spec has no cut layer")
    _check_span(spec, theta1, 0, spec.cut)
    _check_batch(spec, batch)
    x = batch.inputs.astype(spec.dtype, copy=False)
    return _run_span(spec, theta1, 0, spec.cut, x, counters)


def forward_block2(spec: ModelSpec, theta2: np.ndarray, y_cut: np.ndarray,
                   labels: np.ndarray, counters=None) -> float:
    """Loss from a cached cut activation; never re-runs the lower block."""
    if spec.cut is None:
        raise ConfigError("model spec has no cut layer")
    _check_span(spec, theta2, spec.cut, len(spec.layers))
    logits = _run_span(spec, theta2, spec.cut, len(spec.layers), y_cut, counters)
    return cross_entropy(logits, labels)


def forward_loss(spec: ModelSpec, values: np.ndarray, batch: Batch, counters=None) -> float:
    """Mean cross-entropy of the full model; deterministic in (spec, values, batch)."""
    _check_span(spec, values, 0, len(spec.layers))
    _check_batch(spec, batch)
    if spec.cut is not None:
        split = BlockSplit.from_spec(spec)
        y = forward_block1(spec, values[:split.d1], batch, counters)
        return forward_block2(spec, values[split.d1:], y, batch.labels, counters)
    x = batch.inputs.astype(spec.dtype, copy=False)
    logits = _run_span(spec, values, 0, len(spec.layers), x, counters)
    return cross_entropy(logits, batch.labels)


def backprop_gradient(spec: ModelSpec, values: np.ndarray, batch: Batch, counters=None) -> np.ndarray:
    """Analytic gradient of forward_loss w.r.t. the flat parameter vector.

    relu takes derivative 0 at 0, so a dead unit propagates exactly nothing.
    """
    _check_span(spec, values, 0, len(spec.layers))
    _check_batch(spec, batch)
    views = _layer_views(spec, values, 0, len(spec.layers))
    x = batch.inputs.astype(spec.dtype, copy=False)

    inputs, outputs = [], []
    h = x
    for idx, (layer, w, b) in enumerate(views):
        inputs.append(h)
        h = h @ w + b
        if layer.activation == "tanh":
            h = np.tanh(h)
        elif layer.activation == "relu":
            h = np.maximum(h, 0)
        if not np.all(np.isfinite(h)):
            raise NumericError("non-finite activation", layer=idx)
        outputs.append(h)

    logits = outputs[-1]
    m = logits.max(axis=1, keepdims=True)
    e = np.exp(logits - m)
    probs = e / e.sum(axis=1, keepdims=True)
    bsz = batch.size
    delta = probs.copy()
    delta[np.arange(bsz), batch.labels] -= 1.0
    delta /= bsz

    grad = np.zeros_like(values)
    grad_views = _layer_views(spec, grad, 0, len(spec.layers))
    for idx in range(len(views) - 1, -1, -1):
        layer, w, _ = views[idx]
        if layer.activation == "tanh":
            delta = delta * (1.0 - outputs[idx] ** 2)
        elif layer.activation == "relu":
            delta = delta * (outputs[idx] > 0)
        _, gw, gb = grad_views[idx]
        gw += inputs[idx].T @ delta
        gb += delta.sum(axis=0)
        if idx > 0:
            delta = delta @ w.T
    if counters is not None:
        fw = spec.span_forward_flops(0, len(spec.layers), bsz)
        counters.add_forward(3 * fw)  # forward plus ~2x for the backward sweep
    return grad


def evaluate(spec: ModelSpec, values: np.ndarray, features: np.ndarray,
             labels: np.ndarray, chunk: int = 512) -> tuple[float, float]:
    """(mean loss, accuracy) over a full dataset, chunked to bound memory."""
    n = features.shape[0]
    loss_sum = 0.0
    correct = 0
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        x = features[lo:hi].astype(spec.dtype, copy=False)
        logits = _run_span(spec, values, 0, len(spec.layers), x, None)
        m = logits.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
        picked = logits[np.arange(hi - lo), labels[lo:hi]]
        loss_sum += float(np.sum(lse - picked))
        correct += int(np.sum(logits.argmax(axis=1) == labels[lo:hi]))
    return loss_sum / n, correct / n


def save_checkpoint(path, spec: ModelSpec, values: np.ndarray) -> None:
    """Binary checkpoint: FSPZ magic, version, precision, d, cut, then raw scalars (LE)."""
    if values.shape[0] != spec.num_params:
        raise ConfigError("parameter vector length does not match spec")
    cut = spec.cut if spec.cut is not None else _NO_CUT
    header = _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                                     spec.precision, values.shape[0], cut)
    scalar = np.dtype("<f4" if spec.precision == 32 else "<f8")
    with open(path, "wb") as f:
        f.write(header)
        f.write(values.astype(scalar, copy=False).tobytes())


def load_checkpoint(path) -> tuple[np.ndarray, ModelCheckpointMeta]:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _CHECKPOINT_HEADER.size:
        raise ConfigError(f"checkpoint {path} truncated")
    magic, version, precision, d, cut = _CHECKPOINT_HEADER.unpack_from(raw)
    if magic != CHECKPOINT_MAGIC:
        raise ConfigError(f"checkpoint {path} has bad magic {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    if precision not in (32, 64):
        raise ConfigError(f"bad precision flag {precision}")
    scalar = np.dtype("<f4" if precision == 32 else "<f8")
    body = raw[_CHECKPOINT_HEADER.size:]
    if len(body) != d * scalar.itemsize:
        raise ConfigError(f"checkpoint {path} body has {len(body)} bytes, expected {d * scalar.itemsize}")
    values = np.frombuffer(body, dtype=scalar).astype(
        np.float32 if precision == 32 else np.float64)
    meta = ModelCheckpointMeta(precision=precision, num_params=int(d),
                               cut=None if cut == _NO_CUT else int(cut))
    return values, meta


@dataclass(frozen=True)
class ModelCheckpointMeta:
    precision: int
    num_params: int
    cut: int | None
