"""1-D CNN classifier: layer stack definition, forward/backward, training.

The default architecture is seven conv+maxpool feature blocks followed by a
hidden dense layer and a softmax output, operating on a single-channel
3,600-sample input. Everything runs on numpy in float64; training is
deterministic for a fixed seed.

Full-precision checkpoints use the ``ALQF`` container: magic, u16 version,
a network descriptor, then each parameterized layer's flattened parameters
(weights row-major, then biases) as little-endian f32.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContainerFormatError, NumericError, ShapeError, TrainingError

CONV = "conv1d"
POOL = "maxpool1d"
FLATTEN = "flatten"
DENSE = "dense"
SOFTMAX_DENSE = "softmax-dense"

PARAMETERIZED_KINDS = (CONV, DENSE, SOFTMAX_DENSE)

CHECKPOINT_MAGIC = b"ALQF"
CHECKPOINT_VERSION = 1

_KIND_CODES = {CONV: 0, POOL: 1, FLATTEN: 2, DENSE: 3, SOFTMAX_DENSE: 4}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}
_ACT_CODES = {"none": 0, "relu": 1}
_ACT_NAMES = {v: k for k, v in _ACT_CODES.items()}


@dataclass
class LayerSpec:
    kind: str
    kernel: int = 0
    units: int = 0
    stride: int = 1
    padding: int = 0
    activation: str = "none"
    dropout_rate: float = 0.0


def conv(kernel: int, units: int, stride: int = 1, padding: int = 0) -> LayerSpec:
    return LayerSpec(CONV, kernel=kernel, units=units, stride=stride,
                     padding=padding, activation="relu")


def pool(kernel: int, stride: int) -> LayerSpec:
    return LayerSpec(POOL, kernel=kernel, stride=stride)


def flatten() -> LayerSpec:
    return LayerSpec(FLATTEN)


def dense(units: int, dropout_rate: float = 0.0) -> LayerSpec:
    return LayerSpec(DENSE, units=units, activation="relu", dropout_rate=dropout_rate)


def softmax_dense(units: int) -> LayerSpec:
    return LayerSpec(SOFTMAX_DENSE, units=units)


@dataclass
class NetworkSpec:
    layers: list[LayerSpec]
    input_length: int = 3600
    input_channels: int = 1
    class_count: int = 17


def out_length(length: int, kernel: int, stride: int, padding: int) -> int:
    """Output length of a conv/pool window sweep with floor semantics."""
    if kernel < 1 or stride < 1 or padding < 0:
        raise ShapeError("kernel and stride must be >= 1, padding >= 0")
    if length + 2 * padding < kernel:
        raise ShapeError(
            f"kernel {kernel} larger than padded input {length + 2 * padding}"
        )
    return (length + 2 * padding - kernel) // stride + 1


def propagate_shapes(spec: NetworkSpec) -> list[tuple[int, int]]:
    """(channels, length) after every layer; raises ShapeError on a dead stack.

    Flatten folds channels into a single row; dense layers require a prior
    flatten (or a dense predecessor) and produce (1, units).
    """
    shapes = []
    c, length = spec.input_channels, spec.input_length
    flat = False
    for i, layer in enumerate(spec.layers):
        if layer.kind == CONV:
            if flat:
                raise ShapeError(f"layer {i}: conv after flatten")
            length = out_length(length, layer.kernel, layer.stride, layer.padding)
            c = layer.units
        elif layer.kind == POOL:
            if flat:
                raise ShapeError(f"layer {i}: pool after flatten")
            length = out_length(length, layer.kernel, layer.stride, layer.padding)
        elif layer.kind == FLATTEN:
            length = c * length
            c = 1
            flat = True
        elif layer.kind in (DENSE, SOFTMAX_DENSE):
            if not flat:
                raise ShapeError(f"layer {i}: dense requires a preceding flatten")
            length = layer.units
        else:
            raise ShapeError(f"layer {i}: unknown kind {layer.kind!r}")
        if length < 1:
            raise ShapeError(f"layer {i}: output length {length} < 1")
        shapes.append((c, length))
    return shapes


def validate_spec(spec: NetworkSpec) -> None:
    shapes = propagate_shapes(spec)
    if not spec.layers or spec.layers[-1].kind != SOFTMAX_DENSE:
        raise ShapeError("final layer must be a softmax-dense classifier head")
    if shapes[-1][1] != spec.class_count:
        raise ShapeError(
            f"final layer outputs {shapes[-1][1]} values, expected {spec.class_count}"
        )


def default_ecgnet_spec() -> NetworkSpec:
    """The default 17-layer stack: 7 conv+pool blocks, flatten, two dense layers."""
    layers = [
        conv(16, 8, stride=2, padding=7), pool(8, 4),
        conv(12, 12, stride=2, padding=5), pool(4, 2),
        conv(9, 32, stride=1, padding=4), pool(5, 2),
        conv(7, 64, stride=1, padding=3), pool(4, 2),
        conv(5, 64, stride=1, padding=2), pool(2, 2),
        conv(3, 64, stride=1, padding=1), pool(2, 2),
        conv(3, 72, stride=1, padding=1), pool(2, 2),
        flatten(),
        dense(64, dropout_rate=0.1),
        softmax_dense(17),
    ]
    spec = NetworkSpec(layers)
    validate_spec(spec)
    return spec


def parameterized_layers(spec: NetworkSpec) -> list[tuple[int, str]]:
    """(layer index, report name) for every layer that carries parameters."""
    names = []
    n_conv = sum(1 for l in spec.layers if l.kind == CONV)
    n_dense = sum(1 for l in spec.layers if l.kind == DENSE)
    ci = di = 0
    for i, layer in enumerate(spec.layers):
        if layer.kind == CONV:
            ci += 1
            names.append((i, f"Conv1D_{ci}" if n_conv > 1 else "Conv1D"))
        elif layer.kind == DENSE:
            di += 1
            names.append((i, f"Dense_{di}" if n_dense > 1 else "Dense"))
        elif layer.kind == SOFTMAX_DENSE:
            names.append((i, "Softmax"))
    return names


def param_shapes(spec: NetworkSpec) -> dict[int, tuple[tuple, tuple]]:
    """Per parameterized layer: (weight shape, bias shape)."""
    shapes = {}
    c, length = spec.input_channels, spec.input_length
    for i, layer in enumerate(spec.layers):
        if layer.kind == CONV:
            shapes[i] = ((layer.units, c, layer.kernel), (layer.units,))
        elif layer.kind in (DENSE, SOFTMAX_DENSE):
            shapes[i] = ((layer.units, c * length), (layer.units,))
        if layer.kind == CONV:
            length = out_length(length, layer.kernel, layer.stride, layer.padding)
            c = layer.units
        elif layer.kind == POOL:
            length = out_length(length, layer.kernel, layer.stride, layer.padding)
        elif layer.kind == FLATTEN:
            length, c = c * length, 1
        elif layer.kind in (DENSE, SOFTMAX_DENSE):
            length = layer.units
    return shapes


def param_counts(spec: NetworkSpec) -> tuple[list[tuple[str, int]], int]:
    """Per-layer parameter counts (weights + biases) and their total."""
    shapes = param_shapes(spec)
    rows = []
    for idx, name in parameterized_layers(spec):
        w_shape, b_shape = shapes[idx]
        rows.append((name, int(np.prod(w_shape)) + int(np.prod(b_shape))))
    return rows, sum(n for _, n in rows)


@dataclass
class Network:
    """A spec plus concrete parameters: per layer (weights, bias) or None."""

    spec: NetworkSpec
    params: list[tuple[np.ndarray, np.ndarray] | None]


def param_count(network: Network) -> tuple[list[tuple[str, int]], int]:
    return param_counts(network.spec)


def init_params(spec: NetworkSpec, seed: int) -> Network:
    """Seeded uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) weights, zero biases."""
    rng = np.random.default_rng(seed)
    shapes = param_shapes(spec)
    params: list[tuple[np.ndarray, np.ndarray] | None] = []
    for i, layer in enumerate(spec.layers):
        if i in shapes:
            w_shape, b_shape = shapes[i]
            fan_in = int(np.prod(w_shape[1:]))
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=w_shape)
            b = np.zeros(b_shape)
            params.append((w, b))
        else:
            params.append(None)
    return Network(spec, params)


def flatten_params(network: Network, layer_index: int) -> np.ndarray:
    """Row-major weights followed by biases for one parameterized layer."""
    pair = network.params[layer_index]
    if pair is None:
        raise ShapeError(f"layer {layer_index} has no parameters")
    w, b = pair
    return np.concatenate([w.ravel(), b]).astype(np.float64)


def unflatten_params(
    spec: NetworkSpec, layer_index: int, flat: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse of flatten_params for the given layer."""
    shapes = param_shapes(spec)
    if layer_index not in shapes:
        raise ShapeError(f"layer {layer_index} has no parameters")
    w_shape, b_shape = shapes[layer_index]
    n_w, n_b = int(np.prod(w_shape)), int(np.prod(b_shape))
    flat = np.asarray(flat, dtype=np.float64)
    if flat.shape != (n_w + n_b,):
        raise ShapeError(
            f"layer {layer_index}: expected {n_w + n_b} values, got {flat.shape}"
        )
    return flat[:n_w].reshape(w_shape), flat[n_w:].copy()


# ---------------------------------------------------------------------------
# forward / backward


def _windows(x: np.ndarray, kernel: int, stride: int, padding: int) -> np.ndarray:
    # x (B, C, L) -> (B, C, T, K) strided view of every window
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding)))
    return sliding_window_view(x, kernel, axis=2)[:, :, ::stride, :]


def _conv_fwd(x, w, b, stride, padding):
    win = _windows(x, w.shape[2], stride, padding)
    y = np.einsum("bctk,ock->bot", win, w, optimize=True) + b[:, None]
    return y, win


def _conv_bwd(dy, win, x_shape, w, stride, padding):
    dw = np.einsum("bot,bctk->ock", dy, win, optimize=True)
    db = dy.sum(axis=(0, 2))
    dwin = np.einsum("bot,ock->bctk", dy, w, optimize=True)
    k = w.shape[2]
    t = dy.shape[2]
    bsz, c, length = x_shape
    dxp = np.zeros((bsz, c, length + 2 * padding))
    for j in range(k):
        dxp[:, :, j : j + stride * t : stride] += dwin[:, :, :, j]
    dx = dxp[:, :, padding : padding + length] if padding else dxp
    return dx, dw, db


def _pool_fwd(x, kernel, stride):
    win = _windows(x, kernel, stride, 0)
    return win.max(axis=3), win.argmax(axis=3)


def _pool_bwd(dy, arg, x_shape, kernel, stride):
    dx = np.zeros(x_shape)
    t = dy.shape[2]
    for j in range(kernel):
        dx[:, :, j : j + stride * t : stride] += dy * (arg == j)
    return dx


def _log_softmax(z):
    zs = z - z.max(axis=1, keepdims=True)
    return zs - np.log(np.exp(zs).sum(axis=1, keepdims=True))


def _forward_batch(network: Network, x: np.ndarray, train_rng=None):
    """Run the stack on a (B, C, L) batch.

    Returns (probabilities, logits, caches); caches hold what the backward
    pass needs. Dropout is active only when ``train_rng`` is given.
    """
    caches = []
    h = x
    for i, layer in enumerate(network.spec.layers):
        cache = {"kind": layer.kind}
        if layer.kind == CONV:
            w, b = network.params[i]
            cache["x_shape"] = h.shape
            h, win = _conv_fwd(h, w, b, layer.stride, layer.padding)
            cache["win"] = win
            if layer.activation == "relu":
                cache["pre_relu"] = h
                h = np.maximum(h, 0.0)
        elif layer.kind == POOL:
            cache["x_shape"] = h.shape
            h, arg = _pool_fwd(h, layer.kernel, layer.stride)
            cache["arg"] = arg
        elif layer.kind == FLATTEN:
            cache["x_shape"] = h.shape
            h = h.reshape(h.shape[0], -1)
        elif layer.kind in (DENSE, SOFTMAX_DENSE):
            w, b = network.params[i]
            cache["x"] = h
            h = h @ w.T + b
            if layer.kind == DENSE and layer.activation == "relu":
                cache["pre_relu"] = h
                h = np.maximum(h, 0.0)
            if layer.kind == DENSE and layer.dropout_rate > 0 and train_rng is not None:
                keep = train_rng.random(h.shape) >= layer.dropout_rate
                h = h * keep / (1.0 - layer.dropout_rate)
                cache["drop_keep"] = keep
        if not np.all(np.isfinite(h)):
            raise NumericError(f"non-finite values in layer {i} ({layer.kind})")
        caches.append(cache)
    logits = h
    logp = _log_softmax(logits)
    return np.exp(logp), logits, caches


def _backward_batch(network: Network, caches, probs, labels):
    """Gradient of mean cross-entropy w.r.t. every parameter tensor."""
    bsz = probs.shape[0]
    onehot = np.zeros_like(probs)
    onehot[np.arange(bsz), labels] = 1.0
    dh = (probs - onehot) / bsz
    grads: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(network.spec.layers)
    for i in range(len(network.spec.layers) - 1, -1, -1):
        layer = network.spec.layers[i]
        cache = caches[i]
        if layer.kind in (DENSE, SOFTMAX_DENSE):
            if "drop_keep" in cache:
                dh = dh * cache["drop_keep"] / (1.0 - layer.dropout_rate)
            if "pre_relu" in cache:
                dh = dh * (cache["pre_relu"] > 0)
            w, _ = network.params[i]
            grads[i] = (dh.T @ cache["x"], dh.sum(axis=0))
            dh = dh @ w
        elif layer.kind == FLATTEN:
            dh = dh.reshape(cache["x_shape"])
        elif layer.kind == POOL:
            dh = _pool_bwd(dh, cache["arg"], cache["x_shape"], layer.kernel, layer.stride)
        elif layer.kind == CONV:
            if "pre_relu" in cache:
                dh = dh * (cache["pre_relu"] > 0)
            w, _ = network.params[i]
            dh, dw, db = _conv_bwd(
                dh, cache["win"], cache["x_shape"], w, layer.stride, layer.padding
            )
            grads[i] = (dw, db)
    return grads


def _as_batch(spec: NetworkSpec, records) -> np.ndarray:
    rows = []
    for rec in records:
        samples = rec.samples if hasattr(rec, "samples") else np.asarray(rec, dtype=np.float64)
        if samples.size != spec.input_channels * spec.input_length:
            raise ShapeError(
                f"record has {samples.size} samples, spec expects "
                f"{spec.input_channels * spec.input_length}"
            )
        rows.append(samples.reshape(spec.input_channels, spec.input_length))
    return np.stack(rows)


def forward(network: Network, record, inference_mode: bool = True) -> np.ndarray:
    """Class probabilities for one record; deterministic in inference mode."""
    del inference_mode  # dropout only runs inside train()
    probs, _, _ = _forward_batch(network, _as_batch(network.spec, [record]))
    return probs[0]


def predict_batch(network: Network, records) -> np.ndarray:
    """Probabilities for many records, (n_records, class_count)."""
    probs, _, _ = _forward_batch(network, _as_batch(network.spec, records))
    return probs


def logits_batch(network: Network, records) -> np.ndarray:
    """Pre-softmax outputs, used for path-equivalence checks."""
    _, logits, _ = _forward_batch(network, _as_batch(network.spec, records))
    return logits


def batch_loss(network: Network, records, labels) -> float:
    """Mean cross-entropy of the inference-mode forward pass."""
    x = _as_batch(network.spec, records)
    _, logits, _ = _forward_batch(network, x)
    logp = _log_softmax(logits)
    labels = np.asarray(labels)
    return float(-logp[np.arange(len(labels)), labels].mean())


def loss_gradients(network: Network, records, labels) -> list[np.ndarray | None]:
    """Flattened mean-cross-entropy gradient per parameterized layer (no dropout)."""
    x = _as_batch(network.spec, records)
    probs, _, caches = _forward_batch(network, x)
    grads = _backward_batch(network, caches, probs, np.asarray(labels))
    out: list[np.ndarray | None] = []
    for g in grads:
        out.append(None if g is None else np.concatenate([g[0].ravel(), g[1]]))
    return out


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise TrainingError("epochs and batch_size must be >= 1")
        if self.learning_rate < 0:
            raise TrainingError("learning_rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class TrainResult:
    network: Network
    epoch_losses: list[float] = field(default_factory=list)


def train(network: Network, train_set, config: TrainConfig) -> TrainResult:
    """Mini-batch cross-entropy training; pure function of (network, data, seed)."""
    records = train_set.records
    if not records:
        raise TrainingError("empty training set")
    labels = np.array([r.label for r in records])
    if labels.max() >= network.spec.class_count:
        raise TrainingError("label exceeds class_count")
    x_all = _as_batch(network.spec, records)

    params = [None if p is None else (p[0].copy(), p[1].copy()) for p in network.params]
    net = Network(network.spec, params)
    rng = np.random.default_rng(config.seed)

    adam_m = [None if p is None else (np.zeros_like(p[0]), np.zeros_like(p[1])) for p in params]
    adam_v = [None if p is None else (np.zeros_like(p[0]), np.zeros_like(p[1])) for p in params]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0

    n = len(records)
    epoch_losses = []
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for start in range(0, n, config.batch_size):
            idx = perm[start : start + config.batch_size]
            xb, yb = x_all[idx], labels[idx]
            try:
                probs, logits, caches = _forward_batch(net, xb, train_rng=rng)
            except NumericError as exc:
                raise TrainingError(f"training diverged at epoch {epoch}: {exc}") from exc
            logp = _log_softmax(logits)
            loss = float(-logp[np.arange(len(idx)), yb].mean())
            total += loss * len(idx)
            grads = _backward_batch(net, caches, probs, yb)
            step += 1
            for li, g in enumerate(grads):
                if g is None:
                    continue
                w, b = net.params[li]
                if config.optimizer == "sgd":
                    w -= config.learning_rate * g[0]
                    b -= config.learning_rate * g[1]
                else:
                    mw, mb = adam_m[li]
                    vw, vb = adam_v[li]
                    mw *= beta1; mw += (1 - beta1) * g[0]
                    mb *= beta1; mb += (1 - beta1) * g[1]
                    vw *= beta2; vw += (1 - beta2) * g[0] ** 2
                    vb *= beta2; vb += (1 - beta2) * g[1] ** 2
                    corr1 = 1 - beta1 ** step
                    corr2 = 1 - beta2 ** step
                    w -= config.learning_rate * (mw / corr1) / (np.sqrt(vw / corr2) + eps)
                    b -= config.learning_rate * (mb / corr1) / (np.sqrt(vb / corr2) + eps)
        epoch_loss = total / n
        if not np.isfinite(epoch_loss):
            raise TrainingError(f"training diverged at epoch {epoch}")
        epoch_losses.append(epoch_loss)
    return TrainResult(net, epoch_losses)


# ---------------------------------------------------------------------------
# checkpoint container


class ByteReader:
    """Sequential struct reader that reports byte offsets in errors."""

    def __init__(self, data: bytes, context: str = ""):
        self.data = data
        self.offset = 0
        self.context = context

    def take(self, fmt: str, what: str):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            prefix = f"{self.context}: " if self.context else ""
            raise ContainerFormatError(f"{prefix}truncated {what}", self.offset)
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values if len(values) > 1 else values[0]

    def take_bytes(self, size: int, what: str) -> bytes:
        if self.offset + size > len(self.data):
            prefix = f"{self.context}: " if self.context else ""
            raise ContainerFormatError(f"{prefix}truncated {what}", self.offset)
        out = self.data[self.offset : self.offset + size]
        self.offset += size
        return out

    def at_context(self, context: str) -> "ByteReader":
        self.context = context
        return self


def pack_spec(spec: NetworkSpec) -> bytes:
    parts = [
        struct.pack(
            "<HHHH",
            len(spec.layers),
            spec.input_length,
            spec.input_channels,
            spec.class_count,
        )
    ]
    for layer in spec.layers:
        parts.append(
            struct.pack(
                "<BHHHHBf",
                _KIND_CODES[layer.kind],
                layer.kernel,
                layer.units,
                layer.stride,
                layer.padding,
                _ACT_CODES[layer.activation],
                layer.dropout_rate,
            )
        )
    return b"".join(parts)


def unpack_spec(reader: ByteReader) -> NetworkSpec:
    n_layers, input_length, input_channels, class_count = reader.take(
        "<HHHH", "network descriptor"
    )
    layers = []
    for i in range(n_layers):
        kind, kernel, units, stride, padding, act, drop = reader.take(
            "<BHHHHBf", f"layer {i} descriptor"
        )
        if kind not in _KIND_NAMES or act not in _ACT_NAMES:
            raise ContainerFormatError(f"layer {i}: bad descriptor", reader.offset)
        layers.append(
            LayerSpec(_KIND_NAMES[kind], kernel, units, stride, padding,
                      _ACT_NAMES[act], float(drop))
        )
    return NetworkSpec(layers, input_length, input_channels, class_count)


def save_checkpoint(network: Network, path) -> None:
    parts = [CHECKPOINT_MAGIC, struct.pack("<H", CHECKPOINT_VERSION)]
    parts.append(pack_spec(network.spec))
    for idx, _name in parameterized_layers(network.spec):
        parts.append(flatten_params(network, idx).astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_checkpoint(path) -> Network:
    data = Path(path).read_bytes()
    reader = ByteReader(data)
    magic = reader.take_bytes(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise ContainerFormatError("bad magic", 0)
    version = reader.take("<H", "version")
    if version != CHECKPOINT_VERSION:
        raise ContainerFormatError(f"unsupported version {version}", 4)
    spec = unpack_spec(reader)
    shapes = param_shapes(spec)
    params: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(spec.layers)
    for idx, name in parameterized_layers(spec):
        w_shape, b_shape = shapes[idx]
        count = int(np.prod(w_shape)) + int(np.prod(b_shape))
        raw = reader.at_context(name).take_bytes(count * 4, "parameter block")
        flat = np.frombuffer(raw, dtype="<f4").astype(np.float64)
        params[idx] = unflatten_params(spec, idx, flat)
    if reader.offset != len(data):
        raise ContainerFormatError("trailing bytes", reader.offset)
    return Network(spec, params)
