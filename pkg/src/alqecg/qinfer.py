"""Forward passes driven directly by packed sign bits.

The engine never materializes dequantized weight tensors. Each group
contributes sum_i a_i * (column_i . x) to its layer's outputs, where the
column dot product is an add/subtract reduction selected by the packed sign
bits. Groups follow flattened layer order (weights row-major, then biases),
so one group may span several output channels and the bias tail; the engine
gathers the matching input window for every flattened weight position.

Activations stay full-precision; accumulation is float64 so the bit-driven
path tracks the dequantized reference within tight tolerances.
"""

from __future__ import annotations

import numpy as np

from . import net as _net
from .bitpack import pack_signs, unpack_signs
from .errors import NumericError, ShapeError
from .net import CONV, DENSE, FLATTEN, POOL, SOFTMAX_DENSE, Network
from .quantizer import QuantGroup, QuantModel, dequantized_network
from .util import chunked_rows


def dequantize(model: QuantModel) -> Network:
    """Reconstruct the full-precision network from group decompositions."""
    return dequantized_network(model.spec, model.layers)


def group_dot(q: QuantGroup, x) -> float:
    """sum_i a_i * (column_i . x), reduced via the packed sign bits."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (q.size,):
        raise ShapeError(f"expected {q.size} values, got shape {x.shape}")
    total = 0.0
    for ci in range(q.bitwidth):
        pos = unpack_signs(pack_signs(q.bases[:, ci]), q.size) > 0
        total += q.coords[ci] * (x[pos].sum() - x[~pos].sum())
    return float(total)


class QuantExecutor:
    """Precomputed per-group execution plans for one quantized model."""

    def __init__(self, model: QuantModel):
        self.model = model
        self.plans = {}
        shapes = _net.param_shapes(model.spec)
        for ql in model.layers:
            w_shape, _ = shapes[ql.layer_index]
            n_out = w_shape[0]
            fan = int(np.prod(w_shape[1:]))
            self.plans[ql.layer_index] = (n_out, fan, self._build(ql, n_out, fan))

    @staticmethod
    def _build(ql, n_out, fan):
        w_total = n_out * fan
        plans = []
        off = 0
        for g in ql.groups:
            if g.bitwidth == 0:
                off += g.size
                continue
            idx = np.arange(off, off + g.size)
            is_bias = idx >= w_total
            out_ch = np.where(is_bias, idx - w_total, idx // fan)
            rows = np.where(is_bias, fan, idx % fan)
            pos = np.zeros((g.size, g.bitwidth), dtype=bool)
            for ci in range(g.bitwidth):
                pos[:, ci] = unpack_signs(pack_signs(g.bases[:, ci]), g.size) > 0
            parts = [
                (int(o), rows[out_ch == o], pos[out_ch == o])
                for o in np.unique(out_ch)
            ]
            plans.append((g.coords, parts))
            off += g.size
        return plans

    def _apply(self, layer_index: int, cols: np.ndarray) -> np.ndarray:
        # cols (fan, n_cols) of gathered inputs; a ones row stands in for bias
        n_out, fan, plans = self.plans[layer_index]
        ext = np.vstack([cols, np.ones((1, cols.shape[1]))])
        y = np.zeros((n_out, cols.shape[1]))
        for coords, parts in plans:
            for out_ch, rows, pos in parts:
                m = ext[rows]
                for ci in range(coords.size):
                    p = pos[:, ci]
                    contrib = m[p].sum(axis=0) - m[~p].sum(axis=0)
                    y[out_ch] += coords[ci] * contrib
        return y

    def logits(self, records) -> np.ndarray:
        x = _net._as_batch(self.model.spec, records)
        bsz = x.shape[0]
        h = x
        for i, layer in enumerate(self.model.spec.layers):
            if layer.kind == CONV:
                win = _net._windows(h, layer.kernel, layer.stride, layer.padding)
                _, c, t, k = win.shape
                cols = win.transpose(1, 3, 0, 2).reshape(c * k, bsz * t)
                h = self._apply(i, cols).reshape(layer.units, bsz, t).transpose(1, 0, 2)
                if layer.activation == "relu":
                    h = np.maximum(h, 0.0)
            elif layer.kind == POOL:
                h, _ = _net._pool_fwd(h, layer.kernel, layer.stride)
            elif layer.kind == FLATTEN:
                h = h.reshape(bsz, -1)
            elif layer.kind in (DENSE, SOFTMAX_DENSE):
                h = self._apply(i, h.T).T
                if layer.kind == DENSE and layer.activation == "relu":
                    h = np.maximum(h, 0.0)
            if not np.all(np.isfinite(h)):
                raise NumericError(f"non-finite values in layer {i} ({layer.kind})")
        return h

    def probs(self, records) -> np.ndarray:
        return np.exp(_net._log_softmax(self.logits(records)))


def qforward(model: QuantModel, record) -> np.ndarray:
    """Class probabilities for one record via the sign-bit path."""
    return QuantExecutor(model).probs([record])[0]


def qlogits_batch(model: QuantModel, records) -> np.ndarray:
    return QuantExecutor(model).logits(records)


def predict_batch(model: QuantModel, records) -> np.ndarray:
    """Probabilities for many records; chunks may run on worker threads."""
    ex = QuantExecutor(model)
    return chunked_rows(ex.probs, records)


def predict(model: QuantModel, records) -> tuple[np.ndarray, np.ndarray]:
    """(probabilities, argmax labels) per record; ties go to the lowest class."""
    probs = predict_batch(model, records)
    return probs, probs.argmax(axis=1)
