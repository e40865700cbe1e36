"""Adaptive multi-bit binary weight quantization.

Each layer's flattened parameter vector is cut into disjoint groups of at
most ``group_size`` values. A group w is approximated as B @ a where B is a
{-1,+1} sign matrix (one column per retained bit) and a is a positive,
descending coordinate vector; an empty decomposition (zero columns)
reconstructs the zero vector. The pipeline is:

1. greedy residual binarization of every group up to a per-layer bit cap,
2. global pruning of the least significant coordinates, scored either by
   magnitude or by an estimated loss impact on a calibration batch,
3. alternating refinement: exact per-position sign assignment with fixed
   coordinates, then least-squares coordinates with fixed signs.

Every operation is a pure function of its inputs, so a fixed seed and
calibration batch reproduce the quantized model bit for bit.
"""

from __future__ import annotations

import hashlib
import itertools
import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from . import net as _net
from .data import Dataset
from .errors import ConfigError
from .net import Network, NetworkSpec

log = logging.getLogger(__name__)

COORD_EPS = 1e-12
ENUM_BITWIDTH_LIMIT = 16
GRAM_COND_LIMIT = 1e12


@dataclass
class WeightGroup:
    """A contiguous slice of one layer's flattened parameters."""

    values: np.ndarray
    layer_index: int = 0
    offset: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)


@dataclass
class QuantGroup:
    """Sign bases (size x bitwidth, entries +-1) and positive coordinates.

    Canonical form: coordinates strictly positive and sorted descending
    (signs absorbed into the base columns) with no duplicate columns.
    """

    bases: np.ndarray
    coords: np.ndarray

    def __post_init__(self):
        self.bases = np.asarray(self.bases, dtype=np.int8)
        self.coords = np.asarray(self.coords, dtype=np.float64)

    @property
    def size(self) -> int:
        return self.bases.shape[0]

    @property
    def bitwidth(self) -> int:
        return self.bases.shape[1]

    def reconstruct(self) -> np.ndarray:
        # fixed left-to-right column accumulation so equal sign rows
        # reconstruct bitwise identically regardless of group shape
        out = np.zeros(self.size)
        for i in range(self.bitwidth):
            out += self.coords[i] * self.bases[:, i]
        return out


@dataclass
class QuantLayer:
    groups: list[QuantGroup]
    group_size: int
    param_count: int
    layer_index: int


@dataclass
class ModelMeta:
    seed: int = 0
    config_digest: str = "0" * 64


@dataclass
class QuantModel:
    """Per-layer quantized groups plus the network spec they came from."""

    spec: NetworkSpec
    layers: list[QuantLayer]
    group_size: int
    meta: ModelMeta = field(default_factory=ModelMeta)


@dataclass
class AlqConfig:
    """Quantization pipeline parameters.

    ``i_max`` is either one cap for every layer or a {layer name: cap} map
    (key "default" supplies the fallback). Exactly one pruning target may be
    set: ``prune_rate`` removes that fraction of all retained coordinates,
    ``target_avg_bitwidth`` prunes until the network-wide weight-weighted
    average bitwidth reaches the target.
    """

    group_size: int = 16
    i_max: int | dict = 2
    prune_rate: float | None = None
    target_avg_bitwidth: float | None = None
    scorer: str = "loss_aware"
    refine_iters: int = 3
    calib_batch: int = 64
    seed: int = 0
    curvature_weight: float = 1.0

    def __post_init__(self):
        if self.group_size < 1:
            raise ConfigError("group_size must be >= 1")
        caps = self.i_max.values() if isinstance(self.i_max, dict) else [self.i_max]
        for cap in caps:
            if not 1 <= int(cap) <= 8:
                raise ConfigError("i_max must be in 1..8")
        if self.prune_rate is not None and self.target_avg_bitwidth is not None:
            raise ConfigError("set prune.rate or prune.target_avg_bitwidth, not both")
        if self.prune_rate is not None and not 0.0 <= self.prune_rate < 1.0:
            raise ConfigError("prune.rate must be in [0,1)")
        if self.target_avg_bitwidth is not None and self.target_avg_bitwidth < 0:
            raise ConfigError("prune.target_avg_bitwidth must be >= 0")
        if self.scorer not in ("magnitude", "loss_aware"):
            raise ConfigError(f"unknown scorer {self.scorer!r}")
        if self.refine_iters < 0:
            raise ConfigError("refine_iters must be >= 0")
        if self.calib_batch < 1:
            raise ConfigError("calib_batch must be >= 1")

    def i_max_for(self, layer_name: str) -> int:
        if isinstance(self.i_max, dict):
            return int(self.i_max.get(layer_name, self.i_max.get("default", 2)))
        return int(self.i_max)

    def to_dict(self) -> dict:
        prune: dict = {}
        if self.prune_rate is not None:
            prune["rate"] = self.prune_rate
        if self.target_avg_bitwidth is not None:
            prune["target_avg_bitwidth"] = self.target_avg_bitwidth
        return {
            "group_size": self.group_size,
            "i_max": self.i_max,
            "prune": prune,
            "scorer": self.scorer,
            "refine_iters": self.refine_iters,
            "calib_batch": self.calib_batch,
            "seed": self.seed,
            "curvature_weight": self.curvature_weight,
        }

    def digest(self) -> str:
        payload = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    @classmethod
    def from_dict(cls, raw: dict) -> "AlqConfig":
        known = {
            "group_size", "i_max", "prune", "scorer", "refine_iters",
            "calib_batch", "seed", "curvature_weight",
        }
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        prune = raw.get("prune", {}) or {}
        if not isinstance(prune, dict):
            raise ConfigError("prune must be an object")
        bad = set(prune) - {"rate", "target_avg_bitwidth"}
        if bad:
            raise ConfigError(f"unknown prune keys: {sorted(bad)}")
        kwargs = {k: raw[k] for k in known - {"prune"} if k in raw}
        return cls(
            prune_rate=prune.get("rate"),
            target_avg_bitwidth=prune.get("target_avg_bitwidth"),
            **kwargs,
        )

    @classmethod
    def from_json_file(cls, path) -> "AlqConfig":
        with open(path) as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"invalid JSON config: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config root must be an object")
        return cls.from_dict(raw)


# ---------------------------------------------------------------------------
# group-level operations


def partition_groups(flat: np.ndarray, n: int) -> list[WeightGroup]:
    """Cut a flattened vector into ceil(len/n) groups; only the last may be short."""
    flat = np.asarray(flat, dtype=np.float64)
    if n < 1:
        raise ConfigError("group size must be >= 1")
    if flat.size == 0:
        raise ConfigError("cannot partition an empty vector")
    return [
        WeightGroup(flat[off : off + n].copy(), offset=off)
        for off in range(0, flat.size, n)
    ]


def _column_sort_key(bases: np.ndarray, coords: np.ndarray):
    return sorted(
        range(len(coords)), key=lambda i: (-coords[i], bases[:, i].tobytes())
    )


def canonicalize(bases: np.ndarray, coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Enforce the canonical decomposition without changing B @ a.

    Negative coordinates flip their sign column, duplicate columns merge by
    summing coordinates, near-zero coordinates are dropped, and the result is
    sorted by descending coordinate (column bytes break exact ties).
    """
    bases = np.asarray(bases, dtype=np.int8)
    coords = np.asarray(coords, dtype=np.float64).copy()
    if coords.size:
        neg = coords < 0
        if neg.any():
            bases = bases.copy()
            bases[:, neg] *= -1
            coords[neg] = -coords[neg]
    merged: dict[bytes, float] = {}
    columns: dict[bytes, np.ndarray] = {}
    for i in range(coords.size):
        if coords[i] <= COORD_EPS:
            continue
        key = bases[:, i].tobytes()
        merged[key] = merged.get(key, 0.0) + coords[i]
        columns[key] = bases[:, i]
    keys = [k for k in merged if merged[k] > COORD_EPS]
    n = bases.shape[0]
    if not keys:
        return np.zeros((n, 0), dtype=np.int8), np.zeros(0)
    out_bases = np.stack([columns[k] for k in keys], axis=1)
    out_coords = np.array([merged[k] for k in keys])
    order = _column_sort_key(out_bases, out_coords)
    return out_bases[:, order], out_coords[order]


def init_decompose(group: WeightGroup, i_max: int) -> QuantGroup:
    """Greedy residual binarization: repeatedly peel off mean(|r|) * sign(r).

    Stops early once the residual scale drops below the coordinate epsilon;
    an all-zero group yields an empty decomposition.
    """
    if i_max < 1:
        raise ConfigError("i_max must be >= 1")
    w = group.values
    r = w.copy()
    cols, alphas = [], []
    for _ in range(i_max):
        alpha = float(np.abs(r).mean())
        if alpha <= COORD_EPS:
            break
        beta = np.where(r >= 0, 1, -1).astype(np.int8)
        cols.append(beta)
        alphas.append(alpha)
        r = r - alpha * beta
    if not cols:
        return QuantGroup(np.zeros((w.size, 0), dtype=np.int8), np.zeros(0))
    bases = np.stack(cols, axis=1)
    coords = np.array(alphas)
    bases, coords = canonicalize(bases, coords)
    return QuantGroup(bases, coords)


def _enumerate_levels(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """All sign rows and their levels, ranked by (|level|, positive first).

    Levels accumulate column by column exactly like QuantGroup.reconstruct,
    so a selected row later reconstructs to the level it was scored at.
    """
    bitwidth = coords.size
    signs = np.array(list(itertools.product((1, -1), repeat=bitwidth)), dtype=np.int8)
    levels = np.zeros(signs.shape[0])
    for i in range(bitwidth):
        levels += coords[i] * signs[:, i]
    order = np.lexsort((levels < 0, np.abs(levels)))
    return signs[order], levels[order]


def optimize_bases(group: WeightGroup, q: QuantGroup) -> QuantGroup:
    """Exact per-position sign assignment for fixed coordinates.

    Every weight picks the reachable level (one of the 2^bitwidth signed sums
    of the coordinates) nearest to it; ties go to the smaller-magnitude level,
    then to the positive one. Never increases the reconstruction error.
    """
    if q.bitwidth == 0:
        return QuantGroup(q.bases.copy(), q.coords.copy())
    if q.bitwidth > ENUM_BITWIDTH_LIMIT:
        raise ConfigError(
            f"bitwidth {q.bitwidth} exceeds enumeration limit {ENUM_BITWIDTH_LIMIT}"
        )
    signs, levels = _enumerate_levels(q.coords)
    w = group.values
    dists = np.abs(w[:, None] - levels[None, :])
    best = np.zeros(w.size, dtype=np.int64)
    best_d = dists[:, 0].copy()
    for j in range(1, levels.size):
        better = dists[:, j] < best_d
        best[better] = j
        best_d[better] = dists[better, j]
    return QuantGroup(signs[best], q.coords.copy())


def optimize_coords(group: WeightGroup, q: QuantGroup) -> QuantGroup:
    """Least-squares coordinates for fixed sign bases, then re-canonicalize.

    Solves the normal equations, falling back to the pseudo-inverse
    (minimum-norm solution) when the Gram matrix is ill conditioned. If
    floating-point canonicalization would bump the reconstruction error the
    previous decomposition is kept, so the error never increases.
    """
    if q.bitwidth == 0:
        return QuantGroup(q.bases.copy(), q.coords.copy())
    w = group.values
    b = q.bases.astype(np.float64)
    gram = b.T @ b
    rhs = b.T @ w
    cond = np.linalg.cond(gram)
    if np.isfinite(cond) and cond < GRAM_COND_LIMIT:
        coords = np.linalg.solve(gram, rhs)
    else:
        coords = np.linalg.pinv(b) @ w
    bases_new, coords_new = canonicalize(q.bases, coords)
    cand = QuantGroup(bases_new, coords_new)
    err_old = np.linalg.norm(w - q.reconstruct())
    err_new = np.linalg.norm(w - cand.reconstruct())
    if err_new > err_old:
        return QuantGroup(q.bases.copy(), q.coords.copy())
    return cand


def average_bitwidth(qlayer: QuantLayer) -> tuple[float, float]:
    """(plain group mean of bitwidths, weight-weighted mean) for one layer."""
    bits = np.array([g.bitwidth for g in qlayer.groups], dtype=np.float64)
    sizes = np.array([g.size for g in qlayer.groups], dtype=np.float64)
    return float(bits.mean()), float((bits * sizes).sum() / sizes.sum())


def model_avg_bitwidth(layers: list[QuantLayer]) -> float:
    """Network-wide weight-weighted average bitwidth."""
    bits = sum(g.size * g.bitwidth for ql in layers for g in ql.groups)
    params = sum(ql.param_count for ql in layers)
    return bits / params


def total_coords(layers: list[QuantLayer]) -> int:
    return sum(g.bitwidth for ql in layers for g in ql.groups)


# ---------------------------------------------------------------------------
# scoring and pruning


@dataclass(frozen=True)
class CoordScore:
    layer: int
    group: int
    coord: int
    score: float
    magnitude: float


def dequantized_network(spec: NetworkSpec, layers: list[QuantLayer]) -> Network:
    """Rebuild a full-precision Network from group reconstructions."""
    params: list[tuple[np.ndarray, np.ndarray] | None] = [None] * len(spec.layers)
    expected = dict(zip((i for i, _ in _net.parameterized_layers(spec)),
                        (c for _, c in _net.param_counts(spec)[0])))
    for ql in layers:
        flat = np.concatenate([g.reconstruct() for g in ql.groups])
        if ql.layer_index not in expected or flat.size != expected[ql.layer_index]:
            raise ConfigError(
                f"layer {ql.layer_index}: reconstructed {flat.size} values, "
                f"spec expects {expected.get(ql.layer_index)}"
            )
        params[ql.layer_index] = _net.unflatten_params(spec, ql.layer_index, flat)
    return Network(spec, params)


def score_coordinates(
    qlayers: list[QuantLayer],
    network: Network,
    calib,
    mode: str,
    curvature_weight: float = 1.0,
) -> list[CoordScore]:
    """Significance score for every retained coordinate (lower = prune first).

    magnitude: a * sqrt(group size), the norm of the removed contribution.
    loss_aware: |g . (a * column)| + curvature_weight/2 * a^2 * group size,
    where g is the mean cross-entropy gradient over the calibration records,
    taken at the dequantized weights. Ties later break by magnitude, then by
    (layer, group, coordinate) position.
    """
    if mode not in ("magnitude", "loss_aware"):
        raise ConfigError(f"unknown scorer {mode!r}")
    grads: dict[int, np.ndarray] = {}
    if mode == "loss_aware":
        if calib is None or len(calib.records) == 0:
            raise ConfigError("loss_aware scoring requires a calibration set")
        deq = dequantized_network(network.spec, qlayers)
        flat_grads = _net.loss_gradients(deq, calib.records, calib.labels())
        grads = {i: g for i, g in enumerate(flat_grads) if g is not None}

    scores = []
    for li, ql in enumerate(qlayers):
        g_layer = grads.get(ql.layer_index)
        for gi, q in enumerate(ql.groups):
            if q.bitwidth == 0:
                continue
            root_n = np.sqrt(q.size)
            g_slice = None
            if g_layer is not None:
                off = gi * ql.group_size
                g_slice = g_layer[off : off + q.size]
            for ci in range(q.bitwidth):
                a = float(q.coords[ci])
                mag = a * root_n
                if mode == "magnitude":
                    s = mag
                else:
                    col = q.bases[:, ci].astype(np.float64)
                    s = a * abs(float(g_slice @ col))
                    s += 0.5 * curvature_weight * a * a * q.size
                scores.append(CoordScore(li, gi, ci, s, mag))
    return scores


def _copy_layers(qlayers: list[QuantLayer]) -> list[QuantLayer]:
    return [
        QuantLayer(
            [QuantGroup(g.bases.copy(), g.coords.copy()) for g in ql.groups],
            ql.group_size,
            ql.param_count,
            ql.layer_index,
        )
        for ql in qlayers
    ]


def prune_coordinates(
    qlayers: list[QuantLayer],
    scores: list[CoordScore],
    rate: float | None = None,
    target_avg_bitwidth: float | None = None,
) -> list[QuantLayer]:
    """Remove the lowest-scored coordinates globally until the target is met.

    ``rate`` removes that fraction of all retained coordinates (1.0 empties
    the model); ``target_avg_bitwidth`` stops once the network weight-weighted
    average bitwidth is at or below the target. Already-met targets are a
    logged no-op.
    """
    if (rate is None) == (target_avg_bitwidth is None):
        raise ConfigError("specify exactly one of rate / target_avg_bitwidth")
    live = {(s.layer, s.group, s.coord) for s in scores}
    if len(live) != len(scores):
        raise ConfigError("duplicate coordinate scores")
    for li, ql in enumerate(qlayers):
        for gi, q in enumerate(ql.groups):
            for ci in range(q.bitwidth):
                if (li, gi, ci) not in live:
                    raise ConfigError(
                        f"scores missing coordinate (layer {li}, group {gi}, coord {ci})"
                    )

    order = sorted(scores, key=lambda s: (s.score, s.magnitude, s.layer, s.group, s.coord))
    total = total_coords(qlayers)
    remove: set[tuple[int, int, int]] = set()
    if rate is not None:
        if not 0.0 <= rate <= 1.0:
            raise ConfigError("prune rate must be in [0,1]")
        n_remove = int(np.floor(rate * total + 0.5))
        remove = {(s.layer, s.group, s.coord) for s in order[:n_remove]}
    else:
        bits = sum(g.size * g.bitwidth for ql in qlayers for g in ql.groups)
        params = sum(ql.param_count for ql in qlayers)
        if bits / params <= target_avg_bitwidth:
            log.info(
                "prune target %.4f already met (current %.4f); nothing removed",
                target_avg_bitwidth, bits / params,
            )
            return _copy_layers(qlayers)
        for s in order:
            if bits / params <= target_avg_bitwidth:
                break
            remove.add((s.layer, s.group, s.coord))
            bits -= qlayers[s.layer].groups[s.group].size

    out = []
    for li, ql in enumerate(qlayers):
        groups = []
        for gi, q in enumerate(ql.groups):
            keep = [ci for ci in range(q.bitwidth) if (li, gi, ci) not in remove]
            groups.append(QuantGroup(q.bases[:, keep], q.coords[keep]))
        out.append(QuantLayer(groups, ql.group_size, ql.param_count, ql.layer_index))
    return out


# ---------------------------------------------------------------------------
# pipeline


@dataclass
class LayerQuantStats:
    name: str
    params: int
    bitwidth_init: float
    bitwidth_pruned: float
    bitwidth_final: float
    recon_rmse_init: float
    recon_rmse_final: float


@dataclass
class PipelineReport:
    layers: list[LayerQuantStats]
    avg_bitwidth_init: float
    avg_bitwidth_pruned: float
    avg_bitwidth_final: float
    pruned_coords: int
    calib_loss_init: float | None = None
    calib_loss_pruned: float | None = None
    calib_loss_final: float | None = None


def _layer_partitions(network: Network, group_size: int):
    """(layer index, name, flat vector, weight groups) per parameterized layer."""
    out = []
    for idx, name in _net.parameterized_layers(network.spec):
        flat = _net.flatten_params(network, idx)
        groups = partition_groups(flat, group_size)
        for g in groups:
            g.layer_index = idx
        out.append((idx, name, flat, groups))
    return out


def _init_layers(network: Network, config: AlqConfig):
    parts = _layer_partitions(network, config.group_size)
    qlayers = []
    for idx, name, flat, groups in parts:
        qgroups = [init_decompose(g, config.i_max_for(name)) for g in groups]
        qlayers.append(QuantLayer(qgroups, config.group_size, flat.size, idx))
    return parts, qlayers

def _refine_layers(parts, qlayers: list[QuantLayer], iters: int) -> None:
    for (_, _, _, groups), ql in zip(parts, qlayers):
        for gi, wg in enumerate(groups):
            q = ql.groups[gi]
            for _ in range(iters):
                if q.bitwidth == 0:
                    break
                q = optimize_bases(wg, q)
                q = optimize_coords(wg, q)
            ql.groups[gi] = q


def _recon_rmse(flat: np.ndarray, ql: QuantLayer) -> float:
    recon = np.concatenate([g.reconstruct() for g in ql.groups])
    return float(np.sqrt(np.mean((flat - recon) ** 2)))


def _calib_subset(calib, config: AlqConfig):
    if calib is None or len(calib.records) == 0:
        return None
    if len(calib.records) <= config.calib_batch:
        return calib
    rng = np.random.default_rng(config.seed)
    idx = rng.choice(len(calib.records), size=config.calib_batch, replace=False)
    return Dataset([calib.records[i] for i in sorted(idx)], calib.class_count)


def _calib_loss(spec, qlayers, batch):
    if batch is None:
        return None
    deq = dequantized_network(spec, qlayers)
    return _net.batch_loss(deq, batch.records, batch.labels())


def alq_pipeline(network: Network, calib, config: AlqConfig) -> tuple[QuantModel, PipelineReport]:
    """Quantize a trained network: init, prune to target, refine.

    ``calib`` supplies the calibration records for loss-aware scoring and for
    the loss figures in the report; it may be None when the scorer is
    magnitude-based or no pruning is requested (losses are then omitted).
    """
    parts, qlayers = _init_layers(network, config)
    batch = _calib_subset(calib, config)

    stats = {
        name: LayerQuantStats(name, flat.size, average_bitwidth(ql)[1], 0.0, 0.0,
                              _recon_rmse(flat, ql), 0.0)
        for (idx, name, flat, _), ql in zip(parts, qlayers)
    }
    avg_init = model_avg_bitwidth(qlayers)
    loss_init = _calib_loss(network.spec, qlayers, batch)

    want_prune = (
        config.target_avg_bitwidth is not None
        or (config.prune_rate is not None and config.prune_rate > 0)
    )
    coords_before = total_coords(qlayers)
    if want_prune:
        scores = score_coordinates(
            qlayers, network, batch, config.scorer, config.curvature_weight
        )
        qlayers = prune_coordinates(
            qlayers, scores,
            rate=config.prune_rate,
            target_avg_bitwidth=config.target_avg_bitwidth,
        )
    avg_pruned = model_avg_bitwidth(qlayers)
    loss_pruned = _calib_loss(network.spec, qlayers, batch) if want_prune else loss_init
    for (_, name, _, _), ql in zip(parts, qlayers):
        stats[name].bitwidth_pruned = average_bitwidth(ql)[1]

    _refine_layers(parts, qlayers, config.refine_iters)
    for (_, name, flat, _), ql in zip(parts, qlayers):
        stats[name].bitwidth_final = average_bitwidth(ql)[1]
        stats[name].recon_rmse_final = _recon_rmse(flat, ql)

    report = PipelineReport(
        layers=list(stats.values()),
        avg_bitwidth_init=avg_init,
        avg_bitwidth_pruned=avg_pruned,
        avg_bitwidth_final=model_avg_bitwidth(qlayers),
        pruned_coords=coords_before - total_coords(qlayers),
        calib_loss_init=loss_init,
        calib_loss_pruned=loss_pruned,
        calib_loss_final=_calib_loss(network.spec, qlayers, batch),
    )
    model = QuantModel(
        network.spec, qlayers, config.group_size,
        ModelMeta(config.seed, config.digest()),
    )
    return model, report


def uniform_baseline(network: Network, i: int, n: int) -> QuantModel:
    """Fixed-bitwidth comparator: greedy init at exactly i bits, no pruning."""
    if i < 1:
        raise ConfigError("bitwidth must be >= 1")
    parts = _layer_partitions(network, n)
    qlayers = []
    for idx, name, flat, groups in parts:
        qgroups = [init_decompose(g, i) for g in groups]
        qlayers.append(QuantLayer(qgroups, n, flat.size, idx))
    digest = hashlib.sha256(
        json.dumps({"uniform": i, "group_size": n}, sort_keys=True).encode()
    ).hexdigest()
    return QuantModel(network.spec, qlayers, n, ModelMeta(0, digest))
