"""Point-set primitives: sampling, neighbor queries, local aggregation layers.

Index selection (farthest-point sampling, k nearest neighbors, random
subsampling) runs on plain arrays and is deliberately outside the autodiff
graph; gradients flow through the gathered coordinates and features instead.
Both sampling routines are exact and deterministic: FPS breaks max-distance
ties toward the lowest index, KNN sorts by (distance, index).

set_conv aggregates each sampled center's neighborhood through a shared MLP
and a max pool; set_upconv propagates sparse-level features back to a denser
level.  Shared MLPs apply relu on every layer; the FC stacks used by pose
heads elsewhere do not (see headmask).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T

__all__ = [
    "PcopsError", "PointCloud", "SharedMLP", "FcStack",
    "farthest_point_sample", "knn_indices", "random_sample",
    "set_conv", "set_upconv",
]

_KNN_CHUNK = 512


class PcopsError(ValueError):
    """Invalid sample sizes, neighbor counts, or cloud shapes."""


@dataclass
class PointCloud:
    """Value-level cloud: coordinates (n, 3) and optional features (n, c)."""

    coords: np.ndarray
    features: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise PcopsError(f"coords need shape (n, 3), got {self.coords.shape}")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=np.float64)
            if self.features.shape[0] != self.coords.shape[0]:
                raise PcopsError("features and coords disagree on point count")

    def __len__(self) -> int:
        return self.coords.shape[0]


def farthest_point_sample(points: np.ndarray, m: int,
                          start_index: int = 0) -> np.ndarray:
    """Greedy max-min sampling; returns m unique indices.

    The first pick is start_index (0 for the deterministic mode; training
    passes a seeded draw).  Each later pick maximizes the distance to the
    selected set, ties resolved to the lowest index.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if m < 1 or m > n:
        raise PcopsError(f"cannot sample {m} points from a cloud of {n}")
    if not 0 <= start_index < n:
        raise PcopsError(f"start index {start_index} out of range for {n}")
    sel = np.empty(m, dtype=np.int64)
    sel[0] = start_index
    d2 = ((points - points[start_index]) ** 2).sum(axis=1)
    for i in range(1, m):
        nxt = int(np.argmax(d2))  # first max wins ties
        sel[i] = nxt
        d2 = np.minimum(d2, ((points - points[nxt]) ** 2).sum(axis=1))
    return sel


def knn_indices(query: np.ndarray, ref: np.ndarray, k: int) -> np.ndarray:
    """Exact brute-force k nearest neighbors; (m, k) indices into ref,
    each row ordered by (squared distance, index)."""
    query = np.asarray(query, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    n = ref.shape[0]
    if k < 1 or k > n:
        raise PcopsError(f"k={k} invalid for a reference cloud of {n}")
    out = np.empty((query.shape[0], k), dtype=np.int64)
    for lo in range(0, query.shape[0], _KNN_CHUNK):
        q = query[lo:lo + _KNN_CHUNK]
        d2 = ((q[:, None, :] - ref[None, :, :]) ** 2).sum(axis=-1)
        # stable sort keeps equal distances in ascending index order
        out[lo:lo + q.shape[0]] = np.argsort(d2, axis=1, kind="stable")[:, :k]
    return out


def random_sample(n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform indices; without replacement unless size exceeds the cloud."""
    if n < 1 or size < 1:
        raise PcopsError(f"cannot draw {size} indices from {n} points")
    return rng.choice(n, size=size, replace=size > n)


class SharedMLP:
    """Per-row matmul + bias + relu stack applied pointwise.

    relu_last=False leaves the final layer linear; layers that produce
    softmax logits need signed outputs, and a relu there starves the
    attention gradient whenever a neighborhood's logits all clamp to zero.
    """

    def __init__(self, store: T.ParamStore, prefix: str, in_width: int,
                 widths: list[int], rng: np.random.Generator,
                 relu_last: bool = True) -> None:
        self.layers: list[tuple[T.Parameter, T.Parameter]] = []
        self.relu_last = relu_last
        fan_in = in_width
        for i, w in enumerate(widths):
            scale = np.sqrt(2.0 / fan_in)
            weight = store.create(f"{prefix}/{i}/W",
                                  rng.normal(size=(fan_in, w)) * scale)
            bias = store.create(f"{prefix}/{i}/b", np.zeros(w))
            self.layers.append((weight, bias))
            fan_in = w
        self.out_width = fan_in

    def __call__(self, x: T.Tensor) -> T.Tensor:
        last = len(self.layers) - 1
        for i, (weight, bias) in enumerate(self.layers):
            x = T.add(T.matmul(x, weight.tensor()), bias.tensor())
            if i < last or self.relu_last:
                x = T.relu(x)
        return x


class FcStack:
    """Linear stack for regression heads (no activations)."""

    def __init__(self, store: T.ParamStore, prefix: str, in_width: int,
                 widths: list[int], rng: np.random.Generator,
                 out_bias: np.ndarray | None = None) -> None:
        self.layers: list[tuple[T.Parameter, T.Parameter]] = []
        fan_in = in_width
        for i, w in enumerate(widths):
            scale = np.sqrt(1.0 / fan_in)
            weight = store.create(f"{prefix}/{i}/W",
                                  rng.normal(size=(fan_in, w)) * scale)
            init_b = np.zeros(w)
            if out_bias is not None and i == len(widths) - 1:
                init_b = np.asarray(out_bias, dtype=np.float64).copy()
            bias = store.create(f"{prefix}/{i}/b", init_b)
            self.layers.append((weight, bias))
            fan_in = w
        self.out_width = fan_in

    def __call__(self, x: T.Tensor) -> T.Tensor:
        for weight, bias in self.layers:
            x = T.add(T.matmul(x, weight.tensor()), bias.tensor())
        return x


def _gather_grouped(t: T.Tensor, flat_idx: np.ndarray, m: int,
                    k: int) -> T.Tensor:
    width = t.shape[1]
    return T.reshape(T.gather_rows(t, flat_idx), (m, k, width))


def set_conv(coords: T.Tensor, feats: T.Tensor | None,
             center_idx: np.ndarray, k: int, mlp: SharedMLP,
             ref_coords: np.ndarray | None = None
             ) -> tuple[T.Tensor, T.Tensor]:
    """Sampled local aggregation.

    For each center, gather its k nearest input points, run the shared MLP on
    (neighbor - center) concat neighbor features concat center features, and
    max-pool over the neighborhood.  Returns (center coords, features).
    ref_coords overrides the array used for the neighbor query (callers pass
    plain data to keep the query outside the graph).
    """
    raw = coords.data if ref_coords is None else ref_coords
    centers = np.asarray(center_idx, dtype=np.int64)
    m = centers.shape[0]
    nbr = knn_indices(raw[centers], raw, k)
    flat = nbr.reshape(m * k)
    rep = np.repeat(centers, k)
    nbr_coords = _gather_grouped(coords, flat, m, k)
    ctr_coords = _gather_grouped(coords, rep, m, k)
    parts = [T.sub(nbr_coords, ctr_coords)]
    if feats is not None:
        parts.append(_gather_grouped(feats, flat, m, k))
        parts.append(_gather_grouped(feats, rep, m, k))
    h = mlp(T.concat(parts, axis=2))
    pooled = T.reduce_max(h, axis=1)
    out_coords = T.gather_rows(coords, centers)
    return out_coords, pooled


def set_upconv(dense_coords: T.Tensor, dense_feats: T.Tensor | None,
               sparse_coords: T.Tensor, sparse_feats: T.Tensor,
               k: int, mlp1: SharedMLP, mlp2: SharedMLP) -> T.Tensor:
    """Propagate sparse-level features to every dense point.

    Per dense point: gather its k nearest sparse points, run the first MLP on
    (sparse - dense) concat sparse features, max-pool, append the dense
    point's own features, and finish with the second MLP.
    """
    n = dense_coords.shape[0]
    nbr = knn_indices(dense_coords.data, sparse_coords.data, k)
    flat = nbr.reshape(n * k)
    rep = np.repeat(np.arange(n, dtype=np.int64), k)
    rel = T.sub(_gather_grouped(sparse_coords, flat, n, k),
                _gather_grouped(dense_coords, rep, n, k))
    grouped = _gather_grouped(sparse_feats, flat, n, k)
    pooled = T.reduce_max(mlp1(T.concat([rel, grouped], axis=2)), axis=1)
    if dense_feats is not None:
        pooled = T.concat([pooled, dense_feats], axis=1)
    return mlp2(pooled)
