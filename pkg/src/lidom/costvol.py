"""Two-stage attentive correlation between consecutive point clouds.

Stage one attends over each first-cloud point's k1 nearest neighbors in the
second cloud, producing a per-point motion embedding.  Stage two re-attends
over each point's k2 nearest neighbors within the first cloud (neighborhoods
taken in coordinate space), which spreads the embeddings across the local
patch and suppresses spurious matches.

Both stages share one input construction: for a center with feature f_c and a
neighbor at offset d with feature f_n, the attention MLP u and the value MLP
v both see (d, |d|, f_c, f_n).  Attention weights are a per-channel softmax
over the neighborhood; the "uniform" variant replaces them with 1/k, which
removes the learned attention while keeping the value path intact.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T
from .pcops import SharedMLP, knn_indices

__all__ = ["CostVolume", "CostVolumeError"]

_DIST_EPS = 1e-20


class CostVolumeError(ValueError):
    pass


class CostVolume:
    """Parameter block and forward pass; out_width channels per point."""

    def __init__(self, store: T.ParamStore, prefix: str, feat_width: int,
                 out_width: int, k1: int, k2: int, hidden: int,
                 rng: np.random.Generator, mode: str = "attentive") -> None:
        if mode not in ("attentive", "uniform"):
            raise CostVolumeError(f"unknown cost-volume mode {mode!r}")
        self.k1, self.k2 = k1, k2
        self.mode = mode
        self.out_width = out_width
        in1 = 4 + 2 * feat_width
        in2 = 4 + 2 * out_width
        self.v1 = SharedMLP(store, f"{prefix}/v1", in1, [hidden, out_width], rng)
        self.v2 = SharedMLP(store, f"{prefix}/v2", in2, [hidden, out_width], rng)
        if mode == "attentive":
            self.u1 = SharedMLP(store, f"{prefix}/u1", in1, [hidden, out_width],
                                rng, relu_last=False)
            self.u2 = SharedMLP(store, f"{prefix}/u2", in2, [hidden, out_width],
                                rng, relu_last=False)

    def _attend(self, centers: T.Tensor, center_f: T.Tensor,
                ref_coords: T.Tensor, ref_f: T.Tensor, nbr: np.ndarray,
                u: SharedMLP | None, v: SharedMLP) -> T.Tensor:
        n, k = nbr.shape
        flat = nbr.reshape(n * k)
        rep = np.repeat(np.arange(n, dtype=np.int64), k)

        def group(t: T.Tensor, idx: np.ndarray) -> T.Tensor:
            return T.reshape(T.gather_rows(t, idx), (n, k, t.shape[1]))

        rel = T.sub(group(ref_coords, flat), group(centers, rep))
        dist = T.sqrt(T.add(T.reduce_sum(T.mul(rel, rel), axis=2, keepdims=True),
                            T.const(_DIST_EPS)))
        x = T.concat([rel, dist, group(center_f, rep), group(ref_f, flat)],
                     axis=2)
        val = v(x)
        if u is None:
            weights = T.const(np.full((n, k, 1), 1.0 / k))
            return T.reduce_sum(T.mul(weights, val), axis=1)
        weights = T.softmax_axis(u(x), axis=1)
        return T.reduce_sum(T.mul(weights, val), axis=1)

    def __call__(self, coords1: T.Tensor, feats1: T.Tensor,
                 coords2: T.Tensor, feats2: T.Tensor) -> T.Tensor:
        if feats1.shape[0] != coords1.shape[0]:
            raise CostVolumeError("first cloud: features and coords disagree")
        if feats2.shape[0] != coords2.shape[0]:
            raise CostVolumeError("second cloud: features and coords disagree")
        u1 = getattr(self, "u1", None)
        u2 = getattr(self, "u2", None)
        nbr1 = knn_indices(coords1.data, coords2.data, self.k1)
        pe = self._attend(coords1, feats1, coords2, feats2, nbr1, u1, self.v1)
        nbr2 = knn_indices(coords1.data, coords1.data, self.k2)
        return self._attend(coords1, pe, coords1, pe, nbr2, u2, self.v2)
