"""End-to-end odometry network.

Two input clouds are subsampled to a fixed size and pushed through a shared
four-level aggregation pyramid.  An attentive cost volume correlates the two
clouds at the penultimate level (optionally the coarsest); a dedicated set
conv carries that embedding to the coarsest level, where a mask and the first
pose are regressed.  Three warp-refinement steps then walk back down the
pyramid, each warping the first cloud by the coarse pose, re-correlating,
and composing a residual pose, so the forward pass emits four poses ordered
coarse to fine.

Config flags expose the published ablations: uniform (non-attentive) cost
volume, no mask, per-level mask without coarse-to-fine conditioning, no warp,
and no refinement at all (single pose).
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .costvol import CostVolume
from .geom import Pose, Quaternion, quat_canonicalize
from .headmask import RefineBlock, make_mask, pose_head, warp_refine
from .pcops import FcStack, SharedMLP, farthest_point_sample, random_sample, set_conv

__all__ = ["NetConfig", "NetError", "OdometryNet", "NetOutput", "LevelOutput",
           "desk_config", "full_config", "parse_config_text", "read_config_file"]


class NetError(ValueError):
    """Bad configuration or malformed forward inputs."""


@dataclass(frozen=True)
class NetConfig:
    """Architecture knobs; every field is addressable from a config file."""

    n_input: int = 8192
    n1: int = 2048
    n2: int = 1024
    n3: int = 256
    n4: int = 64
    c1: int = 32
    c2: int = 64
    c3: int = 128
    c4: int = 256
    knn_k: int = 16
    cv_k1: int = 16
    cv_k2: int = 16
    up_k: int = 8
    fc_hidden1: int = 256
    fc_hidden2: int = 128
    first_embedding: str = "penultimate"
    cost_volume_mode: str = "attentive"
    use_mask: bool = True
    optimize_mask: bool = True
    use_warp: bool = True
    use_warp_refinement: bool = True
    init_seed: int = 0

    def levels(self) -> list[tuple[int, int]]:
        return [(self.n1, self.c1), (self.n2, self.c2),
                (self.n3, self.c3), (self.n4, self.c4)]

    def validate(self) -> None:
        counts = [self.n_input, self.n1, self.n2, self.n3, self.n4]
        if any(c < 1 for c in counts):
            raise NetError("level point counts must be positive")
        if any(a < b for a, b in zip(counts, counts[1:])):
            raise NetError(f"level counts must not increase: {counts}")
        if any(c < 1 for c in (self.c1, self.c2, self.c3, self.c4)):
            raise NetError("channel widths must be positive")
        if self.knn_k > self.n4:
            raise NetError(
                f"knn_k={self.knn_k} exceeds the coarsest level ({self.n4})")
        if self.up_k > self.n4:
            raise NetError(
                f"up_k={self.up_k} exceeds the coarsest level ({self.n4})")
        if self.cv_k1 > self.n4 or self.cv_k2 > self.n4:
            raise NetError("cost-volume neighbor counts exceed level size")
        if self.first_embedding not in ("penultimate", "last"):
            raise NetError(
                f"first_embedding must be penultimate or last, "
                f"got {self.first_embedding!r}")
        if self.cost_volume_mode not in ("attentive", "uniform"):
            raise NetError(
                f"cost_volume_mode must be attentive or uniform, "
                f"got {self.cost_volume_mode!r}")


def desk_config(**overrides) -> NetConfig:
    """Small preset that trains in minutes on one CPU core."""
    cfg = NetConfig(n_input=512, n1=128, n2=64, n3=32, n4=16,
                    c1=8, c2=16, c3=32, c4=64,
                    knn_k=8, cv_k1=4, cv_k2=4, up_k=4,
                    fc_hidden1=64, fc_hidden2=32)
    return replace(cfg, **overrides)


def full_config(**overrides) -> NetConfig:
    return replace(NetConfig(), **overrides)


def _coerce(name: str, kind: type, raw: str):
    if kind is bool:
        low = raw.lower()
        if low in ("true", "yes", "1"):
            return True
        if low in ("false", "no", "0"):
            return False
        raise NetError(f"config key {name}: expected a boolean, got {raw!r}")
    try:
        return kind(raw)
    except ValueError:
        raise NetError(
            f"config key {name}: expected {kind.__name__}, got {raw!r}") from None


def parse_config_text(text: str, base: NetConfig | None = None) -> NetConfig:
    """Line-oriented `key = value` overrides; unknown keys are rejected."""
    base = base if base is not None else NetConfig()
    types = {f.name: f.type for f in fields(NetConfig)}
    pytypes = {"int": int, "float": float, "str": str, "bool": bool}
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise NetError(f"config line {lineno}: expected key = value")
        key, _, raw = stripped.partition("=")
        key, raw = key.strip(), raw.strip()
        if key not in types:
            raise NetError(f"config line {lineno}: unknown key {key!r}")
        kind = types[key]
        kind = pytypes[kind] if isinstance(kind, str) else kind
        overrides[key] = _coerce(key, kind, raw)
    cfg = replace(base, **overrides)
    cfg.validate()
    return cfg


def read_config_file(path: str | Path, base: NetConfig | None = None) -> NetConfig:
    return parse_config_text(Path(path).read_text(), base)


@dataclass
class LevelOutput:
    """One pyramid level's pose estimate and its supporting tensors."""

    level: int
    coords: np.ndarray
    q: T.Tensor
    t: T.Tensor
    embedding: T.Tensor
    mask: T.Tensor | None

    def pose(self) -> Pose:
        return Pose(quat_canonicalize(Quaternion.from_array(self.q.data)),
                    self.t.data.copy())


@dataclass
class NetOutput:
    """Levels ordered coarse to fine; poses() mirrors that order."""

    levels: list[LevelOutput]

    def poses(self) -> list[Pose]:
        return [lv.pose() for lv in self.levels]

    def finest(self) -> LevelOutput:
        return self.levels[-1]


class _Pyramid:
    """Per-cloud result of the shared aggregation stack."""

    def __init__(self) -> None:
        self.coords: list[T.Tensor] = []   # level 1..4
        self.feats: list[T.Tensor] = []
        self.center_idx: list[np.ndarray] = []


class OdometryNet:
    def __init__(self, cfg: NetConfig) -> None:
        cfg.validate()
        self.cfg = cfg
        self.store = T.ParamStore()
        rng = np.random.default_rng(cfg.init_seed)
        lv = cfg.levels()

        self.pyramid: list[SharedMLP] = []
        prev_c = 0
        for i, (_, c) in enumerate(lv, start=1):
            in_w = 3 + 2 * prev_c if prev_c else 3
            self.pyramid.append(SharedMLP(self.store, f"pyramid/l{i}/mlp",
                                          in_w, [c, c], rng))
            prev_c = c

        cv_level = 3 if cfg.first_embedding == "penultimate" else 4
        c_cv = lv[cv_level - 1][1]
        self.cv_init = CostVolume(self.store, "init/cv", c_cv, c_cv,
                                  cfg.cv_k1, cfg.cv_k2, c_cv, rng,
                                  cfg.cost_volume_mode)
        self.carry: SharedMLP | None = None
        if cfg.first_embedding == "penultimate":
            c3, c4 = lv[2][1], lv[3][1]
            self.carry = SharedMLP(self.store, "init/carry",
                                   3 + 2 * c3, [c4, c4], rng)

        c4 = lv[3][1]
        self.init_mask: SharedMLP | None = None
        if cfg.use_mask:
            self.init_mask = SharedMLP(self.store, "init/mask", 2 * c4,
                                       [c4, c4], rng, relu_last=False)
        fc_widths = [cfg.fc_hidden1, cfg.fc_hidden2]
        identity_q = np.array([1.0, 0.0, 0.0, 0.0])
        self.init_fc_q = FcStack(self.store, "init/fc_q", c4,
                                 fc_widths + [4], rng, out_bias=identity_q)
        self.init_fc_t = FcStack(self.store, "init/fc_t", c4,
                                 fc_widths + [3], rng)

        self.blocks: dict[int, RefineBlock] = {}
        if cfg.use_warp_refinement:
            for level in (3, 2, 1):
                c = lv[level - 1][1]
                c_sparse = lv[level][1]
                pre = f"refine/l{level}"
                with_prior = cfg.use_mask and cfg.optimize_mask
                self.blocks[level] = RefineBlock(
                    up_e1=SharedMLP(self.store, f"{pre}/up_e/mlp1",
                                    3 + c_sparse, [c, c], rng),
                    up_e2=SharedMLP(self.store, f"{pre}/up_e/mlp2",
                                    2 * c, [c], rng),
                    cost_volume=CostVolume(self.store, f"{pre}/cv", c, c,
                                           cfg.cv_k1, cfg.cv_k2, c, rng,
                                           cfg.cost_volume_mode),
                    refine_mlp=SharedMLP(self.store, f"{pre}/emb",
                                         3 * c, [c, c], rng),
                    fc_q=FcStack(self.store, f"{pre}/fc_q", c,
                                 fc_widths + [4], rng, out_bias=identity_q),
                    fc_t=FcStack(self.store, f"{pre}/fc_t", c,
                                 fc_widths + [3], rng),
                    mask_mlp=(SharedMLP(self.store, f"{pre}/mask",
                                        (3 if with_prior else 2) * c, [c, c],
                                        rng, relu_last=False)
                              if cfg.use_mask else None),
                    up_m1=(SharedMLP(self.store, f"{pre}/up_m/mlp1",
                                     3 + c_sparse, [c, c], rng)
                           if with_prior else None),
                    up_m2=(SharedMLP(self.store, f"{pre}/up_m/mlp2",
                                     2 * c, [c], rng)
                           if with_prior else None),
                )

    def count_parameters(self) -> int:
        return self.store.count_values()

    def _run_pyramid(self, pts: np.ndarray, rng: np.random.Generator,
                     fps_random: bool) -> _Pyramid:
        out = _Pyramid()
        coords = T.const(pts)
        feats: T.Tensor | None = None
        for i, (n, _) in enumerate(self.cfg.levels()):
            start = int(rng.integers(coords.shape[0])) if fps_random else 0
            centers = farthest_point_sample(coords.data, n, start)
            coords, feats = set_conv(coords, feats, centers,
                                     self.cfg.knn_k, self.pyramid[i])
            out.coords.append(coords)
            out.feats.append(feats)
            out.center_idx.append(centers)
        return out

    def forward(self, pc1: np.ndarray, pc2: np.ndarray,
                rng: np.random.Generator | None = None,
                fps_random: bool = False) -> NetOutput:
        pc1 = np.asarray(pc1, dtype=np.float64)
        pc2 = np.asarray(pc2, dtype=np.float64)
        for name, pc in (("pc1", pc1), ("pc2", pc2)):
            if pc.ndim != 2 or pc.shape[1] != 3 or pc.shape[0] < 1:
                raise NetError(f"{name}: expected nonempty (n, 3) points")
        if rng is None:
            rng = np.random.default_rng(0)
        cfg = self.cfg
        sub1 = pc1[random_sample(pc1.shape[0], cfg.n_input, rng)]
        sub2 = pc2[random_sample(pc2.shape[0], cfg.n_input, rng)]

        p1 = self._run_pyramid(sub1, rng, fps_random)
        p2 = self._run_pyramid(sub2, rng, fps_random)

        if cfg.first_embedding == "penultimate":
            e3 = self.cv_init(p1.coords[2], p1.feats[2],
                              p2.coords[2], p2.feats[2])
            _, e4 = set_conv(p1.coords[2], e3, p1.center_idx[3],
                             cfg.knn_k, self.carry)
        else:
            e4 = self.cv_init(p1.coords[3], p1.feats[3],
                              p2.coords[3], p2.feats[3])

        mask4 = None
        if self.init_mask is not None:
            mask4 = make_mask(e4, p1.feats[3], None, self.init_mask)
        q, t = pose_head(e4, mask4, self.init_fc_q, self.init_fc_t)
        levels = [LevelOutput(4, p1.coords[3].data, q, t, e4, mask4)]

        if cfg.use_warp_refinement:
            emb, mask = e4, mask4
            for level in (3, 2, 1):
                blk = self.blocks[level]
                idx = level - 1
                q, t, emb, mask = warp_refine(
                    blk, p1.coords[idx], p1.feats[idx],
                    p2.coords[idx], p2.feats[idx],
                    p1.coords[idx + 1], emb,
                    mask if blk.up_m1 is not None else None,
                    q, t, cfg.up_k, use_warp=cfg.use_warp)
                levels.append(LevelOutput(level, p1.coords[idx].data,
                                          q, t, emb, mask))
        return NetOutput(levels)
