"""The ShapeConv operator.

Each point's output is the elementwise sum of two branches:

* intra-shape: every neighbour feature minus the neighbourhood's moment
  (mean) feature, mapped by ``f_intra`` and max-pooled over the neighbours;
* inter-shape: the moment features of all N neighbourhoods pass through the
  PLACE attention block and are mapped by ``f_inter``.

All functions accept a single cloud ``(N, C)`` or a batch ``(B, N, C)``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import NeighborIndex, gather_neighbors, knn_graph
from .numerics import tensor as T
from .numerics.layers import EVAL, MLPSpec, Mode, activation_tail, init_linear, init_mlp, mlp_forward
from .numerics.params import ParamStore
from .numerics.tensor import ShapeError, Tensor

PLACE_MAPS = ("g", "theta", "phi", "alpha")


@dataclass(frozen=True)
class ShapeConvConfig:
    c_in: int
    c_out: int
    k: int = 16
    enable_mp: bool = True
    enable_intra: bool = True
    enable_inter: bool = True
    knn_space: str = "feature"
    slope: float = 0.2

    def __post_init__(self):
        if self.c_in < 1 or self.c_out < 1:
            raise ValueError("channel counts must be positive")
        if self.k < 1:
            raise ValueError("k must be positive")
        if not (self.enable_intra or self.enable_inter):
            raise ValueError("ShapeConv needs at least one of the intra and inter branches")
        if self.knn_space not in ("coordinate", "feature"):
            raise ValueError(f"knn_space must be 'coordinate' or 'feature', got {self.knn_space!r}")

    @property
    def intra_spec(self) -> MLPSpec:
        return MLPSpec((self.c_in, self.c_out), slope=self.slope)

    @property
    def inter_spec(self) -> MLPSpec:
        return MLPSpec((self.c_in, self.c_out), slope=self.slope)


def init_shapeconv(store: ParamStore, prefix: str, config: ShapeConvConfig,
                   rng: np.random.Generator) -> None:
    if config.enable_intra:
        init_mlp(config.intra_spec, store, f"{prefix}.intra", rng)
    if config.enable_inter:
        for name in PLACE_MAPS:
            # a bias on phi adds the same amount to every logit in an attention
            # row, which the row softmax cancels, so phi is a bare linear map
            init_linear(store, f"{prefix}.place.{name}", config.c_in, config.c_in, rng, bias=name != "phi")
        init_mlp(config.inter_spec, store, f"{prefix}.inter", rng)


def _as_batch(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return T.reshape(x, (1, *x.shape)), True
    return x, False


def _unbatch(x: Tensor, single: bool) -> Tensor:
    return T.reshape(x, x.shape[1:]) if single else x


def _batched_index(nbr: NeighborIndex, single: bool) -> np.ndarray:
    idx = np.asarray(nbr.indices)
    return idx[None] if single and idx.ndim == 2 else idx


def _check_neighbors(idx: np.ndarray, x: Tensor, k: int) -> None:
    if idx.shape != (*x.shape[:2], k):
        raise ShapeError(f"neighbour table {idx.shape} does not match features {x.shape} with k={k}")


def intra_edge_features(features: Tensor, nbr: NeighborIndex, enable_mp: bool = True) -> Tensor:
    """The per-neighbour inputs of ``f_intra``: ``X_j - moment`` (or raw ``X_j``)."""
    g = gather_neighbors(features, nbr)
    if not enable_mp:
        return g
    return g - T.mean(g, axis=-2, keepdims=True)


def intra_shape_forward(store: ParamStore, prefix: str, config: ShapeConvConfig,
                        features: Tensor, nbr: NeighborIndex, mode: Mode = EVAL,
                        spec: MLPSpec | None = None, fused: bool = True) -> Tensor:
    """Max over neighbours of ``f_intra`` applied to each edge feature.

    ``spec`` overrides the default single-layer ``f_intra`` (tests use an
    identity map). The default spec runs through a fused kernel; pass
    ``fused=False`` to force the layer-by-layer path.
    """
    x, single = _as_batch(features)
    idx = _batched_index(nbr, single)
    _check_neighbors(idx, x, config.k)
    spec = config.intra_spec if spec is None else spec
    p = f"{prefix}.intra"
    # f_intra's first map is linear, so it commutes with gather and with the
    # neighbourhood mean: project the N rows once instead of all N*k edges.
    proj = T.linear(x, store.param(f"{p}.0.weight"))
    if fused and spec.num_layers == 1 and spec.use_batchnorm and spec.activation == "leaky_relu":
        bn = f"{p}.0.bn"
        out = T.neighbor_max_bn_leaky(
            proj, idx, store.param(f"{p}.0.bias"), store.param(f"{bn}.gamma"),
            store.param(f"{bn}.beta"), store.buffer(f"{bn}.running_mean"),
            store.buffer(f"{bn}.running_var"), training=mode.training,
            centered=config.enable_mp, slope=spec.slope, momentum=mode.bn_momentum)
        return _unbatch(out, single)
    edges = T.gather_rows(proj, idx)
    if config.enable_mp:
        edges = edges - T.mean(edges, axis=2, keepdims=True)
    h = edges + store.param(f"{p}.0.bias")
    h = activation_tail(spec, store, p, 0, h, mode)
    h = mlp_forward(spec, store, p, h, mode, start=1)
    return _unbatch(T.tmax(h, axis=2), single)


def place_forward(store: ParamStore, prefix: str, moments: Tensor,
                  return_attention: bool = False):
    """Pointwise long-range attention over the N moment features.

    ``A = softmax(theta(M) phi(M)^T / sqrt(C))`` row-wise, and the output is
    ``alpha(A g(M)) + M``.
    """
    m, single = _as_batch(moments)
    p = f"{prefix}.place"
    maps = {name: T.linear(m, store.param(f"{p}.{name}.weight"),
                           store.param(f"{p}.{name}.bias") if f"{p}.{name}.bias" in store else None)
            for name in ("g", "theta", "phi")}
    scale = 1.0 / np.sqrt(m.shape[-1])
    logits = T.matmul(maps["theta"], T.swapaxes(maps["phi"], 1, 2)) * scale
    attention = T.softmax(logits, axis=-1)
    context = T.matmul(attention, maps["g"])
    out = T.linear(context, store.param(f"{p}.alpha.weight"), store.param(f"{p}.alpha.bias")) + m
    out = _unbatch(out, single)
    if return_attention:
        return out, _unbatch(attention, single)
    return out


def inter_shape_forward(store: ParamStore, prefix: str, config: ShapeConvConfig,
                        moments: Tensor, mode: Mode = EVAL) -> Tensor:
    if moments.shape[-1] != config.c_in:
        raise ShapeError(f"inter branch expects {config.c_in} channels, got {moments.shape[-1]}")
    enhanced = place_forward(store, prefix, moments)
    return mlp_forward(config.inter_spec, store, f"{prefix}.inter", enhanced, mode)


def build_neighbors(config: ShapeConvConfig, features: Tensor, coords) -> NeighborIndex:
    if config.knn_space == "coordinate":
        source = np.asarray(coords.data if isinstance(coords, Tensor) else coords)
    else:
        source = features.data
    return knn_graph(source, config.k, config.knn_space)


def shapeconv_forward(store: ParamStore, prefix: str, config: ShapeConvConfig, features: Tensor,
                      coords, mode: Mode = EVAL, nbr: NeighborIndex | None = None) -> Tensor:
    """Sum of the enabled intra- and inter-shape branches for every point.

    ``nbr`` overrides the kNN table built from ``config.knn_space``.
    """
    n = features.shape[-2]
    if n < config.k:
        raise ValueError(f"cloud has {n} points, fewer than k={config.k}")
    if features.shape[-1] != config.c_in:
        raise ShapeError(f"{prefix}: expected {config.c_in} input channels, got {features.shape[-1]}")
    if nbr is None:
        nbr = build_neighbors(config, features, coords)
    out = None
    if config.enable_intra:
        out = intra_shape_forward(store, prefix, config, features, nbr, mode)
    if config.enable_inter:
        if config.enable_mp:
            x, single = _as_batch(features)
            moments = _unbatch(T.neighbor_mean(x, _batched_index(nbr, single)), single)
        else:
            moments = features
        inter = inter_shape_forward(store, prefix, config, moments, mode)
        out = inter if out is None else out + inter
    return out
