"""SOCNN: a head map, three stacked ShapeConv stages, multi-scale shortcut
concatenation, a tail map with a max-pooled global signature, and the
classification and segmentation branches."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .geometry import AugmentationSpec, augment_coords
from .numerics import tensor as T
from .numerics.layers import (EVAL, MLPSpec, Mode, activation_tail, init_batchnorm, init_mlp,
                              mlp_forward)
from .numerics.params import ParamStore
from .numerics.tensor import ShapeError, Tensor
from .shapeconv import ShapeConvConfig, init_shapeconv, shapeconv_forward

# ablation variants: (moment points, intra branch, inter branch)
ABLATION_VARIANTS = {
    "A": (False, True, False),
    "B": (False, False, True),
    "C": (True, True, False),
    "D": (True, False, True),
    "E": (True, True, True),
}


@dataclass(frozen=True)
class SOCNNConfig:
    num_points: int = 1024
    k: int = 16
    head: int = 64
    stages: tuple[tuple[int, int], ...] = ((64, 64), (64, 128), (128, 256))
    tail: int = 1024
    num_classes: int = 40
    num_parts: int | None = None
    cls_hidden: tuple[int, ...] = (512, 256)
    seg_hidden: tuple[int, ...] = (512, 256)
    dropout: float = 0.5
    votes: int = 10
    enable_mp: bool = True
    enable_intra: bool = True
    enable_inter: bool = True
    knn_space: str = "feature"
    slope: float = 0.2
    # one-hot object category appended to the segmentation branch's global input
    seg_category_conditioning: bool = False
    num_categories: int = 0

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(tuple(int(c) for c in s) for s in self.stages))
        object.__setattr__(self, "cls_hidden", tuple(int(c) for c in self.cls_hidden))
        object.__setattr__(self, "seg_hidden", tuple(int(c) for c in self.seg_hidden))
        if len(self.stages) != 3:
            raise ValueError("SOCNN stacks exactly three ShapeConv stages")
        prev = self.head
        for c_in, c_out in self.stages:
            if c_in != prev:
                raise ValueError(f"channel plan is not chained: stage input {c_in} after width {prev}")
            prev = c_out
        if self.votes < 1:
            raise ValueError("votes must be at least 1")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")
        if self.num_parts is not None and self.num_parts < 1:
            raise ValueError("num_parts must be positive when given")
        if self.seg_category_conditioning and self.num_categories < 1:
            raise ValueError("category conditioning needs num_categories >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        # raises on an invalid ablation combination or kNN space
        self.stage_config(0)

    @classmethod
    def tiny(cls, **overrides) -> SOCNNConfig:
        """Desk-scale plan used by the verification suites."""
        base = dict(head=8, stages=((8, 8), (8, 16), (16, 32)), tail=64,
                    cls_hidden=(32, 16), seg_hidden=(32, 16))
        base.update(overrides)
        return cls(**base)

    @property
    def concat_width(self) -> int:
        return sum(c_out for _, c_out in self.stages)

    def stage_config(self, i: int) -> ShapeConvConfig:
        c_in, c_out = self.stages[i]
        space = "coordinate" if i == 0 else self.knn_space
        return ShapeConvConfig(c_in, c_out, self.k, self.enable_mp, self.enable_intra,
                               self.enable_inter, space, self.slope)

    def head_spec(self) -> MLPSpec:
        return MLPSpec((3, self.head), slope=self.slope)

    def tail_spec(self) -> MLPSpec:
        return MLPSpec((self.concat_width, self.tail), slope=self.slope)

    def cls_spec(self) -> MLPSpec:
        return MLPSpec((self.tail, *self.cls_hidden, self.num_classes), slope=self.slope,
                       dropout_rate=self.dropout, plain_last=True)

    def seg_global_width(self) -> int:
        return self.tail + (self.num_categories if self.seg_category_conditioning else 0)

    def seg_spec(self) -> MLPSpec:
        if self.num_parts is None:
            raise ValueError("segmentation branch needs num_parts in the config")
        return MLPSpec((self.concat_width + self.seg_global_width(), *self.seg_hidden, self.num_parts),
                       slope=self.slope, plain_last=True)

    def with_variant(self, variant: str) -> SOCNNConfig:
        mp, intra, inter = ABLATION_VARIANTS[variant]
        return replace(self, enable_mp=mp, enable_intra=intra, enable_inter=inter)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stages"] = [list(s) for s in self.stages]
        d["cls_hidden"] = list(self.cls_hidden)
        d["seg_hidden"] = list(self.seg_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SOCNNConfig:
        d = dict(d)
        d["stages"] = tuple(tuple(s) for s in d["stages"])
        return cls(**d)


@dataclass
class ForwardTrace:
    per_layer_features: list[Tensor]
    concat_features: Tensor
    tail_features: Tensor
    signature: Tensor
    head_features: Tensor | None = field(default=None, repr=False)


def init_socnn(config: SOCNNConfig, seed: int = 0, dtype=np.float32,
               classification: bool = True) -> ParamStore:
    """Fan-in scaled uniform initialisation of every parameter the plan needs.

    The segmentation branch is created whenever ``config.num_parts`` is set.
    """
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    init_mlp(config.head_spec(), store, "head", rng)
    for i in range(3):
        init_shapeconv(store, f"sc{i + 1}", config.stage_config(i), rng)
    init_mlp(config.tail_spec(), store, "tail", rng)
    if classification:
        init_mlp(config.cls_spec(), store, "cls", rng)
    if config.num_parts is not None:
        spec = config.seg_spec()
        fan_in = spec.in_width
        bound = 1.0 / np.sqrt(fan_in)
        h1 = spec.layer_widths[1]
        store.add_param("seg.0.weight", rng.uniform(-bound, bound, size=(config.concat_width, h1)))
        store.add_param("seg.0.weight_global", rng.uniform(-bound, bound, size=(config.seg_global_width(), h1)))
        store.add_param("seg.0.bias", rng.uniform(-bound, bound, size=(h1,)))
        if not spec.is_plain(0):
            init_batchnorm(store, "seg.0.bn", h1)
            rest = MLPSpec(spec.layer_widths[1:], slope=spec.slope, plain_last=True)
            sub = ParamStore(dtype)
            init_mlp(rest, sub, "seg", rng)
            for name, t in sub.params.items():
                store.add_param(_shift_layer(name), t.data)
            for name, b in sub.buffers.items():
                store.add_buffer(_shift_layer(name), b)
    return store


def _shift_layer(name: str) -> str:
    head, idx, rest = name.split(".", 2)
    return f"{head}.{int(idx) + 1}.{rest}"


def _coords_tensor(coords, dtype) -> Tensor:
    x = np.asarray(coords.data if isinstance(coords, Tensor) else coords)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[-1] != 3:
        raise ShapeError(f"coords must be (N, 3) or (B, N, 3), got {x.shape}")
    return Tensor(x, dtype=dtype)


def backbone_forward(store: ParamStore, config: SOCNNConfig, coords, mode: Mode = EVAL) -> ForwardTrace:
    """Run head, ShapeConv stages and tail on (N, 3) or (B, N, 3) coordinates.

    Outputs are always batched: per-point tensors are (B, N, C) and the
    signature is (B, T).
    """
    x_coords = _coords_tensor(coords, store.dtype)
    n = x_coords.shape[1]
    if n < config.k:
        raise ValueError(f"cloud has {n} points, fewer than k={config.k}")
    x = mlp_forward(config.head_spec(), store, "head", x_coords, mode)
    head = x
    feats = []
    for i in range(3):
        x = shapeconv_forward(store, f"sc{i + 1}", config.stage_config(i), x, x_coords.data, mode)
        feats.append(x)
    concat = T.concat(feats, axis=-1)
    tail = mlp_forward(config.tail_spec(), store, "tail", concat, mode)
    signature = T.tmax(tail, axis=1)
    return ForwardTrace(feats, concat, tail, signature, head)


def classification_head(store: ParamStore, config: SOCNNConfig, signature: Tensor,
                        mode: Mode = EVAL) -> Tensor:
    if signature.shape[-1] != config.tail:
        raise ShapeError(f"signature width {signature.shape[-1]} != tail width {config.tail}")
    return mlp_forward(config.cls_spec(), store, "cls", signature, mode)


def segmentation_head(store: ParamStore, config: SOCNNConfig, trace: ForwardTrace,
                      mode: Mode = EVAL, categories=None) -> Tensor:
    """Per-point part logits from ``[concat_features | global signature]``.

    The first linear map is split into a per-point and a global block; the
    global block is applied once per cloud and broadcast over its points,
    which equals mapping the concatenated input.
    """
    spec = config.seg_spec()
    glob = trace.signature
    if config.seg_category_conditioning:
        if categories is None:
            raise ValueError("category-conditioned segmentation needs object categories")
        onehot = np.eye(config.num_categories, dtype=store.dtype)[np.asarray(categories).reshape(-1)]
        glob = T.concat([glob, Tensor(onehot)], axis=-1)
    local = T.linear(trace.concat_features, store.param("seg.0.weight"), store.param("seg.0.bias"))
    g = T.linear(glob, store.param("seg.0.weight_global"))
    h = local + T.reshape(g, (g.shape[0], 1, g.shape[1]))
    h = activation_tail(spec, store, "seg", 0, h, mode)
    return mlp_forward(spec, store, "seg", h, mode, start=1)


def forward_logits(store: ParamStore, config: SOCNNConfig, coords, task: str = "classification",
                   mode: Mode = EVAL, categories=None) -> Tensor:
    trace = backbone_forward(store, config, coords, mode)
    if task == "classification":
        return classification_head(store, config, trace.signature, mode)
    if task == "segmentation":
        return segmentation_head(store, config, trace, mode, categories)
    raise ValueError(f"unknown task {task!r}")


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(store: ParamStore, config: SOCNNConfig, coords) -> np.ndarray:
    """Eval-mode class probabilities, (B, num_classes)."""
    return _softmax_np(forward_logits(store, config, coords).data)


def predict_with_voting(store: ParamStore, config: SOCNNConfig, coords: np.ndarray,
                        aug_spec: AugmentationSpec | None, votes: int | None = None,
                        seed: int | None = None) -> np.ndarray:
    """Average the softmax outputs of ``votes`` independently augmented copies.

    With ``aug_spec=None`` every copy is the raw cloud. The augmentation
    stream is seeded from ``seed`` (default ``aug_spec.seed``).
    """
    votes = config.votes if votes is None else votes
    if votes < 1:
        raise ValueError("votes must be at least 1")
    coords = np.asarray(coords)
    if aug_spec is None:
        batch = np.broadcast_to(coords, (votes, *coords.shape))
    else:
        rng = np.random.default_rng(aug_spec.seed if seed is None else seed)
        batch = np.stack([augment_coords(coords, aug_spec, rng) for _ in range(votes)])
    probs = predict_proba(store, config, batch)
    # averaging offsets from the first vote keeps identical votes exact
    return probs[0] + (probs - probs[0]).mean(axis=0)
