"""Shared MLP layers (pointwise channel maps) built on the autodiff core."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .params import ParamStore
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class Mode:
    """Forward-pass mode.

    ``rng`` drives dropout; with ``rng=None`` dropout is skipped even in
    training mode, which keeps a training-mode forward deterministic for
    gradient checking.
    """

    training: bool = False
    rng: np.random.Generator | None = field(default=None, compare=False)
    bn_momentum: float = 0.9

    @classmethod
    def train(cls, rng: np.random.Generator | None = None, bn_momentum: float = 0.9) -> Mode:
        return cls(True, rng, bn_momentum)

    @classmethod
    def eval(cls) -> Mode:
        return cls(False)


EVAL = Mode.eval()


@dataclass(frozen=True)
class MLPSpec:
    layer_widths: tuple[int, ...]
    use_batchnorm: bool = True
    activation: str = "leaky_relu"
    slope: float = 0.2
    dropout_rate: float = 0.0
    # last layer is a bare linear map (logit layers)
    plain_last: bool = False

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        if len(self.layer_widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive: {self.layer_widths}")
        if self.activation not in ("leaky_relu", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")

    @property
    def in_width(self) -> int:
        return self.layer_widths[0]

    @property
    def out_width(self) -> int:
        return self.layer_widths[-1]

    @property
    def num_layers(self) -> int:
        return len(self.layer_widths) - 1

    def is_plain(self, layer: int) -> bool:
        return self.plain_last and layer == self.num_layers - 1


def init_linear(store: ParamStore, prefix: str, c_in: int, c_out: int,
                rng: np.random.Generator, bias: bool = True) -> None:
    bound = 1.0 / np.sqrt(c_in)
    store.add_param(f"{prefix}.weight", rng.uniform(-bound, bound, size=(c_in, c_out)))
    if bias:
        store.add_param(f"{prefix}.bias", rng.uniform(-bound, bound, size=(c_out,)))


def init_batchnorm(store: ParamStore, prefix: str, width: int) -> None:
    store.add_param(f"{prefix}.gamma", np.ones(width))
    store.add_param(f"{prefix}.beta", np.zeros(width))
    store.add_buffer(f"{prefix}.running_mean", np.zeros(width))
    store.add_buffer(f"{prefix}.running_var", np.ones(width))


def init_mlp(spec: MLPSpec, store: ParamStore, prefix: str, rng: np.random.Generator) -> None:
    for i, (a, b) in enumerate(zip(spec.layer_widths[:-1], spec.layer_widths[1:])):
        init_linear(store, f"{prefix}.{i}", a, b, rng)
        if spec.use_batchnorm and not spec.is_plain(i):
            init_batchnorm(store, f"{prefix}.{i}.bn", b)


def batch_norm_layer(store: ParamStore, prefix: str, x: Tensor, mode: Mode) -> Tensor:
    return T.batch_norm(
        x,
        store.param(f"{prefix}.gamma"),
        store.param(f"{prefix}.beta"),
        store.buffer(f"{prefix}.running_mean"),
        store.buffer(f"{prefix}.running_var"),
        training=mode.training,
        momentum=mode.bn_momentum,
    )


def activation_tail(spec: MLPSpec, store: ParamStore, prefix: str, layer: int,
                    h: Tensor, mode: Mode) -> Tensor:
    """Batch norm, activation and dropout that follow layer ``layer``'s linear map."""
    if spec.is_plain(layer):
        return h
    if spec.use_batchnorm and spec.activation == "leaky_relu":
        bn = f"{prefix}.{layer}.bn"
        h = T.batch_norm_leaky(h, store.param(f"{bn}.gamma"), store.param(f"{bn}.beta"),
                               store.buffer(f"{bn}.running_mean"), store.buffer(f"{bn}.running_var"),
                               training=mode.training, momentum=mode.bn_momentum, slope=spec.slope)
    else:
        if spec.use_batchnorm:
            h = batch_norm_layer(store, f"{prefix}.{layer}.bn", h, mode)
        if spec.activation == "leaky_relu":
            h = T.leaky_relu(h, spec.slope)
    if spec.dropout_rate > 0 and mode.training and mode.rng is not None:
        h = T.dropout(h, spec.dropout_rate, mode.rng)
    return h


def mlp_forward(spec: MLPSpec, store: ParamStore, prefix: str, x: Tensor, mode: Mode = EVAL,
                start: int = 0) -> Tensor:
    """Apply the MLP over the last axis of ``x`` (any leading shape).

    ``start`` skips the first layers, for callers that already computed them.
    """
    if start == 0 and x.shape[-1] != spec.in_width:
        raise ShapeError(f"{prefix}: expected {spec.in_width} input channels, got {x.shape[-1]}")
    h = x
    for i in range(start, spec.num_layers):
        h = T.linear(h, store.param(f"{prefix}.{i}.weight"), store.param(f"{prefix}.{i}.bias"))
        h = activation_tail(spec, store, prefix, i, h, mode)
    return h


@dataclass
class BatchNormState:
    """A standalone batch-norm layer, for use outside a ParamStore."""

    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.9
    epsilon: float = 1e-5

    def __post_init__(self):
        if not 0.0 < self.momentum <= 1.0:
            raise ValueError(f"momentum must lie in (0, 1], got {self.momentum}")

    @classmethod
    def fresh(cls, width: int, dtype=np.float64, **kwargs) -> BatchNormState:
        return cls(
            Tensor(np.ones(width), requires_grad=True, dtype=dtype),
            Tensor(np.zeros(width), requires_grad=True, dtype=dtype),
            np.zeros(width, dtype=dtype),
            np.ones(width, dtype=dtype),
            **kwargs,
        )


def batch_norm_apply(state: BatchNormState, x: Tensor, mode: Mode = EVAL) -> Tensor:
    return T.batch_norm(x, state.gamma, state.beta, state.running_mean, state.running_var,
                        training=mode.training, momentum=state.momentum, eps=state.epsilon)


def softmax_rows(x: Tensor) -> Tensor:
    return T.softmax(x, axis=-1)
