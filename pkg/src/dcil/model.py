"""
Dual-path network: one shared prunable trunk, two forward paths.

The P path runs the trunk with masked weights ``mask * weight`` and owns one
set of batch-norm parameters/statistics plus a classifier head. The S path
runs the same trunk storage with the full weights and owns a separate copy
of every batch-norm layer and of the head.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor_core as tc
from .errors import ConfigError, ContractError, ShapeError

P = "P"
S = "S"
PATHS = (P, S)

CONV, LINEAR, BATCHNORM, RELU, AVGPOOL, FLATTEN, CLASSIFIER = (
    "conv", "linear", "batchnorm", "relu", "avgpool", "flatten", "classifier")
KINDS = (CONV, LINEAR, BATCHNORM, RELU, AVGPOOL, FLATTEN, CLASSIFIER)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int = 0
    kernel: int = 1
    stride: int = 1
    pad: int = 0
    bias: bool = True

    def to_dict(self) -> dict:
        return asdict(self)


def Conv(out: int, kernel: int, stride: int = 1, pad: int = 0, bias: bool = True) -> LayerSpec:
    return LayerSpec(CONV, out, kernel, stride, pad, bias)


def Linear(out: int, bias: bool = True) -> LayerSpec:
    return LayerSpec(LINEAR, out, bias=bias)


def BatchNorm() -> LayerSpec:
    return LayerSpec(BATCHNORM)


def ReLU() -> LayerSpec:
    return LayerSpec(RELU)


def AvgPool(kernel: int) -> LayerSpec:
    return LayerSpec(AVGPOOL, kernel=kernel)


def Flatten() -> LayerSpec:
    return LayerSpec(FLATTEN)


def Classifier(num_classes: int, bias: bool = True) -> LayerSpec:
    return LayerSpec(CLASSIFIER, num_classes, bias=bias)


def desk_cnn(num_classes: int = 10) -> list[LayerSpec]:
    """Three-conv network for 28x28 inputs with 23,184 prunable weights."""
    return [
        Conv(16, 3, 1, 1), BatchNorm(), ReLU(), AvgPool(2),
        Conv(32, 3, 1, 1), BatchNorm(), ReLU(), AvgPool(2),
        Conv(64, 3, 1, 1), BatchNorm(), ReLU(), AvgPool(2),
        Classifier(num_classes),
    ]


def mlp(num_classes: int = 10, hidden: int = 64) -> list[LayerSpec]:
    return [Flatten(), Linear(hidden), BatchNorm(), ReLU(), Classifier(num_classes)]


ARCHS = {"desk_cnn": desk_cnn, "mlp": mlp}


def spec_from_dicts(items: list[dict]) -> list[LayerSpec]:
    return [LayerSpec(**d) for d in items]


# --------------------------------------------------------------------------- layers

class _Layer:
    prunable = False

    def __init__(self, index: int):
        self.index = index
        self._ctx: dict[str, object] = {}

    def _pop_ctx(self, path: str):
        try:
            return self._ctx.pop(path)
        except KeyError:
            raise ContractError(f"layer{self.index}: backward on path {path} without a forward") from None


class PrunableLayer(_Layer):
    """Conv or linear layer whose weight tensor carries a binary mask."""

    prunable = True

    def __init__(self, index: int, spec: LayerSpec, weight: np.ndarray, bias: np.ndarray | None):
        super().__init__(index)
        self.spec = spec
        self.weight = weight
        self.bias = bias
        self.mask = np.ones_like(weight)

    @property
    def weight_id(self) -> str:
        return f"layer{self.index}.weight"

    @property
    def bias_id(self) -> str:
        return f"layer{self.index}.bias"

    @property
    def is_conv(self) -> bool:
        return self.spec.kind == CONV

    def effective_weight(self, path: str) -> np.ndarray:
        return self.weight * self.mask if path == P else self.weight

    def forward(self, x, path, mode):
        w = self.effective_weight(path)
        if self.is_conv:
            out, ctx = tc.conv2d_forward(x, w, self.bias, self.spec.stride, self.spec.pad)
        else:
            out, ctx = tc.linear_forward(x, w, self.bias)
        self._ctx[path] = ctx
        return out

    def backward(self, g, path, grads, need_input_grad=True):
        ctx = self._pop_ctx(path)
        if self.is_conv:
            gin, gw, gb = tc.conv2d_backward(ctx, g, need_input_grad)
        else:
            gin, gw, gb = tc.linear_backward(ctx, g)
        grads[self.weight_id] = gw
        if gb is not None:
            grads[self.bias_id] = gb
        return gin


class BatchNormLayer(_Layer):
    def __init__(self, index: int, channels: int, dtype, momentum: float, eps: float):
        super().__init__(index)
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = {p: np.ones(channels, dtype=dtype) for p in PATHS}
        self.beta = {p: np.zeros(channels, dtype=dtype) for p in PATHS}
        self.running = {p: tc.RunningStats.init(channels, dtype) for p in PATHS}

    def key(self, path: str, name: str) -> str:
        return f"layer{self.index}.{path}.{name}"

    def forward(self, x, path, mode):
        out, ctx = tc.batchnorm_forward(x, self.gamma[path], self.beta[path], self.running[path],
                                        mode, self.momentum, self.eps)
        self._ctx[path] = ctx
        return out

    def backward(self, g, path, grads, need_input_grad=True):
        gin, gg, gb = tc.batchnorm_backward(self._pop_ctx(path), g)
        grads[self.key(path, "gamma")] = gg
        grads[self.key(path, "beta")] = gb
        return gin


class ReLULayer(_Layer):
    def forward(self, x, path, mode):
        out, self._ctx[path] = tc.relu_forward(x)
        return out

    def backward(self, g, path, grads, need_input_grad=True):
        return tc.relu_backward(self._pop_ctx(path), g)


class AvgPoolLayer(_Layer):
    def __init__(self, index: int, kernel: int):
        super().__init__(index)
        self.kernel = kernel

    def forward(self, x, path, mode):
        out, self._ctx[path] = tc.avgpool2d_forward(x, self.kernel)
        return out

    def backward(self, g, path, grads, need_input_grad=True):
        return tc.avgpool2d_backward(self._pop_ctx(path), g)


class FlattenLayer(_Layer):
    def forward(self, x, path, mode):
        out, self._ctx[path] = tc.flatten_forward(x)
        return out

    def backward(self, g, path, grads, need_input_grad=True):
        return tc.flatten_backward(self._pop_ctx(path), g)


class ClassifierHead(_Layer):
    """One linear classifier per path; flattens its input if needed."""

    def __init__(self, index: int, weight: np.ndarray, bias: np.ndarray | None):
        super().__init__(index)
        self.weight = {p: weight.copy() for p in PATHS}
        self.bias = {p: None if bias is None else bias.copy() for p in PATHS}

    @staticmethod
    def key(path: str, name: str) -> str:
        return f"head.{path}.{name}"

    def forward(self, x, path, mode):
        flat, fctx = tc.flatten_forward(x)
        out, lctx = tc.linear_forward(flat, self.weight[path], self.bias[path])
        self._ctx[path] = (fctx, lctx)
        return out

    def backward(self, g, path, grads, need_input_grad=True):
        fctx, lctx = self._pop_ctx(path)
        gin, gw, gb = tc.linear_backward(lctx, g)
        grads[self.key(path, "weight")] = gw
        if gb is not None:
            grads[self.key(path, "bias")] = gb
        return tc.flatten_backward(fctx, gin)


# --------------------------------------------------------------------------- network

@dataclass
class GradSet:
    """Gradients of one backward pass, keyed by parameter id.

    For the P path, prunable-weight entries are gradients wrt the masked view.
    """

    path: str
    grads: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key: str) -> np.ndarray:
        return self.grads[key]

    def __contains__(self, key: str) -> bool:
        return key in self.grads


class DualPathNetwork:
    def __init__(self, spec: list[LayerSpec], input_shape: tuple[int, ...], layers: list[_Layer],
                 head: ClassifierHead, dtype):
        self.spec = list(spec)
        self.input_shape = tuple(input_shape)
        self.trunk = layers
        self.head = head
        self.dtype = np.dtype(dtype)

    # ---- structure
    @property
    def prunable(self) -> list[PrunableLayer]:
        return [l for l in self.trunk if l.prunable]

    @property
    def batchnorms(self) -> list[BatchNormLayer]:
        return [l for l in self.trunk if isinstance(l, BatchNormLayer)]

    def count_prunable(self) -> tuple[int, dict[str, int]]:
        per_layer = {l.weight_id: l.weight.size for l in self.prunable}
        return sum(per_layer.values()), per_layer

    # ---- compute
    def forward(self, path: str, x: np.ndarray, mode: str = tc.TRAIN) -> np.ndarray:
        if path not in PATHS:
            raise ValueError(f"unknown path {path!r}")
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"batch shape {x.shape[1:]} does not match network input {self.input_shape}")
        x = x.astype(self.dtype, copy=False)
        for layer in self.trunk:
            x = layer.forward(x, path, mode)
        return self.head.forward(x, path, mode)

    def backward(self, path: str, grad_logits: np.ndarray) -> GradSet:
        gs = GradSet(path)
        g = self.head.backward(grad_logits, path, gs.grads)
        for i in range(len(self.trunk) - 1, -1, -1):
            g = self.trunk[i].backward(g, path, gs.grads, need_input_grad=i > 0)
        return gs

    def clear_contexts(self) -> None:
        for layer in [*self.trunk, self.head]:
            layer._ctx.clear()

    # ---- parameters
    def trunk_params(self) -> Iterator[tuple[str, np.ndarray]]:
        """Shared trunk tensors (prunable weights and their biases)."""
        for l in self.prunable:
            yield l.weight_id, l.weight
            if l.bias is not None:
                yield l.bias_id, l.bias

    def path_params(self, path: str) -> Iterator[tuple[str, np.ndarray]]:
        """Parameters owned by one path (batch-norm affine terms and head)."""
        for bn in self.batchnorms:
            yield bn.key(path, "gamma"), bn.gamma[path]
            yield bn.key(path, "beta"), bn.beta[path]
        yield self.head.key(path, "weight"), self.head.weight[path]
        if self.head.bias[path] is not None:
            yield self.head.key(path, "bias"), self.head.bias[path]

    def buffers(self, path: str) -> Iterator[tuple[str, np.ndarray]]:
        for bn in self.batchnorms:
            yield bn.key(path, "running_mean"), bn.running[path].mean
            yield bn.key(path, "running_var"), bn.running[path].var

    def masks(self) -> Iterator[tuple[str, np.ndarray]]:
        for l in self.prunable:
            yield f"layer{l.index}.mask", l.mask

    def set_masks(self, masks: list[np.ndarray]) -> None:
        for l, m in zip(self.prunable, masks, strict=True):
            if m.shape != l.weight.shape:
                raise ShapeError(f"mask {m.shape} does not match {l.weight_id} {l.weight.shape}")
            l.mask = m.astype(self.dtype, copy=True)

    def state_dict(self, paths=PATHS) -> dict[str, np.ndarray]:
        state = dict(self.trunk_params())
        for p in paths:
            state.update(self.path_params(p))
            state.update(self.buffers(p))
        return {k: v.copy() for k, v in state.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], paths=PATHS) -> None:
        targets = dict(self.trunk_params())
        for p in paths:
            targets.update(self.path_params(p))
            targets.update(self.buffers(p))
        missing = set(targets) - set(state)
        if missing:
            raise KeyError(f"state is missing {sorted(missing)}")
        for k, arr in targets.items():
            src = np.asarray(state[k])
            if src.shape != arr.shape:
                raise ShapeError(f"{k}: stored shape {src.shape} != {arr.shape}")
            arr[...] = src

    def copy_path(self, src: str, dst: str) -> None:
        """Overwrite the ``dst`` path's BN/head state with a copy of ``src``."""
        for bn in self.batchnorms:
            bn.gamma[dst][...] = bn.gamma[src]
            bn.beta[dst][...] = bn.beta[src]
            bn.running[dst] = bn.running[src].copy()
        self.head.weight[dst][...] = self.head.weight[src]
        if self.head.bias[src] is not None:
            self.head.bias[dst][...] = self.head.bias[src]


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)


def build(spec: list[LayerSpec], input_shape: tuple[int, ...], seed: int = 0, dtype=np.float64,
          bn_momentum: float = 0.1, bn_eps: float = 1e-5) -> DualPathNetwork:
    """Construct a network from ``spec``, checking that shapes chain.

    ``input_shape`` excludes the batch axis: ``(C, H, W)`` or ``(features,)``.
    """
    if not spec:
        raise ConfigError("layer spec is empty")
    if spec[-1].kind != CLASSIFIER or sum(s.kind == CLASSIFIER for s in spec) != 1:
        raise ConfigError("spec must end with exactly one classifier")
    rng = np.random.default_rng(seed)
    shape = tuple(input_shape)
    layers: list[_Layer] = []
    for i, s in enumerate(spec[:-1]):
        if s.kind not in KINDS:
            raise ConfigError(f"layer{i}: unknown kind {s.kind!r}")
        if s.kind == CONV:
            if len(shape) != 3:
                raise ConfigError(f"layer{i}: conv needs (C, H, W) input, got {shape}")
            if s.out < 1 or s.kernel < 1 or s.stride < 1 or s.pad < 0:
                raise ConfigError(f"layer{i}: invalid conv hyperparameters {s}")
            C, H, W = shape
            Ho = tc.conv_output_size(H, s.kernel, s.stride, s.pad)
            Wo = tc.conv_output_size(W, s.kernel, s.stride, s.pad)
            if Ho < 1 or Wo < 1:
                raise ConfigError(f"layer{i}: conv output {Ho}x{Wo} is empty")
            fan_in = C * s.kernel * s.kernel
            w = _kaiming(rng, (s.out, C, s.kernel, s.kernel), fan_in, dtype)
            b = np.zeros(s.out, dtype=dtype) if s.bias else None
            layers.append(PrunableLayer(i, s, w, b))
            shape = (s.out, Ho, Wo)
        elif s.kind == LINEAR:
            if len(shape) != 1:
                raise ConfigError(f"layer{i}: linear needs flat input, got {shape}; add a flatten")
            if s.out < 1:
                raise ConfigError(f"layer{i}: linear needs out >= 1")
            w = _kaiming(rng, (s.out, shape[0]), shape[0], dtype)
            b = np.zeros(s.out, dtype=dtype) if s.bias else None
            layers.append(PrunableLayer(i, s, w, b))
            shape = (s.out,)
        elif s.kind == BATCHNORM:
            layers.append(BatchNormLayer(i, shape[0], dtype, bn_momentum, bn_eps))
        elif s.kind == RELU:
            layers.append(ReLULayer(i))
        elif s.kind == AVGPOOL:
            if len(shape) != 3 or s.kernel < 1 or shape[1] // s.kernel < 1 or shape[2] // s.kernel < 1:
                raise ConfigError(f"layer{i}: avgpool kernel {s.kernel} invalid for {shape}")
            layers.append(AvgPoolLayer(i, s.kernel))
            shape = (shape[0], shape[1] // s.kernel, shape[2] // s.kernel)
        elif s.kind == FLATTEN:
            layers.append(FlattenLayer(i))
            shape = (int(np.prod(shape)),)
        else:
            raise ConfigError(f"layer{i}: classifier must be last")
    cls = spec[-1]
    if cls.out < 2:
        raise ConfigError("classifier needs at least two classes")
    features = int(np.prod(shape))
    hw = _kaiming(rng, (cls.out, features), features, dtype)
    hb = np.zeros(cls.out, dtype=dtype) if cls.bias else None
    head = ClassifierHead(len(spec) - 1, hw, hb)
    return DualPathNetwork(spec, input_shape, layers, head, dtype)
