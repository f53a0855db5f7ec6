"""
Minimal dense numerical engine for desk-scale local training.

Tensors are numpy arrays (row-major, float32 or float64, uniform per model).
Each layer caches what its backward pass needs during forward and writes
parameter gradients into buffers that mirror its parameters. The optimizer
reads those buffers and updates the parameters in place.

Layer kinds: dense, conv2d, maxpool2d, relu, flatten, batchnorm2d.
"""

from __future__ import annotations

import logging
from abc import ABC, abstractmethod
from enum import Enum
from typing import Any, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from core.errors import DataError, EngineStateError, NonFiniteError, ShapeError
from core.models import DType, ModelParams

logger = logging.getLogger(__name__)

Shape = Tuple[int, ...]


class LayerKind(str, Enum):
    """Layer kinds the engine can execute."""

    DENSE = "dense"
    CONV2D = "conv2d"
    MAXPOOL2D = "maxpool2d"
    RELU = "relu"
    FLATTEN = "flatten"
    BATCHNORM2D = "batchnorm2d"


def init_uniform(
    rng: np.random.Generator, shape: Shape, fan_in: int, dtype: np.dtype
) -> np.ndarray:
    """Uniform in [-sqrt(1/fan_in), +sqrt(1/fan_in)]."""
    bound = float(np.sqrt(1.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _conv_extent(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


class Layer(ABC):
    """Base class: parameters, gradient buffers, non-trained buffers, cache."""

    kind: LayerKind

    def __init__(self) -> None:
        self.params: List[np.ndarray] = []
        self.grads: List[np.ndarray] = []
        self.buffers: List[np.ndarray] = []
        self._cache: Any = None

    @abstractmethod
    def output_shape(self, input_shape: Shape) -> Shape:
        """Per-sample output shape for a per-sample input shape (no batch axis)."""

    @abstractmethod
    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        pass

    @abstractmethod
    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        """Fill gradient buffers and return the gradient w.r.t. the input."""

    def zero_grad(self) -> None:
        for g in self.grads:
            g.fill(0)

    def _take_cache(self) -> Any:
        if self._cache is None:
            raise EngineStateError(f"{self.kind.value}: backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def state_arrays(self) -> List[np.ndarray]:
        """Parameters then buffers, in canonical order."""
        return self.params + self.buffers

    def __repr__(self) -> str:
        return f"{type(self).__name__}()"


class Dense(Layer):
    """y = x W^T + b with W of shape (out_features, in_features)."""

    kind = LayerKind.DENSE

    def __init__(
        self,
        in_features: int,
        out_features: int,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
        dtype: np.dtype = np.float64,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_features = in_features
        self.out_features = out_features
        self.weight = init_uniform(rng, (out_features, in_features), in_features, dtype)
        self.bias = init_uniform(rng, (out_features,), in_features, dtype) if bias else None
        self.params = [self.weight] + ([self.bias] if self.bias is not None else [])
        self.grads = [np.zeros_like(p) for p in self.params]

    def output_shape(self, input_shape: Shape) -> Shape:
        if tuple(input_shape) != (self.in_features,):
            raise ShapeError(
                f"dense expects ({self.in_features},), got {tuple(input_shape)}"
            )
        return (self.out_features,)

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        self.output_shape(x.shape[1:])
        self._cache = x
        out = x @ self.weight.T
        if self.bias is not None:
            out = out + self.bias
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x = self._take_cache()
        self.grads[0][...] = grad_out.T @ x
        if self.bias is not None:
            self.grads[1][...] = grad_out.sum(axis=0)
        return grad_out @ self.weight

    def __repr__(self) -> str:
        return f"Dense({self.in_features}->{self.out_features}, bias={self.bias is not None})"


class Conv2d(Layer):
    """2-D cross-correlation over NCHW input, square kernel, zero padding."""

    kind = LayerKind.CONV2D

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        stride: int = 1,
        padding: int = 0,
        bias: bool = True,
        rng: Optional[np.random.Generator] = None,
        dtype: np.dtype = np.float64,
    ):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        self.weight = init_uniform(
            rng, (out_channels, in_channels, kernel_size, kernel_size), fan_in, dtype
        )
        self.bias = init_uniform(rng, (out_channels,), fan_in, dtype) if bias else None
        self.params = [self.weight] + ([self.bias] if self.bias is not None else [])
        self.grads = [np.zeros_like(p) for p in self.params]

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3 or input_shape[0] != self.in_channels:
            raise ShapeError(
                f"conv2d expects ({self.in_channels}, H, W), got {tuple(input_shape)}"
            )
        k, s, p = self.kernel_size, self.stride, self.padding
        h = _conv_extent(input_shape[1], k, s, p)
        w = _conv_extent(input_shape[2], k, s, p)
        if h < 1 or w < 1:
            raise ShapeError(f"conv2d kernel {k} does not fit input {tuple(input_shape)}")
        return (self.out_channels, h, w)

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        _, ho, wo = self.output_shape(x.shape[1:])
        k, s, p = self.kernel_size, self.stride, self.padding
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        # (N, C, Ho, Wo, k, k) view; no copy until the contraction
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        out = np.tensordot(windows, self.weight, axes=([1, 4, 5], [1, 2, 3]))
        out = out.transpose(0, 3, 1, 2)
        if self.bias is not None:
            out = out + self.bias[None, :, None, None]
        self._cache = (x.shape, windows)
        return np.ascontiguousarray(out)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x_shape, windows = self._take_cache()
        k, s, p = self.kernel_size, self.stride, self.padding
        n, c, h, w = x_shape
        ho, wo = grad_out.shape[2], grad_out.shape[3]

        self.grads[0][...] = np.tensordot(grad_out, windows, axes=([0, 2, 3], [0, 2, 3]))
        if self.bias is not None:
            self.grads[1][...] = grad_out.sum(axis=(0, 2, 3))

        dwin = np.tensordot(grad_out, self.weight, axes=([1], [0]))  # (N, Ho, Wo, C, k, k)
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, p:p + h, p:p + w]

    def __repr__(self) -> str:
        return (
            f"Conv2d({self.in_channels}->{self.out_channels}, k={self.kernel_size}, "
            f"s={self.stride}, p={self.padding}, bias={self.bias is not None})"
        )


class MaxPool2d(Layer):
    """Max over square windows; ties go to the first maximum in row-major order."""

    kind = LayerKind.MAXPOOL2D

    def __init__(self, kernel_size: int, stride: Optional[int] = None, padding: int = 0):
        super().__init__()
        self.kernel_size = kernel_size
        self.stride = stride or kernel_size
        self.padding = padding

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3:
            raise ShapeError(f"maxpool2d expects (C, H, W), got {tuple(input_shape)}")
        k, s, p = self.kernel_size, self.stride, self.padding
        h = _conv_extent(input_shape[1], k, s, p)
        w = _conv_extent(input_shape[2], k, s, p)
        if h < 1 or w < 1:
            raise ShapeError(f"maxpool2d window {k} does not fit input {tuple(input_shape)}")
        return (input_shape[0], h, w)

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        c, ho, wo = self.output_shape(x.shape[1:])
        k, s, p = self.kernel_size, self.stride, self.padding
        n = x.shape[0]
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)), constant_values=-np.inf) if p else x
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        flat = windows.reshape(n, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        self._cache = (x.shape, arg)
        return out

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x_shape, arg = self._take_cache()
        k, s, p = self.kernel_size, self.stride, self.padding
        n, c, h, w = x_shape
        ho, wo = arg.shape[2], arg.shape[3]
        r, col = np.divmod(arg, k)
        rows = np.arange(ho)[None, None, :, None] * s + r
        cols = np.arange(wo)[None, None, None, :] * s + col
        ni = np.arange(n)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        dxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
        np.add.at(dxp, (ni, ci, rows, cols), grad_out)
        return dxp[:, :, p:p + h, p:p + w]

    def __repr__(self) -> str:
        return f"MaxPool2d(k={self.kernel_size}, s={self.stride}, p={self.padding})"


class ReLU(Layer):
    kind = LayerKind.RELU

    def output_shape(self, input_shape: Shape) -> Shape:
        return tuple(input_shape)

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        mask = x > 0
        self._cache = mask
        return np.where(mask, x, 0).astype(x.dtype, copy=False)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        mask = self._take_cache()
        return grad_out * mask


class Flatten(Layer):
    kind = LayerKind.FLATTEN

    def output_shape(self, input_shape: Shape) -> Shape:
        return (int(np.prod(input_shape)),)

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        shape = self._take_cache()
        return grad_out.reshape(shape)


class BatchNorm2d(Layer):
    """
    Per-channel normalisation over (N, H, W).

    Training uses batch statistics and, while track_running_stats is set,
    updates the running statistics; evaluation uses the running statistics. Parameters are (gamma, beta),
    buffers are (running_mean, running_var); both travel in ModelParams.
    """

    kind = LayerKind.BATCHNORM2D

    def __init__(
        self,
        num_features: int,
        eps: float = 1e-5,
        momentum: float = 0.1,
        dtype: np.dtype = np.float64,
    ):
        super().__init__()
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.gamma = np.ones(num_features, dtype=dtype)
        self.beta = np.zeros(num_features, dtype=dtype)
        self.running_mean = np.zeros(num_features, dtype=dtype)
        self.running_var = np.ones(num_features, dtype=dtype)
        self.params = [self.gamma, self.beta]
        self.grads = [np.zeros_like(p) for p in self.params]
        self.buffers = [self.running_mean, self.running_var]
        self.track_running_stats = True

    def output_shape(self, input_shape: Shape) -> Shape:
        if len(input_shape) != 3 or input_shape[0] != self.num_features:
            raise ShapeError(
                f"batchnorm2d expects ({self.num_features}, H, W), got {tuple(input_shape)}"
            )
        return tuple(input_shape)

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        self.output_shape(x.shape[1:])
        if training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            if self.track_running_stats:
                m = x.shape[0] * x.shape[2] * x.shape[3]
                unbiased = var * (m / (m - 1)) if m > 1 else var
                self.running_mean[...] = (1 - self.momentum) * self.running_mean + self.momentum * mean
                self.running_var[...] = (1 - self.momentum) * self.running_var + self.momentum * unbiased
        else:
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, training)
        return self.gamma[None, :, None, None] * xhat + self.beta[None, :, None, None]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        xhat, inv_std, training = self._take_cache()
        axes = (0, 2, 3)
        self.grads[0][...] = (grad_out * xhat).sum(axis=axes)
        self.grads[1][...] = grad_out.sum(axis=axes)
        g_hat = grad_out * self.gamma[None, :, None, None]
        inv = inv_std[None, :, None, None]
        if not training:
            return g_hat * inv
        m = grad_out.shape[0] * grad_out.shape[2] * grad_out.shape[3]
        return (inv / m) * (
            m * g_hat
            - g_hat.sum(axis=axes, keepdims=True)
            - xhat * (g_hat * xhat).sum(axis=axes, keepdims=True)
        )

    def __repr__(self) -> str:
        return f"BatchNorm2d({self.num_features})"


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_labels(logits: np.ndarray, labels: Any) -> np.ndarray:
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != logits.shape[0]:
        raise ShapeError(f"{labels.shape[0]} labels for {logits.shape[0]} logit rows")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(f"label out of range [0, {logits.shape[1]})")
    return labels


def cross_entropy(logits: np.ndarray, labels: Any) -> float:
    """Mean of -log softmax(logits)[label] over the batch."""
    logits = np.asarray(logits)
    labels = _check_labels(logits, labels)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    return float(np.mean(lse - z[np.arange(labels.size), labels]))


def cross_entropy_grad(logits: np.ndarray, labels: Any) -> np.ndarray:
    """d(mean cross-entropy)/d(logits) = (softmax - onehot) / batch."""
    logits = np.asarray(logits)
    labels = _check_labels(logits, labels)
    grad = softmax(logits)
    grad[np.arange(labels.size), labels] -= 1.0
    return grad / labels.size


class Sequential:
    """Ordered layer list with a fixed per-sample input shape."""

    def __init__(
        self,
        layers: Sequence[Layer],
        input_shape: Shape,
        name: str = "model",
        dtype: DType = DType.FLOAT64,
    ):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.name = name
        self.dtype = dtype
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        if len(shape) != 1:
            raise ShapeError(f"model output must be [batch, classes], got per-sample {shape}")
        self.output_shape = shape
        self._logits: Optional[np.ndarray] = None

    @property
    def num_classes(self) -> int:
        return self.output_shape[0]

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        """Class logits of shape [batch, num_classes]; caches state for backward."""
        x = np.asarray(x)
        if x.shape[1:] != self.input_shape:
            raise ShapeError(f"{self.name} expects input {self.input_shape}, got {x.shape[1:]}")
        out = x.astype(self.dtype.numpy_dtype, copy=False)
        for layer in self.layers:
            out = layer.forward(out, training=training)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(f"{self.name}: non-finite logits")
        self._logits = out
        return out

    def backward(self, labels: Any) -> List[np.ndarray]:
        """Gradients of the mean cross-entropy of the cached logits."""
        if self._logits is None:
            raise EngineStateError(f"{self.name}: backward called before forward")
        grad = cross_entropy_grad(self._logits, labels)
        self._logits = None
        self.backward_from(grad)
        grads = self.gradients()
        if not all(np.all(np.isfinite(g)) for g in grads):
            raise NonFiniteError(f"{self.name}: non-finite gradients")
        return grads

    def backward_from(self, grad_out: np.ndarray) -> np.ndarray:
        """Propagate an arbitrary upstream gradient; returns d/d(input)."""
        grad = grad_out
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> List[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def gradients(self) -> List[np.ndarray]:
        return [g for layer in self.layers for g in layer.grads]

    def state_arrays(self) -> List[np.ndarray]:
        return [a for layer in self.layers for a in layer.state_arrays()]

    @property
    def trainable_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    @property
    def transmitted_count(self) -> int:
        return int(sum(a.size for a in self.state_arrays()))

    def get_params(self) -> ModelParams:
        """Snapshot of parameters and buffers as one flat vector."""
        arrays = self.state_arrays()
        values = np.concatenate([a.ravel() for a in arrays]) if arrays else np.zeros(0)
        return ModelParams(arch_name=self.name, dtype=self.dtype, values=values)

    def set_params(self, params: ModelParams) -> None:
        """Load a flat vector in place (cast to the model dtype)."""
        if params.param_count != self.transmitted_count:
            raise ShapeError(
                f"{self.name} holds {self.transmitted_count} values, "
                f"got {params.param_count} for {params.arch_name}"
            )
        offset = 0
        for a in self.state_arrays():
            a[...] = params.values[offset:offset + a.size].reshape(a.shape)
            offset += a.size

    def zero_grad(self) -> None:
        for layer in self.layers:
            layer.zero_grad()

    def set_track_running_stats(self, enabled: bool) -> None:
        """Turn running-statistic updates of every batchnorm layer on or off."""
        for layer in self.layers:
            if isinstance(layer, BatchNorm2d):
                layer.track_running_stats = enabled

    def __repr__(self) -> str:
        inner = ", ".join(repr(layer) for layer in self.layers)
        return f"Sequential({self.name}: {inner})"


class SgdMomentum:
    """
    Classical momentum SGD: v <- mu * v + g; w <- w - eta * v.

    Velocity buffers are created lazily on the first step and dropped by reset().
    """

    def __init__(self, learning_rate: float, momentum: float = 0.0):
        if learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.velocity: Optional[List[np.ndarray]] = None

    def step(self, model: Sequential) -> Sequential:
        params = model.parameters()
        grads = model.gradients()
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v += g
            p -= self.learning_rate * v
        return model

    def reset(self) -> None:
        self.velocity = None


__all__ = [
    "LayerKind",
    "Layer",
    "Dense",
    "Conv2d",
    "MaxPool2d",
    "ReLU",
    "Flatten",
    "BatchNorm2d",
    "Sequential",
    "SgdMomentum",
    "softmax",
    "cross_entropy",
    "cross_entropy_grad",
    "init_uniform",
]
