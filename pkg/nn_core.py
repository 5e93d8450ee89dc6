"""
Minimal static-graph neural network layers on numpy.

Every layer caches what its backward pass needs during ``forward`` and
accumulates parameter gradients in ``backward``. Tensors are plain
``np.ndarray`` in (N, C, H, W) layout.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from errors import ShapeMismatchError, StateError, ValidationError

Tensor = np.ndarray

LEAKY_SLOPE = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


class Parameter:
    """A learnable array with its gradient and Adam state."""

    def __init__(self, value: np.ndarray, name: str = ''):
        self.value = np.asarray(value)
        self.name = name
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)
        self.step = 0

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    @property
    def size(self) -> int:
        return int(self.value.size)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.shape})"


# ---------- elementwise functions ----------

def softplus(x: Tensor) -> Tensor:
    """ln(1 + e^x); returns x itself above 20."""
    return np.where(x > 20.0, x, np.log1p(np.exp(np.minimum(x, 20.0))))


def sigmoid(x: Tensor) -> Tensor:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def mish(x: Tensor) -> Tensor:
    return x * np.tanh(softplus(x))


def mish_grad(x: Tensor) -> Tensor:
    t = np.tanh(softplus(x))
    return t + x * (1.0 - t * t) * sigmoid(x)


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return np.maximum(x, slope * x)


def leaky_relu_grad(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    return np.where(x > 0, 1.0, slope).astype(x.dtype)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeMismatchError(f"cannot concatenate channels of {a.shape} and {b.shape}")
    return np.concatenate([a, b], axis=1)


def split_channels(x: Tensor, fraction: float = 0.5) -> Tuple[Tensor, Tensor]:
    """(head, tail) with head holding round(C * fraction) channels."""
    if x.ndim != 4:
        raise ShapeMismatchError(f"expected an (N,C,H,W) tensor, got {x.shape}")
    cut = int(round(x.shape[1] * fraction))
    if not 0 < cut < x.shape[1]:
        raise ShapeMismatchError(f"fraction {fraction} leaves an empty part of {x.shape[1]} channels")
    return x[:, :cut], x[:, cut:]


# ---------- layers ----------

class Layer:
    training = True

    def __init__(self):
        self._cache = None

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def backward(self, grad: Tensor) -> Tensor:
        raise NotImplementedError

    def parameters(self) -> List[Parameter]:
        return []

    def train(self, mode: bool = True):
        self.training = mode

    def _take_cache(self):
        if self._cache is None:
            raise StateError(f"{type(self).__name__}.backward called before forward")
        cache, self._cache = self._cache, None
        return cache

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)


def _padding(pad: Union[int, Tuple[int, int]]) -> Tuple[int, int]:
    if isinstance(pad, int):
        return pad, pad
    before, after = pad
    return int(before), int(after)


def conv_output_size(size: int, k: int, stride: int, pad: Union[int, Tuple[int, int]]) -> int:
    before, after = _padding(pad)
    span = size + before + after - k
    if span < 0 or span % stride:
        raise ShapeMismatchError(
            f"input size {size} with kernel {k}, stride {stride}, padding {pad} "
            f"does not give an integral output size")
    return span // stride + 1


class Conv2d(Layer):
    """Cross-correlation with optional bias. ``pad`` is symmetric or (before, after)."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 pad: Optional[Union[int, Tuple[int, int]]] = None, bias: bool = True,
                 rng: Optional[np.random.Generator] = None, dtype=np.float64, name: str = 'conv'):
        super().__init__()
        if kernel < 1 or stride < 1 or in_channels < 1 or out_channels < 1:
            raise ValidationError(f"invalid conv geometry: {in_channels}->{out_channels}, k={kernel}, s={stride}")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.stride = stride
        self.pad = _padding(kernel // 2 if pad is None else pad)
        fan_in = in_channels * kernel * kernel
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(out_channels, in_channels, kernel, kernel)).astype(dtype)
        self.weight = Parameter(w, f"{name}.weight")
        self.bias = Parameter(np.zeros(out_channels, dtype=dtype), f"{name}.bias") if bias else None

    def parameters(self) -> List[Parameter]:
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def forward(self, x: Tensor) -> Tensor:
        W = self.weight.value
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeMismatchError(
                f"conv input shape {x.shape} does not match weight shape {W.shape}")
        x = x.astype(W.dtype, copy=False)
        N, C, H, Wd = x.shape
        k, s = self.kernel, self.stride
        Ho = conv_output_size(H, k, s, self.pad)
        Wo = conv_output_size(Wd, k, s, self.pad)
        pb, pa = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (pb, pa), (pb, pa))) if (pb or pa) else x
        if k == 1:
            win = xp[:, :, ::s, ::s][:, :, :Ho, :Wo]
            out = np.tensordot(W[:, :, 0, 0], win, axes=([1], [1])).transpose(1, 0, 2, 3)
        else:
            win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
            out = np.tensordot(win, W, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
        out = np.ascontiguousarray(out)
        if self.bias is not None:
            out += self.bias.value[None, :, None, None]
        self._cache = (x.shape, xp.shape, win)
        return out

    def backward(self, grad: Tensor) -> Tensor:
        x_shape, xp_shape, win = self._take_cache()
        W = self.weight.value
        k, s = self.kernel, self.stride
        N, _, Ho, Wo = grad.shape
        if k == 1:
            self.weight.grad[:, :, 0, 0] += np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
        else:
            self.weight.grad += np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))
        if self.bias is not None:
            self.bias.grad += grad.sum(axis=(0, 2, 3))
        dxp = np.zeros(xp_shape, dtype=grad.dtype)
        for i in range(k):
            for j in range(k):
                contrib = np.tensordot(grad, W[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
                dxp[:, :, i:i + s * (Ho - 1) + 1:s, j:j + s * (Wo - 1) + 1:s] += contrib
        pb = self.pad[0]
        return dxp[:, :, pb:pb + x_shape[2], pb:pb + x_shape[3]]


class BatchNorm2d(Layer):
    def __init__(self, channels: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM,
                 dtype=np.float64, name: str = 'bn'):
        super().__init__()
        self.channels = channels
        self.eps = eps
        self.momentum = momentum
        self.gamma = Parameter(np.ones(channels, dtype=dtype), f"{name}.gamma")
        self.beta = Parameter(np.zeros(channels, dtype=dtype), f"{name}.beta")
        self.name = name
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.has_stats = False

    def adopt_initial_stats(self):
        """Accept the initial statistics (mean 0, var 1) as eval-mode statistics."""
        self.has_stats = True

    def parameters(self) -> List[Parameter]:
        return [self.gamma, self.beta]

    def forward(self, x: Tensor) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeMismatchError(f"batchnorm expects {self.channels} channels, got shape {x.shape}")
        g = self.gamma.value[None, :, None, None]
        b = self.beta.value[None, :, None, None]
        if self.training:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            n = x.shape[0] * x.shape[2] * x.shape[3]
            unbiased = var * n / (n - 1) if n > 1 else var
            m = self.momentum
            self.running_mean = m * self.running_mean + (1.0 - m) * mean
            self.running_var = m * self.running_var + (1.0 - m) * unbiased
            self.has_stats = True
        else:
            if not self.has_stats:
                raise StateError(f"{self.name}: eval forward before any training step or loaded statistics")
            mean, var = self.running_mean, self.running_var
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
        self._cache = (xhat, inv_std, self.training)
        return g * xhat + b

    def backward(self, grad: Tensor) -> Tensor:
        xhat, inv_std, training = self._take_cache()
        self.gamma.grad += np.sum(grad * xhat, axis=(0, 2, 3))
        self.beta.grad += grad.sum(axis=(0, 2, 3))
        dxhat = grad * self.gamma.value[None, :, None, None]
        inv = inv_std[None, :, None, None]
        if not training:
            return dxhat * inv
        n = grad.shape[0] * grad.shape[2] * grad.shape[3]
        s1 = dxhat.sum(axis=(0, 2, 3), keepdims=True)
        s2 = np.sum(dxhat * xhat, axis=(0, 2, 3), keepdims=True)
        return inv * (dxhat - s1 / n - xhat * s2 / n)


class Activation(Layer):
    def __init__(self, kind: str = 'mish'):
        super().__init__()
        if kind not in ('mish', 'leaky_relu', 'sigmoid', 'linear'):
            raise ValidationError(f"unknown activation {kind!r}")
        self.kind = kind

    def forward(self, x: Tensor) -> Tensor:
        self._cache = x
        if self.kind == 'mish':
            return mish(x)
        if self.kind == 'leaky_relu':
            return leaky_relu(x)
        if self.kind == 'sigmoid':
            return sigmoid(x)
        return x

    def backward(self, grad: Tensor) -> Tensor:
        x = self._take_cache()
        if self.kind == 'mish':
            return grad * mish_grad(x)
        if self.kind == 'leaky_relu':
            return grad * leaky_relu_grad(x)
        if self.kind == 'sigmoid':
            s = sigmoid(x)
            return grad * s * (1.0 - s)
        return grad


class MaxPool2d(Layer):
    """Non-overlapping max pool (kernel == stride); the first maximum wins ties."""

    def __init__(self, k: int = 2):
        super().__init__()
        self.k = k

    def forward(self, x: Tensor) -> Tensor:
        k = self.k
        N, C, H, W = x.shape
        if H % k or W % k:
            raise ShapeMismatchError(f"maxpool {k}x{k} needs sizes divisible by {k}, got {x.shape}")
        blocks = x.reshape(N, C, H // k, k, W // k, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, H // k, W // k, k * k)
        idx = np.argmax(blocks, axis=-1)
        self._cache = (x.shape, idx)
        return np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(self, grad: Tensor) -> Tensor:
        shape, idx = self._take_cache()
        k = self.k
        N, C, H, W = shape
        blocks = np.zeros((N, C, H // k, W // k, k * k), dtype=grad.dtype)
        np.put_along_axis(blocks, idx[..., None], grad[..., None], axis=-1)
        return blocks.reshape(N, C, H // k, W // k, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


class Upsample(Layer):
    def __init__(self, factor: int = 2):
        super().__init__()
        self.factor = factor

    def forward(self, x: Tensor) -> Tensor:
        self._cache = x.shape
        f = self.factor
        return np.repeat(np.repeat(x, f, axis=2), f, axis=3)

    def backward(self, grad: Tensor) -> Tensor:
        N, C, H, W = self._take_cache()
        f = self.factor
        return grad.reshape(N, C, H, f, W, f).sum(axis=(3, 5))


class Sequential(Layer):
    def __init__(self, layers: Sequence[Layer]):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x: Tensor) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, grad: Tensor) -> Tensor:
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> List[Parameter]:
        return [p for layer in self.layers for p in layer.parameters()]

    def train(self, mode: bool = True):
        self.training = mode
        for layer in self.layers:
            layer.train(mode)


@dataclass(frozen=True)
class LayerSpec:
    """Declarative description of one layer in a fixed plan."""
    kind: str
    kernel: int = 1
    stride: int = 1
    padding: Optional[Union[int, Tuple[int, int]]] = None
    out_channels: int = 0
    activation: str = 'mish'
    fraction: float = 0.5
    factor: int = 2

    def __post_init__(self):
        kinds = ('conv', 'convblock', 'batchnorm', 'activation', 'maxpool', 'upsample', 'concat', 'split')
        if self.kind not in kinds:
            raise ValidationError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1 or self.kernel < 1 or self.factor < 1:
            raise ValidationError(f"stride, kernel and factor must be >= 1 in {self}")
        if self.kind in ('conv', 'convblock') and self.out_channels < 1:
            raise ValidationError(f"{self.kind} needs out_channels >= 1")
        if self.kind == 'split' and not 0.0 < self.fraction < 1.0:
            raise ValidationError(f"split fraction must lie in (0,1), got {self.fraction}")


class ConvBlock(Sequential):
    """conv (no bias) -> batchnorm -> activation."""

    def __init__(self, in_channels: int, out_channels: int, kernel: int, stride: int = 1,
                 activation: str = 'mish', pad=None, rng=None, dtype=np.float64, name: str = 'block'):
        self.conv = Conv2d(in_channels, out_channels, kernel, stride, pad, bias=False,
                           rng=rng, dtype=dtype, name=f"{name}.conv")
        self.bn = BatchNorm2d(out_channels, dtype=dtype, name=f"{name}.bn")
        self.act = Activation(activation)
        super().__init__([self.conv, self.bn, self.act])
        self.out_channels = out_channels


def build_layer(spec: LayerSpec, in_channels: int, rng: Optional[np.random.Generator] = None,
                dtype=np.float64, name: str = 'layer') -> Layer:
    """Instantiate a single-input layer from its spec."""
    if spec.kind == 'conv':
        return Conv2d(in_channels, spec.out_channels, spec.kernel, spec.stride, spec.padding,
                      bias=True, rng=rng, dtype=dtype, name=name)
    if spec.kind == 'convblock':
        return ConvBlock(in_channels, spec.out_channels, spec.kernel, spec.stride, spec.activation,
                         spec.padding, rng=rng, dtype=dtype, name=name)
    if spec.kind == 'batchnorm':
        return BatchNorm2d(in_channels, dtype=dtype, name=name)
    if spec.kind == 'activation':
        return Activation(spec.activation)
    if spec.kind == 'maxpool':
        return MaxPool2d(spec.kernel if spec.kernel > 1 else 2)
    if spec.kind == 'upsample':
        return Upsample(spec.factor)
    raise ValidationError(f"{spec.kind} is a routing op, not a standalone layer")


def output_channels(spec: LayerSpec, in_channels: int) -> int:
    if spec.kind in ('conv', 'convblock'):
        return spec.out_channels
    if spec.kind == 'split':
        return in_channels - int(round(in_channels * spec.fraction))
    return in_channels


# ---------- optimizer ----------

def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8):
    for p in params:
        p.step += 1
        g = p.grad
        p.m = beta1 * p.m + (1.0 - beta1) * g
        p.v = beta2 * p.v + (1.0 - beta2) * g * g
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype, copy=False)


def zero_grad(params: Iterable[Parameter]):
    for p in params:
        p.grad[...] = 0


def parameter_count(params: Iterable[Parameter]) -> int:
    return int(sum(p.size for p in params))


# ---------- weights file ----------

WEIGHTS_MAGIC = b'FVW1'
WEIGHTS_VERSION = 1

TAG_CONV_WEIGHT = 1
TAG_CONV_BIAS = 2
TAG_BN_GAMMA = 3
TAG_BN_BETA = 4
TAG_BN_MEAN = 5
TAG_BN_VAR = 6


def layer_records(layers: Iterable[Layer]) -> List[Tuple[int, np.ndarray]]:
    """Flatten (tag, array) records in declaration order, BN running stats included."""
    out: List[Tuple[int, np.ndarray]] = []
    for layer in layers:
        if isinstance(layer, Sequential):
            out.extend(layer_records(layer.layers))
        elif isinstance(layer, Conv2d):
            out.append((TAG_CONV_WEIGHT, layer.weight.value))
            if layer.bias is not None:
                out.append((TAG_CONV_BIAS, layer.bias.value))
        elif isinstance(layer, BatchNorm2d):
            out.extend([(TAG_BN_GAMMA, layer.gamma.value), (TAG_BN_BETA, layer.beta.value),
                        (TAG_BN_MEAN, layer.running_mean), (TAG_BN_VAR, layer.running_var)])
    return out


def adopt_initial_stats(layers: Iterable[Layer]):
    """Let every batch norm under ``layers`` run in eval mode on its current statistics."""
    for layer in layers:
        if isinstance(layer, Sequential):
            adopt_initial_stats(layer.layers)
        elif isinstance(layer, BatchNorm2d):
            layer.adopt_initial_stats()


def assign_records(layers: Iterable[Layer], records: Sequence[Tuple[int, np.ndarray]]):
    """Inverse of layer_records; tags and shapes must match exactly."""
    it = iter(records)

    def take(tag: int, like: np.ndarray) -> np.ndarray:
        try:
            got_tag, arr = next(it)
        except StopIteration:
            raise ValidationError("weights file has fewer records than the model") from None
        if got_tag != tag or arr.shape != like.shape:
            raise ValidationError(
                f"weights record (tag {got_tag}, shape {arr.shape}) does not match model "
                f"(tag {tag}, shape {like.shape})")
        return arr.astype(like.dtype)

    def walk(items: Iterable[Layer]):
        for layer in items:
            if isinstance(layer, Sequential):
                walk(layer.layers)
            elif isinstance(layer, Conv2d):
                layer.weight.value = take(TAG_CONV_WEIGHT, layer.weight.value)
                if layer.bias is not None:
                    layer.bias.value = take(TAG_CONV_BIAS, layer.bias.value)
            elif isinstance(layer, BatchNorm2d):
                layer.gamma.value = take(TAG_BN_GAMMA, layer.gamma.value)
                layer.beta.value = take(TAG_BN_BETA, layer.beta.value)
                layer.running_mean = take(TAG_BN_MEAN, layer.running_mean)
                layer.running_var = take(TAG_BN_VAR, layer.running_var)
                layer.has_stats = True

    walk(layers)
    if next(it, None) is not None:
        raise ValidationError("weights file has more records than the model")


def save_weights(path: str, records: Sequence[Tuple[int, np.ndarray]]):
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(WEIGHTS_MAGIC)
        f.write(struct.pack('<II', WEIGHTS_VERSION, len(records)))
        for tag, arr in records:
            f.write(struct.pack('<BI', tag, arr.ndim))
            f.write(struct.pack(f'<{arr.ndim}I', *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype='<f4').tobytes())


def load_weights(path: str) -> List[Tuple[int, np.ndarray]]:
    if not os.path.exists(path):
        raise OSError(f"weights file not found: {path}")
    with open(path, 'rb') as f:
        data = f.read()
    if data[:4] != WEIGHTS_MAGIC:
        raise ValidationError(f"{path}: not an FVW1 weights file")
    try:
        version, count = struct.unpack_from('<II', data, 4)
        if version != WEIGHTS_VERSION:
            raise ValidationError(f"{path}: unsupported weights version {version}")
        off = 12
        out = []
        for _ in range(count):
            tag, ndim = struct.unpack_from('<BI', data, off)
            off += 5
            shape = struct.unpack_from(f'<{ndim}I', data, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(data, dtype='<f4', count=n, offset=off).reshape(shape).copy()
            off += 4 * n
            out.append((tag, arr))
    except (struct.error, ValueError) as e:
        raise ValidationError(f"{path}: truncated or corrupt weights file ({e})") from e
    if off != len(data):
        raise ValidationError(f"{path}: {len(data) - off} trailing bytes after the last record")
    return out
