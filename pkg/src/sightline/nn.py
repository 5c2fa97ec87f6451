"""Layers with hand-written forward and backward passes.

Image tensors are N x C x H x W. Convolution is cross-correlation (no kernel
flip) computed through an im2col view, so the heavy lifting is one matrix
product per layer.
"""
from __future__ import annotations

import math
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import DimensionError, SeededRng, rng_fill

Shape = Tuple[int, ...]


class CacheError(RuntimeError):
    """Raised when backward runs without a matching train-mode forward."""


class Layer:
    """Base class. Subclasses fill ``params`` and implement the two passes."""

    has_weights = False

    def __init__(self, name: Optional[str] = None):
        self.name = name or type(self).__name__.lower()
        self.params: Dict[str, np.ndarray] = {}
        self.grads: Dict[str, np.ndarray] = {}
        self.trainable = True
        self._cache = None

    def __repr__(self):
        return f"{type(self).__name__}({self.name})"

    def output_shape(self, in_shape: Shape) -> Shape:
        return tuple(in_shape)

    def forward(self, x: np.ndarray, train: bool, rng: Optional[SeededRng]) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self):
        self.grads = {k: np.zeros(v.shape, v.dtype) for k, v in self.params.items()}

    def _accumulate(self, name: str, g: np.ndarray):
        if not self.trainable:
            return
        slot = self.grads.get(name)
        if slot is None or slot.shape != self.params[name].shape:
            self.grads[name] = g.astype(self.params[name].dtype, copy=True)
        else:
            slot += g

    def _pop_cache(self):
        if self._cache is None:
            raise CacheError(f"{self!r}: backward called without a train-mode forward")
        cache, self._cache = self._cache, None
        return cache

    def clear_cache(self):
        self._cache = None

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


class Conv2D(Layer):
    has_weights = True

    def __init__(self, in_ch: int, out_ch: int, kh: int = 3, kw: Optional[int] = None,
                 stride: int = 1, zero_pad: int = 0, name: Optional[str] = None,
                 rng: Optional[SeededRng] = None, dtype="float32"):
        super().__init__(name)
        kw = kh if kw is None else kw
        if min(in_ch, out_ch, kh, kw, stride) < 1 or zero_pad < 0:
            raise ValueError("Conv2D dims and stride must be positive, padding non-negative")
        self.in_ch, self.out_ch, self.kh, self.kw = in_ch, out_ch, kh, kw
        self.stride, self.pad = stride, zero_pad
        fan_in = in_ch * kh * kw
        rng = rng or SeededRng(0)
        self.params["weight"] = rng_fill(rng, (out_ch, in_ch, kh, kw), "normal", 0.0,
                                         math.sqrt(2.0 / fan_in), dtype)
        self.params["bias"] = np.zeros(out_ch, dtype=self.params["weight"].dtype)

    def _extent(self, size: int, k: int) -> int:
        span = size + 2 * self.pad - k
        if span < 0:
            raise DimensionError(f"{self!r}: kernel {k} larger than padded input {size + 2 * self.pad}")
        if span % self.stride:
            raise DimensionError(f"{self!r}: non-integer output extent "
                                 f"({size} + 2*{self.pad} - {k}) / {self.stride} + 1")
        return span // self.stride + 1

    def output_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise DimensionError(f"{self!r}: expected (C={self.in_ch}, H, W), got {tuple(in_shape)}")
        return (self.out_ch, self._extent(in_shape[1], self.kh), self._extent(in_shape[2], self.kw))

    def _cols(self, xp: np.ndarray) -> np.ndarray:
        s = self.stride
        win = sliding_window_view(xp, (self.kh, self.kw), axis=(2, 3))[:, :, ::s, ::s]
        # (N, C, Ho, Wo, kh, kw) -> (N, Ho, Wo, C*kh*kw)
        n, c, ho, wo = win.shape[:4]
        return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho, wo, c * self.kh * self.kw)

    def forward(self, x, train, rng):
        if x.ndim != 4:
            raise DimensionError(f"{self!r}: expected N x C x H x W input, got {x.shape}")
        self.output_shape(x.shape[1:])
        p = self.pad
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        w = self.params["weight"]
        out = self._cols(xp) @ w.reshape(self.out_ch, -1).T
        out += self.params["bias"]
        if train:
            self._cache = (xp, x.shape)
        return np.ascontiguousarray(out.transpose(0, 3, 1, 2))

    def backward(self, grad):
        xp, x_shape = self._pop_cache()
        n, o, ho, wo = grad.shape
        gm = grad.transpose(0, 2, 3, 1).reshape(-1, o)
        w = self.params["weight"]
        if self.trainable:
            cols = self._cols(xp).reshape(-1, w[0].size)
            self._accumulate("weight", (gm.T @ cols).reshape(w.shape))
            self._accumulate("bias", gm.sum(axis=0))
        dcols = (gm @ w.reshape(o, -1)).reshape(n, ho, wo, self.in_ch, self.kh, self.kw)
        dxp = np.zeros(xp.shape, dtype=grad.dtype)
        s = self.stride
        for i in range(self.kh):
            for j in range(self.kw):
                dxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += dcols[..., i, j].transpose(0, 3, 1, 2)
        p = self.pad
        if p:
            dxp = dxp[:, :, p:p + x_shape[2], p:p + x_shape[3]]
        return dxp


class MaxPool2D(Layer):
    def __init__(self, size: int = 2, stride: Optional[int] = None, name: Optional[str] = None):
        super().__init__(name)
        self.size = size
        self.stride = size if stride is None else stride
        if size < 1 or self.stride < 1:
            raise ValueError("MaxPool2D size and stride must be positive")

    def output_shape(self, in_shape):
        c, h, w = in_shape
        if h < self.size or w < self.size:
            raise DimensionError(f"{self!r}: window {self.size} larger than input {h}x{w}")
        return (c, (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1)

    def forward(self, x, train, rng):
        _, ho, wo = self.output_shape(x.shape[1:])
        k, s = self.size, self.stride
        win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :ho, :wo]
        flat = win.reshape(*win.shape[:4], k * k)
        # argmax returns the first maximum: ties go to the lowest flat index
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        if train:
            self._cache = (x.shape, idx)
        return out

    def backward(self, grad):
        x_shape, idx = self._pop_cache()
        dx = np.zeros(x_shape, dtype=grad.dtype)
        k, s = self.size, self.stride
        ho, wo = idx.shape[2:]
        for i in range(k):
            for j in range(k):
                hit = idx == i * k + j
                dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += np.where(hit, grad, 0)
        return dx


class Dense(Layer):
    has_weights = True

    def __init__(self, in_dim: int, out_dim: int, name: Optional[str] = None,
                 rng: Optional[SeededRng] = None, dtype="float32", init: str = "he"):
        super().__init__(name)
        if in_dim < 1 or out_dim < 1:
            raise ValueError("Dense dims must be positive")
        self.in_dim, self.out_dim = in_dim, out_dim
        rng = rng or SeededRng(0)
        if init == "glorot":
            bound = math.sqrt(6.0 / (in_dim + out_dim))
            w = rng_fill(rng, (in_dim, out_dim), "uniform", -bound, bound, dtype)
        else:
            w = rng_fill(rng, (in_dim, out_dim), "normal", 0.0, math.sqrt(2.0 / in_dim), dtype)
        self.params["weight"] = w
        self.params["bias"] = np.zeros(out_dim, dtype=w.dtype)

    def output_shape(self, in_shape):
        if tuple(in_shape) != (self.in_dim,):
            raise DimensionError(f"{self!r}: expected ({self.in_dim},), got {tuple(in_shape)}")
        return (self.out_dim,)

    def forward(self, x, train, rng):
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise DimensionError(f"{self!r}: expected N x {self.in_dim} input, got {x.shape}")
        if train:
            self._cache = x
        return x @ self.params["weight"] + self.params["bias"]

    def backward(self, grad):
        x = self._pop_cache()
        if self.trainable:
            self._accumulate("weight", x.T @ grad)
            self._accumulate("bias", grad.sum(axis=0))
        return grad @ self.params["weight"].T


class ReLU(Layer):
    def forward(self, x, train, rng):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad):
        # subgradient at exactly zero is 0
        return grad * self._pop_cache()


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class Sigmoid(Layer):
    def forward(self, x, train, rng):
        s = sigmoid(x)
        if train:
            self._cache = s
        return s

    def backward(self, grad):
        s = self._pop_cache()
        return grad * s * (1 - s)


class Flatten(Layer):
    def output_shape(self, in_shape):
        return (math.prod(in_shape),)

    def forward(self, x, train, rng):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._pop_cache())


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by 1/(1-rate) in train mode."""

    def __init__(self, rate: float = 0.5, name: Optional[str] = None):
        super().__init__(name)
        if not 0 <= rate < 1:
            raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, train, rng):
        if not train:
            return x
        if self.rate == 0:
            mask = np.ones_like(x)
        else:
            if rng is None:
                raise ValueError(f"{self!r}: train-mode dropout needs an rng")
            keep = rng.generator.random(x.shape) >= self.rate
            mask = keep.astype(x.dtype) / x.dtype.type(1 - self.rate)
        self._cache = mask
        return x * mask

    def backward(self, grad):
        return grad * self._pop_cache()


class Network:
    """An ordered stack of layers with a declared per-sample input shape.

    ``forward`` in train mode leaves caches behind that ``backward`` consumes;
    eval mode neither caches nor draws random numbers.
    """

    def __init__(self, layers: Sequence[Layer] = (), input_shape: Optional[Shape] = None,
                 seed: int = 0):
        self.layers: List[Layer] = list(layers)
        self.input_shape = tuple(input_shape) if input_shape is not None else None
        self.rng = SeededRng(seed)
        self.mode = "eval"
        names = [l.name for l in self.layers]
        if len(set(names)) != len(names):
            raise ValueError(f"layer names must be unique: {names}")
        if self.input_shape is not None:
            self.shapes()
        for layer in self.layers:
            layer.zero_grad()

    def __len__(self):
        return len(self.layers)

    def __repr__(self):
        return f"Network({len(self.layers)} layers, input={self.input_shape})"

    def shapes(self) -> List[Shape]:
        """Per-sample output shape of every layer for the declared input shape."""
        shape = self.input_shape
        out = []
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.output_shape(shape)
            except DimensionError as e:
                raise DimensionError(f"layer {i}: {e}") from None
            out.append(shape)
        return out

    def layer(self, name: str) -> Layer:
        for layer in self.layers:
            if layer.name == name:
                return layer
        raise KeyError(name)

    def named_params(self) -> Iterator[Tuple[str, np.ndarray]]:
        for layer in self.layers:
            for k, v in layer.params.items():
                yield f"{layer.name}.{k}", v

    def named_grads(self) -> Iterator[Tuple[str, np.ndarray]]:
        for layer in self.layers:
            for k in layer.params:
                yield f"{layer.name}.{k}", layer.grads[k]

    def trainable_params(self) -> Iterator[Tuple[str, Layer, str]]:
        for layer in self.layers:
            if layer.trainable:
                for k in layer.params:
                    yield f"{layer.name}.{k}", layer, k

    @property
    def weight_layers(self) -> List[Layer]:
        return [l for l in self.layers if l.has_weights]

    def count_params(self, trainable_only: bool = False) -> int:
        return sum(l.num_params for l in self.layers if l.trainable or not trainable_only)

    def set_trainable(self, flag: bool, names: Optional[Sequence[str]] = None):
        for layer in self.layers:
            if names is None or layer.name in names:
                layer.trainable = flag

    def zero_grad(self):
        for layer in self.layers:
            layer.zero_grad()

    def astype(self, dtype) -> "Network":
        for layer in self.layers:
            for k in layer.params:
                layer.params[k] = layer.params[k].astype(dtype)
        self.zero_grad()
        return self

    def forward(self, x: np.ndarray, mode: str = "eval") -> np.ndarray:
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        if self.input_shape is not None and tuple(x.shape[1:]) != self.input_shape:
            raise DimensionError(f"input shape {tuple(x.shape[1:])} does not match "
                                 f"declared {self.input_shape}")
        self.mode = mode
        train = mode == "train"
        for i, layer in enumerate(self.layers):
            if not train:
                layer.clear_cache()
            try:
                x = layer.forward(x, train, self.rng)
            except DimensionError as e:
                raise DimensionError(f"layer {i}: {e}") from None
        return x

    __call__ = forward

    def backward(self, grad: np.ndarray, input_grad: bool = True) -> Optional[np.ndarray]:
        """Backpropagate ``grad`` (d loss / d output) through the stack.

        Parameter gradients accumulate into each layer's ``grads``. With
        ``input_grad=False`` the pass stops below the lowest trainable layer
        and returns None.
        """
        stop = 0
        if not input_grad:
            trainable = [i for i, l in enumerate(self.layers) if l.trainable and l.params]
            stop = trainable[0] if trainable else len(self.layers)
        for i in range(len(self.layers) - 1, -1, -1):
            if i < stop:
                self.layers[i].clear_cache()
                continue
            try:
                grad = self.layers[i].backward(grad)
            except CacheError as e:
                raise CacheError(f"layer {i}: {e}") from None
        return grad if input_grad else None

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.named_params()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        for layer in self.layers:
            for k in layer.params:
                layer.params[k] = state[f"{layer.name}.{k}"].copy()


LossFn = Callable[[np.ndarray], Tuple[float, np.ndarray]]


def gradient_errors(net: Network, x: np.ndarray, loss_fn: LossFn, step: float = 1e-4,
                    mode: str = "train", check_input: bool = True,
                    refine: bool = True) -> Dict[str, float]:
    """Worst relative error per tensor between analytic and central-difference gradients.

    ``loss_fn`` maps the network output to ``(loss, d loss / d output)``.
    Non-trainable parameters are skipped. Dropout masks are held fixed by
    replaying the network's random state before every forward.

    ReLU and max pooling make the loss piecewise smooth, so a coordinate
    sitting within ``step`` of a kink gets a meaningless central difference.
    With ``refine`` each coordinate is also differenced at ``step / 10`` and
    the smaller error is kept; a wrong analytic gradient fails at both steps.
    """
    if x.dtype != np.float64 or any(p.dtype != np.float64 for _, p in net.named_params()):
        raise TypeError("gradient checks require float64 parameters and input")
    state = net.rng.get_state()

    def loss_at(inp):
        net.rng.set_state(state)
        out = net.forward(inp, mode)
        for layer in net.layers:
            layer.clear_cache()
        return loss_fn(out)[0]

    net.zero_grad()
    net.rng.set_state(state)
    out = net.forward(x, mode)
    _, g = loss_fn(out)
    analytic_x = net.backward(g)

    steps = (step, step / 10) if refine else (step,)

    def rel(a, n):
        return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)

    def worst(t: np.ndarray, analytic: np.ndarray, f) -> float:
        flat, a = t.reshape(-1), analytic.reshape(-1)
        err = np.full(flat.size, np.inf)
        for h in steps:
            num = np.zeros(flat.size)
            for i in np.flatnonzero(err > 1e-7):
                orig = flat[i]
                flat[i] = orig + h
                fp = f()
                flat[i] = orig - h
                fm = f()
                flat[i] = orig
                num[i] = (fp - fm) / (2 * h)
            err = np.minimum(err, rel(a, num))
        return float(err.max(initial=0.0))

    errors = {}
    for name, layer, key in net.trainable_params():
        errors[name] = worst(layer.params[key], layer.grads[key], lambda: loss_at(x))
    if check_input:
        xc = x.copy()
        errors["input"] = worst(xc, analytic_x, lambda: loss_at(xc))
    net.rng.set_state(state)
    return errors


def grad_check(net: Network, x: np.ndarray, loss_fn: LossFn, step: float = 1e-4,
               mode: str = "train", check_input: bool = True, refine: bool = True) -> float:
    errs = gradient_errors(net, x, loss_fn, step, mode, check_input, refine)
    return max(errs.values(), default=0.0)
