"""Minimal numpy layers with hand-written backprop for the reference models.

Activations are kept channels-last (N, H, W, C) internally; the public
predictor API takes and returns channels-first arrays.
"""

from __future__ import annotations

import io
import json
import zipfile
from typing import Protocol, Sequence, runtime_checkable

import numpy as np

CHECKPOINT_VERSION = 1


class Conv2d:
    """3x3 (or kxk) 'same' convolution with dilation, as im2col + matmul."""

    def __init__(self, in_ch: int, out_ch: int, rng: np.random.Generator, *, kernel: int = 3,
                 dilation: int = 1, dtype=np.float32):
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.dilation = kernel, dilation
        fan_in = kernel * kernel * in_ch
        self.weight = (rng.standard_normal((fan_in, out_ch)) * np.sqrt(2.0 / fan_in)).astype(dtype)
        self.bias = np.zeros(out_ch, dtype=dtype)
        self._cache = None

    @property
    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def _cols(self, x: np.ndarray) -> np.ndarray:
        n, h, w, c = x.shape
        k, d = self.kernel, self.dilation
        p = d * (k // 2)
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = np.concatenate(
            [xp[:, i * d : i * d + h, j * d : j * d + w, :] for i in range(k) for j in range(k)], axis=3
        )
        return cols.reshape(n * h * w, k * k * c)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        n, h, w, _ = x.shape
        cols = self._cols(x)
        out = cols @ self.weight + self.bias
        if train:
            self._cache = (cols, x.shape)
        return out.reshape(n, h, w, self.out_ch)

    def backward(self, grad: np.ndarray, input_grad: bool = True):
        cols, shape = self._cache
        self._cache = None
        g = grad.reshape(-1, self.out_ch)
        grads = [cols.T @ g, g.sum(axis=0)]
        if not input_grad:
            return None, grads
        n, h, w, c = shape
        k, d = self.kernel, self.dilation
        p = d * (k // 2)
        dcols = (g @ self.weight.T).reshape(n, h, w, k * k, c)
        dxp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=grad.dtype)
        t = 0
        for i in range(k):
            for j in range(k):
                dxp[:, i * d : i * d + h, j * d : j * d + w, :] += dcols[:, :, :, t]
                t += 1
        return dxp[:, p : p + h, p : p + w, :], grads


class Linear:
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, dtype=np.float32):
        self.weight = (rng.standard_normal((in_features, out_features))
                       * np.sqrt(1.0 / in_features)).astype(dtype)
        self.bias = np.zeros(out_features, dtype=dtype)
        self._x = None

    @property
    def params(self) -> list[np.ndarray]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if train:
            self._x = x
        return x @ self.weight + self.bias

    def backward(self, grad: np.ndarray):
        x, self._x = self._x, None
        return grad @ self.weight.T, [x.T @ grad, grad.sum(axis=0)]


class ConvStack:
    """Conv layers joined by ReLU; the last layer is linear."""

    def __init__(self, channels: Sequence[int], dilations: Sequence[int], rng: np.random.Generator,
                 dtype=np.float32, final_relu: bool = False):
        if len(channels) != len(dilations) + 1:
            raise ValueError("need one dilation per layer")
        self.layers = [Conv2d(a, b, rng, dilation=d, dtype=dtype)
                       for a, b, d in zip(channels[:-1], channels[1:], dilations)]
        self.final_relu = final_relu
        self._masks: list[np.ndarray] = []

    @property
    def params(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.params]

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._masks = []
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            x = layer.forward(x, train)
            if i < last or self.final_relu:
                mask = x > 0
                x = x * mask
                if train:
                    self._masks.append(mask)
        return x

    def backward(self, grad: np.ndarray, input_grad: bool = False):
        grads: list[list[np.ndarray]] = []
        masks = list(self._masks)
        last = len(self.layers) - 1
        for i in range(last, -1, -1):
            if i < last or self.final_relu:
                grad = grad * masks.pop()
            grad, g = self.layers[i].backward(grad, input_grad=input_grad or i > 0)
            grads.append(g)
        return grad, [p for g in reversed(grads) for p in g]


@runtime_checkable
class DensePredictor(Protocol):
    """Anything mapping (N, C, H, W) inputs to (N, K, H, W) logits."""

    in_channels: int
    out_channels: int

    def __call__(self, x: np.ndarray) -> np.ndarray: ...


@runtime_checkable
class TrainablePredictor(DensePredictor, Protocol):
    def forward_train(self, x_nhwc: np.ndarray) -> np.ndarray: ...

    def backward(self, grad_nhwc: np.ndarray) -> list[np.ndarray]: ...

    @property
    def params(self) -> list[np.ndarray]: ...


class ReferencePredictor:
    """Small fully-convolutional net: three 3x3 layers, 16 hidden channels.

    Dilations (1, 2, 4) give a 15-pixel receptive field.
    """

    def __init__(self, in_channels: int, out_channels: int, *, hidden: int = 16,
                 dilations: Sequence[int] = (1, 2, 4), seed: int = 0, dtype=np.float32):
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.hidden = hidden
        self.dilations = tuple(dilations)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        widths = [in_channels] + [hidden] * (len(self.dilations) - 1) + [out_channels]
        self.net = ConvStack(widths, self.dilations, rng, dtype=self.dtype)

    @property
    def params(self) -> list[np.ndarray]:
        return self.net.params

    def get_params(self) -> list[np.ndarray]:
        return [p.copy() for p in self.params]

    def set_params(self, values: Sequence[np.ndarray]) -> None:
        for p, v in zip(self.params, values, strict=True):
            if p.shape != np.shape(v):
                raise ValueError(f"parameter shape mismatch: {p.shape} vs {np.shape(v)}")
            p[...] = v

    def _check(self, x: np.ndarray) -> np.ndarray:
        if x.shape[-1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[-1]}")
        return x.astype(self.dtype, copy=False)

    def forward_train(self, x_nhwc: np.ndarray) -> np.ndarray:
        return self.net.forward(self._check(x_nhwc), train=True)

    def backward(self, grad_nhwc: np.ndarray) -> list[np.ndarray]:
        _, grads = self.net.backward(grad_nhwc.astype(self.dtype, copy=False))
        return grads

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Logits for (C, H, W) or (N, C, H, W) input, same layout out."""
        single = x.ndim == 3
        xb = x[None] if single else x
        if xb.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {xb.shape[1]}")
        out = self.net.forward(self._check(np.moveaxis(xb, 1, -1)))
        out = np.moveaxis(out, -1, 1)
        return out[0] if single else out

    def config(self) -> dict:
        return {
            "kind": "reference",
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "hidden": self.hidden,
            "dilations": list(self.dilations),
            "dtype": self.dtype.name,
        }


# -----------------------------------------------------------------------------
# Losses
# -----------------------------------------------------------------------------

def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def cross_entropy(logits: np.ndarray, target: np.ndarray):
    """Mean per-pixel softmax cross entropy over the last axis; returns (loss, dlogits)."""
    k = logits.shape[-1]
    flat = logits.reshape(-1, k).astype(np.float64)
    t = target.reshape(-1).astype(np.int64)
    z = flat - flat.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(t.size), t].mean()
    grad = np.exp(logp)
    grad[np.arange(t.size), t] -= 1.0
    grad /= t.size
    return float(loss), grad.reshape(logits.shape).astype(logits.dtype)


def bce_with_logits(logits: np.ndarray, target: np.ndarray):
    """Mean binary cross entropy on logits; returns (loss, dlogits)."""
    x = logits.astype(np.float64)
    t = target.astype(np.float64).reshape(x.shape)
    loss = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    grad = (sigmoid(x) - t) / x.size
    return float(loss.mean()), grad.astype(logits.dtype)


class SGD:
    """SGD with momentum and L2 weight decay folded into the gradient."""

    def __init__(self, params: list[np.ndarray], lr: float = 0.01, momentum: float = 0.9,
                 weight_decay: float = 0.0005):
        self.params = params
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads: Sequence[np.ndarray], lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for p, g, v in zip(self.params, grads, self.velocity, strict=True):
            if self.weight_decay:
                g = g + self.weight_decay * p
            v *= self.momentum
            v += g
            p -= lr * v


# -----------------------------------------------------------------------------
# Checkpoints
# -----------------------------------------------------------------------------

def save_checkpoint(path, params: Sequence[np.ndarray], header: dict) -> None:
    """Parameter blob (.npz) with a JSON header carrying version and model spec."""
    meta = dict(header, version=CHECKPOINT_VERSION, n_params=len(params))
    arrays = {"header": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    arrays.update({f"p{i:03d}": np.asarray(p) for i, p in enumerate(params)})
    # fixed zip timestamps keep the blob byte-identical across runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            buf = io.BytesIO()
            np.lib.format.write_array(buf, arr, allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), buf.getvalue())


def load_checkpoint(path) -> tuple[list[np.ndarray], dict]:
    with np.load(path) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        params = [data[f"p{i:03d}"] for i in range(header["n_params"])]
    return params, header
