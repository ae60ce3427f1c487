"""A small numpy neural-network engine: layers, losses, exact backprop, Adam.

Arrays carry a leading batch axis. Dense layers take ``(N, features)``,
convolutions take ``(N, channels, H, W)``. Parameters are float32 unless a
network is copied to float64 for gradient checking.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Literal

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from nodulefpr.errors import NoduleFprError, ensure
from nodulefpr.filesystem import require_artifact, resolve_output_path

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NFPR0001"
CHECKPOINT_FAMILY = b"NFPR"
TENSOR_DTYPES: dict[str, type[np.floating[Any]]] = {"<f4": np.float32, "<f8": np.float64}
PROB_EPS = 1e-7

Activation = Literal["relu", "linear"]
LossKind = Literal["mse", "xent"]
Shape = tuple[int, ...]


class Layer:
    kind = "layer"

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def output_shape(self, input_shape: Shape) -> Shape:
        return input_shape

    def flops(self, input_shape: Shape) -> int:
        return 0

    def config(self) -> dict[str, Any]:
        return {"kind": self.kind}

    def pattern(self) -> np.ndarray | None:
        """Piecewise-linear switching state of the last forward pass, if any."""
        return None


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, activation: Activation = "relu", dtype: Any = np.float32):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        self.params = {
            "W": np.zeros((out_features, in_features), dtype=dtype),
            "b": np.zeros(out_features, dtype=dtype),
        }
        self._x: np.ndarray | None = None
        self._z: np.ndarray | None = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        ensure(
            x.ndim == 2 and x.shape[1] == self.in_features,
            "SHAPE_MISMATCH",
            f"Dense layer expects (N, {self.in_features}), got {x.shape}.",
        )
        z = x @ self.params["W"].T + self.params["b"]
        self._x, self._z = x, z
        return np.maximum(z, 0) if self.activation == "relu" else z

    def backward(self, grad: np.ndarray) -> np.ndarray:
        assert self._x is not None and self._z is not None
        if self.activation == "relu":
            grad = grad * (self._z > 0)
        self.grads = {"W": grad.T @ self._x, "b": grad.sum(axis=0)}
        return grad @ self.params["W"]

    def output_shape(self, input_shape: Shape) -> Shape:
        ensure(
            input_shape == (self.in_features,),
            "SHAPE_MISMATCH",
            f"Dense layer expects ({self.in_features},), got {input_shape}.",
        )
        return (self.out_features,)

    def flops(self, input_shape: Shape) -> int:
        return 2 * self.in_features * self.out_features

    def config(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "in_features": self.in_features,
            "out_features": self.out_features,
            "activation": self.activation,
        }

    def pattern(self) -> np.ndarray | None:
        if self.activation != "relu" or self._z is None:
            return None
        return self._z > 0


class Conv2D(Layer):
    """Same-size 2D convolution (cross-correlation) with zero padding."""

    kind = "conv"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel: int,
        activation: Activation = "relu",
        dtype: Any = np.float32,
    ):
        super().__init__()
        ensure(kernel % 2 == 1, "SHAPE_MISMATCH", f"Kernel size must be odd, got {kernel}.")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel = kernel
        self.activation = activation
        self.params = {
            "W": np.zeros((out_channels, in_channels, kernel, kernel), dtype=dtype),
            "b": np.zeros(out_channels, dtype=dtype),
        }
        self._cols: np.ndarray | None = None
        self._z: np.ndarray | None = None
        self._input_shape: Shape = ()

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        ensure(
            x.ndim == 4 and x.shape[1] == self.in_channels,
            "SHAPE_MISMATCH",
            f"Conv layer expects (N, {self.in_channels}, H, W), got {x.shape}.",
        )
        n, c, h, w = x.shape
        k, pad = self.kernel, self.kernel // 2
        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        windows = sliding_window_view(padded, (k, k), axis=(2, 3))
        cols = windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * k * k)
        kernels = self.params["W"].reshape(self.out_channels, -1)
        z = (cols @ kernels.T + self.params["b"]).reshape(n, h, w, self.out_channels).transpose(0, 3, 1, 2)
        self._cols, self._z, self._input_shape = cols, z, x.shape
        return np.maximum(z, 0) if self.activation == "relu" else z

    def backward(self, grad: np.ndarray) -> np.ndarray:
        assert self._cols is not None and self._z is not None
        if self.activation == "relu":
            grad = grad * (self._z > 0)
        n, c, h, w = self._input_shape
        k, pad = self.kernel, self.kernel // 2
        flat = grad.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        kernels = self.params["W"].reshape(self.out_channels, -1)
        self.grads = {
            "W": (flat.T @ self._cols).reshape(self.params["W"].shape),
            "b": flat.sum(axis=0),
        }
        dcols = (flat @ kernels).reshape(n, h, w, c, k, k)
        dpadded = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad.dtype)
        for a in range(k):
            for b in range(k):
                dpadded[:, :, a:a + h, b:b + w] += dcols[:, :, :, :, a, b].transpose(0, 3, 1, 2)
        return dpadded[:, :, pad:pad + h, pad:pad + w]

    def output_shape(self, input_shape: Shape) -> Shape:
        ensure(
            len(input_shape) == 3 and input_shape[0] == self.in_channels,
            "SHAPE_MISMATCH",
            f"Conv layer expects ({self.in_channels}, H, W), got {input_shape}.",
        )
        return (self.out_channels, input_shape[1], input_shape[2])

    def flops(self, input_shape: Shape) -> int:
        _, h, w = input_shape
        return 2 * h * w * self.out_channels * self.in_channels * self.kernel * self.kernel

    def config(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel": self.kernel,
            "activation": self.activation,
        }

    def pattern(self) -> np.ndarray | None:
        if self.activation != "relu" or self._z is None:
            return None
        return self._z > 0


class MaxPool2(Layer):
    """Non-overlapping 2x2 max pooling; odd edges pool over the partial window."""

    kind = "maxpool2"

    def __init__(self) -> None:
        super().__init__()
        self._argmax: np.ndarray | None = None
        self._input_shape: Shape = ()

    @staticmethod
    def _windows(x: np.ndarray) -> np.ndarray:
        n, c, h, w = x.shape
        ho, wo = -(-h // 2), -(-w // 2)
        padded = np.pad(x, ((0, 0), (0, 0), (0, 2 * ho - h), (0, 2 * wo - w)), constant_values=-np.inf)
        return padded.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, 4)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        windows = self._windows(x)
        argmax = windows.argmax(axis=-1)
        self._argmax, self._input_shape = argmax, x.shape
        return np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        assert self._argmax is not None
        n, c, h, w = self._input_shape
        ho, wo = grad.shape[2], grad.shape[3]
        scattered = np.zeros((n, c, ho, wo, 4), dtype=grad.dtype)
        np.put_along_axis(scattered, self._argmax[..., None], grad[..., None], axis=-1)
        full = scattered.reshape(n, c, ho, wo, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, 2 * ho, 2 * wo)
        return full[:, :, :h, :w]

    def output_shape(self, input_shape: Shape) -> Shape:
        ensure(len(input_shape) == 3, "SHAPE_MISMATCH", f"Max pooling expects (C, H, W), got {input_shape}.")
        c, h, w = input_shape
        return (c, -(-h // 2), -(-w // 2))

    def pattern(self) -> np.ndarray | None:
        return self._argmax


class Flatten(Layer):
    kind = "flatten"

    def __init__(self) -> None:
        super().__init__()
        self._input_shape: Shape = ()

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._input_shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad.reshape(self._input_shape)

    def output_shape(self, input_shape: Shape) -> Shape:
        return (math.prod(input_shape),)


class Dropout(Layer):
    """Inverted dropout; identity at inference."""

    kind = "dropout"

    def __init__(self, rate: float = 0.5):
        super().__init__()
        ensure(0.0 <= rate < 1.0, "INVALID_VALUE", f"Dropout rate must be in [0, 1), got {rate}.")
        self.rate = rate
        self.rng = np.random.default_rng(0)
        self._scale: np.ndarray | None = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if not train or self.rate == 0.0:
            self._scale = None
            return x
        keep = self.rng.random(x.shape) >= self.rate
        self._scale = keep.astype(x.dtype) / x.dtype.type(1.0 - self.rate)
        return x * self._scale

    def backward(self, grad: np.ndarray) -> np.ndarray:
        return grad if self._scale is None else grad * self._scale

    def config(self) -> dict[str, Any]:
        return {"kind": self.kind, "rate": self.rate}


class Softmax(Layer):
    kind = "softmax"

    def __init__(self) -> None:
        super().__init__()
        self._p = np.zeros((0, 2))

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        self._p = _softmax(x)
        return self._p

    def backward(self, grad: np.ndarray) -> np.ndarray:
        p = self._p
        return p * (grad - (grad * p).sum(axis=-1, keepdims=True))


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _build_layer(spec: dict[str, Any], dtype: Any) -> Layer:
    kind = spec.get("kind")
    if kind == "dense":
        return Dense(spec["in_features"], spec["out_features"], spec.get("activation", "relu"), dtype=dtype)
    if kind == "conv":
        return Conv2D(spec["in_channels"], spec["out_channels"], spec["kernel"], spec.get("activation", "relu"), dtype=dtype)
    if kind == "maxpool2":
        return MaxPool2()
    if kind == "flatten":
        return Flatten()
    if kind == "dropout":
        return Dropout(spec.get("rate", 0.5))
    if kind == "softmax":
        return Softmax()
    raise NoduleFprError("CHECKPOINT_INVALID", f"Unknown layer kind '{kind}'.")


class Network:
    def __init__(self, layers: list[Layer], input_shape: Shape, seed: int = 0):
        self.layers = layers
        self.input_shape = tuple(input_shape)
        self.seed = seed
        self.shapes: list[Shape] = [self.input_shape]
        for layer in layers:
            self.shapes.append(layer.output_shape(self.shapes[-1]))
        self.rng = np.random.default_rng(seed)
        for layer in layers:
            if isinstance(layer, Dropout):
                layer.rng = self.rng
        self._recorded = False

    @property
    def dtype(self) -> np.dtype:
        for _, array in self.parameters():
            return array.dtype
        return np.dtype(np.float32)

    def forward(self, x: np.ndarray, train: bool = False, start: int = 0, stop: int | None = None) -> np.ndarray:
        """Run layers[start:stop]. Only a full pass is recorded for backward."""
        out = np.asarray(x, dtype=self.dtype)
        end = len(self.layers) if stop is None else stop
        for layer in self.layers[start:end]:
            out = layer.forward(out, train=train)
        self._recorded = start == 0 and end == len(self.layers)
        return out

    def backward(self, grad: np.ndarray, skip_last: int = 0) -> np.ndarray:
        if not self._recorded:
            raise NoduleFprError("BACKWARD_BEFORE_FORWARD", "backward called before a full forward pass.")
        for layer in reversed(self.layers[:len(self.layers) - skip_last]):
            grad = layer.backward(grad)
        return grad

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        return [(f"{idx}.{name}", array) for idx, layer in enumerate(self.layers) for name, array in layer.params.items()]

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{idx}.{name}": array for idx, layer in enumerate(self.layers) for name, array in layer.grads.items()}

    def pattern(self) -> list[np.ndarray]:
        return [p for p in (layer.pattern() for layer in self.layers) if p is not None]

    def config(self) -> list[dict[str, Any]]:
        return [layer.config() for layer in self.layers]

    def copy(self, dtype: Any = None) -> "Network":
        target = np.dtype(dtype) if dtype is not None else self.dtype
        clone = Network([_build_layer(spec, target) for spec in self.config()], self.input_shape, seed=self.seed)
        for (_, src), (_, dst) in zip(self.parameters(), clone.parameters()):
            dst[...] = src.astype(target)
        return clone

    def state(self) -> list[np.ndarray]:
        return [array.copy() for _, array in self.parameters()]

    def load_state(self, state: list[np.ndarray]) -> None:
        for (_, dst), src in zip(self.parameters(), state):
            dst[...] = src


def dense_forward(layer: Dense, h_prev: np.ndarray) -> np.ndarray:
    """sigma(b + W h); accepts a single vector or a batch."""
    h = np.asarray(h_prev, dtype=layer.params["W"].dtype)
    single = h.ndim == 1
    out = layer.forward(h[None, :] if single else h)
    return out[0] if single else out


def conv_forward(layer: Conv2D, h_prev: np.ndarray) -> np.ndarray:
    h = np.asarray(h_prev, dtype=layer.params["W"].dtype)
    single = h.ndim == 3
    out = layer.forward(h[None] if single else h)
    return out[0] if single else out


def maxpool2(h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Block maxima of a (C, H, W) or (N, C, H, W) map plus the in-window argmax."""
    x = np.asarray(h)
    single = x.ndim == 3
    pool = MaxPool2()
    out = pool.forward(x[None] if single else x)
    assert pool._argmax is not None
    return (out[0], pool._argmax[0]) if single else (out, pool._argmax)


def softmax2(h_last: np.ndarray | tuple[float, float]) -> tuple[float, float]:
    logits = np.asarray(h_last, dtype=np.float64)
    ensure(logits.shape == (2,), "SHAPE_MISMATCH", f"softmax2 expects two logits, got shape {logits.shape}.")
    p = _softmax(logits)
    return float(p[0]), float(p[1])


def mse_loss(x: np.ndarray, x_hat: np.ndarray) -> float:
    """Mean over samples of the squared Euclidean reconstruction error."""
    a, b = np.atleast_2d(np.asarray(x, dtype=np.float64)), np.atleast_2d(np.asarray(x_hat, dtype=np.float64))
    ensure(a.shape == b.shape, "SHAPE_MISMATCH", f"mse_loss shapes differ: {a.shape} vs {b.shape}.")
    diff = (a - b).reshape(a.shape[0], -1)
    return float(np.mean(np.sum(diff * diff, axis=1)))


def xent_loss(p1: np.ndarray, y: np.ndarray) -> float:
    """Mean negative log-probability of the true class; probabilities clamped."""
    prob = np.atleast_1d(np.asarray(p1, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(y))
    ensure(prob.shape == labels.shape, "SHAPE_MISMATCH", f"xent_loss shapes differ: {prob.shape} vs {labels.shape}.")
    p_true = np.clip(np.where(labels == 1, prob, 1.0 - prob), PROB_EPS, 1.0 - PROB_EPS)
    return float(np.mean(-np.log(p_true)))


def backward(
    network: Network,
    x: np.ndarray,
    loss_kind: LossKind,
    target: np.ndarray,
    train: bool = False,
) -> tuple[float, dict[str, np.ndarray]]:
    """Forward, loss, and exact gradients for every parameter.

    For ``xent`` the network must end in Softmax; backprop starts from the
    logits with ``(p - onehot) / N``.
    """
    out = network.forward(x, train=train)
    n = out.shape[0]
    if loss_kind == "mse":
        target_arr = np.asarray(target, dtype=out.dtype).reshape(out.shape)
        loss = mse_loss(target_arr, out)
        network.backward(2.0 * (out - target_arr) / n)
    elif loss_kind == "xent":
        ensure(isinstance(network.layers[-1], Softmax), "SHAPE_MISMATCH", "xent needs a softmax head.")
        labels = np.asarray(target).astype(np.int64).reshape(n)
        loss = xent_loss(out[:, 1], labels)
        onehot = np.zeros_like(out)
        onehot[np.arange(n), labels] = 1
        network.backward((out - onehot) / n, skip_last=1)
    else:
        raise NoduleFprError("INVALID_VALUE", f"Unknown loss kind '{loss_kind}'.")
    return loss, network.gradients()


def dropout(h: np.ndarray, rate: float, mode: Literal["train", "infer"], seed: int) -> np.ndarray:
    layer = Dropout(rate)
    layer.rng = np.random.default_rng(seed)
    return layer.forward(np.asarray(h), train=mode == "train")


@dataclass
class AdamState:
    base_lr: float = 0.001
    decay_rate: float = 0.04
    decay_every: int = 1000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def effective_lr(self, t: int | None = None) -> float:
        steps = self.t if t is None else t
        return self.base_lr * (1.0 - self.decay_rate) ** (steps // self.decay_every)

    def scalars(self) -> dict[str, Any]:
        return {
            "base_lr": self.base_lr,
            "decay_rate": self.decay_rate,
            "decay_every": self.decay_every,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "t": self.t,
        }


def adam_step(state: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> AdamState:
    """One bias-corrected Adam update applied in place to ``params``."""
    for name, param in params.items():
        grad = grads.get(name)
        ensure(
            grad is not None and grad.shape == param.shape,
            "SHAPE_MISMATCH",
            f"Gradient for '{name}' is missing or has the wrong shape.",
        )
    lr = state.effective_lr()
    state.t += 1
    bias1 = 1.0 - state.beta1 ** state.t
    bias2 = 1.0 - state.beta2 ** state.t
    for name, param in params.items():
        grad = grads[name].astype(param.dtype, copy=False)
        m = state.m.setdefault(name, np.zeros_like(param))
        v = state.v.setdefault(name, np.zeros_like(param))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        param -= (lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)).astype(param.dtype)
    return state


def model_stats(network: Network) -> tuple[int, int]:
    """Parameter count and forward FLOPS (a multiply-add counts as two)."""
    params = sum(array.size for _, array in network.parameters())
    flops = sum(layer.flops(shape) for layer, shape in zip(network.layers, network.shapes))
    return int(params), int(flops)


def gradient_check(
    network: Network,
    x: np.ndarray,
    loss_kind: LossKind,
    target: np.ndarray,
    h: float = 1e-3,
    max_per_tensor: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Runs on a float64 copy with dropout off. Coordinates whose perturbation
    flips a ReLU or pooling decision are skipped.
    """
    net = network.copy(np.float64)
    x64 = np.asarray(x, dtype=np.float64)
    _, analytic = backward(net, x64, loss_kind, target)
    analytic = {name: grad.copy() for name, grad in analytic.items()}
    base_pattern = net.pattern()
    rng = np.random.default_rng(seed)

    def loss_at() -> tuple[float, bool]:
        out = net.forward(x64)
        same = all(np.array_equal(a, b) for a, b in zip(base_pattern, net.pattern()))
        if loss_kind == "mse":
            return mse_loss(np.asarray(target, dtype=np.float64).reshape(out.shape), out), same
        return xent_loss(out[:, 1], np.asarray(target).reshape(-1)), same

    worst = 0.0
    for name, param in net.parameters():
        flat = param.reshape(-1)
        indices = np.arange(flat.size)
        if max_per_tensor is not None and flat.size > max_per_tensor:
            indices = rng.choice(flat.size, size=max_per_tensor, replace=False)
        grad_flat = analytic[name].reshape(-1)
        for idx in indices:
            original = flat[idx]
            flat[idx] = original + h
            plus, same_plus = loss_at()
            flat[idx] = original - h
            minus, same_minus = loss_at()
            flat[idx] = original
            if not (same_plus and same_minus):
                continue
            numeric = (plus - minus) / (2 * h)
            exact = grad_flat[idx]
            scale = max(abs(numeric), abs(exact), 1e-6)
            worst = max(worst, abs(numeric - exact) / scale)
    return worst


@dataclass
class Checkpoint:
    network: Network
    header: dict[str, Any]
    adam: AdamState | None


def write_container(
    path: str | Path,
    header: dict[str, Any],
    tensors: list[tuple[str, np.ndarray]],
    dtype: str = "<f4",
) -> Path:
    """Magic, one JSON header line, then little-endian tensors in order (float32 unless ``dtype`` says f8)."""
    ensure(dtype in TENSOR_DTYPES, "INVALID_VALUE", f"Unsupported tensor dtype {dtype}.")
    full = dict(header)
    full["tensors"] = [{"name": name, "shape": list(array.shape), "dtype": dtype} for name, array in tensors]
    line = json.dumps(full, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    payload = b"".join(np.ascontiguousarray(array, dtype=dtype).tobytes() for _, array in tensors)
    target = resolve_output_path(path)
    target.write_bytes(CHECKPOINT_MAGIC + line + payload)
    return target


def read_container(path: str | Path) -> tuple[dict[str, Any], list[tuple[str, np.ndarray]]]:
    source = require_artifact(Path(path))
    data = source.read_bytes()
    magic = data[:len(CHECKPOINT_MAGIC)]
    if magic != CHECKPOINT_MAGIC:
        if magic.startswith(CHECKPOINT_FAMILY):
            raise NoduleFprError(
                "CHECKPOINT_VERSION",
                f"{source}: checkpoint version {magic.decode('ascii', 'replace')} is not supported.",
            )
        raise NoduleFprError("CHECKPOINT_INVALID", f"{source}: not a checkpoint file.")
    newline = data.find(b"\n", len(CHECKPOINT_MAGIC))
    try:
        header = json.loads(data[len(CHECKPOINT_MAGIC):newline].decode("utf-8")) if newline > 0 else None
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise NoduleFprError("CHECKPOINT_INVALID", f"{source}: unreadable header: {exc}") from exc
    if not isinstance(header, dict) or not isinstance(header.get("tensors"), list):
        raise NoduleFprError("CHECKPOINT_INVALID", f"{source}: header is missing the tensor table.")

    payload = memoryview(data)[newline + 1:]
    tensors: list[tuple[str, np.ndarray]] = []
    offset = 0
    for entry in header["tensors"]:
        shape = tuple(int(d) for d in entry["shape"])
        dtype = str(entry.get("dtype", "<f4"))
        if dtype not in TENSOR_DTYPES:
            raise NoduleFprError("CHECKPOINT_INVALID", f"{source}: unsupported tensor dtype {dtype}.")
        count = math.prod(shape)
        end = offset + np.dtype(dtype).itemsize * count
        if end > len(payload):
            raise NoduleFprError("CHECKPOINT_INVALID", f"{source}: payload is truncated.")
        array = np.frombuffer(payload[offset:end], dtype=dtype).astype(TENSOR_DTYPES[dtype]).reshape(shape)
        tensors.append((str(entry["name"]), array))
        offset = end
    if offset != len(payload):
        raise NoduleFprError("CHECKPOINT_INVALID", f"{source}: payload has {len(payload) - offset} trailing bytes.")
    return header, tensors


def save_checkpoint(
    path: str | Path,
    network: Network,
    adam: AdamState | None = None,
    seed: int = 0,
    iteration: int = 0,
    extra: dict[str, Any] | None = None,
) -> Path:
    header = {
        "kind": "network",
        "input_shape": list(network.input_shape),
        "layers": network.config(),
        "adam": adam.scalars() if adam is not None else None,
        "seed": seed,
        "iteration": iteration,
        "extra": extra or {},
    }
    return write_container(path, header, network.parameters())


def load_checkpoint(path: str | Path) -> Checkpoint:
    header, tensors = read_container(path)
    if header.get("kind") != "network":
        raise NoduleFprError("CHECKPOINT_INVALID", f"{path}: container does not hold a network.")
    layers = [_build_layer(spec, np.float32) for spec in header["layers"]]
    network = Network(layers, tuple(header["input_shape"]), seed=int(header.get("seed", 0)))
    params = network.parameters()
    if [name for name, _ in params] != [name for name, _ in tensors]:
        raise NoduleFprError("CHECKPOINT_INVALID", f"{path}: tensor table does not match the layers.")
    for (_, dst), (_, src) in zip(params, tensors):
        if dst.shape != src.shape:
            raise NoduleFprError("CHECKPOINT_INVALID", f"{path}: tensor shape mismatch.")
        dst[...] = src
    adam = None
    if header.get("adam"):
        scalars = header["adam"]
        adam = AdamState(**{key: scalars[key] for key in AdamState().scalars()})
    logger.debug("Loaded checkpoint %s (%d tensors).", path, len(tensors))
    return Checkpoint(network=network, header=header, adam=adam)
