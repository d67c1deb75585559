"""Layer-wise reverse-mode autodiff on numpy arrays.

Every layer caches what its backward pass needs during ``forward`` and, on
``backward``, accumulates parameter gradients into its Tensors and returns the
gradient with respect to its input. Frozen tensors never receive a gradient.
All computation is float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NoForwardCache, ShapeMismatch


LAYER_KINDS = ("dense", "conv3x3", "avgpool2", "globalavgpool", "relu", "tanh", "dropout")
PARAMETRIC = ("dense", "conv3x3")


@dataclass
class Tensor:
    values: np.ndarray
    grad: Optional[np.ndarray] = None
    frozen: bool = False
    name: str = ""

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.values.shape)

    def accumulate(self, g: np.ndarray) -> None:
        if self.frozen:
            return
        if g.shape != self.values.shape:
            raise ShapeMismatch(f"{self.name}: gradient {g.shape} vs values {self.values.shape}")
        self.grad = g.copy() if self.grad is None else self.grad + g

    def zero_grad(self) -> None:
        self.grad = None


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    width: int = 0  # dense units or conv output channels
    dropout_p: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind in PARAMETRIC and self.width <= 0:
            raise ValueError(f"{self.kind} layer needs a positive width")
        if not (0.0 <= self.dropout_p < 1.0):
            raise ValueError(f"dropout_p must be in [0, 1), got {self.dropout_p}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "width": self.width, "dropout_p": self.dropout_p}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(kind=d["kind"], width=int(d.get("width", 0)), dropout_p=float(d.get("dropout_p", 0.0)))


class Layer:
    spec: LayerSpec

    def __init__(self, spec: LayerSpec) -> None:
        self.spec = spec
        self._cache: Optional[tuple] = None

    def parameters(self) -> List[Tensor]:
        return []

    def output_shape(self, input_shape: Tuple[int, ...]) -> Tuple[int, ...]:
        return input_shape

    def forward(self, x: np.ndarray, train: bool, rng: Optional[np.random.Generator]) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _cached(self) -> tuple:
        if self._cache is None:
            raise NoForwardCache(f"{self.spec.kind} layer: backward called before forward")
        return self._cache


def _uniform(rng: np.random.Generator, limit: float, shape: Tuple[int, ...]) -> np.ndarray:
    return rng.uniform(-limit, limit, size=shape)


class Dense(Layer):
    def __init__(self, spec: LayerSpec, fan_in: int) -> None:
        super().__init__(spec)
        self.weight = Tensor(np.zeros((fan_in, spec.width)), name="weight")
        self.bias = Tensor(np.zeros(spec.width), name="bias")

    def init(self, rng: np.random.Generator, he: bool) -> None:
        fan_in, fan_out = self.weight.shape
        limit = math.sqrt(6.0 / fan_in) if he else math.sqrt(6.0 / (fan_in + fan_out))
        self.weight.values = _uniform(rng, limit, self.weight.shape)
        self.bias.values = np.zeros(fan_out)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def output_shape(self, input_shape):
        if len(input_shape) != 1 or input_shape[0] != self.weight.shape[0]:
            raise ShapeMismatch(f"dense expects ({self.weight.shape[0]},), got {input_shape}")
        return (self.spec.width,)

    def forward(self, x, train, rng):
        self._cache = (x,)
        return x @ self.weight.values + self.bias.values

    def backward(self, dy):
        (x,) = self._cached()
        self.weight.accumulate(x.T @ dy)
        self.bias.accumulate(dy.sum(axis=0))
        return dy @ self.weight.values.T


class Conv3x3(Layer):
    """3x3 convolution, stride 1, zero padding 1 (spatial size preserved)."""

    def __init__(self, spec: LayerSpec, in_channels: int) -> None:
        super().__init__(spec)
        self.weight = Tensor(np.zeros((spec.width, in_channels, 3, 3)), name="weight")
        self.bias = Tensor(np.zeros(spec.width), name="bias")

    def init(self, rng: np.random.Generator, he: bool) -> None:
        c_out, c_in = self.weight.shape[:2]
        fan_in, fan_out = c_in * 9, c_out * 9
        limit = math.sqrt(6.0 / fan_in) if he else math.sqrt(6.0 / (fan_in + fan_out))
        self.weight.values = _uniform(rng, limit, self.weight.shape)
        self.bias.values = np.zeros(c_out)

    def parameters(self) -> List[Tensor]:
        return [self.weight, self.bias]

    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[0] != self.weight.shape[1]:
            raise ShapeMismatch(f"conv3x3 expects ({self.weight.shape[1]}, H, W), got {input_shape}")
        return (self.spec.width, input_shape[1], input_shape[2])

    def forward(self, x, train, rng):
        n, c, h, w = x.shape
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        cols = sliding_window_view(xp, (3, 3), axis=(2, 3))  # (n, c, h, w, 3, 3)
        cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(n * h * w, c * 9)
        wmat = self.weight.values.reshape(self.spec.width, c * 9)
        out = cols @ wmat.T + self.bias.values
        self._cache = (cols, x.shape)
        return out.reshape(n, h, w, self.spec.width).transpose(0, 3, 1, 2)

    def backward(self, dy):
        cols, (n, c, h, w) = self._cached()
        c_out = self.spec.width
        dyf = dy.transpose(0, 2, 3, 1).reshape(n * h * w, c_out)
        self.weight.accumulate((dyf.T @ cols).reshape(self.weight.shape))
        self.bias.accumulate(dyf.sum(axis=0))
        dcols = (dyf @ self.weight.values.reshape(c_out, c * 9)).reshape(n, h, w, c, 3, 3)
        dxp = np.zeros((n, c, h + 2, w + 2))
        for i in range(3):
            for j in range(3):
                dxp[:, :, i:i + h, j:j + w] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dxp[:, :, 1:-1, 1:-1]


class AvgPool2(Layer):
    def output_shape(self, input_shape):
        if len(input_shape) != 3 or input_shape[1] % 2 or input_shape[2] % 2:
            raise ShapeMismatch(f"avgpool2 expects (C, even H, even W), got {input_shape}")
        return (input_shape[0], input_shape[1] // 2, input_shape[2] // 2)

    def forward(self, x, train, rng):
        n, c, h, w = x.shape
        self._cache = (x.shape,)
        return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))

    def backward(self, dy):
        self._cached()
        return np.repeat(np.repeat(dy, 2, axis=2), 2, axis=3) / 4.0


class GlobalAvgPool(Layer):
    def output_shape(self, input_shape):
        if len(input_shape) != 3:
            raise ShapeMismatch(f"globalavgpool expects (C, H, W), got {input_shape}")
        return (input_shape[0],)

    def forward(self, x, train, rng):
        self._cache = (x.shape,)
        return x.mean(axis=(2, 3))

    def backward(self, dy):
        (shape,) = self._cached()
        h, w = shape[2], shape[3]
        return np.broadcast_to(dy[:, :, None, None], shape) / float(h * w)


class ReLU(Layer):
    def forward(self, x, train, rng):
        mask = x > 0
        self._cache = (mask,)
        return np.where(mask, x, 0.0)

    def backward(self, dy):
        (mask,) = self._cached()
        return np.where(mask, dy, 0.0)

    def pattern(self) -> Optional[np.ndarray]:
        return None if self._cache is None else self._cache[0]


class Tanh(Layer):
    def forward(self, x, train, rng):
        y = np.tanh(x)
        self._cache = (y,)
        return y

    def backward(self, dy):
        (y,) = self._cached()
        return dy * (1.0 - y * y)


class Dropout(Layer):
    """Inverted dropout: kept activations are scaled by 1 / (1 - p) in train mode."""

    def forward(self, x, train, rng):
        p = self.spec.dropout_p
        if not train or p == 0.0:
            self._cache = (None,)
            return x
        if rng is None:
            raise ValueError("train-mode dropout needs an RNG")
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
        self._cache = (mask,)
        return x * mask

    def backward(self, dy):
        (mask,) = self._cached()
        return dy if mask is None else dy * mask


class Sequential:
    """Feed-forward stack built from LayerSpecs.

    Dense/conv layers followed by a ReLU get He-uniform weights, all others
    Xavier-uniform; biases start at zero.
    """

    checkpoint_kind = "sequential"

    def __init__(
        self,
        input_shape: Sequence[int],
        specs: Sequence[LayerSpec],
        rng: Optional[np.random.Generator] = None,
    ) -> None:
        self.input_shape = tuple(int(s) for s in input_shape)
        self.specs = list(specs)
        self.layers: List[Layer] = []
        shape = self.input_shape
        for spec in self.specs:
            layer = _make_layer(spec, shape)
            shape = layer.output_shape(shape)
            self.layers.append(layer)
        self.output_shape = shape
        self._has_cache = False
        if rng is not None:
            self.init(rng)

    def init(self, rng: np.random.Generator) -> None:
        for i, layer in enumerate(self.layers):
            if isinstance(layer, (Dense, Conv3x3)):
                nxt = next((s.kind for s in self.specs[i + 1:] if s.kind != "dropout"), None)
                layer.init(rng, he=(nxt == "relu"))

    def named_parameters(self) -> List[Tuple[str, Tensor]]:
        return [
            (f"{i}.{t.name}", t) for i, layer in enumerate(self.layers) for t in layer.parameters()
        ]

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.frozen = not flag
            if t.frozen:
                t.grad = None

    @property
    def trainable(self) -> bool:
        return any(not t.frozen for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def forward(
        self, x: np.ndarray, train: bool = False, rng: Optional[np.random.Generator] = None
    ) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeMismatch(f"expected input (N, {self.input_shape}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x, train, rng)
        self._has_cache = True
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        if not self._has_cache:
            raise NoForwardCache("backward called before forward")
        for layer in reversed(self.layers):
            dy = layer.backward(dy)
        return dy

    def relu_patterns(self) -> List[np.ndarray]:
        return [p for layer in self.layers if isinstance(layer, ReLU) for p in [layer.pattern()] if p is not None]

    def config(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [s.to_dict() for s in self.specs]}

    @classmethod
    def from_config(cls, config: dict) -> "Sequential":
        return cls(config["input_shape"], [LayerSpec.from_dict(d) for d in config["layers"]])


def _make_layer(spec: LayerSpec, input_shape: Tuple[int, ...]) -> Layer:
    if spec.kind == "dense":
        if len(input_shape) != 1:
            raise ShapeMismatch(f"dense layer needs a flat input, got {input_shape}")
        return Dense(spec, input_shape[0])
    if spec.kind == "conv3x3":
        if len(input_shape) != 3:
            raise ShapeMismatch(f"conv3x3 needs a (C, H, W) input, got {input_shape}")
        return Conv3x3(spec, input_shape[0])
    return {
        "avgpool2": AvgPool2,
        "globalavgpool": GlobalAvgPool,
        "relu": ReLU,
        "tanh": Tanh,
        "dropout": Dropout,
    }[spec.kind](spec)


def build_network(
    input_shape: Sequence[int], specs: Sequence[LayerSpec], rng: np.random.Generator
) -> Sequential:
    return Sequential(input_shape, specs, rng=rng)


def forward(
    net: Sequential, x: np.ndarray, train_mode: bool = False, rng: Optional[np.random.Generator] = None
) -> np.ndarray:
    return net.forward(x, train=train_mode, rng=rng)


def backward(net: Sequential, loss_grad: np.ndarray) -> Dict[str, np.ndarray]:
    """Backpropagate and return the gradients of all trainable parameters."""
    net.zero_grad()
    net.backward(loss_grad)
    return {
        name: t.grad.copy() for name, t in net.named_parameters() if not t.frozen and t.grad is not None
    }


def mse_loss(pred: np.ndarray, target: np.ndarray) -> Tuple[float, np.ndarray]:
    """Per-sample squared error summed over components, averaged over the batch."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {target.shape}")
    n = pred.shape[0] if pred.ndim > 1 else 1
    diff = pred - target
    return float(np.sum(diff * diff) / n), 2.0 * diff / n


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int
    errors: Dict[str, float] = field(default_factory=dict)


def check_gradients(
    objective: Callable[[bool], float],
    named_params: Sequence[Tuple[str, Tensor]],
    patterns: Callable[[], List[np.ndarray]],
    eps: float = 1e-5,
    max_params: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckResult:
    """Central-difference check of analytic gradients.

    ``objective(with_grad)`` runs the forward pass (and the backward pass into
    the tensors when ``with_grad``) and returns the loss. Entries whose +/-eps
    evaluations flip any ReLU pattern straddle a kink and are skipped.
    """
    params = [(n, t) for n, t in named_params if not t.frozen]
    for _, t in named_params:
        t.zero_grad()
    objective(True)
    base = [p.copy() for p in patterns()]
    analytic = {n: (t.grad.copy() if t.grad is not None else np.zeros_like(t.values)) for n, t in params}

    entries = [(pi, flat) for pi, (_, t) in enumerate(params) for flat in range(t.values.size)]
    if max_params is not None and len(entries) > max_params:
        rng = rng if rng is not None else np.random.default_rng(0)
        pick = np.sort(rng.choice(len(entries), size=max_params, replace=False))
        entries = [entries[i] for i in pick]

    def same_kinks() -> bool:
        now = patterns()
        return len(now) == len(base) and all(np.array_equal(a, b) for a, b in zip(now, base))

    worst, checked, skipped = 0.0, 0, 0
    errors: Dict[str, float] = {}
    for pi, flat in entries:
        name, t = params[pi]
        view = t.values.reshape(-1)
        orig = view[flat]
        view[flat] = orig + eps
        lp = objective(False)
        smooth = same_kinks()
        view[flat] = orig - eps
        lm = objective(False)
        smooth = smooth and same_kinks()
        view[flat] = orig
        if not smooth:
            skipped += 1
            continue
        fd = (lp - lm) / (2.0 * eps)
        ga = float(analytic[name].reshape(-1)[flat])
        err = 0.0 if ga == 0.0 and fd == 0.0 else abs(ga - fd) / max(1e-8, abs(ga) + abs(fd))
        checked += 1
        errors[name] = max(errors.get(name, 0.0), err)
        worst = max(worst, err)
    objective(False)  # leave caches consistent with the restored parameters
    return GradCheckResult(max_rel_error=worst, checked=checked, skipped=skipped, errors=errors)


def grad_check(
    net: Sequential,
    x: np.ndarray,
    target: np.ndarray,
    eps: float = 1e-5,
    max_params: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> GradCheckResult:
    """Check ``net`` under the MSE loss in eval mode (dropout disabled)."""

    def objective(with_grad: bool) -> float:
        out = net.forward(x, train=False)
        loss, g = mse_loss(out, target)
        if with_grad:
            net.zero_grad()
            net.backward(g)
        return loss

    return check_gradients(objective, net.named_parameters(), net.relu_patterns, eps, max_params, rng)
