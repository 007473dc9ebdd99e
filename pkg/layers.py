from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, Iterator, List, Tuple

import numpy as np

from autodiff import ShapeError, Tensor, batchnorm, concat, conv2d, sigmoid, tanh
from utils import logger


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss stops being finite."""
    pass


def check_finite_loss(value: float, stage: str, epoch: int, last_finite: float | None) -> None:
    if not math.isfinite(value):
        raise TrainingDivergedError(
            f"{stage}: loss became {value} at epoch {epoch} (last finite loss: {last_finite})"
        )


def uniform_param(shape: Tuple[int, ...], fan_in: int, rng: np.random.Generator, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


def zeros_param(shape: Tuple[int, ...], name: str) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True, name=name)

# -----------------
# Module plumbing
# -----------------

class Module:
    """Container walking its attributes for parameters, buffers and children."""

    training: bool = True

    def __init__(self):
        self._buffers: Dict[str, np.ndarray] = {}

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = np.asarray(value, dtype=np.float64)

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(prefix + name + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for name, value in self._buffers.items():
            yield prefix + name, value
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + name + ".")

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], prefix: str = "") -> None:
        for name, p in self.named_parameters():
            key = prefix + name
            if key not in state:
                raise KeyError(f"missing parameter '{key}' in state")
            value = np.asarray(state[key], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"parameter '{key}' expects shape {p.shape}, got {value.shape}")
            p.data = value.copy()
        self._load_buffers(state, prefix)

    def _load_buffers(self, state: Dict[str, np.ndarray], prefix: str) -> None:
        for name in list(self._buffers):
            key = prefix + name
            if key in state:
                self._buffers[name] = np.asarray(state[key], dtype=np.float64).copy()
        for name, value in vars(self).items():
            if isinstance(value, Module):
                value._load_buffers(state, prefix + name + ".")

# -----------------
# Layers
# -----------------

class Dense(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None,
                 zero_init: bool = False):
        super().__init__()
        self.in_features = in_features
        self.out_features = out_features
        if zero_init or rng is None:
            self.weight = zeros_param((out_features, in_features), "weight")
            self.bias = zeros_param((out_features,), "bias")
        else:
            self.weight = uniform_param((out_features, in_features), in_features, rng, "weight")
            self.bias = uniform_param((out_features,), in_features, rng, "bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise ShapeError(f"Dense expects {self.in_features} input features, got {x.shape}")
        if x.ndim == 1:
            return (x.reshape(1, -1) @ self.weight.T + self.bias).reshape(self.out_features)
        return x @ self.weight.T + self.bias


class GRUCell(Module):
    """GRU parameters: one (hidden, input + hidden) matrix and bias per gate."""

    def __init__(self, input_width: int, hidden_width: int, rng: np.random.Generator | None = None):
        super().__init__()
        self.input_width = input_width
        self.hidden_width = hidden_width
        fan_in = input_width + hidden_width
        shape = (hidden_width, fan_in)
        if rng is None:
            make_w = lambda name: zeros_param(shape, name)
            make_b = lambda name: zeros_param((hidden_width,), name)
        else:
            make_w = lambda name: uniform_param(shape, fan_in, rng, name)
            make_b = lambda name: uniform_param((hidden_width,), fan_in, rng, name)
        self.w_update = make_w("w_update")
        self.w_reset = make_w("w_reset")
        self.w_candidate = make_w("w_candidate")
        self.b_update = make_b("b_update")
        self.b_reset = make_b("b_reset")
        self.b_candidate = make_b("b_candidate")

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        return gru_step(x, h, self)


def gru_step(x: Tensor, h: Tensor, p: GRUCell) -> Tensor:
    """One GRU step: h' = z * h + (1 - z) * tanh(W_c [x; r * h] + b_c).

    Accepts single vectors or (batch, width) rows.
    """
    if x.shape[-1] != p.input_width:
        raise ShapeError(f"GRU input has width {x.shape[-1]}, expected {p.input_width}")
    if h.shape[-1] != p.hidden_width:
        raise ShapeError(f"GRU hidden state has width {h.shape[-1]}, expected {p.hidden_width}")
    if x.ndim != h.ndim or (x.ndim == 2 and x.shape[0] != h.shape[0]):
        raise ShapeError(f"GRU input {x.shape} and hidden {h.shape} disagree on batch layout")

    single = x.ndim == 1
    if single:
        x = x.reshape(1, p.input_width)
        h = h.reshape(1, p.hidden_width)
    xh = concat([x, h], axis=1)
    z = sigmoid(xh @ p.w_update.T + p.b_update)
    r = sigmoid(xh @ p.w_reset.T + p.b_reset)
    candidate = tanh(concat([x, r * h], axis=1) @ p.w_candidate.T + p.b_candidate)
    h_new = z * h + (1.0 - z) * candidate
    return h_new.reshape(p.hidden_width) if single else h_new


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1,
                 padding: int = 0, rng: np.random.Generator | None = None):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size * kernel_size
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        if rng is None:
            self.weight = zeros_param(shape, "weight")
            self.bias = zeros_param((out_channels,), "bias")
        else:
            self.weight = uniform_param(shape, fan_in, rng, "weight")
            self.bias = uniform_param((out_channels,), fan_in, rng, "bias")

    def __call__(self, x: Tensor) -> Tensor:
        if x.ndim == 3:
            out = conv2d(x.reshape(1, *x.shape), self.weight, self.bias, self.stride, self.padding)
            return out.reshape(out.shape[1:])
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.weight = Tensor(np.ones(channels), requires_grad=True, name="weight")
        self.bias = zeros_param((channels,), "bias")
        self.register_buffer("running_mean", np.zeros(channels))
        self.register_buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor, training: bool | None = None) -> Tensor:
        training = self.training if training is None else training
        squeeze = x.ndim == 3
        if squeeze:
            x = x.reshape(1, *x.shape)
        out, mean, var = batchnorm(x, self.weight, self.bias, self._buffers["running_mean"],
                                   self._buffers["running_var"], training, self.momentum, self.eps)
        self._buffers["running_mean"] = mean
        self._buffers["running_var"] = var
        return out.reshape(out.shape[1:]) if squeeze else out


def mse_loss(pred: Tensor, target) -> Tensor:
    diff = pred - target
    return (diff * diff).mean()

# -----------------
# Optimization
# -----------------

@dataclass
class AdamState:
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_update(params: Dict[str, Tensor], grads: Dict[str, np.ndarray],
                state: AdamState) -> Tuple[Dict[str, Tensor], AdamState, List[str]]:
    """Bias-corrected Adam step applied in place.

    A parameter whose gradient holds a non-finite value is skipped and its
    name returned in the rejected list.  A parameter whose gradient is
    entirely zero keeps its value; its moments still decay.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != p.shape:
            raise ShapeError(f"gradient for '{name}' has shape {np.shape(g)}, parameter has {p.shape}")

    state.step += 1
    t = state.step
    rejected: List[str] = []
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p.data) if g is None else np.asarray(g, dtype=np.float64)
        if not np.all(np.isfinite(g)):
            rejected.append(name)
            continue
        m = state.m.get(name, np.zeros_like(p.data))
        v = state.v.get(name, np.zeros_like(p.data))
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        if not np.any(g):
            continue
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        p.data = p.data - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)

    if rejected:
        logger.warning(f"Adam step {t}: rejected non-finite gradients for {rejected}")
    return params, state, rejected


def clip_grad_norm(params: Iterable[Tensor], max_norm: float) -> float:
    params = [p for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params))
    if math.isfinite(total) and total > max_norm > 0:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


class Adam:
    """Optimizer over a module's named parameters."""

    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], learning_rate: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8, clip_norm: float | None = None):
        self.params: Dict[str, Tensor] = dict(named_params)
        self.state = AdamState(learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)
        self.clip_norm = clip_norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> List[str]:
        if self.clip_norm:
            clip_grad_norm(self.params.values(), self.clip_norm)
        grads = {name: p.grad for name, p in self.params.items() if p.grad is not None}
        _, _, rejected = adam_update(self.params, grads, self.state)
        return rejected


class SGD:
    """Plain gradient descent over named parameters; same interface as ``Adam``."""

    def __init__(self, named_params: Iterable[Tuple[str, Tensor]], learning_rate: float = 1e-2,
                 clip_norm: float | None = None):
        self.params: Dict[str, Tensor] = dict(named_params)
        self.learning_rate = learning_rate
        self.clip_norm = clip_norm

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> List[str]:
        if self.clip_norm:
            clip_grad_norm(self.params.values(), self.clip_norm)
        rejected: List[str] = []
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if np.shape(p.grad) != p.shape:
                raise ShapeError(f"gradient for '{name}' has shape {np.shape(p.grad)}, parameter has {p.shape}")
            if not np.all(np.isfinite(p.grad)):
                rejected.append(name)
                continue
            p.data = p.data - self.learning_rate * p.grad
        if rejected:
            logger.warning(f"SGD step: rejected non-finite gradients for {rejected}")
        return rejected


OPTIMIZERS = {"adam": Adam, "sgd": SGD}


def make_optimizer(kind: str, named_params: Iterable[Tuple[str, Tensor]], learning_rate: float,
                   clip_norm: float | None = None):
    if kind not in OPTIMIZERS:
        raise ValueError(f"optimizer must be one of {sorted(OPTIMIZERS)}, got '{kind}'")
    return OPTIMIZERS[kind](named_params, learning_rate=learning_rate, clip_norm=clip_norm)
