"""Parameter containers for the backbone and CMA blocks."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from cmanet import ops
from cmanet.ops import BatchNormState
from cmanet.tensor import DTYPE, Tensor


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    """Zero-mean Gaussian with variance ``2 / fan_in``."""
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Module:
    """Named tree of parameters and batch-norm buffers.

    Children, parameters and BN states are visited in insertion order, which
    fixes the checkpoint layout.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}
        self._bn: dict[str, BatchNormState] = {}
        self._no_decay: set[str] = set()

    def add_param(self, name: str, value: np.ndarray, no_decay: bool = False) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        if no_decay:
            self._no_decay.add(name)
        return t

    def add_child(self, name: str, child: "Module") -> "Module":
        self._children[name] = child
        return child

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def no_decay_names(self, prefix: str = "") -> set[str]:
        """Parameters exempt from weight decay (BN scale/shift, biases)."""
        out = {prefix + n for n in self._no_decay}
        for cname, child in self._children.items():
            out |= child.no_decay_names(f"{prefix}{cname}.")
        return out

    def named_bn_states(self, prefix: str = "") -> Iterator[tuple[str, BatchNormState]]:
        for name, s in self._bn.items():
            yield prefix + name, s
        for cname, child in self._children.items():
            yield from child.named_bn_states(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.named_parameters()}
        for name, s in self.named_bn_states():
            out[name + ".running_mean"] = s.running_mean
            out[name + ".running_var"] = s.running_var
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, p in self.named_parameters():
            arr = np.asarray(state[name], dtype=DTYPE)
            if arr.shape != p.shape:
                raise ValueError(f"{name}: checkpoint shape {arr.shape} != {p.shape}")
            p.data = arr.copy()
        for name, s in self.named_bn_states():
            s.running_mean = np.asarray(state[name + ".running_mean"], dtype=DTYPE).copy()
            s.running_var = np.asarray(state[name + ".running_var"], dtype=DTYPE).copy()

    def set_requires_grad(self, flag: bool) -> None:
        for p in self.parameters():
            p.requires_grad = flag


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5, zero_gamma: bool = False):
        super().__init__()
        self.gamma = self.add_param("gamma", np.zeros(channels) if zero_gamma else np.ones(channels), no_decay=True)
        self.beta = self.add_param("beta", np.zeros(channels), no_decay=True)
        self.state = BatchNormState(channels, momentum=momentum, eps=eps)
        self._bn["bn"] = self.state

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return ops.batch_norm(x, self.gamma, self.beta, self.state, training)


class Conv(Module):
    def __init__(self, rng, cin: int, cout: int, k: int = 3, stride: int = 1):
        super().__init__()
        self.stride, self.pad = stride, k // 2
        self.weight = self.add_param("weight", he_normal(rng, (k, k, cin, cout), k * k * cin))

    def __call__(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.stride, self.pad)


class Linear(Module):
    def __init__(self, rng, cin: int, cout: int, std: float = 0.01):
        super().__init__()
        self.weight = self.add_param("weight", rng.standard_normal((cin, cout)) * std)
        self.bias = self.add_param("bias", np.zeros(cout), no_decay=True)

    def __call__(self, x: Tensor) -> Tensor:
        return ops.add_bias(ops.matmul(x, self.weight), self.bias)


class ResidualBlock(Module):
    """conv-BN-ReLU-conv-BN plus skip, ReLU after the add."""

    def __init__(self, rng, cin: int, cout: int, stride: int = 1):
        super().__init__()
        self.conv1 = self.add_child("conv1", Conv(rng, cin, cout, 3, stride))
        self.bn1 = self.add_child("bn1", BatchNorm(cout))
        self.conv2 = self.add_child("conv2", Conv(rng, cout, cout, 3, 1))
        self.bn2 = self.add_child("bn2", BatchNorm(cout))
        self.proj = None
        if stride != 1 or cin != cout:
            self.proj = self.add_child("proj", Conv(rng, cin, cout, 1, stride))
            self.proj_bn = self.add_child("proj_bn", BatchNorm(cout))

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        h = ops.relu(self.bn1(self.conv1(x), training))
        h = self.bn2(self.conv2(h), training)
        skip = self.proj_bn(self.proj(x), training) if self.proj is not None else x
        return ops.relu(ops.add(h, skip))
