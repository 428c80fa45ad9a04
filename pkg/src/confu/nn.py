"""Float64 tensor substrate: parameter store, masked attention, gradients, optimizers.

Every real-valued quantity in the package is a ``torch.float64`` tensor
("TensorF64").  Reverse-mode gradients come from torch autograd; the
finite-difference oracle and the optimizers are implemented here so that
the gradient path and its check never share code.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from typing import Callable, Iterable, Iterator

import torch

from .errors import DimensionError, MaskError, NumericError, StateError

DTYPE = torch.float64

TensorF64 = torch.Tensor


def tensor(data, shape=None) -> TensorF64:
    t = torch.as_tensor(data, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(shape)
    return t


def seeded_generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def normal(shape, std: float, generator: torch.Generator, mean=0.0) -> TensorF64:
    return torch.randn(*shape, generator=generator, dtype=DTYPE) * std + mean


class ParamStore:
    """Named float64 parameters with a per-name trainable flag.

    Frozen entries never require grad, never receive a gradient from
    :func:`backward`, and are skipped by the optimizers.
    """

    def __init__(self) -> None:
        self._params: OrderedDict[str, TensorF64] = OrderedDict()
        self._trainable: dict[str, bool] = {}
        self.grads: dict[str, TensorF64] = {}

    def add(self, name: str, value: TensorF64, trainable: bool = True) -> TensorF64:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        value = value.detach().to(DTYPE).clone()
        value.requires_grad_(trainable)
        self._params[name] = value
        self._trainable[name] = trainable
        return value

    def __getitem__(self, name: str) -> TensorF64:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self._params if n.startswith(prefix)]

    def items(self):
        return self._params.items()

    def is_trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def set_trainable(self, prefix: str, trainable: bool) -> None:
        for name in self.names(prefix):
            self._trainable[name] = trainable
            self._params[name].requires_grad_(trainable)
            if not trainable:
                self.grads.pop(name, None)

    def freeze(self, prefix: str = "") -> None:
        self.set_trainable(prefix, False)

    def unfreeze(self, prefix: str = "") -> None:
        self.set_trainable(prefix, True)

    def zero_grad(self) -> None:
        self.grads.clear()

    def n_params(self, trainable_only: bool = False) -> int:
        return sum(
            p.numel() for n, p in self._params.items() if self._trainable[n] or not trainable_only
        )

    def state_dict(self) -> "OrderedDict[str, TensorF64]":
        return OrderedDict((n, p.detach().clone()) for n, p in self._params.items())

    def load_state_dict(self, state: dict[str, TensorF64], strict: bool = True) -> None:
        missing = [n for n in self._params if n not in state]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing}")
        with torch.no_grad():
            for name, value in state.items():
                if name not in self._params:
                    if strict:
                        raise KeyError(f"unexpected parameter {name!r}")
                    continue
                if tuple(value.shape) != tuple(self._params[name].shape):
                    raise DimensionError(
                        f"{name}: shape {tuple(value.shape)} != {tuple(self._params[name].shape)}"
                    )
                self._params[name].copy_(value)

    @classmethod
    def union(cls, *stores: "ParamStore") -> "ParamStore":
        """A view sharing the tensors (and trainable flags) of several stores."""
        out = cls()
        for store in stores:
            for name, value in store._params.items():
                if name in out._params:
                    raise KeyError(f"duplicate parameter name {name!r}")
                out._params[name] = value
                out._trainable[name] = store._trainable[name]
        return out


# ---------------------------------------------------------------------------
# masks and attention


def causal_mask(n: int) -> torch.Tensor:
    return torch.ones(n, n, dtype=torch.bool).tril()


def check_mask(mask: torch.Tensor, q_len: int, k_len: int) -> None:
    if mask.dtype != torch.bool:
        raise MaskError(f"mask must be boolean, got {mask.dtype}")
    if mask.shape[-2:] != (q_len, k_len):
        raise DimensionError(f"mask shape {tuple(mask.shape[-2:])} != ({q_len}, {k_len})")
    if not bool(mask.any(dim=-1).all()):
        raise MaskError("every query row must attend to at least one key")


def masked_attention(
    q: TensorF64, k: TensorF64, v: TensorF64, mask: torch.Tensor, scale: float | None = None
) -> TensorF64:
    """Scaled dot-product attention over keys allowed by ``mask``.

    ``q`` is (..., Rq, dh), ``k`` (..., Rk, dh), ``v`` (..., Rk, dv) and
    ``mask`` broadcasts to (..., Rq, Rk).  Disallowed keys are excluded
    before the max-subtraction, so they contribute exactly zero weight.
    """
    if q.shape[-1] != k.shape[-1] or k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"incompatible q/k/v shapes {q.shape}, {k.shape}, {v.shape}")
    check_mask(mask, q.shape[-2], k.shape[-2])
    if scale is None:
        scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(-1, -2)) * scale
    scores = scores.masked_fill(~mask, float("-inf"))
    peak = scores.amax(dim=-1, keepdim=True).detach()
    weights = torch.exp(scores - peak)
    weights = weights / weights.sum(dim=-1, keepdim=True)
    return weights @ v


def rms_norm(x: TensorF64, gain: TensorF64, eps: float = 1e-6) -> TensorF64:
    return x * torch.rsqrt((x * x).mean(dim=-1, keepdim=True) + eps) * gain


def gelu(x: TensorF64) -> TensorF64:
    return torch.nn.functional.gelu(x)


def split_heads(x: TensorF64, n_heads: int) -> TensorF64:
    *lead, r, d = x.shape
    return x.reshape(*lead, r, n_heads, d // n_heads).transpose(-2, -3)


def merge_heads(x: TensorF64) -> TensorF64:
    *lead, h, r, dh = x.shape
    return x.transpose(-2, -3).reshape(*lead, r, h * dh)


def log_softmax(logits: TensorF64) -> TensorF64:
    return torch.log_softmax(logits, dim=-1)


# ---------------------------------------------------------------------------
# gradients


def backward(loss: TensorF64, store: ParamStore) -> dict[str, TensorF64]:
    """Populate ``store.grads`` with d(loss)/d(param) for every trainable param."""
    if loss.numel() != 1:
        raise DimensionError(f"loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad or loss.grad_fn is None:
        raise StateError("backward called without a recorded forward graph")
    names = store.trainable_names()
    if not names:
        return {}
    grads = torch.autograd.grad(
        loss.reshape(()), [store[n] for n in names], allow_unused=True
    )
    store.grads.clear()
    for name, g in zip(names, grads):
        store.grads[name] = torch.zeros_like(store[name]) if g is None else g.detach()
    return store.grads


def finite_diff_grad(
    store: ParamStore,
    name: str,
    loss_fn: Callable[[], float | TensorF64],
    h: float = 1e-5,
    indices: Iterable[int] | None = None,
) -> TensorF64:
    """Central-difference gradient of ``loss_fn`` w.r.t. ``store[name]``.

    ``indices`` restricts the estimate to a subset of flat coordinates; the
    remaining entries are left at zero.
    """
    param = store[name]
    flat = param.detach().view(-1)
    grad = torch.zeros(flat.numel(), dtype=DTYPE)
    coords = range(flat.numel()) if indices is None else indices

    def evaluate() -> float:
        with torch.no_grad():
            value = float(loss_fn())
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss {value} while differencing {name}")
        return value

    for i in coords:
        original = flat[i].item()
        with torch.no_grad():
            flat[i] = original + h
        plus = evaluate()
        with torch.no_grad():
            flat[i] = original - h
        minus = evaluate()
        with torch.no_grad():
            flat[i] = original
        grad[i] = (plus - minus) / (2.0 * h)
    return grad.view(param.shape)


def max_relative_error(a: TensorF64, b: TensorF64, floor: float = 1e-6) -> float:
    a = a.detach().reshape(-1)
    b = b.detach().reshape(-1)
    denom = torch.clamp(torch.maximum(a.abs(), b.abs()), min=floor)
    return float(((a - b).abs() / denom).max()) if a.numel() else 0.0


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    total = math.sqrt(sum(float((g * g).sum()) for g in store.grads.values()))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for name in store.grads:
            store.grads[name] = store.grads[name] * scale
    return total


# ---------------------------------------------------------------------------
# optimizers


class SGD:
    def __init__(self, lr: float) -> None:
        self.lr = lr

    def step(self, store: ParamStore) -> None:
        with torch.no_grad():
            for name in store.trainable_names():
                if name not in store.grads:
                    raise StateError(f"no gradient for trainable parameter {name!r}")
                store[name].sub_(self.lr * store.grads[name])


class Adam:
    """Adam with bias correction; state is keyed by parameter name."""

    def __init__(
        self, lr: float, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8
    ) -> None:
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, TensorF64] = {}
        self.v: dict[str, TensorF64] = {}

    def step(self, store: ParamStore) -> None:
        names = store.trainable_names()
        for name in names:
            if name not in store.grads:
                raise StateError(f"no gradient for trainable parameter {name!r}")
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        with torch.no_grad():
            for name in names:
                g = store.grads[name]
                m = self.m.get(name)
                v = self.v.get(name)
                m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
                v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
                self.m[name] = m
                self.v[name] = v
                store[name].sub_(self.lr * (m / c1) / (torch.sqrt(v / c2) + self.eps))


def optimizer_step(store: ParamStore, lr: float, rule: str = "sgd", state: Adam | None = None):
    """One update with the named rule; returns the optimizer (Adam state persists)."""
    if rule == "sgd":
        opt = SGD(lr)
    elif rule == "adam":
        opt = state if state is not None else Adam(lr)
    else:
        raise ValueError(f"unknown optimizer rule {rule!r}")
    opt.step(store)
    return opt
