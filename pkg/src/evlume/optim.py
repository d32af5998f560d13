"""Parameter trees, gradient evaluation, finite-difference checks, Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor


class ParamTree:
    """Named hierarchy of learnable tensors, dotted names, lexicographic order."""

    def __init__(self, entries=None, frozen=None):
        self.entries: dict[str, Tensor] = {}
        if entries:
            for name, t in entries.items():
                self.add(name, t)
        self.frozen: set[str] = set(frozen) if frozen else set()

    def add(self, name, tensor):
        if name in self.entries:
            raise ContractError(f"duplicate parameter name '{name}'")
        if not isinstance(tensor, Tensor):
            tensor = Tensor(np.asarray(tensor))
        tensor.requires_grad = True
        self.entries[name] = tensor
        return tensor

    def names(self):
        return sorted(self.entries)

    def __getitem__(self, name):
        return self.entries[name]

    def __contains__(self, name):
        return name in self.entries

    def __len__(self):
        return len(self.entries)

    def items(self):
        return [(n, self.entries[n]) for n in self.names()]

    def freeze(self, prefix):
        """Freeze every parameter whose name starts with `prefix`."""
        hit = {n for n in self.entries if n == prefix or n.startswith(prefix + ".")}
        if not hit:
            raise ContractError(f"no parameters under '{prefix}'")
        self.frozen |= hit

    def trainable(self):
        return [n for n in self.names() if n not in self.frozen]

    def zero_grad(self):
        for t in self.entries.values():
            t.grad = None

    def copy(self):
        out = ParamTree()
        for n, t in self.items():
            out.add(n, Tensor(t.data.copy()))
        out.frozen = set(self.frozen)
        return out

    def astype(self, dtype):
        out = ParamTree()
        for n, t in self.items():
            out.add(n, Tensor(t.data.astype(dtype)))
        out.frozen = set(self.frozen)
        return out


def backward(loss, params):
    """Evaluate d(loss)/d(param) for every entry of `params`.

    Parameters not reachable from the loss get zero gradients. Returns a
    name -> ndarray map.
    """
    if loss.data.size != 1:
        raise ContractError(f"loss must be scalar, got shape {loss.data.shape}")
    params.zero_grad()
    loss.backward()
    grads = {}
    for name, t in params.items():
        grads[name] = t.grad if t.grad is not None else np.zeros_like(t.data)
    return grads


def finite_diff_check(fn, params, eps=1e-5, max_samples=32, seed=0):
    """Compare recorded gradients of fn(params) against central differences.

    Samples up to `max_samples` elements per parameter (all elements for small
    tensors). Returns a name -> worst relative error map; denominators are
    floored at 1e-12.
    """
    if eps <= 0:
        raise ContractError("eps must be positive")
    grads = backward(fn(params), params)
    rng = np.random.default_rng(seed)
    report = {}
    for name, t in params.items():
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= max_samples else rng.choice(n, size=max_samples, replace=False)
        worst = 0.0
        gflat = grads[name].reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(fn(params).data)
            flat[i] = orig - eps
            f_minus = float(fn(params).data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2 * eps)
            denom = max(1e-12, abs(fd) + abs(gflat[i]))
            worst = max(worst, abs(fd - gflat[i]) / denom)
        report[name] = worst
    return report


@dataclass
class AdamState:
    """Per-parameter moments plus the shared step counter."""

    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update in place; frozen params are untouched."""
    missing = [n for n in params.trainable() if n not in grads]
    if missing:
        raise ContractError(f"missing gradients for parameters: {missing[:3]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name in params.trainable():
        p = params[name]
        g = grads[name]
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} != param shape {p.data.shape} for '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        state.m[name] = b1 * state.m[name] + (1 - b1) * g
        state.v[name] = b2 * state.v[name] + (1 - b2) * g * g
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        p.data = p.data - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return params, state
