"""Parameter storage, initialization, Adam, the one-cycle schedule and gradient checks."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered name -> trainable Tensor map."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, value) -> Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name) -> Tensor:
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self):
        return list(self._params)

    def tensors(self):
        return list(self._params.values())

    def n_values(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]):
        for k, t in self._params.items():
            v = np.asarray(state[k], dtype=np.float64)
            if v.shape != t.data.shape:
                raise ValueError(f"{k}: shape {v.shape} != {t.data.shape}")
            t.data = v.copy()

    def flat(self) -> np.ndarray:
        return np.concatenate([t.data.ravel() for t in self._params.values()]) if self._params else np.zeros(0)

    def load_flat(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_values():
            raise ValueError(f"flat vector has {vec.size} values, store holds {self.n_values()}")
        off = 0
        for t in self._params.values():
            n = t.data.size
            t.data = vec[off:off + n].reshape(t.data.shape).copy()
            off += n


def glorot(rng: np.random.Generator, shape, fan_in: int | None = None, fan_out: int | None = None):
    """Uniform in +-sqrt(6 / (fan_in + fan_out)).

    For kernels ``(C_out, C_in, *k)`` the receptive field multiplies both fans.
    """
    if fan_in is None or fan_out is None:
        rf = int(np.prod(shape[2:])) if len(shape) > 2 else 1
        fan_out, fan_in = shape[0] * rf, shape[1] * rf
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def add_linear(store: ParamStore, rng, name: str, d_in: int, d_out: int, bias: bool = True):
    store.add(f"{name}.weight", glorot(rng, (d_out, d_in)))
    if bias:
        store.add(f"{name}.bias", np.zeros(d_out))


def add_norm(store: ParamStore, name: str, dim: int):
    store.add(f"{name}.scale", np.ones(dim))
    store.add(f"{name}.shift", np.zeros(dim))


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(store: ParamStore, state: AdamState, lr: float | None = None, step: int | None = None):
    """One bias-corrected Adam update with decoupled weight decay.

    ``step``, when given, must be the next step number (state.t + 1); a
    mismatch means the caller is replaying a stale optimizer state.
    """
    if step is not None and step != state.t + 1:
        raise RuntimeError(f"adam_step: expected step {state.t + 1}, got {step}")
    lr = state.lr if lr is None else lr
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in store.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if state.weight_decay:
            p.data = p.data - lr * state.weight_decay * p.data
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return store, state


def one_cycle_lr(step: int, total_steps: int, peak_lr: float, warmup_frac: float = 0.3,
                 div_factor: float = 25.0, final_div: float = 1e4) -> float:
    """Linear warmup from peak/div_factor to peak, cosine decay to peak/final_div."""
    if total_steps <= 0:
        return peak_lr
    step = min(max(step, 0), total_steps)
    warm = warmup_frac * total_steps
    start, end = peak_lr / div_factor, peak_lr / final_div
    if step <= warm and warm > 0:
        return start + (peak_lr - start) * step / warm
    frac = (step - warm) / (total_steps - warm)
    return end + (peak_lr - end) * 0.5 * (1.0 + math.cos(math.pi * frac))


def grad_check(fn, params, step: float = 1e-5, max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` maps nothing to a scalar Tensor built from ``params`` (a list of
    Tensors with ``requires_grad``). The denominator is
    ``max(1, |analytic|, |numeric|)``. ``max_entries`` limits the number of
    coordinates probed per parameter (chosen at random, seeded).
    """
    params = list(params)
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = rng.choice(flat.size, size=max_entries, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            num = (fp - fm) / (2.0 * step)
            a = ga.reshape(-1)[i]
            err = abs(a - num) / max(1.0, abs(a), abs(num))
            worst = max(worst, err)
    for p in params:
        p.grad = None
    return worst
