"""Parameter storage, seeded initialization, optimizers and checkpoints."""
from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DimensionError, DomainError, FormatError, StateError
from .autodiff import DTYPE, Tensor, check_finite

CHECKPOINT_MAGIC = "GCRMF-CKPT-1"
INIT_SCHEMES = ("xavier-uniform", "zeros", "constant")


def seeded_init(shape, scheme="xavier-uniform", seed=0, value=0.0) -> np.ndarray:
    """Deterministic initializer for a parameter of ``shape``.

    ``xavier-uniform`` draws from U(-b, b) with b = sqrt(6 / (fan_in + fan_out)),
    treating a matrix as (fan_out, fan_in) and a vector of length n as (n, 1).
    """
    shape = tuple(int(s) for s in np.atleast_1d(shape)) if shape != () else ()
    if any(s <= 0 for s in shape):
        raise DomainError(f"parameter dimensions must be positive, got {shape}")
    if scheme == "zeros":
        return np.zeros(shape, dtype=DTYPE)
    if scheme == "constant":
        return np.full(shape, float(value), dtype=DTYPE)
    if scheme != "xavier-uniform":
        raise DomainError(f"unknown init scheme {scheme!r}")
    fan_out = shape[0] if len(shape) >= 1 else 1
    fan_in = shape[1] if len(shape) >= 2 else 1
    bound = xavier_bound(fan_in, fan_out)
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


def xavier_bound(fan_in, fan_out):
    return math.sqrt(6.0 / (fan_in + fan_out))


def _name_seed(base_seed, name):
    return (int(base_seed) * 1_000_003 + zlib.crc32(name.encode())) % (2**32)


class ParamStore:
    """Named leaf tensors plus their accumulated gradients.

    Gradients live on ``tensor.grad`` and are ``None`` until the first
    :meth:`zero_grad` or backward pass. Parameters listed in ``frozen`` are
    excluded from optimizer updates.
    """

    def __init__(self, seed=0):
        self.rng_seed = int(seed)
        self.params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def add(self, name, shape, scheme="xavier-uniform", value=0.0, trainable=True) -> Tensor:
        if name in self.params:
            raise DomainError(f"duplicate parameter name {name!r}")
        arr = seeded_init(shape, scheme, _name_seed(self.rng_seed, name), value=value)
        return self.set(name, arr, trainable=trainable)

    def set(self, name, value, trainable=True) -> Tensor:
        t = Tensor(np.array(value, dtype=DTYPE), requires_grad=True, name=name)
        self.params[name] = t
        if trainable:
            self.frozen.discard(name)
        else:
            self.frozen.add(name)
        return t

    def __getitem__(self, name) -> Tensor:
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def names(self):
        return list(self.params)

    def trainable(self):
        return [n for n in self.params if n not in self.frozen]

    def zero_grad(self):
        for t in self.params.values():
            t.grad = np.zeros_like(t.value)

    def grads(self) -> dict:
        return {n: t.grad for n, t in self.params.items()}

    def values(self) -> dict:
        return {n: t.value for n, t in self.params.items()}

    def copy(self) -> "ParamStore":
        other = ParamStore(self.rng_seed)
        for n, t in self.params.items():
            other.set(n, t.value.copy(), trainable=n not in self.frozen)
        return other

    def flat(self) -> np.ndarray:
        return np.concatenate([t.value.ravel() for t in self.params.values()]) if self.params else np.zeros(0)


@dataclass
class Optimizer:
    """SGD or Adam state. Adam moments are created lazily per parameter."""

    kind: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise DomainError(f"unknown optimizer {self.kind!r}")
        if self.learning_rate <= 0:
            raise DomainError("learning_rate must be positive")


def optimizer_step(store: ParamStore, optimizer: Optimizer) -> ParamStore:
    """Apply one update to every trainable parameter, then zero all gradients."""
    names = store.trainable()
    for n in names:
        g = store[n].grad
        if g is None:
            raise StateError(f"missing gradient for parameter {n!r}")
        if g.shape != store[n].value.shape:
            raise DimensionError(f"gradient shape {g.shape} != parameter shape {store[n].value.shape}")
        check_finite(g, f"gradient of {n}")
    optimizer.step_count += 1
    t = optimizer.step_count
    lr = optimizer.learning_rate
    for n in names:
        p = store[n]
        g = p.grad
        if optimizer.weight_decay:
            g = g + optimizer.weight_decay * p.value
        if optimizer.kind == "sgd":
            p.value = p.value - lr * g
        else:
            m = optimizer.m.get(n, np.zeros_like(g))
            v = optimizer.v.get(n, np.zeros_like(g))
            m = optimizer.beta1 * m + (1.0 - optimizer.beta1) * g
            v = optimizer.beta2 * v + (1.0 - optimizer.beta2) * g * g
            optimizer.m[n], optimizer.v[n] = m, v
            m_hat = m / (1.0 - optimizer.beta1**t)
            v_hat = v / (1.0 - optimizer.beta2**t)
            p.value = p.value - lr * m_hat / (np.sqrt(v_hat) + optimizer.eps)
    store.zero_grad()
    return store


# -- checkpoint file -----------------------------------------------------------


def save_checkpoint(store: ParamStore, path, meta=None):
    """Write ``{"format": "GCRMF-CKPT-1", "params": {name: {shape, values}}}`` as JSON."""
    payload = {
        "format": CHECKPOINT_MAGIC,
        "seed": store.rng_seed,
        "frozen": sorted(store.frozen),
        "meta": meta or {},
        "params": {
            n: {"shape": list(t.value.shape), "values": t.value.ravel().tolist()}
            for n, t in store.params.items()
        },
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True))


def load_checkpoint(path) -> tuple[ParamStore, dict]:
    try:
        payload = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_MAGIC:
        raise FormatError(f"{path} is not a {CHECKPOINT_MAGIC} checkpoint")
    store = ParamStore(payload.get("seed", 0))
    frozen = set(payload.get("frozen", []))
    try:
        for n, rec in payload["params"].items():
            arr = np.array(rec["values"], dtype=DTYPE).reshape(rec["shape"])
            store.set(n, arr, trainable=n not in frozen)
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"corrupt checkpoint {path}: {exc}") from exc
    return store, payload.get("meta", {})
