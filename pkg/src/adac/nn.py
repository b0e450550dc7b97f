"""Dense networks on a flat parameter vector, with hand-written backprop.

Two architectures are supported: a plain MLP and a residual stack
(input projection, ``block_count`` pre-activation residual blocks, output
projection). Parameters live in one contiguous array so that optimizers,
soft updates, checksums and checkpoints all operate on a single buffer.

Every forward pass can return a cache; ``backward`` consumes that cache and an
upstream gradient and returns the gradient with respect to the flat
parameters and the network input.
"""
from __future__ import annotations

import functools
import hashlib
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

ACTIVATIONS = ("mish", "identity")
ARCHITECTURES = ("mlp", "residual")

_MISH_EXP_CLAMP = 20.0


class ContractError(ValueError):
    """Raised when arguments violate a documented pre-condition."""


class NonFiniteError(FloatingPointError):
    def __init__(self, what: str, value):
        super().__init__(f"non-finite {what}: {value!r}")
        self.value = value


@dataclass(frozen=True)
class NetSpec:
    layer_widths: tuple[int, ...]
    activation: str = "mish"
    architecture: str = "mlp"
    block_count: int = 0

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2 or min(widths) < 1:
            raise ContractError(f"layer_widths must have >= 2 positive entries, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        if self.architecture not in ARCHITECTURES:
            raise ContractError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "residual":
            if self.block_count < 1:
                raise ContractError("residual stack needs block_count >= 1")
            if len(widths) != 3:
                raise ContractError("residual layer_widths must be (in, hidden, out)")
        elif self.block_count != 0:
            raise ContractError("block_count only applies to residual stacks")

    @property
    def in_dim(self) -> int:
        return self.layer_widths[0]

    @property
    def out_dim(self) -> int:
        return self.layer_widths[-1]

    def linear_shapes(self) -> list[tuple[int, int]]:
        w = self.layer_widths
        if self.architecture == "mlp":
            return list(zip(w[:-1], w[1:]))
        d_in, h, d_out = w
        return [(d_in, h)] + [(h, h)] * (2 * self.block_count) + [(h, d_out)]

    @property
    def param_count(self) -> int:
        return _layout(self)[-1]


@functools.lru_cache(maxsize=None)
def _layout(spec: NetSpec) -> tuple:
    """Offsets of each (W, b) pair in the flat vector; last entry is the total."""
    offsets = []
    pos = 0
    for fan_in, fan_out in spec.linear_shapes():
        offsets.append((pos, pos + fan_in * fan_out, fan_in, fan_out))
        pos += fan_in * fan_out + fan_out
    return tuple(offsets) + (pos,)


@dataclass
class NetParams:
    values: np.ndarray
    spec: NetSpec

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 1 or self.values.size != self.spec.param_count:
            raise ContractError(
                f"expected {self.spec.param_count} parameters, got shape {self.values.shape}"
            )

    @property
    def dtype(self):
        return self.values.dtype

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        out = []
        v = self.values
        for w0, b0, fan_in, fan_out in _layout(self.spec)[:-1]:
            out.append((v[w0:b0].reshape(fan_in, fan_out), v[b0:b0 + fan_out]))
        return out

    def copy(self) -> "NetParams":
        return NetParams(self.values.copy(), self.spec)

    def astype(self, dtype) -> "NetParams":
        return NetParams(self.values.astype(dtype), self.spec)

    def checksum(self) -> str:
        return hashlib.sha256(np.ascontiguousarray(self.values).tobytes()).hexdigest()


def init_params(spec: NetSpec, rng: np.random.Generator, dtype=np.float32,
                head_scale: float = 1.0) -> NetParams:
    """Uniform fan-in initialization; ``head_scale`` shrinks the final layer."""
    values = np.empty(spec.param_count, dtype=np.float64)
    layout = _layout(spec)[:-1]
    for k, (w0, b0, fan_in, fan_out) in enumerate(layout):
        bound = 1.0 / math.sqrt(fan_in)
        if k == len(layout) - 1:
            bound *= head_scale
        values[w0:b0] = rng.uniform(-bound, bound, size=fan_in * fan_out)
        values[b0:b0 + fan_out] = rng.uniform(-bound, bound, size=fan_out)
    return NetParams(values.astype(dtype), spec)


def zeros_like(params: NetParams) -> NetParams:
    return NetParams(np.zeros_like(params.values), params.spec)


# --- activations -----------------------------------------------------------

def softplus(x):
    x = np.asarray(x, dtype=float)
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def mish(x):
    """x * tanh(softplus(x)).

    Uses tanh(log(1 + e)) = e(e + 2) / (e(e + 2) + 2) with e = exp(x), with
    the exponent clamped so large inputs cannot overflow.
    """
    scalar = np.isscalar(x)
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(float)
    e = np.exp(np.minimum(x, _MISH_EXP_CLAMP))
    w = e * (e + 2.0)
    y = x * (w / (w + 2.0))
    return float(y) if scalar else y


def _mish_fwd(x):
    e = np.exp(np.minimum(x, _MISH_EXP_CLAMP))
    w = e * (e + 2.0)
    t = w / (w + 2.0)
    return x * t, (t, e)


def _mish_bwd(x, aux, dy):
    t, e = aux
    sig = e / (1.0 + e)
    return dy * (t + x * (1.0 - t * t) * sig)


# --- forward / backward ----------------------------------------------------

def _as_batch(params: NetParams, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=params.dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != params.spec.in_dim:
        raise ContractError(
            f"input width {x.shape[-1] if x.ndim else None} != spec input {params.spec.in_dim}"
        )
    return x, single


def forward(params: NetParams, x) -> np.ndarray:
    """Evaluate the network; accepts one vector or a (batch, in_dim) array."""
    y, _ = _forward(params, x, keep=False)
    return y


def forward_with_cache(params: NetParams, x):
    return _forward(params, x, keep=True)


def _forward(params: NetParams, x, keep: bool):
    x, single = _as_batch(params, x)
    spec = params.spec
    layers = params.layers()
    mishy = spec.activation == "mish"
    cache: list = [] if keep else None

    def act(z):
        if not mishy:
            return z, None
        return _mish_fwd(z)

    if spec.architecture == "mlp":
        h = x
        n = len(layers)
        for k, (W, b) in enumerate(layers):
            z = h @ W + b
            if keep:
                cache.append(h)
            if k < n - 1:
                h_next, aux = act(z)
                if keep:
                    cache.append((z, aux))
                h = h_next
            else:
                h = z
        y = h
    else:
        W, b = layers[0]
        if keep:
            cache.append(x)
        h = x @ W + b
        for k in range(spec.block_count):
            W1, b1 = layers[1 + 2 * k]
            W2, b2 = layers[2 + 2 * k]
            a1, aux1 = act(h)
            u = a1 @ W1 + b1
            a2, aux2 = act(u)
            v = a2 @ W2 + b2
            if keep:
                cache.append((h, a1, aux1, u, a2, aux2))
            h = h + v
        a, aux = act(h)
        W, b = layers[-1]
        y = a @ W + b
        if keep:
            cache.append((h, a, aux))
    if single:
        y = y[0]
    return y, (cache, single)


def backward(params: NetParams, cache, dy) -> tuple[np.ndarray, np.ndarray]:
    """Gradients w.r.t. the flat parameters and the input, given dL/dy."""
    cache, single = cache
    spec = params.spec
    dy = np.asarray(dy, dtype=params.dtype)
    if single:
        dy = dy[None, :]
    grad = np.zeros_like(params.values)
    glayers = NetParams(grad, spec).layers()
    layers = params.layers()
    mishy = spec.activation == "mish"

    def act_bwd(z, aux, g):
        return _mish_bwd(z, aux, g) if mishy else g

    if spec.architecture == "mlp":
        n = len(layers)
        g = dy
        idx = len(cache) - 1
        for k in range(n - 1, -1, -1):
            W, _ = layers[k]
            gW, gb = glayers[k]
            h_in = cache[idx]
            idx -= 1
            gW[...] = h_in.T @ g
            gb[...] = g.sum(axis=0)
            g = g @ W.T
            if k > 0:
                z, aux = cache[idx]
                idx -= 1
                g = act_bwd(z, aux, g)
        dx = g
    else:
        h, a, aux = cache[-1]
        W, _ = layers[-1]
        gW, gb = glayers[-1]
        gW[...] = a.T @ dy
        gb[...] = dy.sum(axis=0)
        g = act_bwd(h, aux, dy @ W.T)
        for k in range(spec.block_count - 1, -1, -1):
            h_in, a1, aux1, u, a2, aux2 = cache[1 + k]
            W1, _ = layers[1 + 2 * k]
            W2, _ = layers[2 + 2 * k]
            gW1, gb1 = glayers[1 + 2 * k]
            gW2, gb2 = glayers[2 + 2 * k]
            gW2[...] = a2.T @ g
            gb2[...] = g.sum(axis=0)
            gu = act_bwd(u, aux2, g @ W2.T)
            gW1[...] = a1.T @ gu
            gb1[...] = gu.sum(axis=0)
            g = g + act_bwd(h_in, aux1, gu @ W1.T)
        W, _ = layers[0]
        gW, gb = glayers[0]
        x = cache[0]
        gW[...] = x.T @ g
        gb[...] = g.sum(axis=0)
        dx = g @ W.T
    if single:
        dx = dx[0]
    return grad, dx


def gradient(params: NetParams, loss_closure: Callable) -> np.ndarray:
    """Run ``loss_closure(params) -> (loss, grad)`` and validate the result.

    The closure is expected to compute its gradient by reverse accumulation
    through :func:`backward`; this wrapper enforces finiteness and shape.
    """
    loss, grad = loss_closure(params)
    if not np.isfinite(loss):
        raise NonFiniteError("loss", loss)
    grad = np.asarray(grad)
    if grad.shape != params.values.shape:
        raise ContractError(f"gradient shape {grad.shape} != params {params.values.shape}")
    return grad


def finite_difference_gradient(params: NetParams, loss_fn: Callable, h: float = 1e-5,
                               indices=None) -> np.ndarray:
    """Central differences of ``loss_fn(params) -> float`` (64-bit recommended)."""
    base = params.values
    idx = range(base.size) if indices is None else indices
    out = np.zeros(base.size)
    for i in idx:
        old = base[i]
        base[i] = old + h
        up = loss_fn(params)
        base[i] = old - h
        down = loss_fn(params)
        base[i] = old
        out[i] = (up - down) / (2 * h)
    return out


# --- optimization ----------------------------------------------------------

@dataclass
class OptimizerState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    learning_rate: float = 3e-4
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0

    @classmethod
    def for_params(cls, params: NetParams, **kw) -> "OptimizerState":
        return cls(np.zeros_like(params.values), np.zeros_like(params.values), **kw)


def adamw_step(params: NetParams, grad, state: OptimizerState):
    """One decoupled-weight-decay Adam update, applied in place."""
    grad = np.asarray(grad, dtype=params.dtype)
    if grad.shape != params.values.shape or state.first_moment.shape != grad.shape:
        raise ContractError("gradient/moment lengths do not match parameters")
    if not np.all(np.isfinite(grad)):
        raise NonFiniteError("gradient", grad[~np.isfinite(grad)][:5])
    state.step_count += 1
    t = state.step_count
    lr = state.learning_rate
    p = params.values
    if state.weight_decay:
        p *= 1.0 - lr * state.weight_decay
    m, v = state.first_moment, state.second_moment
    m *= state.beta1
    m += (1.0 - state.beta1) * grad
    v *= state.beta2
    v += (1.0 - state.beta2) * grad * grad
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    p -= (lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
    return params, state


def soft_update(target: NetParams, online: NetParams, rate: float) -> NetParams:
    """target <- (1 - rate) * target + rate * online, in place."""
    if target.spec != online.spec:
        raise ContractError("soft_update between different network specs")
    if not 0.0 < rate <= 1.0:
        raise ContractError(f"rate must be in (0, 1], got {rate}")
    if rate == 1.0:
        target.values[...] = online.values
    else:
        target.values *= 1.0 - rate
        target.values += rate * online.values
    return target


# --- checkpoints -----------------------------------------------------------

CHECKPOINT_MAGIC = b"ADNN"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _spec_bytes(spec: NetSpec) -> bytes:
    w = spec.layer_widths
    head = struct.pack(
        "<III I",
        ARCHITECTURES.index(spec.architecture),
        ACTIVATIONS.index(spec.activation),
        spec.block_count,
        len(w),
    )
    return head + struct.pack(f"<{len(w)}I", *w)


def encode_params(params: NetParams) -> bytes:
    body = np.asarray(params.values, dtype="<f4").tobytes()
    return (
        CHECKPOINT_MAGIC
        + struct.pack("<I", CHECKPOINT_VERSION)
        + _spec_bytes(params.spec)
        + struct.pack("<Q", params.spec.param_count)
        + body
    )


def decode_params(buf: bytes, offset: int = 0) -> tuple[NetParams, int]:
    """Parse one checkpoint record starting at ``offset``; returns (params, end)."""
    def need(n, what):
        if offset + n > len(buf):
            raise CheckpointError(f"truncated {what} at byte {offset}")

    need(8, "header")
    if buf[offset:offset + 4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad magic at byte {offset}")
    (version,) = struct.unpack_from("<I", buf, offset + 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported version {version} at byte {offset + 4}")
    offset += 8
    need(16, "spec")
    arch, act, blocks, n = struct.unpack_from("<IIII", buf, offset)
    offset += 16
    need(4 * n, "layer widths")
    widths = struct.unpack_from(f"<{n}I", buf, offset)
    offset += 4 * n
    try:
        spec = NetSpec(widths, ACTIVATIONS[act], ARCHITECTURES[arch], blocks)
    except (IndexError, ContractError) as exc:
        raise CheckpointError(f"invalid spec before byte {offset}: {exc}") from exc
    need(8, "parameter count")
    (count,) = struct.unpack_from("<Q", buf, offset)
    offset += 8
    if count != spec.param_count:
        raise CheckpointError(f"parameter count {count} does not match spec at byte {offset - 8}")
    need(4 * count, "parameters")
    values = np.frombuffer(buf, dtype="<f4", count=count, offset=offset).astype(np.float32)
    return NetParams(values, spec), offset + 4 * count


def save_params(params: NetParams, path) -> None:
    Path(path).write_bytes(encode_params(params))


def load_params(path) -> NetParams:
    buf = Path(path).read_bytes()
    params, end = decode_params(buf)
    if end != len(buf):
        raise CheckpointError(f"trailing bytes after byte {end}")
    return params
