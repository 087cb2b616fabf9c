"""A small reverse-mode autodiff engine with the layers the classifier needs.

Every op takes and returns :class:`Tensor` objects. When any input requires a
gradient, the output records its parents and a closure mapping the output
gradient to input gradients; :func:`backward` walks that tape in reverse
topological order. Layers (conv, batch norm, LSTM, ...) are single fused
nodes with hand-written backward rules, so the tape stays short even for a
125-step recurrence.

Layout convention is channels-last: sequences are ``[batch, time, channel]``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit
from scipy.stats import truncnorm

from .errors import ConfigError, DataError, NumericError, ShapeError, StateError

BN_EPS = 1e-3
BN_MOMENTUM = 0.99
CE_CLIP = 1e-12

TRAIN = "train"
INFER = "infer"


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None
        self._op = "leaf"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self._op}, requires_grad={self.requires_grad})"


@dataclass
class Parameter:
    name: str
    value: Tensor
    trainable: bool = True

    def __post_init__(self) -> None:
        self.value.requires_grad = self.trainable

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def data(self) -> np.ndarray:
        return self.value.data


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(op: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if not np.isfinite(data).all():
        raise NumericError(f"{op} produced non-finite values")
    out = Tensor(data)
    out._op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Sequence[Parameter] | None = None) -> None:
    """Fill ``.grad`` of every leaf reachable from ``loss`` with d(loss)/d(leaf).

    Gradients overwrite rather than accumulate across calls. Trainable
    ``params`` that do not take part in the graph get zero gradients. The
    tape is released afterwards, so a second call needs a new forward pass.
    """
    if loss._backward is None:
        raise StateError("backward() called without a recorded forward pass")
    if loss.data.size != 1:
        raise ShapeError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params:
            if p.trainable:
                p.value.grad = np.zeros_like(p.value.data)

    order = _topo_order(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in order:
        if node._backward is None:
            node.grad = np.zeros_like(node.data)
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node._backward is None:
            if g is not None:
                node.grad += g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if node._backward is not None:
            node._backward = None
            node._parents = ()


# ---------------------------------------------------------------------------
# Layers


def same_padding(length: int, kernel: int, stride: int) -> tuple[int, int, int]:
    """Output length and (left, right) padding for 'same' convolution."""
    out = -(-length // stride)
    total = max((out - 1) * stride + kernel - length, 0)
    return out, total // 2, total - total // 2


def conv1d(x: Tensor, weights: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """'Same'-padded 1-D convolution: [B, L, C_in] * [K, C_in, C_out] -> [B, ceil(L/stride), C_out]."""
    if stride < 1:
        raise ConfigError(f"stride must be >= 1, got {stride}")
    if x.data.ndim != 3 or weights.data.ndim != 3:
        raise ShapeError(f"conv1d expects [B,L,C] input and [K,C_in,C_out] weights, got {x.shape}, {weights.shape}")
    B, L, c_in = x.shape
    K, w_in, c_out = weights.shape
    if w_in != c_in:
        raise ShapeError(f"conv1d channel mismatch: input has {c_in}, weights expect {w_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv1d bias must have shape ({c_out},), got {bias.shape}")

    out_len, pad_l, pad_r = same_padding(L, K, stride)
    xp = np.pad(x.data, ((0, 0), (pad_l, pad_r), (0, 0)))
    win = sliding_window_view(xp, K, axis=1)[:, ::stride][:, :out_len]  # [B, out, C_in, K]
    cols = win.transpose(0, 1, 3, 2).reshape(B * out_len, K * c_in)
    w2 = weights.data.reshape(K * c_in, c_out)
    y = (cols @ w2 + bias.data).reshape(B, out_len, c_out)

    def back(g):
        g2 = g.reshape(B * out_len, c_out)
        dw = (cols.T @ g2).reshape(K, c_in, c_out)
        db = g2.sum(axis=0)
        dx = None
        if x.requires_grad:
            dcols = (g2 @ w2.T).reshape(B, out_len, K, c_in)
            dxp = np.zeros_like(xp)
            span = stride * (out_len - 1) + 1
            for k in range(K):
                dxp[:, k:k + span:stride] += dcols[:, :, k]
            dx = dxp[:, pad_l:pad_l + L]
        return dx, dw, db

    return _result("conv1d", y, (x, weights, bias), back)


def batchnorm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = TRAIN,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation over (batch, time).

    In train mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place as exponential moving averages.
    """
    C = x.shape[-1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (C,):
            raise ShapeError(f"batchnorm {name} must have shape ({C},), got {arr.shape}")
    axes = tuple(range(x.data.ndim - 1))
    n = x.data.size // C

    if mode == TRAIN:
        if n == 1:
            raise DataError("batchnorm in train mode needs more than one value per channel")
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mean
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    elif mode == INFER:
        mean, var = running_mean.copy(), running_var.copy()
    else:
        raise ConfigError(f"unknown mode {mode!r}")

    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean) * inv_std
    y = gamma.data * xhat + beta.data

    def back(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gamma.data
        if mode == TRAIN:
            dx = inv_std / n * (n * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
        else:
            dx = dxhat * inv_std
        return dx, dgamma, dbeta

    return _result("batchnorm", y, (x, gamma, beta), back)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _result("relu", np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def dropout(x: Tensor, rate: float, mode: str = TRAIN, rng_seed=0) -> Tensor:
    """Inverted dropout; ``rng_seed`` may be an int or a tuple of ints."""
    if not 0 <= rate < 1:
        raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
    if mode not in (TRAIN, INFER):
        raise ConfigError(f"unknown mode {mode!r}")
    if mode == INFER or rate == 0:
        return x
    rng = np.random.default_rng(rng_seed)
    scale = np.where(rng.random(x.shape) >= rate, 1.0 / (1.0 - rate), 0.0)
    return _result("dropout", x.data * scale, (x,), lambda g: (g * scale,))


def take_channel(x: Tensor, index: int) -> Tensor:
    """Slice channel ``index`` of a [B, L, C] tensor, keeping the axis: [B, L, 1]."""
    C = x.shape[-1]
    if not 0 <= index < C:
        raise ShapeError(f"channel {index} out of range for {C} channels")
    data = x.data[..., index:index + 1].copy()

    def back(g):
        dx = np.zeros_like(x.data)
        dx[..., index:index + 1] = g
        return (dx,)

    return _result("take_channel", data, (x,), back)


def time_step(x: Tensor, index: int) -> Tensor:
    """Select one time step of a [B, L, C] sequence: [B, C]."""
    L = x.shape[1]
    t = index % L
    data = x.data[:, t].copy()

    def back(g):
        dx = np.zeros_like(x.data)
        dx[:, t] = g
        return (dx,)

    return _result("time_step", data, (x,), back)


def concat_leads(inputs: Sequence[Tensor], n_leads: int = 12) -> Tensor:
    """Concatenate per-lead feature maps along the channel axis, in lead order."""
    if len(inputs) != n_leads:
        raise ShapeError(f"expected {n_leads} lead tensors, got {len(inputs)}")
    lead_shape = inputs[0].shape
    for t in inputs:
        if t.data.ndim != 3 or t.shape[:2] != lead_shape[:2]:
            raise ShapeError(f"lead tensors disagree in batch/time: {lead_shape} vs {t.shape}")
    widths = [t.shape[-1] for t in inputs]
    bounds = np.cumsum([0] + widths)
    data = np.concatenate([t.data for t in inputs], axis=-1)

    def back(g):
        return tuple(g[..., bounds[k]:bounds[k + 1]] for k in range(len(inputs)))

    return _result("concat", data, tuple(inputs), back)


def lstm_layer(x: Tensor, weights: Tensor, bias: Tensor, units: int, return_sequences: bool = True) -> Tensor:
    """Single LSTM layer with zero initial state.

    ``weights`` stacks the input kernel over the recurrent kernel,
    [D_in + units, 4*units]; gate columns are ordered input, forget,
    candidate, output.
    """
    if x.data.ndim != 3:
        raise ShapeError(f"lstm expects [B,L,D] input, got {x.shape}")
    B, L, D = x.shape
    U = units
    if weights.shape != (D + U, 4 * U):
        raise ShapeError(f"lstm weights must be {(D + U, 4 * U)}, got {weights.shape}")
    if bias.shape != (4 * U,):
        raise ShapeError(f"lstm bias must be ({4 * U},), got {bias.shape}")

    wx = weights.data[:D]
    wh = weights.data[D:]
    xz = (x.data.reshape(B * L, D) @ wx).reshape(B, L, 4 * U) + bias.data
    gates = np.empty((B, L, 4 * U))
    cells = np.empty((B, L, U))
    hidden = np.empty((B, L, U))
    h = np.zeros((B, U))
    c = np.zeros((B, U))
    for t in range(L):
        z = xz[:, t] + h @ wh
        act = gates[:, t]
        act[:, :2 * U] = expit(z[:, :2 * U])
        act[:, 2 * U:3 * U] = np.tanh(z[:, 2 * U:3 * U])
        act[:, 3 * U:] = expit(z[:, 3 * U:])
        i, f, gc, o = act[:, :U], act[:, U:2 * U], act[:, 2 * U:3 * U], act[:, 3 * U:]
        c = f * c + i * gc
        h = o * np.tanh(c)
        cells[:, t] = c
        hidden[:, t] = h
    out = hidden if return_sequences else hidden[:, -1].copy()

    def back(g):
        if return_sequences:
            dh_seq = g
        else:
            dh_seq = np.zeros((B, L, U))
            dh_seq[:, -1] = g
        dz_all = np.empty((B, L, 4 * U))
        dh_next = np.zeros((B, U))
        dc_next = np.zeros((B, U))
        zeros = np.zeros((B, U))
        for t in range(L - 1, -1, -1):
            act = gates[:, t]
            i, f, gc, o = act[:, :U], act[:, U:2 * U], act[:, 2 * U:3 * U], act[:, 3 * U:]
            tc = np.tanh(cells[:, t])
            c_prev = cells[:, t - 1] if t > 0 else zeros
            dh = dh_seq[:, t] + dh_next
            dc = dh * o * (1.0 - tc * tc) + dc_next
            dz = dz_all[:, t]
            dz[:, :U] = dc * gc * i * (1.0 - i)
            dz[:, U:2 * U] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * U:3 * U] = dc * i * (1.0 - gc * gc)
            dz[:, 3 * U:] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = dz @ wh.T
        dz2 = dz_all.reshape(B * L, 4 * U)
        h_prev = np.concatenate([np.zeros((B, 1, U)), hidden[:, :-1]], axis=1).reshape(B * L, U)
        dw = np.vstack([x.data.reshape(B * L, D).T @ dz2, h_prev.T @ dz2])
        db = dz2.sum(axis=0)
        dx = (dz2 @ wx.T).reshape(B, L, D) if x.requires_grad else None
        return dx, dw, db

    return _result("lstm", out, (x, weights, bias), back)


def dense(x: Tensor, weights: Tensor, bias: Tensor | None = None) -> Tensor:
    if x.data.ndim != 2 or weights.data.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise ShapeError(f"dense shape mismatch: input {x.shape}, weights {weights.shape}")
    if bias is None:
        bias = Tensor(np.zeros(weights.shape[1]))
    if bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense bias must be ({weights.shape[1]},), got {bias.shape}")
    y = x.data @ weights.data + bias.data

    def back(g):
        return g @ weights.data.T, x.data.T @ g, g.sum(axis=0)

    return _result("dense", y, (x, weights, bias), back)


def softmax(x: Tensor) -> Tensor:
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _result("softmax", p, (x,), back)


def cross_entropy(probs: Tensor, onehot) -> Tensor:
    """Mean categorical cross-entropy with probabilities clipped to [1e-12, 1]."""
    y = onehot.data if isinstance(onehot, Tensor) else np.asarray(onehot, dtype=np.float64)
    if y.shape != probs.shape or y.ndim != 2:
        raise ShapeError(f"cross_entropy shapes differ: probs {probs.shape}, targets {y.shape}")
    if not (np.isin(y, (0.0, 1.0)).all() and (y.sum(axis=1) == 1).all()):
        raise DataError("targets are not valid one-hot rows")
    B = y.shape[0]
    clipped = np.clip(probs.data, CE_CLIP, 1.0)
    loss = -np.sum(y * np.log(clipped)) / B
    inside = (probs.data >= CE_CLIP) & (probs.data <= 1.0)

    def back(g):
        return (g * np.where(inside, -y / clipped, 0.0) / B,)

    return _result("cross_entropy", np.asarray(loss), (probs,), back)


# ---------------------------------------------------------------------------
# Initialisation


def he_normal_init(shape: Sequence[int], fan_in: int, rng_seed=0) -> Tensor:
    """Normal(0, sqrt(2/fan_in)) draws truncated at two standard deviations."""
    if fan_in < 1:
        raise ConfigError(f"fan_in must be >= 1, got {fan_in}")
    sigma = np.sqrt(2.0 / fan_in)
    rng = np.random.default_rng(rng_seed)
    values = truncnorm.rvs(-2.0, 2.0, loc=0.0, scale=sigma, size=tuple(shape), random_state=rng)
    return Tensor(np.asarray(values, dtype=np.float64).reshape(tuple(shape)))
