"""Reusable layers: position-wise FFN, LSTM/BiLSTM, maxout, GRU cell and the
one-layer ReLU transform used by every attention in the model.

All sequence tensors are batch-first, ``(batch, length, features)``; weight
matrices are stored ``(in, out)`` so a layer computes ``x @ W``.
"""
from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor

LSTM_GATES = ("input", "forget", "cell", "output")
GRU_GATES = ("update", "reset", "candidate")


def param(data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True)


def uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


class Module:
    """Parameter container; parameters are discovered from attributes in
    definition order, so names and ordering are stable across runs."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, value in vars(self).items():
            if isinstance(value, Tensor) and value.requires_grad:
                yield prefix + name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{prefix}{name}.")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())


class FFN(Module):
    """FFN(x) = ReLU(x W1 + b1) W2 + b2, applied per position."""

    def __init__(self, rng, in_dim: int, hidden: int, out_dim: int):
        self.W1 = param(uniform(rng, (in_dim, hidden), in_dim))
        self.b1 = param(np.zeros(hidden))
        self.W2 = param(uniform(rng, (hidden, out_dim), hidden))
        self.b2 = param(np.zeros(out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.W1.shape[0]:
            raise T.DimensionError(f"FFN expects {self.W1.shape[0]} input features, got {x.shape}")
        return T.relu(x @ self.W1 + self.b1) @ self.W2 + self.b2


class AttentionTransform(Module):
    """ReLU(x W): the one-layer transform applied before dot-product scores."""

    def __init__(self, rng, in_dim: int, out_dim: int):
        self.W = param(uniform(rng, (in_dim, out_dim), in_dim))

    def __call__(self, x: Tensor) -> Tensor:
        return T.relu(x @ self.W)


class Maxout(Module):
    """Elementwise max over ``k`` affine pieces mapping in_dim -> out_dim."""

    def __init__(self, rng, in_dim: int, out_dim: int, k: int = 2):
        if k < 2:
            raise ValueError("maxout needs at least two pieces")
        self.k = k
        self.out_dim = out_dim
        self.W = param(uniform(rng, (in_dim, k * out_dim), in_dim))
        self.b = param(np.zeros(k * out_dim))

    def __call__(self, x: Tensor) -> Tensor:
        pieces = x @ self.W + self.b
        pieces = T.reshape(pieces, x.shape[:-1] + (self.k, self.out_dim))
        return T.max_axis(pieces, -2)


# --------------------------------------------------------------------------
# LSTM


def lstm_scan(xp: Tensor, W_hh: Tensor, mask: np.ndarray | None = None,
              reverse: bool = False) -> Tensor:
    """Fused LSTM recurrence over pre-projected inputs.

    ``xp`` is ``x @ W_ih + b`` with shape (B, L, 4h), gates ordered
    input/forget/cell/output.  Where ``mask`` is 0 the state is carried over
    unchanged and the output is 0, so right-padding never reaches real
    positions in either direction.  Backward is hand-written BPTT.
    """
    B, L, four_h = xp.shape
    h = four_h // 4
    m = np.ones((B, L)) if mask is None else np.asarray(mask, dtype=np.float64)
    order = range(L - 1, -1, -1) if reverse else range(L)
    Whh = W_hh.data
    hs = np.zeros((B, h))
    cs = np.zeros((B, h))
    out = np.zeros((B, L, h))
    saved = {}
    for t in order:
        a = xp.data[:, t] + hs @ Whh
        i = T._sigmoid(a[:, :h])
        f = T._sigmoid(a[:, h:2 * h])
        g = np.tanh(a[:, 2 * h:3 * h])
        o = T._sigmoid(a[:, 3 * h:])
        c_new = f * cs + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        mt = m[:, t:t + 1]
        saved[t] = (hs, cs, i, f, g, o, tc)
        out[:, t] = mt * h_new
        cs = mt * c_new + (1.0 - mt) * cs
        hs = mt * h_new + (1.0 - mt) * hs

    def bw(gout):
        dxp = np.zeros_like(xp.data)
        dW = np.zeros_like(Whh)
        dH = np.zeros((B, h))
        dC = np.zeros((B, h))
        for t in reversed(order):
            h_prev, c_prev, i, f, g, o, tc = saved[t]
            mt = m[:, t:t + 1]
            dh_new = mt * (gout[:, t] + dH)
            dc_new = mt * dC + dh_new * o * (1.0 - tc * tc)
            da = np.concatenate([
                dc_new * g * i * (1.0 - i),
                dc_new * c_prev * f * (1.0 - f),
                dc_new * i * (1.0 - g * g),
                dh_new * tc * o * (1.0 - o),
            ], axis=1)
            dxp[:, t] = da
            dW += h_prev.T @ da
            dH = (1.0 - mt) * dH + da @ Whh.T
            dC = (1.0 - mt) * dC + dc_new * f
        return dxp, dW

    return T.make_op(out, (xp, W_hh), bw)


def bilstm_scan(xp_f: Tensor, xp_b: Tensor, W_f: Tensor, W_b: Tensor,
                mask: np.ndarray | None = None) -> Tensor:
    """Both directions of :func:`lstm_scan` in one loop, outputs concatenated.

    The directions are stacked on a leading axis so each time step costs one
    batched matmul; results match two separate scans.
    """
    B, L, four_h = xp_f.shape
    h = four_h // 4
    m = np.ones((B, L)) if mask is None else np.asarray(mask, dtype=np.float64)
    W = np.stack([W_f.data, W_b.data])                 # (2, h, 4h)
    xs = np.stack([xp_f.data, xp_b.data[:, ::-1]])      # backward direction time-reversed
    ms = np.stack([m, m[:, ::-1]])[..., None]           # (2, B, L, 1)
    hs = np.zeros((2, B, h))
    cs = np.zeros((2, B, h))
    out = np.zeros((2, B, L, h))
    saved = []
    for k in range(L):
        a = xs[:, :, k] + hs @ W
        i = T._sigmoid(a[..., :h])
        f = T._sigmoid(a[..., h:2 * h])
        g = np.tanh(a[..., 2 * h:3 * h])
        o = T._sigmoid(a[..., 3 * h:])
        c_new = f * cs + i * g
        tc = np.tanh(c_new)
        h_new = o * tc
        mk = ms[:, :, k]
        saved.append((hs, cs, i, f, g, o, tc))
        out[:, :, k] = mk * h_new
        cs = mk * c_new + (1.0 - mk) * cs
        hs = mk * h_new + (1.0 - mk) * hs
    result = np.concatenate([out[0], out[1][:, ::-1]], axis=-1)

    def bw(gout):
        g_out = np.stack([gout[..., :h], gout[..., h:][:, ::-1]])
        dxs = np.zeros_like(xs)
        dW = np.zeros_like(W)
        dH = np.zeros((2, B, h))
        dC = np.zeros((2, B, h))
        WT = np.swapaxes(W, -1, -2)
        for k in range(L - 1, -1, -1):
            h_prev, c_prev, i, f, g, o, tc = saved[k]
            mk = ms[:, :, k]
            dh_new = mk * (g_out[:, :, k] + dH)
            dc_new = mk * dC + dh_new * o * (1.0 - tc * tc)
            da = np.concatenate([
                dc_new * g * i * (1.0 - i),
                dc_new * c_prev * f * (1.0 - f),
                dc_new * i * (1.0 - g * g),
                dh_new * tc * o * (1.0 - o),
            ], axis=-1)
            dxs[:, :, k] = da
            dW += np.swapaxes(h_prev, -1, -2) @ da
            dH = (1.0 - mk) * dH + da @ WT
            dC = (1.0 - mk) * dC + dc_new * f
        return dxs[0], dxs[1][:, ::-1], dW[0], dW[1]

    return T.make_op(result, (xp_f, xp_b, W_f, W_b), bw)


def lstm_scan_reference(xp: Tensor, W_hh: Tensor, mask: np.ndarray | None = None,
                        reverse: bool = False) -> Tensor:
    """Same recurrence as :func:`lstm_scan`, composed from primitive ops."""
    B, L, four_h = xp.shape
    h = four_h // 4
    m = np.ones((B, L)) if mask is None else np.asarray(mask, dtype=np.float64)
    order = range(L - 1, -1, -1) if reverse else range(L)
    hs = Tensor(np.zeros((B, h)))
    cs = Tensor(np.zeros((B, h)))
    outs = [None] * L
    for t in order:
        a = xp[:, t] + hs @ W_hh
        i = T.sigmoid(a[:, :h])
        f = T.sigmoid(a[:, h:2 * h])
        g = T.tanh(a[:, 2 * h:3 * h])
        o = T.sigmoid(a[:, 3 * h:])
        c_new = f * cs + i * g
        h_new = o * T.tanh(c_new)
        mt = m[:, t:t + 1]
        outs[t] = h_new * mt
        cs = c_new * mt + cs * (1.0 - mt)
        hs = h_new * mt + hs * (1.0 - mt)
    return T.stack(outs, axis=1)


class LSTM(Module):
    """Single-direction LSTM layer."""

    def __init__(self, rng, in_dim: int, hidden: int):
        self.hidden = hidden
        self.W_ih = param(uniform(rng, (in_dim, 4 * hidden), in_dim))
        self.W_hh = param(np.concatenate([orthogonal(rng, hidden) for _ in range(4)], axis=1))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate
        self.b = param(b)

    def __call__(self, x: Tensor, mask=None, reverse: bool = False, fused: bool = True) -> Tensor:
        if x.shape[-1] != self.W_ih.shape[0]:
            raise T.DimensionError(f"LSTM expects {self.W_ih.shape[0]} input features, got {x.shape}")
        xp = x @ self.W_ih + self.b
        scan = lstm_scan if fused else lstm_scan_reference
        return scan(xp, self.W_hh, mask, reverse)


class BiLSTM(Module):
    """Forward and backward LSTMs; outputs concatenated as [fwd; bwd]."""

    def __init__(self, rng, in_dim: int, hidden: int):
        self.fwd = LSTM(rng, in_dim, hidden)
        self.bwd = LSTM(rng, in_dim, hidden)

    def __call__(self, x: Tensor, mask=None, fused: bool = True) -> Tensor:
        if not fused:
            return T.concat([self.fwd(x, mask, reverse=False, fused=False),
                             self.bwd(x, mask, reverse=True, fused=False)], axis=-1)
        for lstm in (self.fwd, self.bwd):
            if x.shape[-1] != lstm.W_ih.shape[0]:
                raise T.DimensionError(f"LSTM expects {lstm.W_ih.shape[0]} input features, got {x.shape}")
        h = self.fwd.hidden
        # one input projection for both directions
        W_ih = T.concat([self.fwd.W_ih, self.bwd.W_ih], axis=1)
        b = T.concat([self.fwd.b, self.bwd.b], axis=0)
        xp = x @ W_ih + b
        return bilstm_scan(xp[..., :4 * h], xp[..., 4 * h:], self.fwd.W_hh, self.bwd.W_hh, mask)


# --------------------------------------------------------------------------
# GRU


class GRUCell(Module):
    """s' = (1 - z) * s + z * tanh(x Wn + (r * s) Un + bn).

    Weight columns are laid out update | reset | candidate.
    """

    def __init__(self, rng, in_dim: int, state_dim: int):
        self.state_dim = state_dim
        self.W_x = param(uniform(rng, (in_dim, 3 * state_dim), in_dim))
        self.W_h = param(np.concatenate([orthogonal(rng, state_dim) for _ in range(3)], axis=1))
        self.b = param(np.zeros(3 * state_dim))

    def __call__(self, s_prev: Tensor, x: Tensor) -> Tensor:
        n = self.state_dim
        if s_prev.shape[-1] != n or x.shape[-1] != self.W_x.shape[0]:
            raise T.DimensionError(f"GRU state/input mismatch: {s_prev.shape}, {x.shape}")
        gx = x @ self.W_x + self.b
        gh = s_prev @ self.W_h[:, :2 * n]
        z = T.sigmoid(gx[..., :n] + gh[..., :n])
        r = T.sigmoid(gx[..., n:2 * n] + gh[..., n:])
        cand = T.tanh(gx[..., 2 * n:] + (r * s_prev) @ self.W_h[:, 2 * n:])
        return s_prev + z * (cand - s_prev)
