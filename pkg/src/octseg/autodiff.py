"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A Tape records one backward closure per operation in execution order;
``Tape.backward`` replays them in exact reverse order. Only the operations
the segmentation network needs are provided, each with a deterministic
forward (fixed reduction order) and an exact analytic backward.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class Tensor:
    """Dense float64 value tracked on a tape."""

    __slots__ = ("data", "grad", "tape")

    def __init__(self, data: np.ndarray, tape: "Tape"):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accum(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g


@dataclass
class Parameter:
    """Named learnable weight with a persistent gradient accumulator."""

    name: str
    data: np.ndarray
    grad: np.ndarray

    @staticmethod
    def zeros(name: str, shape: tuple[int, ...]) -> "Parameter":
        return Parameter(name, np.zeros(shape), np.zeros(shape))

    @staticmethod
    def he_uniform(name: str, shape: tuple[int, ...], fan_in: int,
                   rng: np.random.Generator) -> "Parameter":
        """Uniform init with variance 2/fan_in, sized for ReLU stacks."""
        bound = np.sqrt(6.0 / fan_in)
        data = rng.uniform(-bound, bound, size=shape)
        return Parameter(name, data, np.zeros(shape))

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


class Tape:
    """Execution-ordered record of differentiable operations."""

    def __init__(self):
        self._records: list = []

    def tensor(self, data) -> Tensor:
        """Wrap a constant/leaf array; gradients accumulate on the Tensor."""
        return Tensor(data, self)

    def watch(self, param: Parameter) -> Tensor:
        """Use a Parameter on this tape; backward adds into param.grad."""
        t = Tensor(param.data, self)

        def backward():
            if t.grad is not None:
                param.grad += t.grad

        self._records.append(backward)
        return t

    def backward(self, loss: Tensor) -> None:
        if loss.data.size != 1:
            raise ValueError("backward expects a scalar loss")
        loss.grad = np.ones_like(loss.data)
        for record in reversed(self._records):
            record()

    def release(self) -> None:
        """Drop the recorded closures.

        Tensors hold the tape and the closures hold tensors, a reference
        cycle that keeps every intermediate array alive until a gc pass.
        Releasing breaks the cycle so buffers free by refcount; call it once
        a forward (and backward, if any) is finished.
        """
        self._records.clear()


def _out(tape: Tape, data: np.ndarray, backward) -> Tensor:
    t = Tensor(data, tape)
    tape._records.append(backward)
    return t


def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """x @ W + b on the last axis of x."""
    d_in, d_out = W.data.shape
    if x.data.shape[-1] != d_in or b.data.shape != (d_out,):
        raise ValueError(f"linear shape mismatch: x {x.data.shape}, W {W.data.shape}, b {b.data.shape}")
    out_data = x.data @ W.data + b.data
    out = _out(x.tape, out_data, None)

    def backward():
        g = out.grad
        if g is None:
            return
        x._accum(g @ W.data.T)
        x2 = x.data.reshape(-1, d_in)
        g2 = g.reshape(-1, d_out)
        W._accum(x2.T @ g2)
        b._accum(g2.sum(axis=0))

    out.tape._records[-1] = backward
    return out


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    mask = x.data > 0.0
    out = _out(x.tape, np.where(mask, x.data, 0.0), None)

    def backward():
        if out.grad is not None:
            x._accum(np.where(mask, out.grad, 0.0))

    out.tape._records[-1] = backward
    return out


def gather_rows(x: Tensor, idx) -> Tensor:
    """out[j] = x[idx[j]]; backward scatter-adds, so repeated rows accumulate."""
    idx = np.asarray(idx, dtype=np.int64)
    n = x.data.shape[0]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise ValueError(f"gather index out of range [0, {n})")
    out = _out(x.tape, x.data[idx], None)

    def backward():
        if out.grad is not None:
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad)
            x._accum(g)

    out.tape._records[-1] = backward
    return out


def group_max_pool(x: Tensor) -> Tensor:
    """(M, K, d) -> (M, d) channel-wise max over the group axis.

    Gradient flows only to the argmax slot; ties go to the lowest k.
    """
    if x.data.ndim != 3:
        raise ValueError(f"group_max_pool expects (M, K, d), got {x.data.shape}")
    arg = np.argmax(x.data, axis=1)  # first occurrence -> lowest k on ties
    m, _, d = x.data.shape
    mi, di = np.ogrid[:m, :d]
    out = _out(x.tape, x.data[mi, arg, di], None)

    def backward():
        if out.grad is not None:
            g = np.zeros_like(x.data)
            g[mi, arg, di] = out.grad
            x._accum(g)

    out.tape._records[-1] = backward
    return out


def axis_conv2(V: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """Collapse a length-2 axis with full channel mixing.

    V: (N, 2, R, d_in), W: (2, d_in, d_out), b: (d_out,) ->
    out: (N, 1, R, d_out) where out[n, 0, r] = V[n,0,r]@W[0] + V[n,1,r]@W[1] + b.
    The activation is applied by the caller.
    """
    if V.data.ndim != 4 or V.data.shape[1] != 2:
        raise ValueError(f"axis_conv2 expects (N, 2, R, d_in), got {V.data.shape}")
    if W.data.shape != (2, V.data.shape[3], b.data.shape[0]):
        raise ValueError(f"axis_conv2 weight shape mismatch: V {V.data.shape}, W {W.data.shape}")
    out_data = V.data[:, 0] @ W.data[0] + V.data[:, 1] @ W.data[1] + b.data
    out = _out(V.tape, out_data[:, None], None)

    def backward():
        g = out.grad
        if g is None:
            return
        g0 = g[:, 0]  # (N, R, d_out)
        dv = np.empty_like(V.data)
        dv[:, 0] = g0 @ W.data[0].T
        dv[:, 1] = g0 @ W.data[1].T
        V._accum(dv)
        d_in = V.data.shape[3]
        d_out = g0.shape[-1]
        g2 = g0.reshape(-1, d_out)
        dw = np.empty_like(W.data)
        dw[0] = V.data[:, 0].reshape(-1, d_in).T @ g2
        dw[1] = V.data[:, 1].reshape(-1, d_in).T @ g2
        W._accum(dw)
        b._accum(g2.sum(axis=0))

    out.tape._records[-1] = backward
    return out


def concat_channels(xs: list[Tensor]) -> Tensor:
    """Concatenate along the last axis; leading shapes must agree."""
    lead = xs[0].data.shape[:-1]
    for x in xs:
        if x.data.shape[:-1] != lead:
            raise ValueError("concat_channels leading shapes differ")
    out = _out(xs[0].tape, np.concatenate([x.data for x in xs], axis=-1), None)
    splits = np.cumsum([x.data.shape[-1] for x in xs])[:-1]

    def backward():
        if out.grad is not None:
            for x, g in zip(xs, np.split(out.grad, splits, axis=-1)):
                x._accum(g)

    out.tape._records[-1] = backward
    return out


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = _out(x.tape, x.data.reshape(shape), None)

    def backward():
        if out.grad is not None:
            x._accum(out.grad.reshape(x.data.shape))

    out.tape._records[-1] = backward
    return out


def moveaxis(x: Tensor, src: int, dst: int) -> Tensor:
    out = _out(x.tape, np.ascontiguousarray(np.moveaxis(x.data, src, dst)), None)

    def backward():
        if out.grad is not None:
            x._accum(np.moveaxis(out.grad, dst, src))

    out.tape._records[-1] = backward
    return out


def weighted_gather_sum(x: Tensor, idx: np.ndarray, weights: np.ndarray) -> Tensor:
    """out[n] = sum_j weights[n, j] * x[idx[n, j]] (weights are constants)."""
    idx = np.asarray(idx, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if idx.shape != weights.shape or idx.ndim != 2:
        raise ValueError("idx and weights must both be (N, K)")
    out = _out(x.tape, np.einsum("njd,nj->nd", x.data[idx], weights), None)

    def backward():
        if out.grad is not None:
            g = np.zeros_like(x.data)
            np.add.at(g, idx, out.grad[:, None, :] * weights[:, :, None])
            x._accum(g)

    out.tape._records[-1] = backward
    return out


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean of -log softmax(logits)[label], max-stabilized."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.data.shape
    if labels.shape != (n,):
        raise ValueError(f"labels must be ({n},), got {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    probs = exp / exp.sum(axis=1, keepdims=True)
    nll = -(shifted[np.arange(n), labels] - np.log(exp.sum(axis=1)))
    out = _out(logits.tape, np.array(nll.mean()), None)

    def backward():
        if out.grad is not None:
            g = probs.copy()
            g[np.arange(n), labels] -= 1.0
            logits._accum(g * (float(out.grad) / n))

    out.tape._records[-1] = backward
    return out
