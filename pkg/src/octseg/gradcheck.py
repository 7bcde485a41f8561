"""Central finite-difference gradient verification."""
from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor


def finite_difference_check(build, arrays: list[np.ndarray], step: float = 1e-5) -> float:
    """Compare analytic gradients of a scalar-valued tape program to central
    finite differences.

    ``build(tape, tensors)`` must construct and return a scalar Tensor from
    the given leaf tensors (one per input array). Returns the worst relative
    error over all inputs, where the relative error of a gradient entry is
    |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    tape = Tape()
    tensors = [tape.tensor(a.copy()) for a in arrays]
    loss = build(tape, tensors)
    tape.backward(loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def forward(perturbed: list[np.ndarray]) -> float:
        t2 = Tape()
        return float(build(t2, [t2.tensor(a) for a in perturbed]).data)

    worst = 0.0
    for which, a in enumerate(arrays):
        flat = a.reshape(-1)
        numeric = np.zeros_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = forward(arrays)
            flat[i] = orig - step
            lo = forward(arrays)
            flat[i] = orig
            numeric[i] = (hi - lo) / (2.0 * step)
        ana = analytic[which].reshape(-1)
        denom = np.maximum(1.0, np.maximum(np.abs(ana), np.abs(numeric)))
        err = float(np.max(np.abs(ana - numeric) / denom)) if flat.size else 0.0
        worst = max(worst, err)
    return worst


def network_gradient_check(params, config, plan, features: np.ndarray,
                           labels: np.ndarray, step: float = 1e-5) -> float:
    """Finite-difference check of every network parameter against the tape.

    Returns the worst relative error over all parameter entries.
    """
    from .autodiff import softmax_cross_entropy
    from .network import network_forward

    def loss_value() -> float:
        result = network_forward(params, config, plan, features)
        return float(softmax_cross_entropy(result.logits, labels).data)

    for p in params.parameters():
        p.zero_grad()
    result = network_forward(params, config, plan, features)
    loss = softmax_cross_entropy(result.logits, labels)
    result.tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params.parameters()}

    worst = 0.0
    for p in params.parameters():
        flat = p.data.reshape(-1)
        ana = analytic[p.name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = loss_value()
            flat[i] = orig - step
            lo = loss_value()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * step)
            denom = max(1.0, abs(ana[i]), abs(numeric))
            worst = max(worst, abs(ana[i] - numeric) / denom)
    return worst
