"""Weight-noise sensitivity of an MLP and its gradient.

The sensitivity of a net on a batch is

    S(w) = mean_n  sum_k  sum_{l,ij} |w^l_ij| * |dO_k/dw^l_ij|   (sample n)

Its gradient needs a Hessian-vector product per output, which is computed
with Pearlmutter's R-operator: one extra forward pass for R{x}, R{a} and one
extra backward pass for R{dO_k/dx}.  ``rop_forward``/``rop_backward`` take a
direction shared by the whole batch; ``sensitivity_gradient`` uses the
per-sample directions V = |w| * sign(dO_k/dw) and exploits their outer-product
sign structure so that no per-sample weight tensors are materialized.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .network import (
    ForwardTrace,
    Gradients,
    Mlp,
    activation_grad,
    activation_grad2,
    forward,
    output_deltas,
)
from .linalg import ShapeError


@dataclass
class RTrace:
    pre: list[np.ndarray]  # R{x^l}
    post: list[np.ndarray]  # R{a^l}

    def layer_input(self, l: int, batch: int, width: int) -> np.ndarray:
        # R{a^0} = 0: inputs do not depend on the weights.
        return np.zeros((batch, width)) if l == 0 else self.post[l - 1]


def _check_direction(net: Mlp, v: list[np.ndarray]) -> None:
    if len(v) != len(net.layers):
        raise ShapeError("direction must have one matrix per layer")
    for l, (layer, vl) in enumerate(zip(net.layers, v)):
        if np.shape(vl) != layer.weights.shape:
            raise ShapeError(f"direction layer {l} shape {np.shape(vl)} != {layer.weights.shape}")


def _grad(layer, x, h):
    return activation_grad(layer.activation, x, h)


def rop_forward(net: Mlp, trace: ForwardTrace, v: list[np.ndarray]) -> RTrace:
    """R_V{x^l} and R_V{a^l} for a weight direction ``v`` shared by the batch."""
    _check_direction(net, v)
    if trace.approximate:
        raise ValueError("R-operator passes need an exact forward trace")
    r_pre, r_post = [], []
    r_a = np.zeros_like(trace.inputs)
    for l, layer in enumerate(net.layers):
        r_x = trace.layer_input(l) @ v[l].T + r_a @ layer.weights.T
        r_a = _grad(layer, trace.pre[l], trace.post[l]) * r_x
        r_pre.append(r_x)
        r_post.append(r_a)
    return RTrace(r_pre, r_post)


def rop_backward(
    net: Mlp,
    trace: ForwardTrace,
    rtrace: RTrace,
    v: list[np.ndarray],
    k: int,
) -> Gradients:
    """R_V{dO_k/dparams}: the Hessian of O_k times ``v``, batch-averaged."""
    _check_direction(net, v)
    if len(rtrace.pre) != len(net.layers):
        raise ShapeError("R-trace does not match the network")
    deltas = output_deltas(net, trace, k)
    n = len(net.layers)
    b = trace.inputs.shape[0]
    last = net.layers[-1]

    r_delta = np.zeros_like(trace.pre[-1])
    r_delta[:, k] = (
        activation_grad2(last.activation, trace.pre[-1][:, k], trace.post[-1][:, k])
        * rtrace.pre[-1][:, k]
    )
    gw: list[np.ndarray] = [None] * n
    gb: list[np.ndarray] = [None] * n
    for l in range(n - 1, -1, -1):
        delta = deltas[l]
        a_in = trace.layer_input(l)
        r_a_in = rtrace.layer_input(l, b, a_in.shape[1])
        gw[l] = (r_delta.T @ a_in + delta.T @ r_a_in) / b
        gb[l] = r_delta.sum(axis=0) / b
        if l:
            prev = net.layers[l - 1]
            x, h = trace.pre[l - 1], trace.post[l - 1]
            back = delta @ net.layers[l].weights
            r_delta = (
                activation_grad2(prev.activation, x, h) * rtrace.pre[l - 1] * back
                + _grad(prev, x, h) * (delta @ v[l])
                + _grad(prev, x, h) * (r_delta @ net.layers[l].weights)
            )
    return Gradients(gw, gb)


def sensitivity_map(net: Mlp, batch: np.ndarray) -> list[np.ndarray]:
    """Per-weight mean_n sum_k |w||dO_k/dw|, one array per layer."""
    trace = forward(net, batch)
    b = trace.inputs.shape[0]
    abs_in = [np.abs(trace.layer_input(l)) for l in range(len(net.layers))]
    acc = [np.zeros_like(layer.weights) for layer in net.layers]
    for k in range(net.topology[-1]):
        for l, d in enumerate(output_deltas(net, trace, k)):
            # |d ⊗ a| = |d| ⊗ |a|, so the per-sample sum is one matmul.
            acc[l] += np.abs(d).T @ abs_in[l]
    return [np.abs(layer.weights) * m / b for layer, m in zip(net.layers, acc)]


def sensitivity_value(net: Mlp, batch: np.ndarray) -> float:
    if np.asarray(batch).shape[0] == 0:
        raise ValueError("sensitivity needs a nonempty batch")
    return float(sum(m.sum() for m in sensitivity_map(net, batch)))


def sensitivity_gradient(net: Mlp, batch: np.ndarray) -> Gradients:
    """dS/dparams on the batch.

    For each output k and sample n the direction is
    V = |W| * (sign(delta_n) ⊗ sign(a_n)), so

        V a_n                = sign(delta_n) * (|W| |a_n|)
        sum_j delta_j V_ji   = sign(a_i) * (|delta_n| |W|)_i

    which turns the per-sample R-passes into batched matmuls.
    """
    batch = np.asarray(batch, dtype=np.float64)
    if batch.shape[0] == 0:
        raise ValueError("sensitivity needs a nonempty batch")
    trace = forward(net, batch)
    layers = net.layers
    n = len(layers)
    b = batch.shape[0]
    a_in = [trace.layer_input(l) for l in range(n)]
    abs_in = [np.abs(a) for a in a_in]
    sign_in = [np.sign(a) for a in a_in]
    abs_w = [np.abs(layer.weights) for layer in layers]
    grads = net.zeros_like()

    for k in range(net.topology[-1]):
        deltas = output_deltas(net, trace, k)
        sign_d = [np.sign(d) for d in deltas]

        r_pre, r_post = [], []
        r_a = np.zeros_like(batch)
        for l, layer in enumerate(layers):
            r_x = sign_d[l] * (abs_in[l] @ abs_w[l].T) + r_a @ layer.weights.T
            r_a = _grad(layer, trace.pre[l], trace.post[l]) * r_x
            r_pre.append(r_x)
            r_post.append(r_a)

        last = layers[-1]
        r_delta = np.zeros_like(trace.pre[-1])
        r_delta[:, k] = (
            activation_grad2(last.activation, trace.pre[-1][:, k], trace.post[-1][:, k]) * r_pre[-1][:, k]
        )
        for l in range(n - 1, -1, -1):
            d = deltas[l]
            r_a_in = r_post[l - 1] if l else np.zeros_like(batch)
            grads.weights[l] += (
                np.sign(layers[l].weights) * (np.abs(d).T @ abs_in[l])
                + r_delta.T @ a_in[l]
                + d.T @ r_a_in
            )
            grads.biases[l] += r_delta.sum(axis=0)
            if l:
                prev = layers[l - 1]
                x, h = trace.pre[l - 1], trace.post[l - 1]
                g1 = _grad(prev, x, h)
                r_delta = (
                    activation_grad2(prev.activation, x, h) * r_pre[l - 1] * (d @ layers[l].weights)
                    + g1 * sign_in[l] * (np.abs(d) @ abs_w[l])
                    + g1 * (r_delta @ layers[l].weights)
                )
    return grads.scaled(1.0 / b)


@dataclass
class SensitivityState:
    gamma: float = 0.0
    delta_gamma: float = 1e-4
    accuracy_bound: float = 0.0
    error_history: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")


def reference_error(history: list[float]) -> float | None:
    """Weighted sum 1/2, 1/4, 1/8 ... of past errors, newest first, renormalized."""
    if not history:
        return None
    weights = 0.5 ** np.arange(1, len(history) + 1)
    newest_first = np.asarray(history[::-1], dtype=np.float64)
    return float(weights @ newest_first / weights.sum())


def update_gamma(state: SensitivityState, epoch_error: float) -> SensitivityState:
    if epoch_error < 0:
        raise ValueError("epoch error must be non-negative")
    ref = reference_error(state.error_history)
    improving = ref is not None and epoch_error < ref
    if improving or epoch_error < state.accuracy_bound:
        gamma = state.gamma + state.delta_gamma
    else:
        gamma = max(0.0, state.gamma - state.delta_gamma)
    return replace(state, gamma=gamma, error_history=state.error_history + [float(epoch_error)])
