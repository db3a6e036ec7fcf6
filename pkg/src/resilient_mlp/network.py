"""Multilayer perceptron: forward passes, MSE loss, backprop and SGD."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .fixedpoint import HardwareModel, approx_forward_linear, ste_backward
from .linalg import RNG_ALGORITHM, Rng, ShapeError

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "sigmoid", "identity")


def activate(name: str, x: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "sigmoid":
        # Split by sign so exp never overflows.
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return out
    if name == "identity":
        return x.copy()
    raise ValueError(f"unknown activation {name!r}")


def activation_grad(name: str, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """h'(x), given the activation output ``h`` for the same ``x``."""
    if name == "relu":
        return (x > 0).astype(np.float64)
    if name == "sigmoid":
        return h * (1.0 - h)
    if name == "identity":
        return np.ones_like(x)
    raise ValueError(f"unknown activation {name!r}")


def activation_grad2(name: str, x: np.ndarray, h: np.ndarray) -> np.ndarray:
    """h''(x); zero for the piecewise-linear activations."""
    if name == "sigmoid":
        return h * (1.0 - h) * (1.0 - 2.0 * h)
    if name in ("relu", "identity"):
        return np.zeros_like(x)
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class Layer:
    weights: np.ndarray  # (fan_out, fan_in)
    bias: np.ndarray  # (fan_out,)
    activation: str


class Mlp:
    def __init__(self, layers: list[Layer]):
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for i, layer in enumerate(layers):
            if layer.activation not in ACTIVATIONS:
                raise ValueError(f"layer {i}: unknown activation {layer.activation!r}")
            if layer.bias.shape != (layer.weights.shape[0],):
                raise ShapeError(f"layer {i}: bias shape {layer.bias.shape} vs weights {layer.weights.shape}")
            if i and layer.weights.shape[1] != layers[i - 1].weights.shape[0]:
                raise ShapeError(f"layer {i}: fan_in {layer.weights.shape[1]} does not chain")
        self.layers = layers
        self.seed: int | None = None

    @classmethod
    def init(
        cls,
        topology: list[int],
        rng: Rng,
        hidden: str = "relu",
        output: str = "sigmoid",
    ) -> "Mlp":
        """Glorot-uniform weights and zero biases."""
        if len(topology) < 2:
            raise ValueError("topology needs at least input and output widths")
        layers = []
        for i, (fan_in, fan_out) in enumerate(zip(topology[:-1], topology[1:])):
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            w = (2.0 * rng.uniform((fan_out, fan_in)) - 1.0) * bound
            act = output if i == len(topology) - 2 else hidden
            layers.append(Layer(w, np.zeros(fan_out), act))
        net = cls(layers)
        net.seed = rng.seed if isinstance(rng.seed, int) else None
        return net

    @property
    def topology(self) -> list[int]:
        return [self.layers[0].weights.shape[1]] + [l.weights.shape[0] for l in self.layers]

    @property
    def activations(self) -> list[str]:
        return [l.activation for l in self.layers]

    def copy(self) -> "Mlp":
        net = Mlp([Layer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers])
        net.seed = self.seed
        return net

    def zeros_like(self) -> "Gradients":
        return Gradients(
            [np.zeros_like(l.weights) for l in self.layers],
            [np.zeros_like(l.bias) for l in self.layers],
        )

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(l.weights)) and np.all(np.isfinite(l.bias)) for l in self.layers)


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)  # x^l per layer
    post: list[np.ndarray] = field(default_factory=list)  # a^l per layer
    approximate: bool = False

    @property
    def outputs(self) -> np.ndarray:
        return self.post[-1]

    def layer_input(self, l: int) -> np.ndarray:
        return self.inputs if l == 0 else self.post[l - 1]


@dataclass
class Gradients:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __add__(self, other: "Gradients") -> "Gradients":
        return Gradients(
            [a + b for a, b in zip(self.weights, other.weights)],
            [a + b for a, b in zip(self.biases, other.biases)],
        )

    def scaled(self, c: float) -> "Gradients":
        return Gradients([c * w for w in self.weights], [c * b for b in self.biases])

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.weights + self.biases)

    def max_abs(self) -> float:
        return max(float(np.max(np.abs(a))) for a in self.weights + self.biases)


def forward(
    net: Mlp,
    batch: np.ndarray,
    hw: HardwareModel | None = None,
    rng: Rng | None = None,
) -> ForwardTrace:
    """Run the batch through the net, exactly or through ``hw``.

    Biases are always added exactly; only weight-activation products and
    weight storage are subject to the hardware model.
    """
    a = np.asarray(batch, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != net.topology[0]:
        raise ShapeError(f"batch shape {a.shape} does not match input width {net.topology[0]}")
    approximate = hw is not None
    trace = ForwardTrace(inputs=a, approximate=approximate)
    for l, layer in enumerate(net.layers):
        with np.errstate(over="ignore", invalid="ignore"):
            if approximate:
                x = approx_forward_linear(a, layer.weights, hw, rng) + layer.bias
            else:
                x = a @ layer.weights.T + layer.bias
        if not np.all(np.isfinite(x)):
            raise FloatingPointError(f"non-finite pre-activation in layer {l}")
        a = activate(layer.activation, x)
        trace.pre.append(x)
        trace.post.append(a)
    return trace


def predict(net: Mlp, batch: np.ndarray, hw: HardwareModel | None = None, rng: Rng | None = None) -> np.ndarray:
    return forward(net, batch, hw, rng).outputs


def loss(outputs: np.ndarray, targets: np.ndarray) -> float:
    """Mean squared error over batch and output units."""
    outputs = np.asarray(outputs, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if outputs.shape != targets.shape:
        raise ShapeError(f"outputs {outputs.shape} vs targets {targets.shape}")
    return float(np.mean((outputs - targets) ** 2))


def _check_trace(net: Mlp, trace: ForwardTrace) -> None:
    if len(trace.pre) != len(net.layers):
        raise ShapeError("trace does not belong to this network (layer count)")
    for l, layer in enumerate(net.layers):
        if trace.pre[l].shape[1] != layer.weights.shape[0]:
            raise ShapeError(f"stale trace: layer {l} width {trace.pre[l].shape[1]} != {layer.weights.shape[0]}")
    if trace.inputs.shape[1] != net.topology[0]:
        raise ShapeError("stale trace: input width mismatch")


def _backprop(net: Mlp, trace: ForwardTrace, delta: np.ndarray) -> Gradients:
    """Propagate dE/dx of the last layer down to all weights.

    Weight gradients are summed over the batch rows of ``delta``.
    """
    n = len(net.layers)
    gw: list[np.ndarray] = [None] * n
    gb: list[np.ndarray] = [None] * n
    for l in range(n - 1, -1, -1):
        if trace.approximate:
            delta = ste_backward(delta)
        a_in = trace.layer_input(l)
        gw[l] = delta.T @ a_in
        gb[l] = delta.sum(axis=0)
        if l:
            prev = net.layers[l - 1]
            delta = (delta @ net.layers[l].weights) * activation_grad(
                prev.activation, trace.pre[l - 1], trace.post[l - 1]
            )
    return Gradients(gw, gb)


def backward(net: Mlp, trace: ForwardTrace, targets: np.ndarray) -> Gradients:
    """Gradients of the batch-mean MSE loss with respect to every parameter."""
    _check_trace(net, trace)
    out = trace.outputs
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != out.shape:
        raise ShapeError(f"targets {targets.shape} vs outputs {out.shape}")
    last = net.layers[-1]
    d_out = 2.0 * (out - targets) / out.size
    delta = d_out * activation_grad(last.activation, trace.pre[-1], out)
    return _backprop(net, trace, delta)


def output_deltas(net: Mlp, trace: ForwardTrace, k: int) -> list[np.ndarray]:
    """Per-sample dO_k/dx^l for every layer, each of shape (batch, width_l)."""
    _check_trace(net, trace)
    width = net.topology[-1]
    if not 0 <= k < width:
        raise IndexError(f"output index {k} out of range for {width} outputs")
    n = len(net.layers)
    deltas: list[np.ndarray] = [None] * n
    last = net.layers[-1]
    delta = np.zeros_like(trace.pre[-1])
    delta[:, k] = activation_grad(last.activation, trace.pre[-1][:, k], trace.post[-1][:, k])
    deltas[-1] = delta
    for l in range(n - 1, 0, -1):
        prev = net.layers[l - 1]
        delta = (delta @ net.layers[l].weights) * activation_grad(prev.activation, trace.pre[l - 1], trace.post[l - 1])
        deltas[l - 1] = delta
    return deltas


def output_jacobian_row(net: Mlp, trace: ForwardTrace, k: int) -> Gradients:
    """dO_k/dparams, averaged over the batch (exact for a single sample)."""
    deltas = output_deltas(net, trace, k)
    b = trace.inputs.shape[0]
    return Gradients(
        [d.T @ trace.layer_input(l) / b for l, d in enumerate(deltas)],
        [d.sum(axis=0) / b for d in deltas],
    )


def sgd_step(net: Mlp, grads: Gradients, eta: float) -> Mlp:
    if eta < 0:
        raise ValueError("learning rate must be non-negative")
    for layer, gw, gb in zip(net.layers, grads.weights, grads.biases):
        if gw.shape != layer.weights.shape or gb.shape != layer.bias.shape:
            raise ShapeError("gradient shapes do not mirror the network")
        layer.weights -= eta * gw
        layer.bias -= eta * gb
    return net


def predicted_labels(outputs: np.ndarray) -> np.ndarray:
    # A single output unit encodes a binary decision at 0.5.
    if outputs.shape[1] == 1:
        return (outputs[:, 0] > 0.5).astype(np.int64)
    return np.argmax(outputs, axis=1)


def accuracy(outputs: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(predicted_labels(outputs) == np.asarray(labels)))


# -- checkpoints -----------------------------------------------------------


def _fmt_row(values: np.ndarray) -> str:
    return " ".join(repr(v) for v in values.ravel().tolist())


def save_checkpoint(net: Mlp, path, seed: int | None = None, rng_algorithm: str = RNG_ALGORITHM) -> None:
    """Plain-text checkpoint; every float is written with ``repr`` so it round-trips."""
    if not net.all_finite():
        raise FloatingPointError("refusing to checkpoint a network with non-finite parameters")
    seed = net.seed if seed is None else seed
    header = (
        f"resilient-mlp-checkpoint version={CHECKPOINT_VERSION} "
        f"topology={','.join(map(str, net.topology))} "
        f"activations={','.join(net.activations)} "
        f"rng={rng_algorithm} seed={'none' if seed is None else seed}"
    )
    lines = [header]
    lines += [_fmt_row(l.weights) for l in net.layers]
    lines += [_fmt_row(l.bias) for l in net.layers]
    with open(path, "w", encoding="ascii") as f:
        f.write("\n".join(lines) + "\n")


def load_checkpoint(path) -> Mlp:
    with open(path, encoding="ascii") as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("resilient-mlp-checkpoint "):
        raise ValueError(f"{path}: not a checkpoint file")
    meta = dict(tok.split("=", 1) for tok in lines[0].split()[1:])
    if int(meta["version"]) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {meta['version']}")
    topology = [int(t) for t in meta["topology"].split(",")]
    acts = meta["activations"].split(",")
    n = len(topology) - 1
    if len(acts) != n or len(lines) < 1 + 2 * n:
        raise ValueError(f"{path}: truncated checkpoint")
    layers = []
    for i in range(n):
        w = np.array([float(t) for t in lines[1 + i].split()], dtype=np.float64)
        b = np.array([float(t) for t in lines[1 + n + i].split()], dtype=np.float64)
        fan_in, fan_out = topology[i], topology[i + 1]
        if w.size != fan_in * fan_out or b.size != fan_out:
            raise ValueError(f"{path}: layer {i} has wrong parameter count")
        layers.append(Layer(w.reshape(fan_out, fan_in), b, acts[i]))
    net = Mlp(layers)
    net.seed = None if meta.get("seed", "none") == "none" else int(meta["seed"])
    return net
