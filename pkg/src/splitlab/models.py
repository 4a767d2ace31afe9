"""Dense feed-forward networks with hand-written forward and backward passes.

Both halves of a split model are plain :class:`Network` objects. The input
gradient returned by :func:`backward` on the top network is exactly the
cut-layer gradient the label party sends back to the feature party.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .numerics import RngStream, as_matrix

ACTIVATIONS = ("relu", "identity")
_ACT_CODES = {"identity": 0, "relu": 1}

CHECKPOINT_MAGIC = b"SLMD"
CHECKPOINT_VERSION = 1


class NonFiniteError(FloatingPointError):
    pass


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weights = np.array(self.weights, dtype=np.float64, ndmin=2)
        self.bias = np.array(self.bias, dtype=np.float64).ravel()
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.bias.shape != (self.weights.shape[0],):
            raise ValueError(
                f"bias length {self.bias.size} does not match {self.weights.shape[0]} outputs"
            )

    @property
    def in_width(self):
        return self.weights.shape[1]

    @property
    def out_width(self):
        return self.weights.shape[0]


@dataclass
class Network:
    layers: list

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a network needs at least one layer")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_width != b.in_width:
                raise ValueError(f"layer widths do not chain: {a.out_width} -> {b.in_width}")

    @property
    def input_width(self):
        return self.layers[0].in_width

    @property
    def output_width(self):
        return self.layers[-1].out_width

    @property
    def widths(self):
        return [self.input_width] + [layer.out_width for layer in self.layers]

    @classmethod
    def init(cls, widths, activations, rng: RngStream) -> "Network":
        """Glorot-uniform weights, zero biases.

        ``activations`` has one entry per layer, i.e. ``len(widths) - 1``.
        """
        if len(activations) != len(widths) - 1:
            raise ValueError("need one activation per layer")
        layers = []
        for fan_in, fan_out, act in zip(widths[:-1], widths[1:], activations):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = (2.0 * rng.uniform((fan_out, fan_in)) - 1.0) * limit
            layers.append(DenseLayer(w, np.zeros(fan_out), act))
        return cls(layers)

    def copy(self) -> "Network":
        return Network(
            [DenseLayer(l.weights.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def parameters(self):
        for layer in self.layers:
            yield layer.weights
            yield layer.bias

    def __add__(self, other: "Network") -> "Network":
        """Stack two networks into one (used for monolithic reference runs)."""
        return Network(self.copy().layers + other.copy().layers)


def bottom_network(input_width, cut_width=16, hidden=64, rng=None) -> Network:
    return Network.init([input_width, hidden, cut_width], ["relu", "identity"], rng)


def top_network(cut_width, n_out, hidden=32, rng=None) -> Network:
    return Network.init([cut_width, hidden, n_out], ["relu", "identity"], rng)


@dataclass
class Trace:
    inputs: list = field(default_factory=list)  # input to each layer
    pre: list = field(default_factory=list)  # pre-activation of each layer
    output: np.ndarray = None


def forward(net: Network, X) -> Trace:
    X = as_matrix(X, "X")
    if X.shape[1] != net.input_width:
        raise ValueError(f"input has {X.shape[1]} columns, network expects {net.input_width}")
    trace = Trace()
    a = X
    for layer in net.layers:
        trace.inputs.append(a)
        z = a @ layer.weights.T + layer.bias
        trace.pre.append(z)
        a = np.maximum(z, 0.0) if layer.activation == "relu" else z
    trace.output = a
    return trace


def backward(net: Network, trace: Trace, grad_out):
    """Backpropagate ``grad_out`` (dL/d output).

    Returns ``(grads, grad_input)`` with ``grads`` a list of ``(dW, db)`` per
    layer and ``grad_input`` the per-row gradient with respect to the input.
    """
    grad_out = as_matrix(grad_out, "grad_out")
    if trace.output is None or grad_out.shape != trace.output.shape:
        raise ValueError(
            f"grad_out shape {grad_out.shape} does not match output "
            f"{None if trace.output is None else trace.output.shape}"
        )
    grads = [None] * len(net.layers)
    delta = grad_out
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == "relu":
            delta = delta * (trace.pre[i] > 0.0)
        grads[i] = (delta.T @ trace.inputs[i], delta.sum(axis=0))
        delta = delta @ layer.weights
    return grads, delta


def cross_entropy_soft(logits, targets):
    """Mean soft-target cross entropy on softmax(logits) and its logit gradient."""
    logits = as_matrix(logits, "logits")
    targets = as_matrix(targets, "targets")
    if logits.shape != targets.shape:
        raise ValueError(f"logits {logits.shape} and targets {targets.shape} differ")
    if targets.min(initial=0.0) < 0:
        raise ValueError("targets must be non-negative")
    if targets.size and np.abs(targets.sum(axis=1) - 1.0).max() > 1e-9:
        raise ValueError("target rows must sum to 1")
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    loss = float(-np.sum(targets * (shifted - np.log(z))) / n)
    grad = (e / z - targets) / n
    return loss, grad


def _raw_cross_entropy(logits, targets):
    # Same as cross_entropy_soft without the row-sum contract; used for the
    # literal (unnormalised) noised-target ablation.
    n = logits.shape[0]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_p = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    p = np.exp(log_p)
    loss = float(-np.sum(targets * log_p) / n)
    grad = (p * targets.sum(axis=1, keepdims=True) - targets) / n
    return loss, grad


@dataclass
class OptimizerState:
    learning_rate: float = 0.1
    schedule: str = "constant"  # or "inverse-time"
    decay: float = 1e-3
    step: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.schedule not in ("constant", "inverse-time"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def current_rate(self):
        if self.schedule == "constant":
            return self.learning_rate
        return self.learning_rate / (1.0 + self.decay * self.step)


def sgd_step(net: Network, grads, opt: OptimizerState) -> Network:
    """In-place ``theta -= eta * grad``; returns ``net`` for chaining."""
    if len(grads) != len(net.layers):
        raise ValueError("gradient list does not match layer count")
    for layer, (dw, db) in zip(net.layers, grads):
        if dw.shape != layer.weights.shape or np.shape(db) != layer.bias.shape:
            raise ValueError("gradient shapes do not match parameters")
        if not (np.all(np.isfinite(dw)) and np.all(np.isfinite(db))):
            raise NonFiniteError("non-finite gradient; aborting update")
    eta = opt.current_rate()
    for layer, (dw, db) in zip(net.layers, grads):
        layer.weights -= eta * dw
        layer.bias -= eta * db
    opt.step += 1
    return net


def save_checkpoint(net: Network, path):
    """Write ``net`` in the SLMD binary layout.

    magic "SLMD" | u16 version | u32 layer count | per layer:
    u32 out, u32 in, u8 activation, f64 LE weights (row-major), f64 LE bias
    """
    parts = [CHECKPOINT_MAGIC, struct.pack("<HI", CHECKPOINT_VERSION, len(net.layers))]
    for layer in net.layers:
        parts.append(struct.pack("<IIB", layer.out_width, layer.in_width, _ACT_CODES[layer.activation]))
        parts.append(layer.weights.astype("<f8").tobytes())
        parts.append(layer.bias.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path) -> Network:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not an SLMD checkpoint")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    codes = {v: k for k, v in _ACT_CODES.items()}
    pos = 10
    layers = []
    for _ in range(count):
        out_w, in_w, act = struct.unpack_from("<IIB", blob, pos)
        pos += 9
        nw, nb = out_w * in_w * 8, out_w * 8
        if pos + nw + nb > len(blob):
            raise ValueError("checkpoint truncated")
        w = np.frombuffer(blob, "<f8", out_w * in_w, pos).reshape(out_w, in_w)
        b = np.frombuffer(blob, "<f8", out_w, pos + nw)
        pos += nw + nb
        layers.append(DenseLayer(w.astype(np.float64), b.astype(np.float64), codes[act]))
    return Network(layers)
