"""Small dense networks with hand-written backpropagation and Adam."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

_ACT = {
    "tanh": (np.tanh, lambda a: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0), lambda a: (a > 0).astype(a.dtype)),
}


class Mlp:
    """Feed-forward net ``widths[0] -> ... -> widths[-1]``, linear output layer.

    Weights are stored as ``(fan_in, fan_out)`` matrices so that a batch of
    row vectors is pushed through with ``x @ W + b``.
    """

    def __init__(self, widths, activation="tanh", rng=None, dtype=np.float32, out_scale=1.0):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ValueError(f"bad layer widths {widths}")
        n_hidden = len(widths) - 2
        if isinstance(activation, str):
            activation = [activation] * n_hidden
        if len(activation) != n_hidden or any(a not in _ACT for a in activation):
            raise ValueError(f"need {n_hidden} activations from {sorted(_ACT)}")
        self.widths = widths
        self.activations = list(activation)
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(rng)
        self.weights, self.biases = [], []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            scale = np.sqrt(1.0 / a) if i < n_hidden else out_scale * np.sqrt(1.0 / a)
            self.weights.append((rng.standard_normal((a, b)) * scale).astype(self.dtype))
            self.biases.append(np.zeros(b, dtype=self.dtype))

    @classmethod
    def zeros(cls, widths, activation="tanh", dtype=np.float32):
        net = cls(widths, activation, rng=0, dtype=dtype)
        for w, b in zip(net.weights, net.biases):
            w[...] = 0
            b[...] = 0
        return net

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def astype(self, dtype) -> "Mlp":
        net = Mlp.__new__(Mlp)
        net.widths = list(self.widths)
        net.activations = list(self.activations)
        net.dtype = np.dtype(dtype)
        net.weights = [w.astype(dtype) for w in self.weights]
        net.biases = [b.astype(dtype) for b in self.biases]
        return net

    def copy(self) -> "Mlp":
        return self.astype(self.dtype)

    def _check_input(self, x):
        x = np.asarray(x)
        if x.shape[-1] != self.widths[0]:
            raise ValueError(f"input has width {x.shape[-1]}, net expects {self.widths[0]}")
        return x.astype(self.dtype, copy=False)

    def forward(self, x):
        x = self._check_input(x)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.activations):
                h = _ACT[self.activations[i]][0](h)
        return h[0] if single else h

    __call__ = forward

    def forward_cached(self, x):
        """Forward pass that also returns the layer activations for ``backward``."""
        h = np.atleast_2d(self._check_input(x))
        acts = [h]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.activations):
                h = _ACT[self.activations[i]][0](h)
            acts.append(h)
        return h, acts

    def backward(self, x, output_grad, acts=None):
        """Gradients of ``sum(output * output_grad)`` w.r.t. every parameter.

        Returns a list aligned with :meth:`params`.  Weight gradients are
        accumulated over the batch in float64.
        """
        if acts is None:
            _, acts = self.forward_cached(x)
        g = np.atleast_2d(np.asarray(output_grad))
        if g.shape != acts[-1].shape:
            raise ValueError(f"output_grad shape {g.shape} != output shape {acts[-1].shape}")
        g = g.astype(self.dtype, copy=False)
        grads = [None] * (2 * len(self.weights))
        for i in range(len(self.weights) - 1, -1, -1):
            a_in = acts[i]
            grads[2 * i] = (a_in.T.astype(np.float64) @ g.astype(np.float64)).astype(self.dtype)
            grads[2 * i + 1] = g.sum(axis=0, dtype=np.float64).astype(self.dtype)
            if i > 0:
                g = g @ self.weights[i].T
                g = g * _ACT[self.activations[i - 1]][1](acts[i])
        return grads

    def to_blob(self) -> bytes:
        return b"".join(p.astype("<f4").tobytes() for p in self.params())

    @classmethod
    def from_blob(cls, blob: bytes, widths, activation) -> "Mlp":
        net = cls.zeros(widths, activation)
        flat = np.frombuffer(blob, dtype="<f4")
        if flat.size != net.n_params:
            raise ValueError(f"blob holds {flat.size} parameters, expected {net.n_params}")
        pos = 0
        for p in net.params():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        return net


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_net(cls, net: Mlp, **kw) -> "AdamState":
        st = cls(**kw)
        st.m = [np.zeros(p.shape, dtype=np.float64) for p in net.params()]
        st.v = [np.zeros(p.shape, dtype=np.float64) for p in net.params()]
        return st


def adam_step(net: Mlp, grads, state: AdamState):
    """One in-place Adam update; returns ``(net, state)`` for chaining."""
    if not state.m:
        state.m = [np.zeros(p.shape, dtype=np.float64) for p in net.params()]
        state.v = [np.zeros(p.shape, dtype=np.float64) for p in net.params()]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(net.params(), grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g, dtype=np.float64)
        p -= (state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.dtype)
    return net, state
