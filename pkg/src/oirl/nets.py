"""Small dense feed-forward networks with hand-rolled reverse-mode gradients.

All evaluation is batched numpy; parameters live in plain arrays so they can
be flattened for optimizer state, checkpoints, and finite-difference checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NumericalFailure(RuntimeError):
    """NaN/Inf encountered where finite values are required."""


def orthogonal(shape: tuple, gain: float, rng: np.random.Generator) -> np.ndarray:
    """Orthogonal weight init (rows orthonormal up to gain)."""
    rows, cols = shape
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    q = q.T if rows < cols else q
    return gain * q[:rows, :cols]


class FeedForwardNet:
    """MLP with relu/tanh hidden layers and a linear or softmax head.

    Hidden layers use orthogonal init with gain sqrt(2); the output layer
    gain is configurable (0.01 for policy heads, 1.0 otherwise). Biases
    start at zero.
    """

    def __init__(
        self,
        sizes: list[int],
        rng: np.random.Generator,
        activation: str = "relu",
        head: str = "linear",
        out_gain: float = 1.0,
    ):
        if activation not in ("relu", "tanh"):
            raise ValueError(f"unknown activation {activation!r}")
        if head not in ("linear", "softmax"):
            raise ValueError(f"unknown head {head!r}")
        self.sizes = list(sizes)
        self.activation = activation
        self.head = head
        self.W = []
        self.b = []
        for i, (d_in, d_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            last = i == len(sizes) - 2
            gain = out_gain if last else np.sqrt(2.0)
            self.W.append(orthogonal((d_out, d_in), gain, rng))
            self.b.append(np.zeros(d_out))

    @property
    def in_dim(self) -> int:
        return self.sizes[0]

    @property
    def out_dim(self) -> int:
        return self.sizes[-1]

    def _act(self, z: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            return np.maximum(z, 0.0)
        return np.tanh(z)

    def _act_grad(self, z: np.ndarray, h: np.ndarray) -> np.ndarray:
        if self.activation == "relu":
            # subgradient 0 at exactly 0
            return (z > 0.0).astype(z.dtype)
        return 1.0 - h * h

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, _ = self.forward_cache(x)
        return y

    def forward_cache(self, x: np.ndarray):
        """Forward pass keeping activations for backward. x: [d] or [N, d]."""
        squeeze = x.ndim == 1
        h = np.atleast_2d(np.asarray(x, dtype=float))
        if h.shape[1] != self.in_dim:
            raise ValueError(f"input dim {h.shape[1]} != {self.in_dim}")
        hs = [h]
        zs = []
        for i, (W, b) in enumerate(zip(self.W, self.b)):
            z = h @ W.T + b
            zs.append(z)
            h = z if i == len(self.W) - 1 else self._act(z)
            hs.append(h)
        if self.head == "softmax":
            h = softmax(h)
            hs[-1] = h
        out = h[0] if squeeze else h
        return out, (hs, zs, squeeze)

    def backward(self, cache, upstream: np.ndarray):
        """Reverse-mode pass. Returns (grads, input_gradient).

        grads mirrors (W, b) layer by layer; upstream matches the output
        shape of the recorded forward pass.
        """
        hs, zs, squeeze = cache
        g = np.atleast_2d(np.asarray(upstream, dtype=float))
        if g.shape[1] != self.out_dim:
            raise ValueError(f"upstream dim {g.shape[1]} != {self.out_dim}")
        if self.head == "softmax":
            p = hs[-1]
            g = p * (g - (g * p).sum(axis=1, keepdims=True))
        gW = [None] * len(self.W)
        gb = [None] * len(self.b)
        for i in reversed(range(len(self.W))):
            h_in = hs[i]
            gW[i] = g.T @ h_in
            gb[i] = g.sum(axis=0)
            g = g @ self.W[i]
            if i > 0:
                g = g * self._act_grad(zs[i - 1], hs[i])
        dx = g[0] if squeeze else g
        return list(zip(gW, gb)), dx

    # -- flat parameter views ------------------------------------------------

    def get_flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in zip(self.W, self.b) for a in pair])

    def set_flat(self, v: np.ndarray) -> None:
        pos = 0
        for i in range(len(self.W)):
            for arr in (self.W[i], self.b[i]):
                n = arr.size
                arr[...] = v[pos : pos + n].reshape(arr.shape)
                pos += n
        if pos != v.size:
            raise ValueError("flat vector size mismatch")

    @staticmethod
    def flatten_grads(grads) -> np.ndarray:
        return np.concatenate([a.ravel() for pair in grads for a in pair])

    def zero_grads(self):
        return [(np.zeros_like(W), np.zeros_like(b)) for W, b in zip(self.W, self.b)]

    @staticmethod
    def add_grads(acc, grads, scale: float = 1.0):
        for (aW, ab), (gW, gb) in zip(acc, grads):
            aW += scale * gW
            ab += scale * gb
        return acc

    def check_finite(self) -> None:
        for W, b in zip(self.W, self.b):
            if not (np.isfinite(W).all() and np.isfinite(b).all()):
                raise NumericalFailure("non-finite network parameters")


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


@dataclass
class AdamState:
    """Adam moments plus global-norm gradient clipping."""

    lr: float
    n_params: int
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-5
    clip_norm: float | None = 0.5
    t: int = 0
    m: np.ndarray = field(default=None)
    v: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.m is None:
            self.m = np.zeros(self.n_params)
        if self.v is None:
            self.v = np.zeros(self.n_params)


def adam_step(net: FeedForwardNet, grads, state: AdamState) -> None:
    """Clip the gradient to state.clip_norm and apply one Adam update in place."""
    g = FeedForwardNet.flatten_grads(grads) if not isinstance(grads, np.ndarray) else grads
    if not np.isfinite(g).all():
        raise NumericalFailure("NaN/Inf gradient passed to adam_step")
    if state.clip_norm is not None:
        norm = float(np.linalg.norm(g))
        if norm > state.clip_norm and norm > 0.0:
            g = g * (state.clip_norm / norm)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1**state.t)
    v_hat = state.v / (1 - state.beta2**state.t)
    theta = net.get_flat()
    theta -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    net.set_flat(theta)
    net.check_finite()


def finite_difference_grad(f, theta: np.ndarray, coords, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar f at theta, on selected coordinates."""
    out = np.zeros(len(coords))
    for k, i in enumerate(coords):
        tp = theta.copy()
        tp[i] += h
        tm = theta.copy()
        tm[i] -= h
        out[k] = (f(tp) - f(tm)) / (2 * h)
    return out
