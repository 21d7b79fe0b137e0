"""Small fully-connected networks with hand-written backpropagation.

Everything here is plain numpy. Networks expose ``forward`` (returning an output
and a cache) and ``backward`` (returning parameter gradients and the gradient
with respect to the input), which is what the denoiser, the discriminator and
the embedding model are built from.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import NumericalError


def sigmoid(x):
    return expit(x)


def softplus(x):
    return np.logaddexp(0.0, x)


def silu(x):
    return x * sigmoid(x)


def silu_grad(x, s=None):
    s = sigmoid(x) if s is None else s
    return s * (1.0 + x * (1.0 - s))


def time_embedding(t, dim: int = 32, max_period: float = 10000.0):
    """Sinusoidal embedding of integer timesteps, shape (len(t), dim)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


ACTIVATIONS = ("silu", "leaky_relu")
LEAK = 0.01


class MLP:
    """Stack of affine layers with SiLU (or leaky ReLU) between them, none after the last."""

    def __init__(self, sizes, rng=None, out_scale: float = 1.0, params=None, activation: str = "silu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}, got {activation!r}")
        self.activation = activation
        self.sizes = [int(s) for s in sizes]
        if params is not None:
            self.params = [np.asarray(p, dtype=np.float64) for p in params]
            return
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            scale = 1.0 / np.sqrt(fan_in)
            if i == n_layers - 1:
                scale *= out_scale
            self.params.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            self.params.append(np.zeros(fan_out))

    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def forward(self, x):
        cache = []
        h = x
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            z = h @ W + b
            if i == self.n_layers - 1:
                sg = None
                h_next = z
            elif self.activation == "leaky_relu":
                sg = np.where(z > 0, 1.0, LEAK).astype(z.dtype)   # slope doubles as derivative
                h_next = z * sg
            else:
                sg = sigmoid(z)
                h_next = z * sg
            cache.append((h, z, sg))
            h = h_next
        return h, cache

    def __call__(self, x):
        return self.forward(x)[0]

    def backward(self, cache, grad_out, input_grad: bool = True):
        """Parameter gradients and, unless ``input_grad`` is False, the input gradient."""
        grads = [None] * len(self.params)
        g = grad_out
        for i in reversed(range(self.n_layers)):
            h, z, sg = cache[i]
            if sg is not None:
                g = g * silu_grad(z, sg) if self.activation == "silu" else g * sg
            W = self.params[2 * i]
            grads[2 * i] = h.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            if i > 0 or input_grad:
                g = g @ W.T
            else:
                g = None
        return grads, g

    def n_params(self) -> int:
        return sum(p.size for p in self.params)


class CondMLP(MLP):
    """MLP whose every layer also sees a conditioning vector ``c`` (concatenated)."""

    def __init__(self, sizes, cond_dim: int, rng=None, out_scale: float = 1.0, params=None):
        self.cond_dim = int(cond_dim)
        self.activation = "silu"
        if params is not None:
            super().__init__(sizes, params=params)
            return
        rng = np.random.default_rng(0) if rng is None else rng
        self.sizes = [int(s) for s in sizes]
        self.params = []
        n_layers = len(self.sizes) - 1
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            scale = 1.0 / np.sqrt(fan_in + self.cond_dim)
            if i == n_layers - 1:
                scale *= out_scale
            self.params.append(rng.normal(0.0, scale, size=(fan_in + self.cond_dim, fan_out)))
            self.params.append(np.zeros(fan_out))

    def forward(self, x, c=None):
        cache = []
        h = x
        for i in range(self.n_layers):
            W, b = self.params[2 * i], self.params[2 * i + 1]
            hin = np.concatenate([h, c], axis=1) if self.cond_dim else h
            z = hin @ W + b
            sg = sigmoid(z) if i < self.n_layers - 1 else None
            cache.append((hin, z, sg))
            h = z * sg if sg is not None else z
        return h, cache

    def __call__(self, x, c=None):
        return self.forward(x, c)[0]

    def backward(self, cache, grad_out):
        """Returns (param grads, grad wrt x, grad wrt c)."""
        grads = [None] * len(self.params)
        g = grad_out
        gc = 0.0
        for i in reversed(range(self.n_layers)):
            hin, z, sg = cache[i]
            if sg is not None:
                g = g * silu_grad(z, sg) if self.activation == "silu" else g * sg
            W = self.params[2 * i]
            grads[2 * i] = hin.T @ g
            grads[2 * i + 1] = g.sum(axis=0)
            g = g @ W.T
            if self.cond_dim:
                gc = gc + g[:, -self.cond_dim:]
                g = g[:, :-self.cond_dim]
        return grads, g, gc


class SGD:
    """SGD with optional heavy-ball momentum and global-norm clipping."""

    def __init__(self, params, lr: float, momentum: float = 0.9, clip: float | None = None):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.clip = clip
        self.velocity = [np.zeros_like(p) for p in params]

    def step(self, grads):
        if self.clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if not np.isfinite(norm):
                raise NumericalError(f"non-finite gradient norm {norm}")
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        for p, v, g in zip(self.params, self.velocity, grads):
            v *= self.momentum
            v -= self.lr * g
            p += v


def flat_params(params):
    return np.concatenate([p.ravel() for p in params])


def set_flat_params(params, flat):
    off = 0
    for p in params:
        p[...] = flat[off:off + p.size].reshape(p.shape)
        off += p.size


def finite_difference(f, params, h: float = 1e-3):
    """Central differences of scalar ``f()`` with respect to every entry of ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            fp = f()
            p[idx] = old - h
            fm = f()
            p[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def relative_error(a, b, floor: float = 1e-12) -> float:
    """Norm-wise relative error ||a - b|| / max(||a||, ||b||)."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)


class Adam:
    def __init__(self, params, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip: float | None = None):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip = clip
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        if self.clip is not None:
            norm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
            if not np.isfinite(norm):
                raise NumericalError(f"non-finite gradient norm {norm}")
            if norm > self.clip:
                grads = [g * (self.clip / norm) for g in grads]
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for p, m, v, g in zip(self.params, self.m, self.v, grads):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
