"""Conditional DDPM in pixel space with an MLP noise predictor.

Timesteps are 1-based throughout: ``t`` in ``[1, T]`` indexes ``beta[t - 1]``.
Functions that draw noise take either one ``np.random.Generator`` for the whole
batch or a sequence of generators, one per batch row; the latter makes every
row's result independent of how rows are grouped into batches.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError, NumericalError
from .nn import SGD, Adam, CondMLP, time_embedding


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray

    @property
    def T(self) -> int:
        return len(self.beta)

    def check_t(self, t) -> None:
        t = np.asarray(t)
        if t.size and (t.min() < 1 or t.max() > self.T):
            raise ConfigError(f"timestep outside [1, {self.T}]: {t.min()}..{t.max()}")

    @classmethod
    def from_beta(cls, beta) -> "NoiseSchedule":
        beta = np.asarray(beta, dtype=np.float64)
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        return cls(beta, alpha, alpha_bar, np.sqrt(1.0 - alpha_bar))


def make_schedule(T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.04,
                  kind: str = "linear") -> NoiseSchedule:
    if kind != "linear":
        raise ConfigError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ConfigError(f"T must be >= 1, got {T}")
    if not 0 < beta_start <= beta_end < 1:
        raise ConfigError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return NoiseSchedule.from_beta(np.linspace(beta_start, beta_end, T))


def _bcast(v, x):
    """Per-row coefficient ``v`` (scalar or (B,)) broadcast against ``x`` (B, ...)."""
    v = np.asarray(v, dtype=np.float64)
    return v.reshape(v.shape + (1,) * (x.ndim - v.ndim)) if v.ndim else v


def normal_like(rng, shape):
    if isinstance(rng, np.random.Generator):
        return rng.standard_normal(shape)
    rngs = list(rng)
    if len(rngs) != shape[0]:
        raise ConfigError(f"{len(rngs)} generators for a batch of {shape[0]}")
    return np.stack([r.standard_normal(shape[1:]) for r in rngs]) if rngs else np.zeros(shape)


def forward_sample(x0, t, eps, schedule: NoiseSchedule):
    """x_t = sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps; ``t`` scalar or per row."""
    schedule.check_t(t)
    idx = np.asarray(t) - 1
    x0 = np.asarray(x0, dtype=np.float64)
    ab = schedule.alpha_bar[idx]
    return _bcast(np.sqrt(ab), x0) * x0 + _bcast(np.sqrt(1.0 - ab), x0) * eps


def predict_mean(eps_hat, x_t, t, schedule: NoiseSchedule):
    schedule.check_t(t)
    idx = np.asarray(t) - 1
    a = schedule.alpha[idx]
    one_minus_ab = 1.0 - schedule.alpha_bar[idx]
    # a noise-free step (alpha_t = 1) has no eps term; avoid 0/0
    coef = np.where(a < 1.0, (1.0 - a) / np.sqrt(np.where(one_minus_ab > 0, one_minus_ab, 1.0)), 0.0)
    return (x_t - _bcast(coef, x_t) * eps_hat) / _bcast(np.sqrt(a), x_t)


class Denoiser:
    """eps_theta(x_t, t, y) from an MLP over x_t, a time embedding and a descriptor code.

    The time embedding and code are fed to every layer. The MLP output F is
    wrapped as ``eps = c_skip * x_t + c_out * F(c_in * x_t)``, where the
    coefficients are the exact posterior-mean terms for Gaussian data of std
    ``data_std``; the network then only learns the non-Gaussian residual.
    ``data_std=None`` disables the wrapping.
    """

    def __init__(self, image_shape, n_cond: int, hidden=(256, 256), time_dim: int = 32,
                 rng=None, params=None, cond_scale: float = 4.0, data_std: float | None = 0.5,
                 schedule: "NoiseSchedule | None" = None):
        self.image_shape = tuple(int(s) for s in image_shape)
        self.n_cond = int(n_cond)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_dim = int(time_dim)
        self.cond_scale = float(cond_scale)
        self.data_std = None if data_std is None else float(data_std)
        self.schedule = schedule
        d = int(np.prod(self.image_shape))
        self.net = CondMLP([d, *self.hidden, d], self.time_dim + self.n_cond, rng=rng, params=params)

    @property
    def params(self):
        return self.net.params

    def arch(self) -> dict:
        return {"kind": "denoiser", "image_shape": list(self.image_shape), "n_cond": self.n_cond,
                "hidden": list(self.hidden), "time_dim": self.time_dim,
                "cond_scale": self.cond_scale, "data_std": self.data_std}

    @classmethod
    def from_arch(cls, arch: dict, params, schedule=None) -> "Denoiser":
        return cls(arch["image_shape"], arch["n_cond"], arch["hidden"], arch["time_dim"],
                   params=params, cond_scale=arch["cond_scale"], data_std=arch["data_std"],
                   schedule=schedule)

    def _precond(self, t, b):
        """(c_in, c_skip, c_out), each of shape (b, 1)."""
        if self.data_std is None:
            one = np.ones((b, 1))
            return one, np.zeros((b, 1)), one
        if self.schedule is None:
            raise ConfigError("a preconditioned denoiser needs its noise schedule")
        idx = np.broadcast_to(np.asarray(t), (b,)) - 1
        ab = self.schedule.alpha_bar[idx][:, None]
        var = 1.0 - ab
        sd2 = self.data_std ** 2
        total = ab * sd2 + var
        return 1.0 / np.sqrt(total), np.sqrt(var) / total, np.sqrt(ab * sd2 / total)

    def _inputs(self, x_t, t, y):
        x_t = np.asarray(x_t, dtype=np.float64)
        b = x_t.shape[0]
        t = np.broadcast_to(np.asarray(t), (b,))
        parts = [time_embedding(t, self.time_dim)]
        if self.n_cond:
            if y is None:
                raise ConfigError("this denoiser is conditional; pass a descriptor code")
            y = np.broadcast_to(np.asarray(y, dtype=np.float64), (b, self.n_cond))
            parts.append(self.cond_scale * y)
        return x_t.reshape(b, -1), np.concatenate(parts, axis=1), t

    def _eps(self, x_t, t, y):
        b = x_t.shape[0]
        flat, cond, t = self._inputs(x_t, t, y)
        c_in, c_skip, c_out = self._precond(t, b)
        out, cache = self.net.forward(c_in * flat, cond)
        return c_skip * flat + c_out * out, cache, c_out

    def predict_eps(self, x_t, t, y=None):
        """Batched: x_t (B, *image_shape), t int or (B,), y (B, n_cond) or (n_cond,)."""
        x_t = np.asarray(x_t, dtype=np.float64)
        return self._eps(x_t, t, y)[0].reshape(x_t.shape)

    def loss_and_grads(self, x_t, t, y, eps):
        """Mean over the batch of ||eps - eps_hat||^2 and its parameter gradients."""
        b = x_t.shape[0]
        out, cache, c_out = self._eps(np.asarray(x_t, dtype=np.float64), t, y)
        diff = out - np.asarray(eps).reshape(b, -1)
        loss = float(np.sum(diff * diff) / b)
        grads, _, _ = self.net.backward(cache, c_out * (2.0 * diff / b))
        return loss, grads


class GaussianDenoiser:
    """Exact eps predictor E[eps | x_t] when x_0 ~ N(mean, std^2 I)."""

    def __init__(self, image_shape, mean, std: float, schedule: NoiseSchedule):
        self.image_shape = tuple(image_shape)
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = float(std)
        self.schedule = schedule

    def predict_eps(self, x_t, t, y=None):
        ab = self.schedule.alpha_bar[np.asarray(t) - 1]
        var = 1.0 - ab
        return np.sqrt(var) * (x_t - np.sqrt(ab) * self.mean) / (ab * self.std ** 2 + var)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    steps: int = 3000
    seed: int = 0
    momentum: float = 0.9
    clip: float | None = 100.0
    optimizer_kind: str = "sgd"
    # cosine decay of the learning rate to lr * final_lr_frac over ``steps``
    final_lr_frac: float = 0.05

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError(f"invalid diffusion training config {asdict(self)}")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must be in [0, 1)")

    def optimizer(self, params):
        if self.optimizer_kind == "adam":
            return Adam(params, self.lr, clip=self.clip)
        return SGD(params, self.lr, self.momentum, self.clip)


def train_step(denoiser: Denoiser, x0, y, schedule: NoiseSchedule, optimizer: SGD, rng) -> float:
    """One L_simple update; returns the loss before the update."""
    x0 = np.asarray(x0, dtype=np.float64)
    if len(x0) == 0:
        raise ConfigError("empty batch")
    t = rng.integers(1, schedule.T + 1, size=len(x0))
    eps = rng.standard_normal(x0.shape)
    x_t = forward_sample(x0, t, eps, schedule)
    loss, grads = denoiser.loss_and_grads(x_t, t, y, eps)
    if not np.isfinite(loss):
        raise NumericalError(f"non-finite diffusion loss {loss} (timesteps {t.min()}..{t.max()})")
    optimizer.step(grads)
    return loss


def train_denoiser(denoiser: Denoiser, images, codes, schedule: NoiseSchedule,
                   config: TrainConfig, rng=None, log_every: int = 0):
    """Minibatch SGD on L_simple; returns the per-step loss history."""
    config.validate()
    rng = np.random.default_rng(config.seed) if rng is None else rng
    images = np.asarray(images, dtype=np.float64)
    codes = None if codes is None else np.asarray(codes, dtype=np.float64)
    opt = config.optimizer(denoiser.params)
    n = len(images)
    losses = []
    for step in range(config.steps):
        frac = step / max(1, config.steps - 1)
        opt.lr = config.lr * (config.final_lr_frac + (1 - config.final_lr_frac) * 0.5 * (1 + np.cos(np.pi * frac)))
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        losses.append(train_step(denoiser, images[idx], None if codes is None else codes[idx],
                                 schedule, opt, rng))
        if log_every and (step + 1) % log_every == 0:
            print(f"diffusion step {step + 1}: loss {np.mean(losses[-log_every:]):.3f}")
    return np.array(losses)


def reverse_step(denoiser, x_t, t: int, y, schedule: NoiseSchedule, rng, guidance=None):
    """Sample x_{t-1} ~ N(mu_theta(x_t, t, y), beta_t I); no noise is added at t = 1."""
    schedule.check_t(t)
    eps_hat = denoiser.predict_eps(x_t, t, y)
    if guidance is not None:
        eps_hat = guidance.apply(eps_hat, x_t, t, schedule)
    mean = predict_mean(eps_hat, x_t, t, schedule)
    if t > 1:
        return mean + np.sqrt(schedule.beta[t - 1]) * normal_like(rng, mean.shape)
    return mean


def _check_finite(x, t, what):
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {what} at t={t}")


def sample(denoiser, y, schedule: NoiseSchedule, rng, guidance=None, n: int | None = None,
           clip: bool = True):
    """Ancestral sampling from x_T ~ N(0, I) down to x_0, clamped to [-1, 1].

    ``y`` of shape (n_cond,) gives one image; (B, n_cond) gives a batch. For an
    unconditional denoiser pass ``y=None`` and a batch size ``n``.
    """
    single = False
    if y is not None:
        y = np.asarray(y, dtype=np.float64)
        single = y.ndim == 1
        y = np.atleast_2d(y)
        n = len(y)
    elif n is None:
        single, n = True, 1
    x = normal_like(rng, (n, *denoiser.image_shape))
    for t in range(schedule.T, 0, -1):
        x = reverse_step(denoiser, x, t, y, schedule, rng, guidance)
        _check_finite(x, t, "sample")
    if clip:
        x = np.clip(x, -1.0, 1.0)
    return x[0] if single else x


def inpaint(denoiser, x, mask, y, schedule: NoiseSchedule, rng, guidance=None):
    """Regenerate the masked region of ``x`` conditioned on ``y``.

    At each step the unmasked region of the running sample is replaced by the
    forward-noised original; the result is hard-composited so unmasked cells
    equal ``x`` exactly. Accepts a single image or a batch.
    """
    x = np.asarray(x)
    single = x.ndim == len(denoiser.image_shape)
    xb = x[None] if single else x
    mb = np.asarray(mask, dtype=bool)
    mb = np.broadcast_to(mb[None] if mb.ndim == len(denoiser.image_shape) else mb, xb.shape)
    if y is not None:
        y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    known = xb.astype(np.float64)
    cur = normal_like(rng, xb.shape)
    for t in range(schedule.T, 0, -1):
        noised = forward_sample(known, t, normal_like(rng, xb.shape), schedule)
        cur = np.where(mb, cur, noised)
        cur = reverse_step(denoiser, cur, t, y, schedule, rng, guidance)
        _check_finite(cur, t, "inpaint")
    out = np.where(mb, np.clip(cur, -1.0, 1.0).astype(xb.dtype), xb)
    return out[0] if single else out
