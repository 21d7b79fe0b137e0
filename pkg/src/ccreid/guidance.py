"""Discriminator guidance for the reverse diffusion process.

A time-conditioned classifier d(x_t, t) separates noised real images from
noised generated ones. Its logit gradient h = grad_x log(d / (1 - d)) is a
correction to the model score; converted to noise units it becomes
``-sigma_t * h`` and is added, with weight w, to the denoiser's estimate.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg

from .diffusion import NoiseSchedule, forward_sample
from .errors import ConfigError, NumericalError
from .nn import SGD, CondMLP, sigmoid, softplus, time_embedding


class Discriminator:
    """Real-vs-generated classifier over flatten(x_t) with a time embedding at every layer."""

    def __init__(self, image_shape, hidden=(128,), time_dim: int = 32, rng=None, params=None):
        self.image_shape = tuple(int(s) for s in image_shape)
        self.hidden = tuple(int(h) for h in hidden)
        self.time_dim = int(time_dim)
        d = int(np.prod(self.image_shape))
        self.net = CondMLP([d, *self.hidden, 1], self.time_dim, rng=rng, params=params)

    @property
    def params(self):
        return self.net.params

    def arch(self) -> dict:
        return {"kind": "discriminator", "image_shape": list(self.image_shape),
                "hidden": list(self.hidden), "time_dim": self.time_dim}

    @classmethod
    def from_arch(cls, arch: dict, params) -> "Discriminator":
        return cls(arch["image_shape"], arch["hidden"], arch["time_dim"], params=params)

    def _forward(self, x_t, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        b = x_t.shape[0]
        temb = time_embedding(np.broadcast_to(np.asarray(t), (b,)), self.time_dim)
        out, cache = self.net.forward(x_t.reshape(b, -1), temb)
        return out[:, 0], cache

    def logit(self, x_t, t):
        return self._forward(x_t, t)[0]

    def prob(self, x_t, t):
        return sigmoid(self.logit(x_t, t))

    def logit_and_input_grad(self, x_t, t):
        logits, cache = self._forward(x_t, t)
        _, gx, _ = self.net.backward(cache, np.ones((len(logits), 1)))
        return logits, gx.reshape(np.shape(x_t))

    def loss_and_grads(self, x_real, t_real, x_gen, t_gen):
        """-mean[log d(x_real) + log(1 - d(x_gen))] over pairs, with parameter gradients."""
        n = len(x_real)
        a_r, cache_r = self._forward(x_real, t_real)
        a_g, cache_g = self._forward(x_gen, t_gen)
        loss = float((np.sum(softplus(-a_r)) + np.sum(softplus(a_g))) / n)
        g_r, _, _ = self.net.backward(cache_r, ((sigmoid(a_r) - 1.0) / n)[:, None])
        g_g, _, _ = self.net.backward(cache_g, (sigmoid(a_g) / n)[:, None])
        return loss, [a + b for a, b in zip(g_r, g_g)]


class GaussianRatioDiscriminator:
    """Closed-form optimal discriminator between two equal-variance Gaussians.

    Model data ~ N(mean_model, std^2), real data ~ N(mean_real, std^2), both
    pushed through the forward process: at step t each is Gaussian with mean
    sqrt(abar_t) * mean and variance abar_t * std^2 + 1 - abar_t, so the logit
    log q_t(x) / p_t(x) is linear in x.
    """

    def __init__(self, mean_model, mean_real, std: float, schedule: NoiseSchedule):
        self.mean_model = np.asarray(mean_model, dtype=np.float64)
        self.mean_real = np.asarray(mean_real, dtype=np.float64)
        self.std = float(std)
        self.schedule = schedule

    def _coef(self, t):
        ab = self.schedule.alpha_bar[np.asarray(t) - 1]
        var = ab * self.std ** 2 + 1.0 - ab
        return np.sqrt(ab), var

    def logit_and_input_grad(self, x_t, t):
        x_t = np.asarray(x_t, dtype=np.float64)
        s, var = self._coef(t)
        mq, mp = s * self.mean_real, s * self.mean_model
        axes = tuple(range(1, x_t.ndim))
        logit = np.sum(((x_t - mp) ** 2 - (x_t - mq) ** 2) / (2 * var), axis=axes)
        grad = np.broadcast_to((mq - mp) / var, x_t.shape).copy()
        return logit, grad

    def logit(self, x_t, t):
        return self.logit_and_input_grad(x_t, t)[0]


@dataclass
class DiscConfig:
    lr: float = 0.05
    batch_size: int = 64
    steps: int = 1500
    seed: int = 0
    momentum: float = 0.9
    hidden: tuple = (128,)

    def validate(self):
        if self.lr <= 0 or self.batch_size < 1 or self.steps < 0:
            raise ConfigError(f"invalid discriminator config {asdict(self)}")


def train_discriminator(real, generated, schedule: NoiseSchedule, config: DiscConfig,
                        rng=None, disc: Discriminator | None = None):
    """Minimise the real-vs-generated cross-entropy on images noised at t ~ U{1..T}.

    Returns (discriminator, per-step losses).
    """
    config.validate()
    real = np.asarray(real, dtype=np.float64)
    generated = np.asarray(generated, dtype=np.float64)
    if len(real) == 0 or len(generated) == 0:
        raise ConfigError("discriminator needs nonempty real and generated sets")
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if disc is None:
        disc = Discriminator(real.shape[1:], config.hidden, rng=rng)
    opt = SGD(disc.params, config.lr, config.momentum, clip=5.0)
    b = config.batch_size
    losses = np.empty(config.steps)
    for step in range(config.steps):
        xr = real[rng.integers(0, len(real), size=b)]
        xg = generated[rng.integers(0, len(generated), size=b)]
        tr = rng.integers(1, schedule.T + 1, size=b)
        tg = rng.integers(1, schedule.T + 1, size=b)
        xr_t = forward_sample(xr, tr, rng.standard_normal(xr.shape), schedule)
        xg_t = forward_sample(xg, tg, rng.standard_normal(xg.shape), schedule)
        loss, grads = disc.loss_and_grads(xr_t, tr, xg_t, tg)
        if not np.isfinite(loss):
            raise NumericalError(f"non-finite discriminator loss at step {step}")
        opt.step(grads)
        losses[step] = loss
    return disc, losses


def disc_score(disc, x_t, t):
    """h = grad_x log(d / (1 - d)); log(d / (1 - d)) is the pre-sigmoid logit."""
    return disc.logit_and_input_grad(x_t, t)[1]


def guidance_noise(disc, x_t, t, schedule: NoiseSchedule):
    return -schedule.sigma[t - 1] * disc_score(disc, x_t, t)


@dataclass
class GuidanceHook:
    discriminator: object
    weight: float = 1.0

    def __post_init__(self):
        if not np.isfinite(self.weight) or self.weight < 0:
            raise ConfigError(f"guidance weight must be finite and >= 0, got {self.weight}")

    def apply(self, eps_hat, x_t, t, schedule: NoiseSchedule):
        return eps_hat + self.weight * guidance_noise(self.discriminator, x_t, t, schedule)


def guided_eps(denoiser, hook: GuidanceHook, x_t, t, y, schedule: NoiseSchedule):
    return hook.apply(denoiser.predict_eps(x_t, t, y), x_t, t, schedule)


def gaussian_score(x, mean, std):
    """grad_x log N(x; mean, std^2 I)."""
    return -(np.asarray(x) - mean) / std ** 2


def noise_from_score(score, std):
    """Reparameterisation noise implied by a Gaussian score: eps = -std * score."""
    return -std * np.asarray(score)


def logit_of(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p / (1.0 - p))


def frechet_distance(a, b) -> float:
    """||mu_a - mu_b||^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2)) between two sample sets."""
    a = np.asarray(a, dtype=np.float64).reshape(len(a), -1)
    b = np.asarray(b, dtype=np.float64).reshape(len(b), -1)
    mu_a, mu_b = a.mean(0), b.mean(0)
    sa, sb = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    covmean = linalg.sqrtm(sa @ sb)
    if np.iscomplexobj(covmean):
        covmean = covmean.real
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(sa + sb - 2.0 * covmean))
