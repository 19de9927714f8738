"""Diffusion-prior abstraction: schedule, timestep annealing, guidance, predictors.

Predictors work in pixel space.  A predictor implements
``predict(z_t, t, prompt, mask, tag)`` for a single (conditional or, with an
empty prompt, unconditional) noise prediction; classifier-free guidance is
layered on top by :func:`predict_noise_cfg`.  Remote predictors override
``predict_guided`` because the server applies guidance itself.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass
from typing import Hashable

import numpy as np

from .errors import InvalidInputError, InvalidTimestepError
from .imaging import resize_bilinear

T_MIN = 0.02
T_MAX = 0.98


class CosineSchedule:
    """``alpha_bar(t) = cos^2(pi t / 2)``, SDS weight ``w(t) = 1 - alpha_bar(t)``."""

    def alpha_bar(self, t: float) -> float:
        t = float(t)
        if not 0.0 < t < 1.0:
            raise InvalidTimestepError(f"timestep {t} outside (0, 1)")
        return math.cos(0.5 * math.pi * t) ** 2

    def weight(self, t: float) -> float:
        return 1.0 - self.alpha_bar(t)


def add_noise(x, t: float, eps, schedule: CosineSchedule | None = None) -> np.ndarray:
    schedule = schedule or CosineSchedule()
    x = np.asarray(x)
    eps = np.asarray(eps)
    if x.shape != eps.shape:
        raise InvalidInputError(f"image shape {x.shape} != noise shape {eps.shape}")
    ab = schedule.alpha_bar(t)
    return math.sqrt(ab) * x + math.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class TimestepSampler:
    """Uniform draws from ``[t_min, t_hi(i)]`` with a square-root shrinking upper bound."""

    iterations: int
    t_min: float = T_MIN
    t_max: float = T_MAX

    def __post_init__(self):
        if not 0.0 < self.t_min < self.t_max < 1.0:
            raise InvalidInputError("need 0 < t_min < t_max < 1")
        if self.iterations < 1:
            raise InvalidInputError("iterations must be positive")

    def upper(self, i: int) -> float:
        return self.t_max - (self.t_max - self.t_min) * math.sqrt(i / self.iterations)

    def sample(self, i: int, rng) -> float:
        if not 0 <= i < self.iterations:
            raise InvalidInputError(f"iteration {i} outside [0, {self.iterations})")
        return float(rng.uniform(self.t_min, self.upper(i)))


def sample_timestep(sampler: TimestepSampler, i: int, rng) -> float:
    return sampler.sample(i, rng)


@dataclass
class PriorRequest:
    """One guided noise-prediction query.

    ``tag`` is in-process metadata (for example ``("rgb", view)``) that oracle
    predictors may key on; it never goes over the wire.
    """

    z_t: np.ndarray
    mask: np.ndarray
    prompt: str
    t: float
    guidance: float
    tag: Hashable | None = None

    def __post_init__(self):
        if self.z_t.ndim != 3:
            raise InvalidInputError("z_t must be H x W x C")
        if self.mask.shape != self.z_t.shape[:2]:
            raise InvalidInputError("mask must be H x W")
        if not np.all(np.isfinite(self.z_t)):
            raise InvalidInputError("z_t contains non-finite values")


class NoisePredictor:
    schedule: CosineSchedule

    def predict(self, z_t, t, prompt, mask=None, tag=None) -> np.ndarray:
        raise NotImplementedError

    def predict_guided(self, request: PriorRequest) -> np.ndarray:
        uncond = self.predict(request.z_t, request.t, "", request.mask, request.tag)
        cond = self.predict(request.z_t, request.t, request.prompt, request.mask, request.tag)
        w = request.guidance
        # anchor at the nearer endpoint so w = 0 and w = 1 are exact
        if w <= 0.5:
            return uncond + w * (cond - uncond)
        return cond + (w - 1.0) * (cond - uncond)


def predict_noise_cfg(predictor: NoisePredictor, request: PriorRequest) -> np.ndarray:
    """Guided prediction ``e(empty) + w (e(y) - e(empty))``, checked for shape."""
    eps = np.asarray(predictor.predict_guided(request))
    if eps.shape != request.z_t.shape:
        raise InvalidInputError(f"predictor returned shape {eps.shape}, expected {request.z_t.shape}")
    return eps


class _MeanLookup:
    def __init__(self, mu):
        self._mu = mu
        self._resized = {}

    def get(self, shape, dtype, tag):
        mu = self._mu
        if isinstance(mu, Mapping):
            if tag not in mu:
                raise InvalidInputError(f"no prior mean registered for tag {tag!r}")
            mu = mu[tag]
        key = (id(mu), shape, np.dtype(dtype).str)
        hit = self._resized.get(key)
        if hit is not None:
            return hit
        arr = np.asarray(mu, dtype=np.float64)
        if arr.ndim <= 1:
            arr = np.broadcast_to(arr, shape)
        elif arr.shape[:2] != shape[:2]:
            arr = resize_bilinear(arr, shape[0], shape[1])
        out = np.ascontiguousarray(np.broadcast_to(arr, shape), dtype=dtype)
        self._resized[key] = out
        return out


class GaussianPredictor(NoisePredictor):
    """Exact noise prediction for an isotropic Gaussian prior ``N(mu, var I)``.

    ``mu`` may be an image, a per-channel constant, or a mapping from request
    tags to either.  Images of a different size are bilinearly resized to the
    request.  Prompt and mask are ignored.
    """

    def __init__(self, mu, var: float = 0.01, schedule: CosineSchedule | None = None):
        if var < 0:
            raise InvalidInputError("prior variance must be nonnegative")
        self.var = float(var)
        self.schedule = schedule or CosineSchedule()
        self._means = _MeanLookup(mu)

    def predict(self, z_t, t, prompt, mask=None, tag=None):
        z_t = np.asarray(z_t)
        ab = self.schedule.alpha_bar(t)
        mu = self._means.get(z_t.shape, z_t.dtype, tag)
        scale = math.sqrt(1.0 - ab) / (ab * self.var + 1.0 - ab)
        return scale * (z_t - math.sqrt(ab) * mu)


def gaussian_analytic_predictor(mu, var: float, schedule: CosineSchedule | None = None) -> GaussianPredictor:
    return GaussianPredictor(mu, var, schedule)


class GaussianMixturePredictor(NoisePredictor):
    """Element-wise mixture prior ``sum_k pi_k N(mu_k, var_k)``.

    Each pixel channel is an independent draw; the prediction is
    ``-sqrt(1 - alpha_bar) * d/dz log p_t(z)`` with responsibility-weighted
    component scores.
    """

    def __init__(self, means, variances, weights=None, schedule: CosineSchedule | None = None):
        self.means = np.asarray(means, dtype=np.float64)
        self.variances = np.asarray(variances, dtype=np.float64)
        k = self.means.size
        self.weights = np.full(k, 1.0 / k) if weights is None else np.asarray(weights, dtype=np.float64)
        if self.variances.shape != self.means.shape or self.weights.shape != self.means.shape:
            raise InvalidInputError("mixture parameters must have equal length")
        self.schedule = schedule or CosineSchedule()

    def score(self, z, t) -> np.ndarray:
        ab = self.schedule.alpha_bar(t)
        z = np.asarray(z, dtype=np.float64)[..., None]
        var = ab * self.variances + 1.0 - ab
        diff = z - math.sqrt(ab) * self.means
        logp = np.log(self.weights) - 0.5 * np.log(2 * np.pi * var) - 0.5 * diff**2 / var
        logp -= logp.max(axis=-1, keepdims=True)
        resp = np.exp(logp)
        resp /= resp.sum(axis=-1, keepdims=True)
        return np.sum(resp * (-diff / var), axis=-1)

    def predict(self, z_t, t, prompt, mask=None, tag=None):
        ab = self.schedule.alpha_bar(t)
        z_t = np.asarray(z_t)
        return (-math.sqrt(1.0 - ab) * self.score(z_t, t)).astype(z_t.dtype)


class ZeroPredictor(NoisePredictor):
    """Always predicts zero noise."""

    def __init__(self, schedule: CosineSchedule | None = None):
        self.schedule = schedule or CosineSchedule()

    def predict(self, z_t, t, prompt, mask=None, tag=None):
        return np.zeros_like(np.asarray(z_t))


# -- toy trainable denoiser ---------------------------------------------------


class ToyDenoiser(NoisePredictor):
    """Small per-pixel MLP trained by denoising score matching.

    Input features per pixel: the 3x3 neighbourhood of ``z_t`` (edge
    replicated), ``(sin, cos)`` of ``pi t / 2`` and ``pi t``, and a learned
    prompt embedding.  Row 0 of the embedding table is the empty prompt;
    unknown prompts also map to it.
    """

    def __init__(self, channels: int = 3, hidden: int = 64, prompts=(), embed_dim: int = 8, seed: int = 0, schedule=None):
        self.channels = channels
        self.hidden = hidden
        self.prompts = {"": 0}
        for p in prompts:
            self.prompts.setdefault(p, len(self.prompts))
        self.embed_dim = embed_dim
        self.schedule = schedule or CosineSchedule()
        rng = np.random.default_rng(seed)
        n_in = 9 * channels + 4 + embed_dim
        sizes = [(n_in, hidden), (hidden, hidden), (hidden, channels)]
        self.layers = []
        for fin, fout in sizes:
            b = 1.0 / np.sqrt(fin)
            self.layers.append([rng.uniform(-b, b, (fin, fout)), rng.uniform(-b, b, fout)])
        self.embed = rng.normal(0.0, 0.1, (len(self.prompts), embed_dim))

    def _features(self, z, t, pidx):
        h, w, c = z.shape
        pad = np.pad(z, ((1, 1), (1, 1), (0, 0)), mode="edge")
        patches = [pad[dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)]
        feats = np.concatenate(patches, axis=-1).reshape(h * w, 9 * c)
        temb = np.array([math.sin(0.5 * math.pi * t), math.cos(0.5 * math.pi * t), math.sin(math.pi * t), math.cos(math.pi * t)])
        temb = np.broadcast_to(temb, (h * w, 4))
        pemb = np.broadcast_to(self.embed[pidx], (h * w, self.embed_dim))
        return np.concatenate([feats, temb, pemb], axis=1)

    def _forward(self, x):
        acts = [x]
        for i, (w, b) in enumerate(self.layers):
            x = x @ w + b
            if i < len(self.layers) - 1:
                x = np.maximum(x, 0)
            acts.append(x)
        return x, acts

    def predict(self, z_t, t, prompt, mask=None, tag=None):
        z_t = np.asarray(z_t)
        if z_t.shape[2] != self.channels:
            raise InvalidInputError(f"denoiser expects {self.channels} channels")
        x = self._features(z_t.astype(np.float64), float(t), self.prompts.get(prompt, 0))
        out, _ = self._forward(x)
        return out.reshape(z_t.shape).astype(z_t.dtype)

    def fit(self, images, prompts=None, steps: int = 500, lr: float = 3e-3, t_min=T_MIN, t_max=T_MAX, drop_prob=0.1, seed=0):
        """Train on ``images`` (list of H x W x C arrays); returns per-step losses."""
        from .optim import AdamState, adam_step

        rng = np.random.default_rng(seed)
        prompts = list(prompts) if prompts is not None else [""] * len(images)
        for p in prompts:
            if p not in self.prompts:
                self.prompts[p] = len(self.prompts)
                self.embed = np.vstack([self.embed, rng.normal(0.0, 0.1, (1, self.embed_dim))])
        params = [a for layer in self.layers for a in layer] + [self.embed]
        sizes = [p.size for p in params]
        flat = np.concatenate([p.ravel() for p in params])
        state = AdamState.zeros(flat.size)
        losses = []
        for _ in range(steps):
            k = int(rng.integers(len(images)))
            x0 = np.asarray(images[k], dtype=np.float64)
            t = float(rng.uniform(t_min, t_max))
            eps = rng.standard_normal(x0.shape)
            z = add_noise(x0, t, eps, self.schedule)
            pidx = 0 if rng.random() < drop_prob else self.prompts[prompts[k]]
            feats = self._features(z, t, pidx)
            out, acts = self._forward(feats)
            err = out - eps.reshape(-1, self.channels)
            losses.append(float(np.mean(err**2)))
            g = 2.0 * err / err.size
            grads = []
            for i in reversed(range(len(self.layers))):
                w, _ = self.layers[i]
                grads.append((acts[i].T @ g, g.sum(axis=0)))
                g = g @ w.T
                if i > 0:
                    g = g * (acts[i] > 0)
            g_embed = np.zeros_like(self.embed)
            g_embed[pidx] = g[:, -self.embed_dim :].sum(axis=0)
            grads = [a for pair in reversed(grads) for a in pair] + [g_embed]
            gflat = np.concatenate([a.ravel() for a in grads])
            flat, state = adam_step(state, flat, gflat, lr)
            off = 0
            for p, n in zip(params, sizes):
                p[...] = flat[off : off + n].reshape(p.shape)
                off += n
        return losses
