"""Score-distillation gradient estimators.

All estimators return the gradient of the distillation objective with respect
to the field parameters.  The predictor is never differentiated: the pixel
gradient ``w(t) (eps_hat - eps)`` is treated as a constant and chained
through image compositing, resampling to the prior resolution, the normal or
depth encoding, and volume rendering.  Pixel gradients outside the mask are
zeroed before anything is chained.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import InvalidInputError
from .geometry import encode_normal_image, normal_map_backward, normal_map_from_depth, ray_depth_to_z
from .imaging import resize_bilinear, resize_bilinear_adjoint
from .prior import CosineSchedule, NoisePredictor, PriorRequest, add_noise, predict_noise_cfg
from .render import Camera, backprop_rays, render_pixels, view_jitter


@dataclass
class SdsGradient:
    grad: np.ndarray  # pixel gradient, zero outside the mask
    t: float
    noise: np.ndarray

    @property
    def surrogate_loss(self) -> float:
        """``0.5 |g|^2``: the stop-gradient MSE whose image gradient is ``g``."""
        return 0.5 * float(np.sum(self.grad.astype(np.float64) ** 2))


@dataclass
class SdsResult:
    grad: np.ndarray  # parameter gradient
    loss: float
    t: float
    pixel: SdsGradient | None = None


@dataclass
class MultiViewBatch:
    """Views for one multi-view update; every view shares ``t``."""

    frames: list
    t: float
    seeds: list[int] = dc_field(default_factory=list)

    def __post_init__(self):
        if not self.frames:
            raise InvalidInputError("multi-view batch needs at least one view")
        if not self.seeds:
            self.seeds = list(range(len(self.frames)))
        if len(self.seeds) != len(self.frames):
            raise InvalidInputError("one noise seed per view required")


def sds_pixel_gradient(x, m, prompt, predictor: NoisePredictor, schedule: CosineSchedule | None, t, guidance, rng, tag=None) -> SdsGradient:
    schedule = schedule or predictor.schedule
    x = np.asarray(x)
    m = np.asarray(m, bool)
    eps = rng.standard_normal(x.shape).astype(x.dtype)
    z_t = add_noise(x, t, eps, schedule)
    eps_hat = predict_noise_cfg(predictor, PriorRequest(z_t, m, prompt, t, guidance, tag))
    g = schedule.weight(t) * (eps_hat - eps)
    g = np.where(m[..., None], g, 0).astype(x.dtype)
    return SdsGradient(g, t, eps)


def _prior_shape(h, w, resolution):
    if resolution is None:
        return h, w
    if isinstance(resolution, int):
        return resolution, resolution
    return tuple(resolution)


def _to_prior(img, mask, resolution):
    h, w = mask.shape
    ph, pw = _prior_shape(h, w, resolution)
    if (ph, pw) == (h, w):
        return img, mask
    x = resize_bilinear(img, ph, pw)
    m = resize_bilinear(mask.astype(np.float64), ph, pw) > 0
    return x, m


def _empty(field, t):
    return SdsResult(np.zeros_like(field.params), 0.0, t)


def sds_appearance(field, camera: Camera, frame, prompt, predictor, schedule, t, guidance, rng,
                   n_samples=64, prior_resolution=None, background=None, stratified=True) -> SdsResult:
    """Appearance distillation for one view.

    Masked pixels are rendered and composited over the frame's observed
    pixels; the completed image goes to the prior.
    """
    mask = np.asarray(frame.mask, bool)
    pix = np.flatnonzero(mask.ravel())
    if pix.size == 0:
        return _empty(field, t)
    dt = field.dtype
    jitter = rng.random((pix.size, n_samples)) if stratified else None
    out = render_pixels(field, camera, pix, n_samples, jitter, background, keep_cache=True)
    h, w = mask.shape
    image = np.asarray(frame.image, dtype=dt).reshape(-1, 3).copy()
    image[pix] = out.color
    image = image.reshape(h, w, 3)

    x, m = _to_prior(image, mask, prior_resolution)
    sg = sds_pixel_gradient(x, m, prompt, predictor, schedule, t, guidance, rng, tag=("rgb", getattr(frame, "index", None)))
    g_full = resize_bilinear_adjoint(sg.grad, h, w).reshape(-1, 3)
    grad = backprop_rays(field, out, g_color=g_full[pix])
    return SdsResult(grad, sg.surrogate_loss, t, sg)


def _render_full_depth(field, camera, n_samples, jitter, background):
    pix = np.arange(camera.width * camera.height)
    out = render_pixels(field, camera, pix, n_samples, jitter, background)
    return out.depth.reshape(camera.height, camera.width)


def _chain_depth(field, camera, g_depth, n_samples, jitter, background):
    g = g_depth.ravel()
    pix = np.flatnonzero(g != 0)
    if pix.size == 0:
        return np.zeros_like(field.params)
    out = render_pixels(field, camera, pix, n_samples, None if jitter is None else jitter[pix], background, keep_cache=True)
    return backprop_rays(field, out, g_depth=g[pix].astype(field.dtype))


def sds_geometry(field, camera: Camera, frame, prompt, predictor, schedule, t, guidance, rng,
                 n_samples=64, prior_resolution=None, background=None, stratified=True, k=9, window=5) -> SdsResult:
    """Geometry distillation on the plane-fit normal image of one view.

    With ``stratified=False`` samples sit at bin midpoints, making the
    rendered geometry deterministic; the noise still comes from ``rng``.
    """
    mask = np.asarray(frame.mask, bool)
    if not mask.any():
        return _empty(field, t)
    h, w = mask.shape
    jitter = view_jitter(rng, camera, n_samples) if stratified else None
    depth = _render_full_depth(field, camera, n_samples, jitter, background)
    zdepth = ray_depth_to_z(depth.astype(np.float64), camera)
    nmap = normal_map_from_depth(zdepth, camera, k=k, window=window)
    img = encode_normal_image(nmap).astype(field.dtype)

    x, m = _to_prior(img, mask, prior_resolution)
    sg = sds_pixel_gradient(x, m, prompt, predictor, schedule, t, guidance, rng, tag=("normal", getattr(frame, "index", None)))
    g_img = resize_bilinear_adjoint(sg.grad, h, w).astype(np.float64)
    g_img[~nmap.valid] = 0.0
    g_z = normal_map_backward(nmap, 0.5 * g_img, camera)
    g_depth = ray_depth_to_z(g_z, camera)  # d z / d depth is the same per-pixel factor
    grad = _chain_depth(field, camera, g_depth, n_samples, jitter, background)
    return SdsResult(grad, sg.surrogate_loss, t, sg)


def normalize_depth(depth):
    """Per-view min-max normalisation to [0, 1]; returns (image, lo, hi, argmin, argmax)."""
    flat = depth.ravel()
    i_lo, i_hi = int(np.argmin(flat)), int(np.argmax(flat))
    lo, hi = flat[i_lo], flat[i_hi]
    span = max(hi - lo, 1e-12)
    return (depth - lo) / span, lo, hi, i_lo, i_hi


def sds_depth(field, camera: Camera, frame, prompt, predictor, schedule, t, guidance, rng,
              n_samples=64, prior_resolution=None, background=None, stratified=True) -> SdsResult:
    """Depth distillation: the prior sees the min-max normalised depth as a gray image."""
    mask = np.asarray(frame.mask, bool)
    if not mask.any():
        return _empty(field, t)
    h, w = mask.shape
    jitter = view_jitter(rng, camera, n_samples) if stratified else None
    depth = _render_full_depth(field, camera, n_samples, jitter, background).astype(np.float64)
    nd, lo, hi, i_lo, i_hi = normalize_depth(depth)
    img = np.repeat(nd[..., None], 3, axis=-1).astype(field.dtype)

    x, m = _to_prior(img, mask, prior_resolution)
    sg = sds_pixel_gradient(x, m, prompt, predictor, schedule, t, guidance, rng, tag=("depth", getattr(frame, "index", None)))
    g_nd = resize_bilinear_adjoint(sg.grad, h, w).astype(np.float64).sum(axis=-1)
    span = max(hi - lo, 1e-12)
    g_depth = g_nd / span
    flat = g_depth.reshape(-1)
    if hi - lo > 1e-12:
        flat[i_lo] += np.sum(g_nd * (nd - 1.0)) / span
        flat[i_hi] -= np.sum(g_nd * nd) / span
    grad = _chain_depth(field, camera, g_depth, n_samples, jitter, background)
    return SdsResult(grad, sg.surrogate_loss, t, sg)


def sds_multiview(field, batch: MultiViewBatch, prompt, predictor, schedule, guidance, rng=None,
                  n_samples=64, prior_resolution=None, background=None, workers: int = 1) -> SdsResult:
    """Sum of per-view appearance gradients under one shared timestep.

    ``batch.frames`` holds ``(camera, frame)`` pairs; view ``i`` draws its
    stratification and noise from ``default_rng(batch.seeds[i])``.  ``rng``
    is accepted for signature symmetry and unused.
    """

    def one(i):
        camera, frame = batch.frames[i]
        return sds_appearance(field, camera, frame, prompt, predictor, schedule, batch.t, guidance,
                              np.random.default_rng(batch.seeds[i]), n_samples, prior_resolution, background)

    idx = range(len(batch.frames))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(one, idx))
    else:
        results = [one(i) for i in idx]
    grad = results[0].grad.copy()
    for r in results[1:]:
        grad += r.grad
    return SdsResult(grad, float(sum(r.loss for r in results)), batch.t)
