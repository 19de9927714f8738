"""Pinhole cameras, stratified ray sampling and differentiable compositing.

Camera convention: x right, y down, z forward; ``camera_to_world`` is a 4x4
row-major rigid transform.  Depth is the expected termination distance along
the unit ray, with escaping rays terminating at ``far``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import _kernels
from .errors import InvalidInputError
from .field import RadianceField


@dataclass
class Camera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    camera_to_world: np.ndarray = dc_field(default_factory=lambda: np.eye(4))
    near: float = 0.1
    far: float = 10.0

    def __post_init__(self):
        self.camera_to_world = np.asarray(self.camera_to_world, dtype=np.float64).reshape(4, 4)
        rot = self.camera_to_world[:3, :3]
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-5) or np.linalg.det(rot) < 0:
            raise InvalidInputError("camera rotation is not a proper orthonormal matrix")
        if not 0 < self.near < self.far:
            raise InvalidInputError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.width < 1 or self.height < 1:
            raise InvalidInputError("image size must be positive")
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def rotation(self) -> np.ndarray:
        return self.camera_to_world[:3, :3]

    @property
    def center(self) -> np.ndarray:
        return self.camera_to_world[:3, 3]

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, factor: float) -> "Camera":
        """Same pose with the image resampled by ``factor`` (0.5 halves it)."""
        return Camera(
            self.fx * factor, self.fy * factor, self.cx * factor, self.cy * factor,
            round(self.width * factor), round(self.height * factor),
            self.camera_to_world.copy(), self.near, self.far,
        )

    def pixel_rays(self, pixels=None) -> np.ndarray:
        """Unnormalised camera-frame rays ``((u+.5-cx)/fx, (v+.5-cy)/fy, 1)``."""
        if pixels is None:
            pixels = np.arange(self.width * self.height)
        pixels = np.asarray(pixels)
        u = pixels % self.width + 0.5
        v = pixels // self.width + 0.5
        return np.stack([(u - self.cx) / self.fx, (v - self.cy) / self.fy, np.ones(u.shape)], axis=-1)


def generate_ray(camera: Camera, u: int, v: int):
    if not (0 <= u < camera.width and 0 <= v < camera.height):
        raise InvalidInputError(f"pixel ({u}, {v}) outside {camera.width}x{camera.height} image")
    o, d = generate_rays(camera, np.array([int(v) * camera.width + int(u)]))
    return o[0], d[0]


def generate_rays(camera: Camera, pixels=None):
    """World-space origins and unit directions for flat pixel indices (row-major)."""
    r = camera.pixel_rays(pixels)
    d = r @ camera.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(camera.center, d.shape).copy()
    return o, d


def sample_depths(near, far, n: int, jitter=None, dtype=np.float64) -> np.ndarray:
    """Sample depths for a batch of rays.

    ``[near, far]`` is split into ``n`` equal bins; ``jitter`` of shape
    ``(R, n)`` in ``[0, 1)`` places one sample per bin, ``None`` uses bin
    midpoints.
    """
    near = np.atleast_1d(np.asarray(near, dtype=np.float64))
    far = np.atleast_1d(np.asarray(far, dtype=np.float64))
    offs = np.full((1, n), 0.5) if jitter is None else np.asarray(jitter, dtype=np.float64)
    frac = (np.arange(n)[None, :] + offs) / n
    t = near[:, None] + (far - near)[:, None] * frac
    return t.astype(dtype)


def sample_ray(origin, direction, t_n: float, t_f: float, n: int, rng=None, stratified: bool = True) -> np.ndarray:
    if n < 1:
        raise InvalidInputError("need at least one sample per ray")
    jitter = rng.random((1, n)) if (stratified and rng is not None) else None
    return sample_depths(t_n, t_f, n, jitter)[0]


@dataclass
class RaySampleSet:
    """Per-sample state of one ray, as consumed by :func:`integrate_ray`."""

    t: np.ndarray
    sigma: np.ndarray
    rgb: np.ndarray
    near: float
    far: float
    origin: np.ndarray | None = None
    direction: np.ndarray | None = None
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))

    def _batch(self):
        dt = np.result_type(self.t, self.sigma, self.rgb)
        return (
            np.asarray(self.sigma, dt)[None],
            np.asarray(self.rgb, dt)[None],
            np.asarray(self.t, dt)[None],
            np.array([self.near], dt),
            np.array([self.far], dt),
            np.asarray(self.background, dt),
        )

    @property
    def deltas(self) -> np.ndarray:
        return np.diff(self.t, prepend=self.near)

    def weights_and_transmittance(self):
        _, _, _, w, trans = _kernels.composite_forward(*self._batch())
        return w[0], trans[0]


def integrate_ray(samples: RaySampleSet):
    """``(color, depth, opacity)`` for one ray."""
    color, depth, opacity, _, _ = _kernels.composite_forward(*samples._batch())
    return color[0], float(depth[0]), float(opacity[0])


def backprop_ray(samples: RaySampleSet, g_color, g_depth: float = 0.0, g_opacity: float = 0.0):
    """Gradients ``(d/d rgb_i (N, 3), d/d sigma_i (N,))`` of the upstream-weighted outputs."""
    args = samples._batch()
    dt = args[0].dtype
    _, _, _, w, trans = _kernels.composite_forward(*args)
    g_sigma, g_rgb = _kernels.composite_backward(
        *args, w, trans,
        np.asarray(g_color, dt).reshape(1, 3), np.array([g_depth], dt), np.array([g_opacity], dt),
    )
    return g_rgb[0], g_sigma[0]


@dataclass
class RenderOutput:
    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    weights: np.ndarray
    transmittance: np.ndarray
    t: np.ndarray
    cache: dict | None = None


def render_rays(
    field: RadianceField,
    origins,
    dirs,
    near,
    far,
    n_samples: int,
    jitter=None,
    background=None,
    keep_cache: bool = False,
) -> RenderOutput:
    dt = field.dtype
    origins = np.asarray(origins, dtype=dt)
    dirs = np.asarray(dirs, dtype=dt)
    n_rays = origins.shape[0]
    near = np.broadcast_to(np.asarray(near, dtype=dt), (n_rays,)).copy()
    far = np.broadcast_to(np.asarray(far, dtype=dt), (n_rays,)).copy()
    bg = np.zeros(3, dt) if background is None else np.asarray(background, dtype=dt)
    t = sample_depths(near, far, n_samples, jitter, dtype=dt)
    pts = origins[:, None, :] + t[:, :, None] * dirs[:, None, :]
    dirs_rep = np.broadcast_to(dirs[:, None, :], pts.shape)
    rgb, sigma, fcache = field.forward(pts.reshape(-1, 3), dirs_rep.reshape(-1, 3), keep_cache=keep_cache)
    rgb = rgb.reshape(n_rays, n_samples, 3)
    sigma = sigma.reshape(n_rays, n_samples)
    color, depth, opacity, w, trans = _kernels.composite_forward(sigma, rgb, t, near, far, bg)
    cache = None
    if keep_cache:
        cache = dict(field=fcache, sigma=sigma, rgb=rgb, near=near, far=far, bg=bg)
    return RenderOutput(color, depth, opacity, w, trans, t, cache)


def backprop_rays(field: RadianceField, out: RenderOutput, g_color=None, g_depth=None, g_opacity=None) -> np.ndarray:
    """Parameter gradient of ``sum(g_color*color) + sum(g_depth*depth) + sum(g_opacity*opacity)``."""
    if out.cache is None:
        raise InvalidInputError("render_rays was called without keep_cache=True")
    dt = field.dtype
    n = out.depth.shape[0]
    g_color = np.zeros((n, 3), dt) if g_color is None else np.asarray(g_color, dt)
    g_depth = np.zeros(n, dt) if g_depth is None else np.asarray(g_depth, dt)
    g_opacity = np.zeros(n, dt) if g_opacity is None else np.asarray(g_opacity, dt)
    c = out.cache
    g_sigma, g_rgb = _kernels.composite_backward(
        c["sigma"], c["rgb"], out.t, c["near"], c["far"], c["bg"],
        out.weights, out.transmittance, g_color, g_depth, g_opacity,
    )
    return field.backward(c["field"], g_rgb.reshape(-1, 3), g_sigma.reshape(-1))


@dataclass
class RenderedView:
    color: np.ndarray
    depth: np.ndarray
    opacity: np.ndarray
    normals: np.ndarray | None = None
    normal_valid: np.ndarray | None = None


def view_jitter(rng, camera: Camera, n_samples: int) -> np.ndarray:
    """Stratification offsets for every pixel of a view, indexed by pixel."""
    return rng.random((camera.width * camera.height, n_samples))


def render_pixels(field, camera: Camera, pixels, n_samples: int, jitter=None, background=None, keep_cache=False) -> RenderOutput:
    """Render selected flat pixel indices; ``jitter`` rows align with ``pixels``."""
    o, d = generate_rays(camera, pixels)
    return render_rays(field, o, d, camera.near, camera.far, n_samples, jitter, background, keep_cache)


def render_view(
    field: RadianceField,
    camera: Camera,
    n_samples: int = 64,
    rng=None,
    jitter=None,
    background=None,
    normals: str | None = None,
    bands: int = 1,
    workers: int = 1,
    chunk: int = 8192,
) -> RenderedView:
    """Render every pixel of ``camera``.

    With ``rng`` the samples are stratified (offsets drawn once for the whole
    view, keyed by pixel index); without it bin midpoints are used.  The image
    may be split into ``bands`` row bands rendered by ``workers`` threads; the
    result does not depend on either.  ``normals`` is ``None``, ``"plane"``
    (plane fit on rendered depth) or ``"density"`` (weighted density-gradient
    normals), both returned in the camera frame.
    """
    h, w = camera.height, camera.width
    if jitter is None and rng is not None:
        jitter = view_jitter(rng, camera, n_samples)
    edges = np.linspace(0, h, max(1, min(bands, h)) + 1).astype(int)
    jobs = []
    for b0, b1 in zip(edges[:-1], edges[1:]):
        pix = np.arange(b0 * w, b1 * w)
        for s in range(0, pix.size, chunk):
            jobs.append(pix[s : s + chunk])

    def run(pix):
        out = render_pixels(field, camera, pix, n_samples, None if jitter is None else jitter[pix], background)
        return out.color, out.depth, out.opacity

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(run, jobs))
    else:
        parts = [run(p) for p in jobs]
    color = np.concatenate([p[0] for p in parts]).reshape(h, w, 3)
    depth = np.concatenate([p[1] for p in parts]).reshape(h, w)
    opacity = np.concatenate([p[2] for p in parts]).reshape(h, w)
    view = RenderedView(color, depth, opacity)
    if normals == "plane":
        from .geometry import normal_map_from_depth, ray_depth_to_z

        nm = normal_map_from_depth(ray_depth_to_z(depth, camera), camera)
        view.normals, view.normal_valid = nm.normals.astype(field.dtype), nm.valid
    elif normals == "density":
        view.normals, view.normal_valid = _density_normals(field, camera, n_samples, jitter)
    elif normals is not None:
        raise InvalidInputError(f"unknown normal mode {normals!r}")
    return view


def _density_normals(field, camera, n_samples, jitter):
    h, w = camera.height, camera.width
    o, d = generate_rays(camera)
    out = render_rays(field, o, d, camera.near, camera.far, n_samples, jitter)
    pts = o[:, None, :] + out.t[:, :, None].astype(np.float64) * d[:, None, :]
    _, g = field.density_and_grad(pts.reshape(-1, 3))
    g = np.asarray(g, np.float64).reshape(h * w, n_samples, 3)
    n = -g / np.maximum(np.linalg.norm(g, axis=-1, keepdims=True), 1e-12)
    acc = np.einsum("rs,rsc->rc", out.weights.astype(np.float64), n) @ camera.rotation
    norm = np.linalg.norm(acc, axis=-1, keepdims=True)
    valid = norm[:, 0] > 1e-6
    acc = np.where(valid[:, None], acc / np.maximum(norm, 1e-12), 0.0)
    return acc.reshape(h, w, 3).astype(field.dtype), valid.reshape(h, w)
