"""Posed RGB-D + mask datasets and an analytic synthetic benchmark.

On-disk layout::

    poses.json               intrinsics, near/far, prompt, per-frame camera_to_world
    images/0000.png          8-bit RGB
    masks/0000.png           8-bit gray, >= 128 marks the region to inpaint
    depth/0000.pfm           optional, distance along the ray
    inpainted_depth/0000.pfm optional, supervision for masked rays
    gt/images, gt/depth, gt/masks   held-out frames without the object

``poses.json`` is validated against ``schemas/poses.schema.json``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from scipy import ndimage

from .errors import DatasetError, InvalidInputError
from .geometry import encode_normal_image, NormalMap
from .imaging import dequantize_u8, ensure_dir, quantize_u8, read_mask_png, read_pfm, read_png, write_mask_png, write_pfm, write_png
from .prior import GaussianPredictor
from .render import Camera, generate_rays

SCHEMA_VERSION = 1


@dataclass
class SceneFrame:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    mask: np.ndarray  # (H, W) bool, true = inpaint
    depth: np.ndarray | None
    camera: Camera
    index: int = 0
    inpainted_depth: np.ndarray | None = None

    def __post_init__(self):
        h, w = self.mask.shape
        if self.image.shape != (h, w, 3):
            raise InvalidInputError(f"frame {self.index}: image shape {self.image.shape} does not match mask {h}x{w}")
        if (self.camera.height, self.camera.width) != (h, w):
            raise InvalidInputError(f"frame {self.index}: camera size does not match image")
        for name in ("depth", "inpainted_depth"):
            d = getattr(self, name)
            if d is not None and d.shape != (h, w):
                raise InvalidInputError(f"frame {self.index}: {name} shape {d.shape} does not match mask {h}x{w}")
        if self.depth is not None and not np.all(self.depth[~self.mask] > 0):
            raise InvalidInputError(f"frame {self.index}: depth must be positive at unmasked pixels")


@dataclass
class SceneDataset:
    frames: list[SceneFrame]
    prompt: str
    gt_frames: list[SceneFrame] = dc_field(default_factory=list)

    def __post_init__(self):
        if len(self.frames) < 2:
            raise InvalidInputError("a dataset needs at least two frames")
        ref = self.frames[0].camera
        for f in self.frames[1:] + self.gt_frames:
            c = f.camera
            if (c.fx, c.fy, c.cx, c.cy, c.width, c.height) != (ref.fx, ref.fy, ref.cx, ref.cy, ref.width, ref.height):
                raise InvalidInputError(f"frame {f.index}: intrinsics differ from frame {self.frames[0].index}")

    @property
    def cameras(self) -> list[Camera]:
        return [f.camera for f in self.frames]

    def gt_for(self, index: int) -> SceneFrame | None:
        for g in self.gt_frames:
            if g.index == index:
                return g
        return None


@lru_cache(maxsize=None)
def load_schema(name: str = "poses") -> dict:
    text = resources.files("sdsinpaint").joinpath(f"schemas/{name}.schema.json").read_text()
    return json.loads(text)


def _name(i: int, ext: str) -> str:
    return f"{i:04d}.{ext}"


def _write_frames(root: Path, frames, with_masks=True):
    ensure_dir(root / "images")
    for f in frames:
        write_png(root / "images" / _name(f.index, "png"), f.image)
        if with_masks:
            write_mask_png(ensure_dir(root / "masks") / _name(f.index, "png"), f.mask)
        if f.depth is not None:
            write_pfm(ensure_dir(root / "depth") / _name(f.index, "pfm"), f.depth)
        if f.inpainted_depth is not None:
            write_pfm(ensure_dir(root / "inpainted_depth") / _name(f.index, "pfm"), f.inpainted_depth)


def save_dataset(dataset: SceneDataset, directory) -> Path:
    root = ensure_dir(directory)
    cam = dataset.frames[0].camera
    poses = {
        "version": SCHEMA_VERSION,
        "prompt": dataset.prompt,
        "width": cam.width,
        "height": cam.height,
        "intrinsics": {"fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy},
        "near": cam.near,
        "far": cam.far,
        "frames": [{"index": f.index, "camera_to_world": f.camera.camera_to_world.tolist()} for f in dataset.frames],
        "gt_frames": [{"index": f.index, "camera_to_world": f.camera.camera_to_world.tolist()} for f in dataset.gt_frames],
    }
    (root / "poses.json").write_text(json.dumps(poses, indent=2))
    _write_frames(root, dataset.frames)
    if dataset.gt_frames:
        _write_frames(root / "gt", dataset.gt_frames)
    return root


def _read_frame(root: Path, entry, meta, need_mask=True) -> SceneFrame:
    i = entry["index"]
    img_path = root / "images" / _name(i, "png")
    if not img_path.exists():
        raise DatasetError(f"frame {i}: missing image {img_path}")
    image = read_png(img_path)
    mask_path = root / "masks" / _name(i, "png")
    if mask_path.exists():
        mask = read_mask_png(mask_path)
    elif need_mask:
        raise DatasetError(f"frame {i}: missing mask {mask_path}")
    else:
        mask = np.zeros(image.shape[:2], bool)
    depth = None
    dpath = root / "depth" / _name(i, "pfm")
    if dpath.exists():
        depth = read_pfm(dpath)
    inp = None
    ipath = root / "inpainted_depth" / _name(i, "pfm")
    if ipath.exists():
        inp = read_pfm(ipath)
    if image.shape[:2] != (meta["height"], meta["width"]):
        raise DatasetError(f"{img_path}: size {image.shape[1]}x{image.shape[0]} differs from poses.json {meta['width']}x{meta['height']}")
    for path, arr in ((mask_path, mask), (dpath, depth), (ipath, inp)):
        if arr is not None and arr.shape[:2] != image.shape[:2]:
            raise DatasetError(f"{path}: size {arr.shape[1]}x{arr.shape[0]} differs from image {image.shape[1]}x{image.shape[0]}")
    intr = meta["intrinsics"]
    try:
        cam = Camera(intr["fx"], intr["fy"], intr["cx"], intr["cy"], meta["width"], meta["height"],
                     np.array(entry["camera_to_world"], dtype=np.float64), meta["near"], meta["far"])
        return SceneFrame(image, mask, depth, cam, i, inp)
    except InvalidInputError as exc:
        raise DatasetError(f"{root / 'poses.json'}: frame {i}: {exc}") from exc


def load_dataset(directory) -> SceneDataset:
    root = Path(directory)
    pose_path = root / "poses.json"
    try:
        meta = json.loads(pose_path.read_text())
    except OSError as exc:
        raise DatasetError(f"{pose_path}: cannot read ({exc.strerror})") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{pose_path}: invalid JSON ({exc})") from exc
    try:
        jsonschema.validate(meta, load_schema("poses"))
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise DatasetError(f"{pose_path}: malformed pose data at {where}: {exc.message}") from exc
    frames = [_read_frame(root, e, meta) for e in meta["frames"]]
    gt = [_read_frame(root / "gt", e, meta, need_mask=False) for e in meta.get("gt_frames", [])]
    try:
        return SceneDataset(frames, meta["prompt"], gt)
    except InvalidInputError as exc:
        raise DatasetError(f"{root}: {exc}") from exc


# -- synthetic benchmark --------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """Analytic scene: a textured back wall (and floor for ``room``) with a sphere occluder."""

    kind: str = "room"  # "plane" or "room"
    width: int = 32
    height: int = 32
    frames: int = 8
    fov_degrees: float = 50.0
    arc_degrees: float = 30.0
    radius: float = 4.0  # camera distance from the look-at point
    wall_z: float = 4.0
    floor_y: float = 1.0  # y points down, so the floor is below the cameras
    occluder: bool = True
    sphere_center: tuple = (0.0, 0.25, 2.4)
    sphere_radius: float = 0.55
    dilate: int = 1
    near: float = 0.5
    far: float = 9.0
    prompt: str = "an empty room with a textured wall"
    texture_seed: int = 0

    def __post_init__(self):
        if self.kind not in ("plane", "room"):
            raise InvalidInputError(f"scene kind must be 'plane' or 'room', got {self.kind!r}")
        if self.frames < 2 or self.width < 4 or self.height < 4:
            raise InvalidInputError("need at least 2 frames of at least 4x4 pixels")
        if self.dilate < 0 or self.sphere_radius <= 0:
            raise InvalidInputError("dilation must be nonnegative and sphere radius positive")


def look_at(center, target, down=(0.0, 1.0, 0.0)) -> np.ndarray:
    """Camera-to-world matrix with z toward ``target`` and y as close to ``down`` as possible."""
    center = np.asarray(center, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - center
    z /= np.linalg.norm(z)
    x = np.cross(np.asarray(down, dtype=np.float64), z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    m = np.eye(4)
    m[:3, :3] = np.stack([x, y, z], axis=1)
    m[:3, 3] = center
    return m


def arc_cameras(spec: SceneSpec) -> list[Camera]:
    f = 0.5 * spec.width / math.tan(math.radians(spec.fov_degrees) / 2)
    target = np.array([0.0, 0.0, spec.wall_z])
    angles = np.radians(np.linspace(-spec.arc_degrees / 2, spec.arc_degrees / 2, spec.frames))
    cams = []
    for a in angles:
        c = target + spec.radius * np.array([math.sin(a), 0.0, -math.cos(a)])
        cams.append(Camera(f, f, spec.width / 2, spec.height / 2, spec.width, spec.height, look_at(c, target), spec.near, spec.far))
    return cams


def _texture_params(seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.6, 1.8, (2, 3, 2)), rng.uniform(0, 2 * np.pi, (2, 3, 2))


def _wall_color(p, freq, phase):
    x, y = p[:, 0], p[:, 1]
    c = [0.5 + 0.22 * np.sin(freq[0, k, 0] * 2 * x + phase[0, k, 0]) * np.cos(freq[0, k, 1] * 2 * y + phase[0, k, 1])
         + 0.1 * np.sin(3.1 * x + 1.7 * y + k) for k in range(3)]
    return np.stack(c, axis=-1)


def _floor_color(p, freq, phase):
    x, z = p[:, 0], p[:, 2]
    c = [0.35 + 0.2 * np.sin(freq[1, k, 0] * 2 * x + phase[1, k, 0]) + 0.12 * np.cos(freq[1, k, 1] * 2 * z + phase[1, k, 1])
         for k in range(3)]
    return np.stack(c, axis=-1)


def trace_scene(spec: SceneSpec, origins, dirs, with_object=True):
    """Exact first-hit distance, colour, world normal and sphere-hit flag per ray."""
    n = origins.shape[0]
    freq, phase = _texture_params(spec.texture_seed)
    t_best = np.full(n, np.inf)
    color = np.zeros((n, 3))
    normal = np.zeros((n, 3))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_wall = (spec.wall_z - origins[:, 2]) / dirs[:, 2]
    hit = (t_wall > 0) & np.isfinite(t_wall)
    t_best[hit] = t_wall[hit]
    p = origins + t_best[:, None] * dirs
    color[hit] = _wall_color(p[hit], freq, phase)
    normal[hit] = (0.0, 0.0, -1.0)
    if spec.kind == "room":
        with np.errstate(divide="ignore", invalid="ignore"):
            t_floor = (spec.floor_y - origins[:, 1]) / dirs[:, 1]
        hit = (t_floor > 0) & (t_floor < t_best)
        t_best[hit] = t_floor[hit]
        p = origins + t_best[:, None] * dirs
        color[hit] = _floor_color(p[hit], freq, phase)
        normal[hit] = (0.0, -1.0, 0.0)
    on_sphere = np.zeros(n, bool)
    if with_object and spec.occluder:
        c = np.asarray(spec.sphere_center, dtype=np.float64)
        oc = origins - c
        b = np.sum(oc * dirs, axis=1)
        disc = b * b - (np.sum(oc * oc, axis=1) - spec.sphere_radius**2)
        t_s = -b - np.sqrt(np.maximum(disc, 0.0))
        hit = (disc > 0) & (t_s > 0) & (t_s < t_best)
        t_best[hit] = t_s[hit]
        p = origins + t_best[:, None] * dirs
        nrm = (p[hit] - c) / spec.sphere_radius
        shade = 0.35 + 0.65 * np.clip(nrm @ np.array([-0.4, -0.6, -0.7]) / np.linalg.norm([0.4, 0.6, 0.7]), 0, 1)
        color[hit] = shade[:, None] * np.array([0.85, 0.25, 0.2])
        normal[hit] = nrm
        on_sphere = hit
    return t_best, np.clip(color, 0.0, 1.0), normal, on_sphere


def _render_frame(spec, cam, with_object):
    o, d = generate_rays(cam)
    t, color, normal, on_sphere = trace_scene(spec, o, d, with_object)
    h, w = cam.height, cam.width
    image = dequantize_u8(quantize_u8(color.reshape(h, w, 3)))
    cam_normal = (normal @ cam.rotation).reshape(h, w, 3)
    return image, t.reshape(h, w).astype(np.float32), cam_normal, on_sphere.reshape(h, w)


def dilate_mask(mask, radius: int) -> np.ndarray:
    """Square-neighbourhood dilation by ``radius`` pixels."""
    if radius == 0:
        return mask.copy()
    return ndimage.binary_dilation(mask, structure=np.ones((3, 3), bool), iterations=radius)


@dataclass
class SyntheticScene:
    dataset: SceneDataset
    spec: SceneSpec
    silhouettes: list[np.ndarray]
    gt_normals: list[np.ndarray]  # camera-frame normals without the object


def generate_synthetic_scene(spec: SceneSpec | None = None, rng=None) -> SyntheticScene:
    """Render the analytic scene with and without the occluder.

    ``rng`` is accepted for interface symmetry; the scene is a deterministic
    function of ``spec`` (texture phases come from ``spec.texture_seed``).
    """
    spec = spec or SceneSpec()
    frames, gts, sils, normals = [], [], [], []
    for i, cam in enumerate(arc_cameras(spec)):
        img, depth, _, sil = _render_frame(spec, cam, True)
        gimg, gdepth, gnorm, _ = _render_frame(spec, cam, False)
        mask = dilate_mask(sil, spec.dilate)
        frames.append(SceneFrame(img, mask, depth, cam, i))
        gts.append(SceneFrame(gimg, mask.copy(), gdepth, cam, i))
        sils.append(sil)
        normals.append(gnorm)
    return SyntheticScene(SceneDataset(frames, spec.prompt, gts), spec, sils, normals)


def nearest_fill_depth(depth, mask) -> np.ndarray:
    """Fill masked depth with the nearest unmasked value (a deliberately naive 2D inpaint)."""
    mask = np.asarray(mask, bool)
    if mask.all():
        raise InvalidInputError("cannot inpaint a fully masked depth map")
    idx = ndimage.distance_transform_edt(mask, return_distances=False, return_indices=True)
    return np.asarray(depth)[idx[0], idx[1]].astype(np.float32)


def attach_inpainted_depth(dataset: SceneDataset, source="nearest") -> SceneDataset:
    """Give every frame an inpainted depth map; ``source`` is ``"nearest"`` or ``"gt"``."""
    for f in dataset.frames:
        if source == "gt":
            g = dataset.gt_for(f.index)
            if g is None or g.depth is None:
                raise InvalidInputError(f"frame {f.index}: no ground-truth depth available")
            f.inpainted_depth = g.depth.copy()
        elif source == "nearest":
            if f.depth is None:
                raise InvalidInputError(f"frame {f.index}: no depth to inpaint")
            f.inpainted_depth = nearest_fill_depth(f.depth, f.mask)
        else:
            raise InvalidInputError(f"unknown inpainting source {source!r}")
    return dataset


def oracle_prior(scene: SyntheticScene, var: float = 0.01) -> GaussianPredictor:
    """Gaussian prior whose per-view modes are the object-free renders.

    Keys: ``("rgb", i)`` background colour, ``("normal", i)`` encoded
    background normals, ``("depth", i)`` min-max normalised background depth.
    """
    mu = {}
    for g, n in zip(scene.dataset.gt_frames, scene.gt_normals):
        mu[("rgb", g.index)] = g.image
        valid = np.ones(n.shape[:2], bool)
        mu[("normal", g.index)] = encode_normal_image(NormalMap(n.copy(), valid))
        d = g.depth.astype(np.float64)
        nd = (d - d.min()) / max(d.max() - d.min(), 1e-12)
        mu[("depth", g.index)] = np.repeat(nd[..., None], 3, axis=-1)
    return GaussianPredictor(mu, var)
