"""Adam, reconstruction losses and the joint training loop.

The per-iteration objective is

    L = L_color + l1 * L_depth + l2 * L_appearance_sds + l3 * L_geometry_sds

where the reconstruction terms use rays from unmasked pixels only and the
distillation terms act on the masked region.  Every iteration draws from
three independent random streams keyed on ``(seed, iteration, k)``, so a run
can be resumed from any checkpoint and reproduces the uninterrupted run.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, PriorUnavailableError, TrainingDivergedError, CheckpointFormatError
from .field import PositionalEncoding, RadianceField, save_checkpoint
from .prior import T_MAX, T_MIN, CosineSchedule, TimestepSampler
from .render import backprop_rays, render_rays
from .sds import MultiViewBatch, sds_depth, sds_geometry, sds_multiview

log = logging.getLogger(__name__)

LOG_COLUMNS = (
    "iteration", "loss_color", "loss_depth", "loss_appearance_sds", "loss_geometry_sds",
    "total", "t_appearance", "t_geometry", "omega_appearance", "omega_geometry",
)

ABLATIONS = ("i", "ii", "iii", "iv", "v")


@dataclass(frozen=True)
class LossWeights:
    depth: float = 0.1  # l1
    appearance: float = 1e-4  # l2
    geometry: float = 1e-4  # l3

    def __post_init__(self):
        if min(self.depth, self.appearance, self.geometry) < 0:
            raise InvalidInputError("loss weights must be nonnegative")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    rays_per_step: int = 1024
    n_samples: int = 64
    n_views: int = 5
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    field_seed: int = 0
    weights: LossWeights = dc_field(default_factory=LossWeights)
    appearance_sds: bool = True
    geometry_sds: bool = True
    depth_sds: bool = False  # geometry term uses depth images instead of normals
    multiview: bool = True
    inpainted_depth: bool = False  # supervise masked rays with supplied inpainted depth
    omega_appearance: float | None = None
    omega_geometry: float | None = None
    omega_appearance_range: tuple = (7.5, 25.0)
    omega_geometry_range: tuple = (2.5, 7.5)
    t_min: float = T_MIN
    t_max: float = T_MAX
    prior_resolution: int | None = 64
    sds_every: int = 1
    checkpoint_every: int = 0
    trunk: tuple = (128, 128, 128, 128)
    head: int = 64
    pos_frequencies: int = 8
    dir_frequencies: int = 4
    background: tuple = (0.0, 0.0, 0.0)
    dtype: str = "float32"
    workers: int = 1

    def __post_init__(self):
        counts = dict(iterations=self.iterations, rays_per_step=self.rays_per_step, n_samples=self.n_samples,
                      n_views=self.n_views, sds_every=self.sds_every)
        for name, v in counts.items():
            if int(v) < 1:
                raise InvalidInputError(f"{name} must be positive, got {v}")
        if self.lr <= 0:
            raise InvalidInputError("learning rate must be positive")
        if self.checkpoint_every < 0:
            raise InvalidInputError("checkpoint_every must be nonnegative")
        if self.dtype not in ("float32", "float64"):
            raise InvalidInputError("dtype must be float32 or float64")

    @classmethod
    def for_ablation(cls, row: str, **overrides) -> "TrainConfig":
        """Config for one ablation row: (i) no SDS, (ii) appearance SDS,
        (iii) ii plus inpainted-depth supervision, (iv) ii plus geometry SDS,
        (v) iv with multi-view appearance SDS."""
        if row not in ABLATIONS:
            raise InvalidInputError(f"unknown ablation row {row!r}; expected one of {', '.join(ABLATIONS)}")
        flags = dict(
            i=dict(appearance_sds=False, geometry_sds=False, multiview=False, inpainted_depth=False),
            ii=dict(appearance_sds=True, geometry_sds=False, multiview=False, inpainted_depth=False),
            iii=dict(appearance_sds=True, geometry_sds=False, multiview=False, inpainted_depth=True),
            iv=dict(appearance_sds=True, geometry_sds=True, multiview=False, inpainted_depth=False),
            v=dict(appearance_sds=True, geometry_sds=True, multiview=True, inpainted_depth=False),
        )[row]
        flags.update(overrides)
        return cls(**flags)

    def build_field(self) -> RadianceField:
        enc = PositionalEncoding(self.pos_frequencies, self.dir_frequencies, True)
        return RadianceField(enc, tuple(self.trunk), self.head, dtype=np.dtype(self.dtype), seed=self.field_seed)


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0

    @classmethod
    def zeros(cls, n: int, dtype=np.float64) -> "AdamState":
        return cls(np.zeros(n, dtype), np.zeros(n, dtype), 0)


def adam_step(state: AdamState, theta, grad, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """One bias-corrected Adam update; returns ``(theta, state)`` without mutating inputs."""
    theta = np.asarray(theta)
    grad = np.asarray(grad)
    if grad.shape != theta.shape or state.m.shape != theta.shape:
        raise InvalidInputError(f"shape mismatch: theta {theta.shape}, grad {grad.shape}, moments {state.m.shape}")
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise TrainingDivergedError(
            f"non-finite gradient at step {state.step + 1}: {bad.size} entries, first index {bad[0]}"
        )
    step = state.step + 1
    m = beta1 * state.m + (1 - beta1) * grad
    v = beta2 * state.v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1**step)
    v_hat = v / (1 - beta2**step)
    new = theta - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(theta.dtype)
    return new, AdamState(m, v, step)


# -- reconstruction losses ----------------------------------------------------


@dataclass
class RayBatch:
    """Pixels drawn from a list of frames: frame index and flat pixel index."""

    frame: np.ndarray
    pixel: np.ndarray

    def __len__(self):
        return int(self.frame.size)


def unmasked_pixels(frames):
    """Flat table of every (frame, pixel) with a false mask."""
    fr, px = [], []
    for i, f in enumerate(frames):
        p = np.flatnonzero(~np.asarray(f.mask, bool).ravel())
        fr.append(np.full(p.size, i))
        px.append(p)
    return RayBatch(np.concatenate(fr), np.concatenate(px))


def masked_pixels(frames):
    fr, px = [], []
    for i, f in enumerate(frames):
        p = np.flatnonzero(np.asarray(f.mask, bool).ravel())
        fr.append(np.full(p.size, i))
        px.append(p)
    return RayBatch(np.concatenate(fr), np.concatenate(px))


def sample_rays(pool: RayBatch, n: int, rng) -> RayBatch:
    if len(pool) == 0:
        raise InvalidInputError("no pixels to sample rays from")
    idx = rng.integers(len(pool), size=n)
    return RayBatch(pool.frame[idx], pool.pixel[idx])


def _batch_geometry(frames, batch: RayBatch):
    from .render import generate_rays

    n = len(batch)
    o = np.empty((n, 3))
    d = np.empty((n, 3))
    near = np.empty(n)
    far = np.empty(n)
    for i in np.unique(batch.frame):
        sel = batch.frame == i
        cam = frames[i].camera
        o[sel], d[sel] = generate_rays(cam, batch.pixel[sel])
        near[sel], far[sel] = cam.near, cam.far
    return o, d, near, far


def _gather(frames, batch: RayBatch, attr):
    out = []
    for f, p in zip(batch.frame, batch.pixel):
        arr = getattr(frames[f], attr)
        out.append(arr.reshape(-1, *arr.shape[2:])[p])
    return np.asarray(out)


def _render_batch(field, frames, batch, n_samples, jitter, background):
    o, d, near, far = _batch_geometry(frames, batch)
    return render_rays(field, o, d, near, far, n_samples, jitter, background, keep_cache=True)


def _check_batch(batch):
    if len(batch) == 0:
        raise InvalidInputError("empty ray batch")


def recon_color_loss(field, frames, batch: RayBatch, n_samples=64, jitter=None, background=None):
    """Mean over rays of the channel-summed squared color error, and its gradient."""
    _check_batch(batch)
    out = _render_batch(field, frames, batch, n_samples, jitter, background)
    target = _gather(frames, batch, "image").astype(field.dtype)
    diff = out.color - target
    n = len(batch)
    loss = float(np.sum(diff.astype(np.float64) ** 2) / n)
    grad = backprop_rays(field, out, g_color=2.0 * diff / n)
    return loss, grad


def recon_depth_loss(field, frames, batch: RayBatch, n_samples=64, jitter=None, background=None, attr="depth"):
    """Mean squared depth error; ``(0, 0)`` when the frames carry no depth."""
    _check_batch(batch)
    if any(getattr(frames[i], attr) is None for i in np.unique(batch.frame)):
        return 0.0, np.zeros_like(field.params)
    out = _render_batch(field, frames, batch, n_samples, jitter, background)
    target = _gather(frames, batch, attr).astype(field.dtype)
    diff = out.depth - target
    n = len(batch)
    loss = float(np.sum(diff.astype(np.float64) ** 2) / n)
    grad = backprop_rays(field, out, g_depth=2.0 * diff / n)
    return loss, grad


def _fused_recon(field, frames, batch, n_samples, jitter, background, depth_weight, has_depth):
    """Color and weighted depth loss on one shared render; one backward pass."""
    out = _render_batch(field, frames, batch, n_samples, jitter, background)
    n = len(batch)
    diff_c = out.color - _gather(frames, batch, "image").astype(field.dtype)
    loss_c = float(np.sum(diff_c.astype(np.float64) ** 2) / n)
    g_depth = None
    loss_d = 0.0
    if has_depth:
        diff_d = out.depth - _gather(frames, batch, "depth").astype(field.dtype)
        loss_d = float(np.sum(diff_d.astype(np.float64) ** 2) / n)
        g_depth = (depth_weight * 2.0 / n) * diff_d
    grad = backprop_rays(field, out, g_color=2.0 * diff_c / n, g_depth=g_depth)
    return loss_c, loss_d, grad


def select_nearby_views(cameras, anchor: int, n: int) -> list[int]:
    """The anchor followed by its ``n - 1`` nearest views by camera centre."""
    if not 1 <= n <= len(cameras):
        raise InvalidInputError(f"need 1 <= N <= {len(cameras)}, got {n}")
    centers = np.array([c.center for c in cameras])
    dist = np.linalg.norm(centers - centers[anchor], axis=1)
    others = [i for i in np.lexsort((np.arange(len(cameras)), dist)) if i != anchor]
    return [int(anchor)] + [int(i) for i in others[: n - 1]]


# -- training -----------------------------------------------------------------


@dataclass
class TrainResult:
    field: RadianceField
    log: list[dict]
    state: AdamState
    omega_appearance: float
    omega_geometry: float


STATE_FILE = "train_state.npz"
CHECKPOINT_FILE = "field.ckpt"


def draw_omegas(config: TrainConfig):
    rng = np.random.default_rng([config.seed, 7])
    wa = rng.uniform(*config.omega_appearance_range)
    wg = rng.uniform(*config.omega_geometry_range)
    if config.omega_appearance is not None:
        wa = config.omega_appearance
    if config.omega_geometry is not None:
        wg = config.omega_geometry
    return float(wa), float(wg)


def save_train_state(out_dir, field, state: AdamState, iteration: int):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(field, out_dir / CHECKPOINT_FILE)
    np.savez(out_dir / STATE_FILE, params=field.params, m=state.m, v=state.v, step=state.step, iteration=iteration)


def load_train_state(out_dir, field):
    path = Path(out_dir) / STATE_FILE
    try:
        with np.load(path) as z:
            params, m, v = z["params"], z["m"], z["v"]
            step, it = int(z["step"]), int(z["iteration"])
    except (OSError, KeyError, ValueError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable training state ({exc})") from exc
    if params.shape != field.params.shape:
        raise CheckpointFormatError(f"{path}: parameter count {params.size} does not match the configured field")
    return field.copy(params.astype(field.dtype)), AdamState(m, v, step), it


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_log(path, rows, append=False):
    path = Path(path)
    new = not append or not path.exists()
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in LOG_COLUMNS])


def read_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return [{k: (float(v) if v not in ("",) else None) for k, v in row.items()} for row in csv.DictReader(f)]


def train(config: TrainConfig, scene, prompt: str | None, predictor=None, out_dir=None, resume: bool = False,
          field: RadianceField | None = None, callback=None) -> TrainResult:
    """Optimise a radiance field on ``scene`` (a :class:`SceneDataset`).

    ``out_dir`` receives ``loss.csv`` and, every ``checkpoint_every``
    iterations, ``field.ckpt`` plus ``train_state.npz``.  With ``resume`` the
    run continues from the saved state.  If the prior becomes unavailable the
    current state is checkpointed before the error propagates.
    """
    frames = scene.frames
    prompt = scene.prompt if prompt is None else prompt
    sds_on = config.appearance_sds or config.geometry_sds
    if sds_on and predictor is None:
        raise InvalidInputError("distillation enabled but no predictor given")
    has_depth = all(f.depth is not None for f in frames)
    if config.inpainted_depth and any(f.inpainted_depth is None for f in frames):
        raise InvalidInputError("inpainted-depth supervision requested but frames lack inpainted depth")

    field = config.build_field() if field is None else field
    state = AdamState.zeros(field.num_params)
    start = 0
    out_dir = Path(out_dir) if out_dir is not None else None
    if resume:
        if out_dir is None or not (out_dir / STATE_FILE).exists():
            raise CheckpointFormatError("nothing to resume: no training state in the output directory")
        field, state, start = load_train_state(out_dir, field)
    log_path = out_dir / "loss.csv" if out_dir is not None else None
    if log_path is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        if resume:
            _truncate_log(log_path, start)
        else:
            write_log(log_path, [])

    wts = config.weights
    bg = np.asarray(config.background, dtype=field.dtype)
    schedule = getattr(predictor, "schedule", None) or CosineSchedule()
    sampler = TimestepSampler(config.iterations, config.t_min, config.t_max)
    omega_a, omega_g = draw_omegas(config)
    cameras = [f.camera for f in frames]
    pool = unmasked_pixels(frames)
    mpool = masked_pixels(frames) if config.inpainted_depth else None
    n_views = min(config.n_views if config.multiview else 1, len(frames))
    geo_fn = sds_depth if config.depth_sds else sds_geometry
    S = config.n_samples
    rows = []

    for it in range(start, config.iterations):
        if out_dir is not None and config.checkpoint_every and it > start and it % config.checkpoint_every == 0:
            write_log(log_path, rows, append=True)  # the log on disk always covers the checkpoint
            rows = []
            save_train_state(out_dir, field, state, it)
        row = dict.fromkeys(LOG_COLUMNS)
        row["iteration"] = it

        rng = np.random.default_rng([config.seed, it, 0])
        batch = sample_rays(pool, config.rays_per_step, rng)
        jitter = rng.random((len(batch), S))
        loss_c, loss_d, grad = _fused_recon(field, frames, batch, S, jitter, bg, wts.depth, has_depth)
        if mpool is not None:
            mb = sample_rays(mpool, config.rays_per_step, rng)
            ld, gd = recon_depth_loss(field, frames, mb, S, rng.random((len(mb), S)), bg, attr="inpainted_depth")
            loss_d += ld
            grad = grad + wts.depth * gd
        loss_a = loss_g = 0.0
        do_sds = it % config.sds_every == 0
        try:
            if config.appearance_sds and do_sds:
                rng = np.random.default_rng([config.seed, it, 1])
                t = sampler.sample(it, rng)
                anchor = int(rng.integers(len(frames)))
                views = select_nearby_views(cameras, anchor, n_views)
                seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=len(views))]
                mv = MultiViewBatch([(frames[v].camera, frames[v]) for v in views], t, seeds)
                res = sds_multiview(field, mv, prompt, predictor, schedule, omega_a, None, S,
                                    config.prior_resolution, bg, config.workers)
                loss_a = res.loss
                grad = grad + wts.appearance * res.grad
                row["t_appearance"], row["omega_appearance"] = t, omega_a
            if config.geometry_sds and do_sds:
                rng = np.random.default_rng([config.seed, it, 2])
                t = sampler.sample(it, rng)
                anchor = int(rng.integers(len(frames)))
                f = frames[anchor]
                res = geo_fn(field, f.camera, f, prompt, predictor, schedule, t, omega_g, rng, S,
                             config.prior_resolution, bg)
                loss_g = res.loss
                grad = grad + wts.geometry * res.grad
                row["t_geometry"], row["omega_geometry"] = t, omega_g
        except PriorUnavailableError:
            if out_dir is not None:
                write_log(log_path, rows, append=True)
                save_train_state(out_dir, field, state, it)
                log.error("prior unavailable at iteration %d; state saved to %s", it, out_dir)
            raise

        total = loss_c + wts.depth * loss_d + wts.appearance * loss_a + wts.geometry * loss_g
        if not math.isfinite(total):
            raise TrainingDivergedError(f"non-finite loss at iteration {it}")
        row.update(loss_color=loss_c, loss_depth=loss_d, loss_appearance_sds=loss_a, loss_geometry_sds=loss_g, total=total)
        params, state = adam_step(state, field.params, grad, config.lr, config.beta1, config.beta2, config.adam_eps)
        field.params = params
        rows.append(row)
        if callback is not None:
            callback(it, field, row)
        if log_path is not None and len(rows) >= 50:
            write_log(log_path, rows, append=True)
            rows = []
    if log_path is not None:
        write_log(log_path, rows, append=True)
        save_train_state(out_dir, field, state, config.iterations)
    full_log = read_log(log_path) if log_path is not None else rows
    return TrainResult(field, full_log, state, omega_a, omega_g)


def _truncate_log(path, start):
    """Drop rows at or past ``start`` so a resumed run appends cleanly."""
    if not path.exists():
        write_log(path, [])
        return
    with open(path, newline="") as f:
        lines = f.read().splitlines()
    keep = [lines[0]] + [ln for ln in lines[1:] if int(ln.split(",", 1)[0]) < start]
    Path(path).write_text("\n".join(keep) + "\n")
