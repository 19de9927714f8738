"""PSNR and depth error inside masked regions, plus report output.

Images are compared on a peak value of 1.0.  A zero-error region has an
infinite PSNR, written to JSON as ``Infinity``.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from .errors import EmptyMaskError, InvalidInputError

INF = math.inf


def mask_bbox(mask) -> tuple[int, int, int, int]:
    """Inclusive ``(u_min, v_min, u_max, v_max)`` of the true pixels."""
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise EmptyMaskError("mask has no true pixels")
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return int(cols[0]), int(rows[0]), int(cols[-1]), int(rows[-1])


def bbox_region(mask) -> np.ndarray:
    u0, v0, u1, v1 = mask_bbox(mask)
    region = np.zeros(np.shape(mask), bool)
    region[v0 : v1 + 1, u0 : u1 + 1] = True
    return region


def _region_values(a, b, region):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch: {a.shape} vs {b.shape}")
    if region is None:
        return a, b
    region = np.asarray(region, bool)
    if region.shape != a.shape[:2]:
        raise InvalidInputError(f"region shape {region.shape} does not match image {a.shape[:2]}")
    if not region.any():
        raise EmptyMaskError("evaluation region is empty")
    return a[region], b[region]


def psnr(a, b, region=None) -> float:
    a, b = _region_values(a, b, region)
    mse = float(np.mean((a - b) ** 2))
    return INF if mse == 0 else 10.0 * math.log10(1.0 / mse)


def depth_l2(d_hat, d, region=None) -> float:
    a, b = _region_values(d_hat, d, region)
    return float(np.mean((a - b) ** 2))


@dataclass
class FrameScores:
    index: int
    bbox: tuple
    psnr_bbox: float
    psnr_mask: float
    depth_l2_bbox: float | None
    depth_l2_mask: float | None
    lpips: float | None = None  # reserved for external tools
    fid: float | None = None


@dataclass
class EvalReport:
    frames: list[FrameScores]
    config: dict = dc_field(default_factory=dict)

    @property
    def mean(self) -> dict:
        out = {}
        for key in ("psnr_bbox", "psnr_mask", "depth_l2_bbox", "depth_l2_mask", "lpips", "fid"):
            vals = [getattr(f, key) for f in self.frames]
            out[key] = None if any(v is None for v in vals) else float(np.mean(vals))
        return out

    def to_dict(self) -> dict:
        frames = []
        for f in self.frames:
            d = asdict(f)
            d["bbox"] = list(f.bbox)
            frames.append(d)
        return {"version": 1, "config": self.config, "frames": frames, "mean": self.mean}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def table(self) -> str:
        head = f"{'frame':>5}  {'bbox':>17}  {'PSNR box':>9}  {'PSNR mask':>9}  {'L2 box':>9}  {'L2 mask':>9}"
        lines = [head, "-" * len(head)]

        def num(v, fmt):
            return "-" if v is None else format(v, fmt)

        for f in self.frames:
            box = ",".join(str(x) for x in f.bbox)
            lines.append(f"{f.index:>5}  {box:>17}  {num(f.psnr_bbox, '9.3f')}  {num(f.psnr_mask, '9.3f')}  "
                         f"{num(f.depth_l2_bbox, '9.5f')}  {num(f.depth_l2_mask, '9.5f')}")
        m = self.mean
        lines.append(f"{'mean':>5}  {'':>17}  {num(m['psnr_bbox'], '9.3f')}  {num(m['psnr_mask'], '9.3f')}  "
                     f"{num(m['depth_l2_bbox'], '9.5f')}  {num(m['depth_l2_mask'], '9.5f')}")
        return "\n".join(lines)


def score_frame(index, image, gt_image, mask, depth=None, gt_depth=None) -> FrameScores:
    mask = np.asarray(mask, bool)
    box = bbox_region(mask)
    dl2b = dl2m = None
    if depth is not None and gt_depth is not None:
        dl2b = depth_l2(depth, gt_depth, box)
        dl2m = depth_l2(depth, gt_depth, mask)
    return FrameScores(index, mask_bbox(mask), psnr(image, gt_image, box), psnr(image, gt_image, mask), dl2b, dl2m)


def evaluate(renders, gt_frames, config=None) -> EvalReport:
    """``renders``: list of ``(image, depth_or_None)`` aligned with ``gt_frames``."""
    if len(renders) != len(gt_frames):
        raise InvalidInputError(f"{len(renders)} renders but {len(gt_frames)} ground-truth frames")
    scores = [score_frame(g.index, img, g.image, g.mask, dep, g.depth) for (img, dep), g in zip(renders, gt_frames)]
    return EvalReport(scores, dict(config or {}))
