import json
import math

import jsonschema
import numpy as np
import pytest

from sdsinpaint.errors import EmptyMaskError, InvalidInputError
from sdsinpaint.metrics import EvalReport, depth_l2, evaluate, mask_bbox, psnr, score_frame
from sdsinpaint.scene import SceneFrame, load_schema

from conftest import make_camera


def test_bbox_examples():
    m = np.zeros((10, 8), bool)
    m[7, 3] = True  # row v = 7, column u = 3
    assert mask_bbox(m) == (3, 7, 3, 7)
    assert mask_bbox(np.ones((5, 9), bool)) == (0, 0, 8, 4)
    with pytest.raises(EmptyMaskError):
        mask_bbox(np.zeros((3, 3), bool))


def test_bbox_matches_scan(rng):
    for _ in range(50):
        m = rng.random((9, 13)) > 0.93
        if not m.any():
            continue
        us = [u for v in range(9) for u in range(13) if m[v, u]]
        vs = [v for v in range(9) for u in range(13) if m[v, u]]
        assert mask_bbox(m) == (min(us), min(vs), max(us), max(vs))


def test_psnr_examples():
    a = np.full((4, 4, 3), 0.3)
    assert psnr(a, a) == math.inf
    assert psnr(a, a + 0.1) == pytest.approx(20.0)


def test_psnr_scalar_oracle(rng):
    a, b = rng.random((6, 5, 3)), rng.random((6, 5, 3))
    region = rng.random((6, 5)) > 0.4
    s, n = 0.0, 0
    for v in range(6):
        for u in range(5):
            if region[v, u]:
                for c in range(3):
                    s += (a[v, u, c] - b[v, u, c]) ** 2
                    n += 1
    assert abs(psnr(a, b, region) - 10 * math.log10(n / s)) < 1e-9


def test_psnr_properties(rng):
    a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
    region = np.zeros((8, 8), bool)
    region[2:6, 1:7] = True
    base = psnr(a, b, region)
    c = b.copy()
    c[~region] = rng.random(c[~region].shape)
    assert psnr(a, c, region) == base
    perm = rng.permutation(64).reshape(8, 8)
    ap = a.reshape(64, 3)[perm.ravel()].reshape(8, 8, 3)
    bp = b.reshape(64, 3)[perm.ravel()].reshape(8, 8, 3)
    assert psnr(ap, bp) == pytest.approx(psnr(a, b), abs=1e-12)
    assert psnr(a, a + 0.05) > psnr(a, a + 0.06)


def test_shape_and_region_errors(rng):
    with pytest.raises(InvalidInputError):
        psnr(np.zeros((2, 2, 3)), np.zeros((2, 3, 3)))
    with pytest.raises(EmptyMaskError):
        depth_l2(np.zeros((2, 2)), np.zeros((2, 2)), np.zeros((2, 2), bool))


def test_depth_l2_examples(rng):
    d = rng.uniform(1, 3, (5, 5))
    assert depth_l2(d, d) == 0
    assert depth_l2(d + 0.5, d) == pytest.approx(0.25)
    region = rng.random((5, 5)) > 0.5
    e = rng.uniform(1, 3, (5, 5))
    ref = sum((e[v, u] - d[v, u]) ** 2 for v in range(5) for u in range(5) if region[v, u]) / region.sum()
    assert abs(depth_l2(e, d, region) - ref) < 1e-9


def _gt(rng, index):
    mask = np.zeros((6, 6), bool)
    mask[1:3, 2:5] = True
    mask[4, 4] = True
    return SceneFrame(rng.random((6, 6, 3)), mask, rng.uniform(1, 2, (6, 6)), make_camera(6, 6), index)


def test_score_frame_regions(rng):
    g = _gt(rng, 0)
    img = g.image + 0.1
    s = score_frame(0, img, g.image, g.mask, g.depth + 0.5, g.depth)
    assert s.bbox == (2, 1, 4, 4)
    assert s.psnr_bbox == pytest.approx(20.0) and s.psnr_mask == pytest.approx(20.0)
    assert s.depth_l2_bbox == pytest.approx(0.25)
    img2 = img.copy()
    img2[3, 2] = g.image[3, 2]  # inside the box, outside the mask
    s2 = score_frame(0, img2, g.image, g.mask)
    assert s2.psnr_mask == s.psnr_mask and s2.psnr_bbox > s.psnr_bbox
    assert s2.depth_l2_mask is None


def test_report_aggregates_and_schema(rng):
    gts = [_gt(rng, i) for i in range(3)]
    renders = [(g.image + 0.05 * (i + 1), g.depth + 0.1) for i, g in enumerate(gts)]
    rep = evaluate(renders, gts, {"iterations": 10})
    assert isinstance(rep, EvalReport)
    assert rep.mean["psnr_mask"] == pytest.approx(np.mean([f.psnr_mask for f in rep.frames]))
    assert rep.mean["lpips"] is None
    doc = json.loads(rep.to_json())
    jsonschema.validate(doc, load_schema("report"))
    assert doc["config"] == {"iterations": 10}
    table = rep.table()
    assert table.splitlines()[-1].startswith(" mean") and len(table.splitlines()) == 6
    with pytest.raises(InvalidInputError):
        evaluate(renders[:2], gts)


def test_infinite_psnr_serialises(rng):
    g = _gt(rng, 0)
    rep = evaluate([(g.image, None)], [g])
    assert rep.frames[0].psnr_mask == math.inf
    assert json.loads(rep.to_json())["frames"][0]["psnr_mask"] == math.inf
    assert "-" in rep.table()
