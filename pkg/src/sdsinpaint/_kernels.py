"""Hot loops: volumetric compositing and windowed plane fitting.

Every kernel has a numba ``@njit`` version and a vectorised numpy version with
identical signatures.  The module-level names (``composite_forward`` ...) are
bound to the numba versions unless ``SDSINPAINT_NUMBA=0`` is set in the
environment or numba cannot be imported.  Results of the two paths agree to
floating-point rounding; they are not guaranteed bit-identical.

Plane fitting always runs in float64 regardless of the caller's dtype.

Plane-fit modes: 0 = invalid, 1 = normal-equations solve, 2 = centred SVD
fallback (plane through the camera centre).  Only mode 1 is differentiated.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("SDSINPAINT_NUMBA", "1") != "0"

MAX_CONDITION = 1e8
RESIDUAL_RATIO = 0.5


# ---------------------------------------------------------------------------
# compositing, numpy path


def composite_forward_numpy(sigma, rgb, t, near, far, bg):
    delta = np.diff(t, axis=1, prepend=near[:, None])
    tau = sigma * delta
    csum = np.cumsum(tau, axis=1)
    trans = np.empty((t.shape[0], t.shape[1] + 1), dtype=t.dtype)
    trans[:, 0] = 1.0
    trans[:, 1:] = np.exp(-csum)
    weights = trans[:, :-1] * -np.expm1(-tau)
    t_last = trans[:, -1]
    color = np.einsum("rs,rsc->rc", weights, rgb) + t_last[:, None] * bg[None, :]
    depth = np.sum(weights * t, axis=1) + t_last * far
    opacity = np.sum(weights, axis=1)
    return color, depth, opacity, weights, trans


def composite_backward_numpy(sigma, rgb, t, near, far, bg, weights, trans, g_color, g_depth, g_opacity):
    delta = np.diff(t, axis=1, prepend=near[:, None])
    g_rgb = weights[:, :, None] * g_color[:, None, :]
    v = np.einsum("rsc,rc->rs", rgb, g_color) + g_depth[:, None] * t + g_opacity[:, None]
    v_bg = g_color @ bg + g_depth * far
    wv = weights * v
    # suffix[k] = sum_{i>k} w_i v_i + T_{N+1} v_bg
    rev = np.cumsum(wv[:, ::-1], axis=1)[:, ::-1]
    suffix = rev - wv + (trans[:, -1] * v_bg)[:, None]
    g_sigma = delta * (trans[:, 1:] * v - suffix)
    return g_sigma, g_rgb


# ---------------------------------------------------------------------------
# plane fitting, numpy path


def _window_offsets(radius):
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing="ij")
    return dy.ravel(), dx.ravel()


def plane_fit_forward_numpy(points, valid, k, radius):
    h, w, _ = points.shape
    pts = points.astype(np.float64)
    dys, dxs = _window_offsets(radius)
    vv, uu = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    ny = vv[:, :, None] + dys[None, None, :]
    nx = uu[:, :, None] + dxs[None, None, :]
    inside = (ny >= 0) & (ny < h) & (nx >= 0) & (nx < w)
    nyc = np.clip(ny, 0, h - 1)
    nxc = np.clip(nx, 0, w - 1)
    flat = nyc * w + nxc
    ok = inside & valid[nyc, nxc]
    cand = pts.reshape(-1, 3)[flat]  # (h, w, nwin, 3)
    d2 = np.sum((cand - pts[:, :, None, :]) ** 2, axis=-1)
    d2 = np.where(ok, d2, np.inf)
    order = np.argsort(d2, axis=-1, kind="stable")[:, :, :k]
    chosen_ok = np.take_along_axis(ok, order, axis=-1)
    nbr = np.where(chosen_ok, np.take_along_axis(flat, order, axis=-1), -1)
    count = chosen_ok.sum(axis=-1)

    a = pts.reshape(-1, 3)[np.maximum(nbr, 0)] * chosen_ok[..., None]
    m = np.einsum("hwki,hwkj->hwij", a, a)
    c = a.sum(axis=2)
    usable = valid & (count >= 3)

    eig = np.linalg.eigvalsh(np.where(usable[..., None, None], m, np.eye(3)))
    lo, hi = eig[..., 0], eig[..., -1]
    well = usable & (lo > 0) & (hi <= MAX_CONDITION * lo)

    m_safe = np.where(well[..., None, None], m, np.eye(3))
    n_raw = np.linalg.solve(m_safe, c[..., None])[..., 0]
    resid = np.einsum("hwki,hwi->hwk", a, n_raw) - chosen_ok
    resid = np.sqrt(np.sum(resid**2, axis=-1))
    ls_ok = well & (resid <= RESIDUAL_RATIO * np.sqrt(np.maximum(count, 1)))
    fallback = well & ~ls_ok

    normals = n_raw / np.maximum(np.linalg.norm(n_raw, axis=-1, keepdims=True), 1e-300)
    if np.any(fallback):
        cnt = np.maximum(count, 1)[..., None]
        mean = a.sum(axis=2) / cnt
        cen = (a - mean[:, :, None, :]) * chosen_ok[..., None]
        cov = np.einsum("hwki,hwkj->hwij", cen, cen)
        cov = np.where(fallback[..., None, None], cov, np.eye(3))
        _, vecs = np.linalg.eigh(cov)
        normals = np.where(fallback[..., None], vecs[..., :, 0], normals)

    facing = np.sum(normals * pts, axis=-1)
    sign = np.where(facing > 0, -1.0, 1.0)
    normals = normals * sign[..., None]
    mode = np.zeros((h, w), dtype=np.int8)
    mode[ls_ok] = 1
    mode[fallback] = 2
    normals[mode == 0] = 0.0
    sign[mode == 0] = 1.0
    n_raw = np.where(well[..., None], n_raw, 0.0)
    nbr[~valid] = -1
    return normals, mode, nbr.astype(np.int64), n_raw, sign


def plane_fit_backward_numpy(points, mode, nbr, n_raw, sign, g_normals):
    h, w, k = nbr.shape
    pts = points.astype(np.float64).reshape(-1, 3)
    active = mode == 1
    g_points = np.zeros((h * w, 3), dtype=np.float64)
    if not np.any(active):
        return g_points.reshape(h, w, 3)
    idx = nbr[active]  # (P, k)
    nb_ok = idx >= 0
    a = pts[np.maximum(idx, 0)] * nb_ok[..., None]
    nr = n_raw[active]
    gn = g_normals[active].astype(np.float64) * sign[active][:, None]
    norm = np.linalg.norm(nr, axis=-1, keepdims=True)
    nhat = nr / norm
    g_nr = (gn - nhat * np.sum(nhat * gn, axis=-1, keepdims=True)) / norm
    m = np.einsum("pki,pkj->pij", a, a)
    lam = np.linalg.solve(m, g_nr[..., None])[..., 0]
    an = np.einsum("pki,pi->pk", a, nr)
    la = np.einsum("pki,pi->pk", a, lam)
    g_a = lam[:, None, :] * (1.0 - an)[..., None] - la[..., None] * nr[:, None, :]
    g_a = g_a * nb_ok[..., None]
    np.add.at(g_points, np.maximum(idx, 0).ravel(), g_a.reshape(-1, 3))
    return g_points.reshape(h, w, 3)


# ---------------------------------------------------------------------------
# numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def composite_forward_numba(sigma, rgb, t, near, far, bg):
        n_rays, n_s = t.shape
        color = np.zeros((n_rays, 3), dtype=t.dtype)
        depth = np.zeros(n_rays, dtype=t.dtype)
        opacity = np.zeros(n_rays, dtype=t.dtype)
        weights = np.zeros((n_rays, n_s), dtype=t.dtype)
        trans = np.zeros((n_rays, n_s + 1), dtype=t.dtype)
        for r in range(n_rays):
            acc = 0.0
            prev = near[r]
            trans[r, 0] = 1.0
            for i in range(n_s):
                tau = sigma[r, i] * (t[r, i] - prev)
                prev = t[r, i]
                wi = trans[r, i] * -np.expm1(-tau)
                acc += tau
                trans[r, i + 1] = np.exp(-acc)
                weights[r, i] = wi
                for ch in range(3):
                    color[r, ch] += wi * rgb[r, i, ch]
                depth[r] += wi * t[r, i]
                opacity[r] += wi
            last = trans[r, n_s]
            for ch in range(3):
                color[r, ch] += last * bg[ch]
            depth[r] += last * far[r]
        return color, depth, opacity, weights, trans

    @njit(cache=True)
    def composite_backward_numba(sigma, rgb, t, near, far, bg, weights, trans, g_color, g_depth, g_opacity):
        n_rays, n_s = t.shape
        g_sigma = np.zeros((n_rays, n_s), dtype=t.dtype)
        g_rgb = np.zeros((n_rays, n_s, 3), dtype=t.dtype)
        for r in range(n_rays):
            gc0, gc1, gc2 = g_color[r, 0], g_color[r, 1], g_color[r, 2]
            suffix = trans[r, n_s] * (gc0 * bg[0] + gc1 * bg[1] + gc2 * bg[2] + g_depth[r] * far[r])
            for i in range(n_s - 1, -1, -1):
                wi = weights[r, i]
                v = gc0 * rgb[r, i, 0] + gc1 * rgb[r, i, 1] + gc2 * rgb[r, i, 2] + g_depth[r] * t[r, i] + g_opacity[r]
                prev = near[r] if i == 0 else t[r, i - 1]
                g_sigma[r, i] = (t[r, i] - prev) * (trans[r, i + 1] * v - suffix)
                suffix += wi * v
                g_rgb[r, i, 0] = wi * gc0
                g_rgb[r, i, 1] = wi * gc1
                g_rgb[r, i, 2] = wi * gc2
        return g_sigma, g_rgb

    @njit(cache=True)
    def plane_fit_forward_numba(points, valid, k, radius):
        h, w, _ = points.shape
        pts = points.astype(np.float64)
        nwin = (2 * radius + 1) * (2 * radius + 1)
        normals = np.zeros((h, w, 3))
        mode = np.zeros((h, w), dtype=np.int8)
        nbr = -np.ones((h, w, k), dtype=np.int64)
        n_raw = np.zeros((h, w, 3))
        sign = np.ones((h, w))
        d2 = np.empty(nwin)
        flat = np.empty(nwin, dtype=np.int64)
        a = np.zeros((k, 3))
        for y in range(h):
            for x in range(w):
                if not valid[y, x]:
                    continue
                j = 0
                for dy in range(-radius, radius + 1):
                    for dx in range(-radius, radius + 1):
                        yy = y + dy
                        xx = x + dx
                        if 0 <= yy < h and 0 <= xx < w and valid[yy, xx]:
                            e0 = pts[yy, xx, 0] - pts[y, x, 0]
                            e1 = pts[yy, xx, 1] - pts[y, x, 1]
                            e2 = pts[yy, xx, 2] - pts[y, x, 2]
                            d2[j] = e0 * e0 + e1 * e1 + e2 * e2
                            flat[j] = yy * w + xx
                        else:
                            d2[j] = np.inf
                            flat[j] = -1
                        j += 1
                order = np.argsort(d2, kind="mergesort")
                count = 0
                for q in range(k):
                    f = flat[order[q]]
                    if f >= 0:
                        nbr[y, x, q] = f
                        count += 1
                if count < 3:
                    continue
                m = np.zeros((3, 3))
                c = np.zeros(3)
                for q in range(k):
                    f = nbr[y, x, q]
                    for i in range(3):
                        a[q, i] = pts[f // w, f % w, i] if f >= 0 else 0.0
                    for i in range(3):
                        c[i] += a[q, i]
                        for jj in range(3):
                            m[i, jj] += a[q, i] * a[q, jj]
                eig = np.linalg.eigvalsh(m)
                if not (eig[0] > 0.0 and eig[2] <= MAX_CONDITION * eig[0]):
                    continue
                sol = np.linalg.solve(m, c)
                res = 0.0
                for q in range(k):
                    if nbr[y, x, q] >= 0:
                        rq = a[q, 0] * sol[0] + a[q, 1] * sol[1] + a[q, 2] * sol[2] - 1.0
                        res += rq * rq
                n_raw[y, x, :] = sol
                if np.sqrt(res) <= RESIDUAL_RATIO * np.sqrt(count):
                    nn = np.sqrt(sol[0] ** 2 + sol[1] ** 2 + sol[2] ** 2)
                    nvec = sol / nn
                    mode[y, x] = 1
                else:
                    mean = np.zeros(3)
                    for q in range(k):
                        if nbr[y, x, q] >= 0:
                            mean += a[q]
                    mean /= count
                    cov = np.zeros((3, 3))
                    for q in range(k):
                        if nbr[y, x, q] >= 0:
                            dv = a[q] - mean
                            for i in range(3):
                                for jj in range(3):
                                    cov[i, jj] += dv[i] * dv[jj]
                    _, vecs = np.linalg.eigh(cov)
                    nvec = vecs[:, 0].copy()
                    mode[y, x] = 2
                facing = nvec[0] * pts[y, x, 0] + nvec[1] * pts[y, x, 1] + nvec[2] * pts[y, x, 2]
                s = -1.0 if facing > 0 else 1.0
                sign[y, x] = s
                normals[y, x, :] = nvec * s
        return normals, mode, nbr, n_raw, sign

    @njit(cache=True)
    def plane_fit_backward_numba(points, mode, nbr, n_raw, sign, g_normals):
        h, w, k = nbr.shape
        pts = points.astype(np.float64)
        g_points = np.zeros((h, w, 3))
        a = np.zeros((k, 3))
        for y in range(h):
            for x in range(w):
                if mode[y, x] != 1:
                    continue
                nr = n_raw[y, x]
                norm = np.sqrt(nr[0] ** 2 + nr[1] ** 2 + nr[2] ** 2)
                s = sign[y, x]
                gn = np.empty(3)
                for i in range(3):
                    gn[i] = g_normals[y, x, i] * s
                dot = (nr[0] * gn[0] + nr[1] * gn[1] + nr[2] * gn[2]) / norm
                g_nr = np.empty(3)
                for i in range(3):
                    g_nr[i] = (gn[i] - nr[i] / norm * dot) / norm
                m = np.zeros((3, 3))
                for q in range(k):
                    f = nbr[y, x, q]
                    for i in range(3):
                        a[q, i] = pts[f // w, f % w, i] if f >= 0 else 0.0
                    for i in range(3):
                        for jj in range(3):
                            m[i, jj] += a[q, i] * a[q, jj]
                lam = np.linalg.solve(m, g_nr)
                for q in range(k):
                    f = nbr[y, x, q]
                    if f < 0:
                        continue
                    an = a[q, 0] * nr[0] + a[q, 1] * nr[1] + a[q, 2] * nr[2]
                    la = a[q, 0] * lam[0] + a[q, 1] * lam[1] + a[q, 2] * lam[2]
                    for i in range(3):
                        g_points[f // w, f % w, i] += lam[i] * (1.0 - an) - la * nr[i]
        return g_points


if USE_NUMBA:
    composite_forward = composite_forward_numba
    composite_backward = composite_backward_numba
    plane_fit_forward = plane_fit_forward_numba
    plane_fit_backward = plane_fit_backward_numba
else:
    composite_forward = composite_forward_numpy
    composite_backward = composite_backward_numpy
    plane_fit_forward = plane_fit_forward_numpy
    plane_fit_backward = plane_fit_backward_numpy


def backend() -> str:
    return "numba" if USE_NUMBA else "numpy"
