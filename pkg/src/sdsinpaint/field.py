"""Trainable radiance field: positional encoding plus a small ReLU MLP.

The density trunk sees only the encoded position; the color head sees the
trunk features concatenated with the encoded view direction.  All parameters
live in one flat vector so the optimizer, the checkpoint format and the
gradient checks can treat them uniformly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import CheckpointFormatError, DegenerateNormalError, InvalidInputError

CHECKPOINT_MAGIC = b"SDSF"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PositionalEncoding:
    num_frequencies_position: int = 8
    num_frequencies_direction: int = 4
    include_input: bool = True

    def position_dim(self) -> int:
        return encoded_dim(3, self.num_frequencies_position, self.include_input)

    def direction_dim(self) -> int:
        return encoded_dim(3, self.num_frequencies_direction, self.include_input)


def encoded_dim(input_dim: int, num_frequencies: int, include_input: bool = True) -> int:
    return input_dim * (2 * num_frequencies + (1 if include_input else 0))


def encode(x, num_frequencies: int, include_input: bool = True) -> np.ndarray:
    """Sinusoidal encoding ``[x, sin(2^0 pi x), cos(2^0 pi x), ...]``.

    Works on the last axis, so ``x`` may be a single vector or a batch.
    """
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("encode: input contains non-finite values")
    freqs = (2.0 ** np.arange(num_frequencies) * np.pi).astype(x.dtype)
    arg = x[..., None, :] * freqs[:, None]
    parts = np.stack([np.sin(arg), np.cos(arg)], axis=-2)
    parts = parts.reshape(*x.shape[:-1], 2 * num_frequencies * x.shape[-1])
    if include_input:
        return np.concatenate([x, parts], axis=-1)
    return parts


def encode_backward(x: np.ndarray, g: np.ndarray, num_frequencies: int, include_input: bool = True) -> np.ndarray:
    """Pull a gradient w.r.t. the encoding back to the raw input."""
    d = x.shape[-1]
    out = np.zeros_like(x)
    if include_input:
        out += g[..., :d]
        g = g[..., d:]
    g = g.reshape(*x.shape[:-1], num_frequencies, 2, d)
    freqs = (2.0 ** np.arange(num_frequencies) * np.pi).astype(x.dtype)
    arg = x[..., None, :] * freqs[:, None]
    dsin = g[..., 0, :] * np.cos(arg)
    dcos = -g[..., 1, :] * np.sin(arg)
    out += np.sum((dsin + dcos) * freqs[:, None], axis=-2)
    return out


@dataclass
class FieldSample:
    position: np.ndarray
    direction: np.ndarray
    color: np.ndarray
    density: float


def _softplus(x):
    return np.logaddexp(0.0, x).astype(x.dtype, copy=False)


class RadianceField:
    """``(encoded position, encoded direction) -> (rgb, sigma)``.

    Parameters are initialised uniformly in ``[-1/sqrt(fan_in), 1/sqrt(fan_in)]``
    from ``np.random.default_rng(seed)``.
    """

    def __init__(
        self,
        encoding: PositionalEncoding | None = None,
        trunk: tuple[int, ...] = (128, 128, 128, 128),
        head: int = 64,
        params: np.ndarray | None = None,
        dtype=np.float32,
        seed: int = 0,
    ):
        self.encoding = encoding or PositionalEncoding()
        self.trunk = tuple(int(w) for w in trunk)
        self.head = int(head)
        if not self.trunk or min(self.trunk) < 1 or self.head < 1:
            raise InvalidInputError("layer widths must be positive")
        self._shapes = self._build_shapes()
        n = sum(int(np.prod(s)) for _, s, _ in self._shapes)
        if params is None:
            params = self._init_params(seed, dtype)
        params = np.asarray(params)
        if params.shape != (n,):
            raise InvalidInputError(f"expected {n} parameters, got shape {params.shape}")
        self.params = params

    def _build_shapes(self):
        shapes = []
        fan = self.encoding.position_dim()
        for i, width in enumerate(self.trunk):
            shapes.append((f"trunk{i}", (fan, width), fan))
            fan = width
        shapes.append(("sigma", (fan, 1), fan))
        head_in = fan + self.encoding.direction_dim()
        shapes.append(("head", (head_in, self.head), head_in))
        shapes.append(("rgb", (self.head, 3), self.head))
        out = []
        for name, (fin, fout), fan_in in shapes:
            out.append((name + ".W", (fin, fout), fan_in))
            out.append((name + ".b", (fout,), fan_in))
        return out

    def _init_params(self, seed, dtype):
        rng = np.random.default_rng(seed)
        chunks = []
        for _, shape, fan_in in self._shapes:
            bound = 1.0 / np.sqrt(fan_in)
            chunks.append(rng.uniform(-bound, bound, size=int(np.prod(shape))))
        return np.concatenate(chunks).astype(dtype)

    @property
    def dtype(self):
        return self.params.dtype

    @property
    def num_params(self) -> int:
        return self.params.size

    def architecture(self) -> list[int]:
        enc = self.encoding
        return [enc.num_frequencies_position, enc.num_frequencies_direction, int(enc.include_input), *self.trunk, self.head]

    @classmethod
    def from_architecture(cls, arch, params=None, dtype=np.float32, seed=0) -> "RadianceField":
        arch = [int(a) for a in arch]
        if len(arch) < 5:
            raise InvalidInputError(f"architecture descriptor too short: {arch}")
        enc = PositionalEncoding(arch[0], arch[1], bool(arch[2]))
        return cls(enc, tuple(arch[3:-1]), arch[-1], params=params, dtype=dtype, seed=seed)

    def copy(self, params=None) -> "RadianceField":
        p = self.params.copy() if params is None else params
        return RadianceField(self.encoding, self.trunk, self.head, params=p)

    def astype(self, dtype) -> "RadianceField":
        return self.copy(self.params.astype(dtype))

    def unflatten(self, flat: np.ndarray) -> dict[str, np.ndarray]:
        out = {}
        off = 0
        for name, shape, _ in self._shapes:
            size = int(np.prod(shape))
            out[name] = flat[off : off + size].reshape(shape)
            off += size
        return out

    # -- forward / backward -------------------------------------------------

    def forward(self, points, dirs, keep_cache: bool = False):
        """Evaluate on ``(M, 3)`` points and unit directions.

        Returns ``(rgb (M, 3), sigma (M,), cache)``; ``cache`` is ``None``
        unless ``keep_cache``.
        """
        dt = self.params.dtype
        points = np.asarray(points, dtype=dt)
        dirs = np.asarray(dirs, dtype=dt)
        p = self.unflatten(self.params)
        enc = self.encoding
        x = encode(points, enc.num_frequencies_position, enc.include_input)
        xd = encode(dirs, enc.num_frequencies_direction, enc.include_input)
        acts = [x]
        h = x
        for i in range(len(self.trunk)):
            h = np.maximum(h @ p[f"trunk{i}.W"] + p[f"trunk{i}.b"], 0)
            acts.append(h)
        sigma_raw = (h @ p["sigma.W"] + p["sigma.b"])[:, 0]
        sigma = _softplus(sigma_raw)
        cat = np.concatenate([h, xd], axis=1)
        hc = np.maximum(cat @ p["head.W"] + p["head.b"], 0)
        rgb = expit(hc @ p["rgb.W"] + p["rgb.b"])
        cache = None
        if keep_cache:
            cache = dict(acts=acts, sigma_raw=sigma_raw, cat=cat, hc=hc, rgb=rgb, points=points)
        return rgb, sigma, cache

    def _trunk_backward(self, p, acts, g_h, grads):
        for i in reversed(range(len(self.trunk))):
            g_pre = g_h * (acts[i + 1] > 0)
            if grads is not None:
                grads[f"trunk{i}.W"] += acts[i].T @ g_pre
                grads[f"trunk{i}.b"] += g_pre.sum(axis=0)
            g_h = g_pre @ p[f"trunk{i}.W"].T
        return g_h

    def backward(self, cache, g_rgb, g_sigma) -> np.ndarray:
        """Parameter gradient of ``sum(g_rgb * rgb) + sum(g_sigma * sigma)``."""
        dt = self.params.dtype
        p = self.unflatten(self.params)
        flat = np.zeros_like(self.params)
        grads = self.unflatten(flat)
        g_rgb = np.asarray(g_rgb, dtype=dt)
        g_sigma = np.asarray(g_sigma, dtype=dt)
        acts, hc, rgb, cat = cache["acts"], cache["hc"], cache["rgb"], cache["cat"]
        h = acts[-1]

        g_o = g_rgb * rgb * (1 - rgb)
        grads["rgb.W"] += hc.T @ g_o
        grads["rgb.b"] += g_o.sum(axis=0)
        g_hc = (g_o @ p["rgb.W"].T) * (hc > 0)
        grads["head.W"] += cat.T @ g_hc
        grads["head.b"] += g_hc.sum(axis=0)
        g_h = (g_hc @ p["head.W"].T)[:, : h.shape[1]]

        g_s = (g_sigma * expit(cache["sigma_raw"]))[:, None]
        grads["sigma.W"] += h.T @ g_s
        grads["sigma.b"] += g_s.sum(axis=0)
        g_h = g_h + g_s @ p["sigma.W"].T

        self._trunk_backward(p, acts, g_h, grads)
        return flat

    def density_and_grad(self, points):
        """Density and its spatial gradient ``d sigma / d p`` at ``(M, 3)`` points."""
        p = self.unflatten(self.params)
        points = np.asarray(points, dtype=self.params.dtype)
        dirs = np.zeros_like(points)
        dirs[:, 2] = 1.0
        _, sigma, cache = self.forward(points, dirs, keep_cache=True)
        g_s = expit(cache["sigma_raw"])[:, None]
        g_h = g_s @ p["sigma.W"].T
        g_x = self._trunk_backward(p, cache["acts"], g_h, None)
        enc = self.encoding
        g_p = encode_backward(points, g_x, enc.num_frequencies_position, enc.include_input)
        return sigma, g_p


def eval_field(field: RadianceField, p, d) -> FieldSample:
    p = np.asarray(p, dtype=field.dtype).reshape(3)
    d = np.asarray(d, dtype=field.dtype).reshape(3)
    if abs(float(np.linalg.norm(d)) - 1.0) > 1e-5:
        raise InvalidInputError("direction must be a unit vector")
    rgb, sigma, _ = field.forward(p[None], d[None])
    return FieldSample(p, d, rgb[0], float(sigma[0]))


def backprop_field(field: RadianceField, p, d, upstream) -> np.ndarray:
    """Gradient of ``upstream . (r, g, b, sigma)`` with respect to the parameters.

    ``p`` and ``d`` may be single vectors or ``(M, 3)`` batches; ``upstream``
    then has shape ``(4,)`` or ``(M, 4)``.
    """
    p = np.atleast_2d(np.asarray(p, dtype=field.dtype))
    d = np.atleast_2d(np.asarray(d, dtype=field.dtype))
    up = np.atleast_2d(np.asarray(upstream, dtype=field.dtype))
    _, _, cache = field.forward(p, d, keep_cache=True)
    return field.backward(cache, up[:, :3], up[:, 3])


def density_gradient_normal(field, p, eps: float = 1e-12) -> np.ndarray:
    """Unit normal ``-grad sigma / |grad sigma|`` at one point.

    ``field`` only needs a ``density_and_grad(points)`` method, so analytic
    test densities work as well as :class:`RadianceField`.
    """
    p = np.asarray(p, dtype=np.float64).reshape(1, 3)
    _, g = field.density_and_grad(p)
    g = np.asarray(g, dtype=np.float64)[0]
    norm = np.linalg.norm(g)
    if norm < eps:
        raise DegenerateNormalError(f"density gradient vanishes at {p[0].tolist()}")
    return -g / norm


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(field: RadianceField, path) -> None:
    """``SDSF`` | u32 version | u32 n | n x u32 architecture | u32 count | f32 params (all LE)."""
    arch = field.architecture()
    theta = np.ascontiguousarray(field.params, dtype="<f4")
    blob = bytearray(CHECKPOINT_MAGIC)
    blob += struct.pack("<II", CHECKPOINT_VERSION, len(arch))
    blob += struct.pack(f"<{len(arch)}I", *arch)
    blob += struct.pack("<I", theta.size)
    blob += theta.tobytes()
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> RadianceField:
    data = Path(path).read_bytes()

    def need(offset, size, what):
        if len(data) < offset + size:
            raise CheckpointFormatError(f"{path}: truncated {what} at offset {offset} (file has {len(data)} bytes)")

    need(0, 4, "magic")
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic {data[:4]!r} at offset 0")
    need(4, 8, "header")
    version, n_arch = struct.unpack_from("<II", data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"{path}: unsupported version {version} at offset 4")
    if not 5 <= n_arch <= 64:
        raise CheckpointFormatError(f"{path}: implausible architecture length {n_arch} at offset 8")
    off = 12
    need(off, 4 * n_arch, "architecture")
    arch = struct.unpack_from(f"<{n_arch}I", data, off)
    off += 4 * n_arch
    need(off, 4, "parameter count")
    (count,) = struct.unpack_from("<I", data, off)
    count_off = off
    off += 4
    need(off, 4 * count, "parameters")
    if len(data) != off + 4 * count:
        raise CheckpointFormatError(f"{path}: {len(data) - off - 4 * count} trailing bytes at offset {off + 4 * count}")
    theta = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float32)
    try:
        return RadianceField.from_architecture(arch, params=theta)
    except InvalidInputError as exc:
        raise CheckpointFormatError(f"{path}: parameter count {count} at offset {count_off} does not match architecture {list(arch)}: {exc}") from exc
