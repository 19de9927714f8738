import hashlib
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.special import expit

from sdsinpaint.errors import CheckpointFormatError, DegenerateNormalError, InvalidInputError
from sdsinpaint.field import (
    PositionalEncoding,
    RadianceField,
    backprop_field,
    density_gradient_normal,
    encode,
    encoded_dim,
    eval_field,
    load_checkpoint,
    save_checkpoint,
)

from conftest import make_field, rel_err


def test_encode_zero_vector():
    out = encode(np.zeros(3), 2, True)
    np.testing.assert_array_equal(out, [0, 0, 0, 0, 0, 0, 1, 1, 1, 0, 0, 0, 1, 1, 1])


def test_encode_quarter_period():
    out = encode(np.array([0.5]), 1, False)
    np.testing.assert_allclose(out, [1.0, 0.0], atol=1e-15)


def test_encode_matches_scalar_formula():
    x = [0.25, -0.25]
    expected = list(x)
    for k in range(2):
        f = 2.0**k * np.pi
        expected += [np.sin(f * v) for v in x] + [np.cos(f * v) for v in x]
    np.testing.assert_allclose(encode(np.array(x), 2, True), expected, atol=1e-15)


def test_encode_rejects_non_finite():
    with pytest.raises(InvalidInputError):
        encode(np.array([0.0, np.nan, 1.0]), 2)


@pytest.mark.parametrize("d,L,inc", [(3, 8, True), (3, 4, False), (2, 1, True)])
def test_encoded_dim(d, L, inc):
    assert encode(np.zeros(d), L, inc).shape == (encoded_dim(d, L, inc),)
    assert encoded_dim(d, L, inc) == d * (2 * L + (1 if inc else 0))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=3), st.integers(1, 6))
def test_encoding_components_bounded(x, L):
    out = encode(np.array(x), L, False)
    assert np.all(np.abs(out) <= 1.0)


def test_zero_parameters_give_constant_field():
    field = make_field()
    field.params[:] = 0
    s = eval_field(field, [0.3, -1, 2], [0, 0, 1])
    assert s.density == pytest.approx(np.log(2.0))
    np.testing.assert_allclose(s.color, 0.5)


def test_eval_field_requires_unit_direction():
    with pytest.raises(InvalidInputError):
        eval_field(make_field(), [0, 0, 0], [0, 0, 2])


def _reference_forward(field, p, d):
    """Independent layer-by-layer evaluation from the documented architecture."""
    enc = field.encoding
    w = field.unflatten(field.params)
    h = encode(p, enc.num_frequencies_position, enc.include_input)
    for i in range(len(field.trunk)):
        h = np.maximum(0, h @ w[f"trunk{i}.W"] + w[f"trunk{i}.b"])
    sigma = np.log1p(np.exp(h @ w["sigma.W"] + w["sigma.b"]))[..., 0]
    hd = np.concatenate([h, encode(d, enc.num_frequencies_direction, enc.include_input)], -1)
    hc = np.maximum(0, hd @ w["head.W"] + w["head.b"])
    return expit(hc @ w["rgb.W"] + w["rgb.b"]), sigma


def test_forward_matches_reference(rng):
    for seed in range(5):
        field = make_field(seed)
        p = rng.normal(size=(20, 3))
        d = rng.normal(size=(20, 3))
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        rgb, sigma, _ = field.forward(p, d)
        ref_rgb, ref_sigma = _reference_forward(field, p, d)
        np.testing.assert_allclose(rgb, ref_rgb, rtol=1e-12)
        np.testing.assert_allclose(sigma, ref_sigma, rtol=1e-12)


def test_density_independent_of_direction(rng):
    field = make_field(2)
    p = np.repeat(rng.normal(size=(1, 3)), 10, axis=0)
    d = rng.normal(size=(10, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    _, sigma, _ = field.forward(p, d)
    assert np.ptp(sigma) == 0


def test_output_ranges_on_random_inputs(rng):
    field = make_field(3, np.float32, trunk=(32, 32), head=16)
    p = rng.uniform(-5, 5, (10_000, 3))
    d = rng.normal(size=(10_000, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    rgb, sigma, _ = field.forward(p, d)
    assert np.all(sigma >= 0)
    assert np.all((rgb >= 0) & (rgb <= 1))


def test_backprop_zero_upstream():
    field = make_field()
    g = backprop_field(field, [0.1, 0.2, 0.3], [0, 0, 1], np.zeros(4))
    assert not np.any(g)


def test_backprop_is_linear_in_upstream(rng):
    field = make_field(1)
    p = rng.normal(size=(5, 3))
    d = np.tile([0.0, 0.0, 1.0], (5, 1))
    u1, u2 = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    g = backprop_field(field, p, d, u1 + u2)
    np.testing.assert_allclose(g, backprop_field(field, p, d, u1) + backprop_field(field, p, d, u2), atol=1e-12)


def test_backprop_matches_finite_differences(rng):
    worst = 0.0
    for trial in range(100):
        field = make_field(trial, trunk=(8, 8), head=6, lp=2, ld=1)
        p = rng.normal(size=3)
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        up = rng.normal(size=4)
        g = backprop_field(field, p, d, up)
        k = int(rng.integers(field.num_params))

        def f(theta):
            rgb, sigma, _ = field.copy(theta).forward(p[None], d[None])
            return float(up[:3] @ rgb[0] + up[3] * sigma[0])

        e = 1e-6
        tp, tm = field.params.copy(), field.params.copy()
        tp[k] += e
        tm[k] -= e
        fd = (f(tp) - f(tm)) / (2 * e)
        if abs(fd) + abs(g[k]) > 1e-9:
            worst = max(worst, rel_err(fd, g[k]))
    assert worst < 1e-4


class _Linear:
    def density_and_grad(self, p):
        return p[:, 2], np.tile([0.0, 0.0, 1.0], (len(p), 1))


class _Bump:
    c = np.array([0.2, -0.1, 1.5])

    def density_and_grad(self, p):
        r = p - self.c
        s = np.exp(-np.sum(r * r, axis=1))
        return s, -2 * r * s[:, None]


class _Constant:
    def density_and_grad(self, p):
        return np.ones(len(p)), np.zeros((len(p), 3))


def test_density_normal_linear_ramp():
    np.testing.assert_allclose(density_gradient_normal(_Linear(), [1, 2, 3]), [0, 0, -1])


def test_density_normal_bump_points_radially(rng):
    bump = _Bump()
    for _ in range(8):
        p = bump.c + rng.normal(size=3) * 0.5
        n = density_gradient_normal(bump, p)
        np.testing.assert_allclose(n, (p - bump.c) / np.linalg.norm(p - bump.c), atol=1e-12)


def test_density_normal_degenerate():
    with pytest.raises(DegenerateNormalError):
        density_gradient_normal(_Constant(), [0, 0, 0])


def test_density_normal_on_radiance_field_matches_fd(rng):
    field = make_field(4)
    p = rng.normal(size=(1, 3))
    _, g = field.density_and_grad(p)
    e = 1e-6
    fd = []
    for k in range(3):
        dp = np.zeros((1, 3))
        dp[0, k] = e
        fd.append((field.density_and_grad(p + dp)[0][0] - field.density_and_grad(p - dp)[0][0]) / (2 * e))
    np.testing.assert_allclose(g[0], fd, rtol=1e-5, atol=1e-9)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    field = make_field(5, np.float32, trunk=(32, 16, 8), head=12, lp=6, ld=3)
    path = tmp_path / "f.ckpt"
    save_checkpoint(field, path)
    back = load_checkpoint(path)
    assert back.architecture() == field.architecture()
    assert back.params.tobytes() == field.params.tobytes()
    assert path.read_bytes()[:4] == b"SDSF"


@pytest.mark.parametrize(
    "mutate,needle",
    [
        (lambda b: b"XXXX" + b[4:], "offset 0"),
        (lambda b: b[:10], "offset 4"),
        (lambda b: b[:-3], "offset"),
        (lambda b: b + b"\0", "trailing"),
        (lambda b: b[:4] + (7).to_bytes(4, "little") + b[8:], "version 7 at offset 4"),
    ],
)
def test_corrupt_checkpoint_names_offset(tmp_path, mutate, needle):
    path = tmp_path / "f.ckpt"
    save_checkpoint(make_field(dtype=np.float32), path)
    path.write_bytes(mutate(path.read_bytes()))
    with pytest.raises(CheckpointFormatError, match=needle):
        load_checkpoint(path)


def test_evaluation_deterministic_across_processes():
    code = (
        "import numpy as np, hashlib\n"
        "from sdsinpaint.field import RadianceField, PositionalEncoding\n"
        "f = RadianceField(PositionalEncoding(4, 2), (16, 16), 8, seed=7)\n"
        "p = np.linspace(-1, 1, 30).reshape(10, 3).astype(np.float32)\n"
        "d = np.tile(np.array([0, 0, 1], np.float32), (10, 1))\n"
        "rgb, s, _ = f.forward(p, d)\n"
        "print(hashlib.sha256(rgb.tobytes() + s.tobytes()).hexdigest())\n"
    )
    outs = {subprocess.run([sys.executable, "-c", code], capture_output=True, text=True, check=True).stdout for _ in range(2)}
    f = RadianceField(PositionalEncoding(4, 2), (16, 16), 8, seed=7)
    p = np.linspace(-1, 1, 30).reshape(10, 3).astype(np.float32)
    d = np.tile(np.array([0, 0, 1], np.float32), (10, 1))
    rgb, s, _ = f.forward(p, d)
    assert outs == {hashlib.sha256(rgb.tobytes() + s.tobytes()).hexdigest() + "\n"}


def test_rejects_bad_parameter_count():
    with pytest.raises(InvalidInputError):
        RadianceField(PositionalEncoding(2, 1), (4,), 4, params=np.zeros(3))
