import math

import numpy as np
import pytest
from scipy.integrate import quad

from sdsinpaint.errors import InvalidInputError, InvalidTimestepError
from sdsinpaint.prior import (
    T_MAX,
    T_MIN,
    CosineSchedule,
    GaussianMixturePredictor,
    GaussianPredictor,
    NoisePredictor,
    PriorRequest,
    ToyDenoiser,
    TimestepSampler,
    ZeroPredictor,
    add_noise,
    predict_noise_cfg,
    sample_timestep,
)

S = CosineSchedule()


def test_schedule_sanity():
    a = [S.alpha_bar(t) for t in (0.02, 0.5, 0.98)]
    assert a[0] > a[1] > a[2]
    assert all(0 < v < 1 for v in a)
    assert S.alpha_bar(0.5) == pytest.approx(0.5)
    ts = np.linspace(0.001, 0.999, 500)
    ab = np.array([S.alpha_bar(t) for t in ts])
    assert np.all(np.diff(ab) < 0)
    assert all(S.weight(t) > 0 for t in ts)


@pytest.mark.parametrize("t", [0.0, 1.0, -0.1, 1.5])
def test_schedule_rejects_closed_endpoints(t):
    with pytest.raises(InvalidTimestepError):
        S.alpha_bar(t)


def test_add_noise_scalar_case():
    t = 2 * math.acos(0.5) / math.pi  # alpha_bar = 0.25
    assert S.alpha_bar(t) == pytest.approx(0.25)
    np.testing.assert_allclose(add_noise(np.ones(1), t, np.zeros(1)), [0.5])


def test_add_noise_small_t_is_identity():
    x = np.linspace(0, 1, 6).reshape(1, 2, 3)
    np.testing.assert_allclose(add_noise(x, 1e-9, np.ones_like(x)), x, atol=1e-8)


def test_add_noise_variance_monte_carlo():
    rng = np.random.default_rng(0)
    for t in (0.1, 0.5, 0.9):
        eps = rng.standard_normal(100_000)
        z = add_noise(np.zeros(100_000), t, eps)
        assert abs(z.var() / (1 - S.alpha_bar(t)) - 1) < 0.02


def test_add_noise_shape_mismatch():
    with pytest.raises(InvalidInputError):
        add_noise(np.zeros(3), 0.5, np.zeros(4))


def test_sampler_bounds_and_endpoints():
    s = TimestepSampler(100)
    assert s.upper(0) == T_MAX
    rng = np.random.default_rng(0)
    hi_last = T_MIN + (T_MAX - T_MIN) * (1 - math.sqrt(99 / 100))
    assert s.upper(99) == pytest.approx(hi_last)
    for i in range(100):
        t = sample_timestep(s, i, rng)
        assert T_MIN <= t <= s.upper(i) <= T_MAX
    with pytest.raises(InvalidInputError):
        s.sample(100, rng)
    with pytest.raises(InvalidInputError):
        TimestepSampler(10, 0.5, 0.4)


def test_sampler_bucket_means_decrease():
    iters = 200
    s = TimestepSampler(iters)
    ts = np.empty((1000, iters))
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        ts[seed] = [s.sample(i, rng) for i in range(iters)]
    buckets = ts.reshape(1000, 10, iters // 10).mean(axis=(0, 2))
    assert np.all(np.diff(buckets) < 0)


class _Linear(NoisePredictor):
    """eps(y) = a_y * z + b_y with distinct constants per prompt."""

    schedule = S
    coef = {"": (0.3, -0.2), "cat": (1.1, 0.4)}

    def __init__(self):
        self.calls = []

    def predict(self, z_t, t, prompt, mask=None, tag=None):
        self.calls.append(prompt)
        a, b = self.coef[prompt]
        return a * z_t + b


def _request(w, shape=(2, 3, 3)):
    z = np.arange(np.prod(shape), dtype=np.float64).reshape(shape) / 10
    return PriorRequest(z, np.ones(shape[:2], bool), "cat", 0.5, w)


def test_cfg_identities():
    p = _Linear()
    z = _request(1.0).z_t
    np.testing.assert_array_equal(predict_noise_cfg(p, _request(1.0)), 1.1 * z + 0.4)
    np.testing.assert_array_equal(predict_noise_cfg(p, _request(0.0)), 0.3 * z - 0.2)
    assert p.calls == ["", "cat", "", "cat"]


def test_cfg_hand_computation():
    z = _request(7.5).z_t
    expected = (0.3 * z - 0.2) + 7.5 * ((1.1 * z + 0.4) - (0.3 * z - 0.2))
    np.testing.assert_allclose(predict_noise_cfg(_Linear(), _request(7.5)), expected, rtol=1e-14)


def test_cfg_affine_in_guidance():
    p = _Linear()
    e = [predict_noise_cfg(p, _request(w)) for w in (2.0, 5.0, 11.0)]
    np.testing.assert_allclose((e[1] - e[0]) / 3.0, (e[2] - e[1]) / 6.0, atol=1e-12)


def test_cfg_checks_shape():
    class Bad(_Linear):
        def predict(self, z_t, t, prompt, mask=None, tag=None):
            return np.zeros(3)

    with pytest.raises(InvalidInputError):
        predict_noise_cfg(Bad(), _request(1.0))


def test_request_validation():
    with pytest.raises(InvalidInputError):
        PriorRequest(np.zeros((2, 2)), np.ones((2, 2), bool), "", 0.5, 1.0)
    with pytest.raises(InvalidInputError):
        PriorRequest(np.zeros((2, 2, 3)), np.ones((3, 2), bool), "", 0.5, 1.0)
    with pytest.raises(InvalidInputError):
        PriorRequest(np.full((2, 2, 3), np.nan), np.ones((2, 2), bool), "", 0.5, 1.0)


def test_gaussian_unit_variance_simplification(rng):
    p = GaussianPredictor(0.0, 1.0)
    z = rng.normal(size=(4, 4, 3))
    for t in (0.1, 0.6):
        np.testing.assert_allclose(p.predict(z, t, "x"), math.sqrt(1 - S.alpha_bar(t)) * z, rtol=1e-12)


def test_gaussian_zero_at_mode(rng):
    mu = rng.uniform(size=(5, 4, 3))
    p = GaussianPredictor(mu, 0.02)
    t = 0.4
    np.testing.assert_allclose(p.predict(math.sqrt(S.alpha_bar(t)) * mu, t, ""), 0, atol=1e-15)


def test_gaussian_rejects_negative_variance():
    with pytest.raises(InvalidInputError):
        GaussianPredictor(0.5, -1.0)


def test_gaussian_expected_residual_parallel_to_offset(rng):
    mu = rng.uniform(size=(6, 6, 3))
    x = mu + rng.normal(0, 0.2, mu.shape)
    p = GaussianPredictor(mu, 0.01)
    t = 0.5
    acc = np.zeros_like(x)
    for _ in range(10_000):
        eps = rng.standard_normal(x.shape)
        acc += p.predict(add_noise(x, t, eps), t, "") - eps
    mean = acc / 10_000
    d = x - mu
    cos = np.sum(mean * d) / np.linalg.norm(mean) / np.linalg.norm(d)
    assert cos > 0.99 and np.sum(mean * d) > 0


def test_gaussian_tag_mapping_and_resize():
    mu = {("rgb", 0): 0.2, ("rgb", 1): np.full((2, 2, 3), 0.7)}
    p = GaussianPredictor(mu, 0.0)
    t = 0.5
    z = np.zeros((4, 4, 3))
    ab = S.alpha_bar(t)
    scale = math.sqrt(1 - ab) / (1 - ab)
    np.testing.assert_allclose(p.predict(z, t, "", tag=("rgb", 0)), -scale * math.sqrt(ab) * 0.2)
    np.testing.assert_allclose(p.predict(z, t, "", tag=("rgb", 1)), -scale * math.sqrt(ab) * 0.7)
    with pytest.raises(InvalidInputError, match="tag"):
        p.predict(z, t, "", tag=("normal", 0))


def _mixture_score_quadrature(z, t, means, variances, weights):
    """d/dz log p_t(z), integrating the clean density against the forward kernel."""
    ab = S.alpha_bar(t)
    sn = 1 - ab

    def p0(x):
        return sum(w * math.exp(-0.5 * (x - m) ** 2 / v) / math.sqrt(2 * math.pi * v) for m, w, v in zip(means, weights, variances))

    def kernel(x):
        return math.exp(-0.5 * (z - math.sqrt(ab) * x) ** 2 / sn)

    lo, hi = min(means) - 3, max(means) + 3
    num = quad(lambda x: p0(x) * kernel(x) * (-(z - math.sqrt(ab) * x) / sn), lo, hi, epsabs=1e-13, limit=200)[0]
    den = quad(lambda x: p0(x) * kernel(x), lo, hi, epsabs=1e-13, limit=200)[0]
    return num / den


def test_mixture_matches_quadrature_oracle():
    means, variances, weights = [0.2, 0.8], [0.01, 0.04], [0.3, 0.7]
    p = GaussianMixturePredictor(means, variances, weights)
    for t in (0.1, 0.4, 0.8):
        zs = np.linspace(-0.5, 1.5, 9)
        ours = p.predict(zs.reshape(3, 3, 1), t, "").ravel()
        ref = np.array([-math.sqrt(1 - S.alpha_bar(t)) * _mixture_score_quadrature(z, t, means, variances, weights) for z in zs])
        np.testing.assert_allclose(ours, ref, atol=1e-4)


def test_single_component_mixture_equals_gaussian(rng):
    z = rng.normal(size=(3, 3, 3))
    np.testing.assert_allclose(GaussianMixturePredictor([0.4], [0.05]).predict(z, 0.3, ""), GaussianPredictor(0.4, 0.05).predict(z, 0.3, ""), rtol=1e-12)


def test_zero_predictor():
    np.testing.assert_array_equal(ZeroPredictor().predict(np.ones((2, 2, 3)), 0.5, "a"), 0)


def test_toy_denoiser_learns_constant_image():
    img = np.full((6, 6, 3), [0.8, 0.3, 0.5])
    den = ToyDenoiser(hidden=32, prompts=["wall"], seed=0)
    losses = den.fit([img], ["wall"], steps=400, lr=3e-3, seed=0)
    assert np.mean(losses[-50:]) < 0.5 * np.mean(losses[:50])
    out = den.predict(np.zeros((6, 6, 3)), 0.5, "wall")
    assert out.shape == (6, 6, 3) and np.all(np.isfinite(out))


def test_toy_denoiser_unknown_prompt_uses_empty_row():
    den = ToyDenoiser(prompts=["a"], seed=1)
    z = np.random.default_rng(0).normal(size=(3, 3, 3))
    np.testing.assert_array_equal(den.predict(z, 0.5, "never seen"), den.predict(z, 0.5, ""))
    with pytest.raises(InvalidInputError):
        den.predict(np.zeros((3, 3, 4)), 0.5, "")
