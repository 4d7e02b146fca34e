import math

import numpy as np
import pytest
from scipy import special

from conftest import random_units
from sddf.geometry import reduce_input
from sddf.model import (
    INF_EPS,
    ArchSpec,
    CheckpointError,
    SddfModel,
    Squasher,
    checkpoint_load,
    checkpoint_save,
    decode_checkpoint,
    directional_derivative,
    directional_gradient_audit,
    encode_checkpoint,
    fit_prescale,
    softplus,
)
from sddf.shapes import Sphere, cast_ray


def random_model(rng, dim=3, latent_dim=0, layers=3, width=16, skips=(), squasher="sigmoid"):
    arch = ArchSpec(dim=dim, latent_dim=latent_dim, layers=layers, width=width, skips=skips)
    model = SddfModel.initialize(arch, rng, squasher)
    # nonzero biases so every code path is exercised
    model.theta += rng.normal(0, 0.05, model.theta.shape)
    return model


def reference_forward(model, x):
    h = x
    params = model.params()
    for i, (W, b) in enumerate(params[:-1]):
        inp = np.concatenate([h, x], axis=1) if i in model.arch.skips else h
        a = inp @ W.T + b
        h = np.logaddexp(0.0, model.arch.beta * a) / model.arch.beta
    W, b = params[-1]
    return (h @ W.T + b)[:, 0]


# ----------------------------------------------------------------- squashers


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "erf"])
def test_squasher_monotone_with_correct_derivative(kind):
    s = Squasher(kind)
    x = np.linspace(-6, 6, 2001)
    d = s.derivative(x)
    assert np.all(d > 0)
    fd = (s(x + 1e-6) - s(x - 1e-6)) / 2e-6
    np.testing.assert_allclose(d, fd, atol=1e-8)
    assert s.at_infinity == 1.0
    assert s(np.inf) == 1.0


def test_sigmoid_inverse_on_full_range():
    x = np.linspace(-10, 10, 20001)
    s = Squasher("sigmoid")
    assert np.max(np.abs(s.inverse(s(x)) - x)) < 1e-8


@pytest.mark.parametrize("kind", ["tanh", "erf"])
@pytest.mark.xfail(strict=True, reason="float64 rounds phi(x) to 1 (or within an ulp) before |x| reaches 10")
def test_inverse_on_full_range_saturating(kind):
    x = np.linspace(-10, 10, 20001)
    s = Squasher(kind)
    assert np.max(np.abs(s.inverse(s(x)) - x)) < 1e-8


@pytest.mark.parametrize("kind,limit", [("tanh", 9.9), ("erf", 4.3)])
def test_inverse_on_representable_range(kind, limit):
    x = np.linspace(-limit, limit, 20001)
    s = Squasher(kind)
    assert np.max(np.abs(s.inverse(s(x)) - x)) < 1e-8


def test_softplus_stable_form():
    x = np.array([-50.0, -1.0, 0.0, 0.01, 0.3, 1e3])
    np.testing.assert_allclose(softplus(x, 100.0), np.logaddexp(0.0, 100.0 * x) / 100.0, rtol=1e-13)
    assert np.all(np.isfinite(softplus(np.array([1e300, -1e300]), 100.0)))


# -------------------------------------------------------------- architecture


def test_arch_parameter_count_and_validation():
    a = ArchSpec(dim=3, latent_dim=4, layers=4, width=8, skips=(2,))
    assert a.input_dim == 2 + 3 + 4
    expected = (8 * 9 + 8) + (8 * 8 + 8) + (8 * 17 + 8) + (8 * 8 + 8) + (8 + 1)
    assert a.n_params == expected
    assert len(a.block_names()) == 10
    for bad in (dict(dim=4), dict(layers=0), dict(width=0), dict(skips=(4,)), dict(skips=(0,))):
        with pytest.raises(ValueError):
            ArchSpec(**{"layers": 4, **bad})
    with pytest.raises(ValueError):
        SddfModel(a, np.zeros(3))


def test_zero_net_gives_phi_of_zero(rng):
    arch = ArchSpec(dim=3, layers=2, width=8)
    p = rng.normal(size=(20, 3))
    eta = random_units(rng, 20, 3)
    for kind in ("sigmoid", "tanh", "erf"):
        model = SddfModel(arch, squasher=kind)
        np.testing.assert_array_equal(model.raw(p, eta), 0.0)
        np.testing.assert_array_equal(model.forward_q(p, eta), Squasher(kind)(0.0))


@pytest.mark.parametrize("skips", [(), (1,), (1, 2)])
def test_forward_matches_reference(rng, skips):
    model = random_model(rng, latent_dim=2, layers=3, skips=skips)
    p = rng.normal(size=(64, 3))
    eta = random_units(rng, 64, 3)
    z = rng.normal(size=2)
    x = np.concatenate([reduce_input(p, eta), eta, np.tile(z, (64, 1))], axis=1)
    np.testing.assert_allclose(model.raw(p, eta, z), reference_forward(model, x), rtol=0, atol=1e-12)
    np.testing.assert_allclose(model.forward_q(p, eta, z), special.expit(reference_forward(model, x)),
                               rtol=0, atol=1e-12)


@pytest.mark.parametrize("dim", [2, 3])
def test_prediction_shifts_along_ray(rng, dim):
    model = random_model(rng, dim=dim, squasher="erf")
    model.scale, model.offset = 0.7, 0.1
    p = rng.normal(size=(500, dim))
    eta = random_units(rng, 500, dim)
    t = rng.uniform(-10, 10, (500, 1))
    q0 = model.forward_q(p, eta)
    q1 = model.forward_q(p + t * eta, eta)
    assert np.max(np.abs(q0 - q1)) < 1e-12
    h0 = model.sddf_eval(p, eta)
    h1 = model.sddf_eval(p + t * eta, eta)
    f = np.isfinite(h0) & np.isfinite(h1)
    assert f.mean() > 0.9
    assert np.max(np.abs(h1[f] - (h0[f] - t[f, 0]))) < 1e-9


def test_saturated_prediction_reads_as_miss(rng):
    model = random_model(rng, layers=1, width=4)
    sl = model.block_slices()[-1]
    model.theta[model.block_slices()[-2]] = 0.0
    p = rng.normal(size=(5, 3))
    eta = random_units(rng, 5, 3)
    model.theta[sl] = 40.0
    assert np.all(np.isinf(model.sddf_eval(p, eta)))
    assert math.isinf(model.sddf_eval(p[0], eta[0]))
    # just below the threshold stays finite
    model.theta[sl] = special.logit(1.0 - 2 * INF_EPS)
    assert np.all(np.isfinite(model.sddf_eval(p, eta)))


def test_dimension_mismatch_raises(rng):
    model = random_model(rng, dim=3, latent_dim=2)
    with pytest.raises(ValueError):
        model.forward_q(np.zeros(2), np.array([1.0, 0.0]), np.zeros(2))
    with pytest.raises(ValueError):
        model.forward_q(np.zeros(3), np.array([1.0, 0.0, 0.0]), np.zeros(3))
    with pytest.raises(KeyError):
        model.forward_q(np.zeros(3), np.array([1.0, 0.0, 0.0]), "missing")


def test_mean_code():
    arch = ArchSpec(dim=2, latent_dim=2, layers=1, width=2)
    model = SddfModel(arch, latent={"a": [1.0, 2.0], "b": [3.0, -2.0]})
    np.testing.assert_array_equal(model.mean_code(), [2.0, 0.0])
    np.testing.assert_array_equal(SddfModel(arch).mean_code(), [0.0, 0.0])


# ------------------------------------------------------------------- gradients


@pytest.mark.parametrize("skips", [(), (2,)])
def test_backward_matches_finite_differences(rng, skips):
    model = random_model(rng, latent_dim=3, layers=3, width=8, skips=skips)
    model.arch = ArchSpec(dim=3, latent_dim=3, layers=3, width=8, skips=skips, beta=5.0)
    x = rng.normal(size=(7, model.arch.input_dim))
    w = rng.normal(size=7)
    tape = model.run(x)
    g_theta, g_x = model.backward(tape, w)

    def obj(theta=None, xx=x):
        return float(w @ model.run(xx, theta).f)

    step = 1e-6
    for k in rng.choice(model.theta.size, 40, replace=False):
        e = np.zeros_like(model.theta)
        e[k] = step
        fd = (obj(model.theta + e) - obj(model.theta - e)) / (2 * step)
        assert abs(fd - g_theta[k]) <= 1e-6 * max(1.0, abs(fd))
    for i in range(x.shape[0]):
        for j in range(x.shape[1]):
            e = np.zeros_like(x)
            e[i, j] = step
            fd = (obj(xx=x + e) - obj(xx=x - e)) / (2 * step)
            assert abs(fd - g_x[i, j]) <= 1e-6 * max(1.0, abs(fd))


# ------------------------------------------------------------------- audit


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "erf"])
def test_audit_untrained_model(rng, kind):
    model = random_model(rng, squasher=kind)
    model.scale, model.offset = 1.3, -0.2
    p = rng.normal(size=(2000, 3))
    eta = random_units(rng, 2000, 3)
    assert directional_gradient_audit(model, p, eta) < 1e-6


def test_audit_negative_control_on_oracle(rng):
    sphere = Sphere()
    n = 2000
    eta = random_units(rng, n, 3)
    p = rng.normal(scale=0.3, size=(n, 3)) - 2.5 * eta
    along = directional_derivative(lambda a, b: cast_ray(sphere, a, b), p, eta)
    ok = np.isfinite(along)
    assert ok.mean() > 0.5
    assert np.max(np.abs(along[ok] + 1.0)) < 1e-6
    probe = random_units(rng, n, 3)
    probe -= np.einsum("ij,ij->i", probe, eta)[:, None] * eta
    probe /= np.linalg.norm(probe, axis=1, keepdims=True)
    off = directional_derivative(lambda a, b: cast_ray(sphere, a, b), p, eta, probe=probe)
    ok = np.isfinite(off)
    assert np.median(np.abs(off[ok] + 1.0)) > 0.5
    model = random_model(rng)
    assert directional_gradient_audit(model, p, eta, probe=probe) > 1e-3


# --------------------------------------------------------------- prescale


def test_prescale_maps_percentiles_to_span(rng):
    o = rng.normal(size=(1000, 3))
    e = random_units(rng, 1000, 3)
    d = rng.uniform(0.5, 4.0, 1000)
    d[:100] = np.inf
    scale, offset = fit_prescale(o, e, d, span=2.0)
    g = d[100:] + np.einsum("ij,ij->i", o[100:], e[100:])
    lo, hi = np.percentile(g, [1, 99])
    assert scale * lo + offset == pytest.approx(-2.0)
    assert scale * hi + offset == pytest.approx(2.0)
    assert fit_prescale(o, e, np.full(1000, np.inf)) == (1.0, 0.0)


# -------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(rng, tmp_path):
    model = random_model(rng, latent_dim=3, skips=(1,), squasher="tanh")
    model.latent = {"a": rng.normal(size=3), "ü": rng.normal(size=3)}
    model.scale, model.offset = 0.37, -1.25
    path = tmp_path / "m.sddf"
    checkpoint_save(model, path)
    back = checkpoint_load(path)
    assert back.arch == model.arch and back.squasher == model.squasher
    assert back.theta.tobytes() == model.theta.tobytes()
    assert back.scale == model.scale and back.offset == model.offset
    assert list(back.latent) == list(model.latent)
    for k in model.latent:
        assert back.latent[k].tobytes() == model.latent[k].tobytes()
    p = rng.normal(size=(100, 3))
    eta = random_units(rng, 100, 3)
    np.testing.assert_array_equal(back.forward_q(p, eta, "a"), model.forward_q(p, eta, "a"))
    assert encode_checkpoint(back) == path.read_bytes()


def test_checkpoint_corruption_detected(rng):
    data = encode_checkpoint(random_model(rng))
    for bad in (data[:-1], data[:len(data) // 2], data[:8], data + b"\0"):
        with pytest.raises(CheckpointError):
            decode_checkpoint(bad)
    flipped = bytearray(data)
    flipped[100] ^= 0x01
    with pytest.raises(CheckpointError, match="checksum"):
        decode_checkpoint(bytes(flipped))
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(data[:4] + (7).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOPE" + data[4:])
