import math
from decimal import Decimal, localcontext

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posgen.denoiser import ZeroPredictor
from posgen.embedder import cosine
from posgen.ona import (
    INFINITE,
    GuidedNoise,
    MixtureConfig,
    fresh_noise,
    invert_latent,
    mix_noise,
    mixture_coefficients,
    synthesize,
)
from posgen.schedule import BetaSpec, make_schedule

SHAPE = (8, 1, 16, 16)


def decimal_coefficients(eta: str) -> tuple[float, float]:
    with localcontext() as ctx:
        ctx.prec = 40
        norm = (1 + Decimal(eta) ** 2).sqrt()
        return float(1 / norm), float(Decimal(eta) / norm)


def test_half_eta_coefficients():
    a, b = mixture_coefficients(0.5)
    assert a == pytest.approx(0.894427190999916, abs=1e-15)
    assert b == pytest.approx(0.447213595499958, abs=1e-15)
    assert (a, b) == pytest.approx(decimal_coefficients("0.5"), abs=1e-15)


def test_boundary_mixtures_are_exact():
    eps_inv = np.random.default_rng(0).standard_normal(SHAPE)
    assert np.array_equal(mix_noise(eps_inv, MixtureConfig(0.0, 3)), fresh_noise(SHAPE, 3))
    assert np.array_equal(mix_noise(GuidedNoise(eps_inv), MixtureConfig(INFINITE, 3)), eps_inv)
    assert mixture_coefficients(0.0) == (1.0, 0.0)
    assert mixture_coefficients(math.inf) == (0.0, 1.0)


def test_mixture_formula():
    eps_inv = np.random.default_rng(1).standard_normal(SHAPE)
    a, b = decimal_coefficients("2")
    expected = a * fresh_noise(SHAPE, 9) + b * eps_inv
    np.testing.assert_allclose(mix_noise(eps_inv, MixtureConfig(2.0, 9)), expected, rtol=1e-14, atol=1e-15)


@pytest.mark.parametrize("eta", [0.0, 0.1, 0.5, 1.0, 2.0])
def test_mixture_preserves_unit_variance(eta):
    eps_inv = np.random.default_rng(100).standard_normal(100_000)
    mixed = mix_noise(eps_inv, MixtureConfig(eta, 5))
    assert abs(mixed.var() - 1.0) < 0.02


@settings(max_examples=50, deadline=None)
@given(
    etas=st.lists(st.floats(0.0, 50.0), min_size=2, max_size=6),
    seed=st.integers(0, 2**32 - 1),
)
def test_blend_moves_monotonically_toward_inverted_noise(etas, seed):
    eps_inv = np.random.default_rng(seed ^ 0xABCDEF).standard_normal(64)
    sims = [cosine(mix_noise(eps_inv, MixtureConfig(eta, seed)), eps_inv) for eta in sorted(etas)]
    assert all(b >= a - 1e-12 for a, b in zip(sims, sims[1:]))


def test_mixture_config_validation():
    with pytest.raises(ValueError):
        MixtureConfig(-0.1)
    with pytest.raises(ValueError):
        MixtureConfig(float("nan"))
    assert MixtureConfig(math.inf).infinite


def test_zero_predictor_inversion_and_synthesis_are_rescales():
    sched = make_schedule(50, BetaSpec.linear(1e-4, 0.02), train_steps=1000)
    z0 = np.random.default_rng(2).standard_normal(SHAPE)
    guided = invert_latent(z0, sched, ZeroPredictor(), "src")
    assert guided.steps_used == 50 and guided.source_id == "src"
    scale = math.sqrt(sched.alpha(50) / sched.alpha(0))
    np.testing.assert_allclose(guided.eps_inv, scale * z0, rtol=1e-12)
    back = synthesize(None, guided.eps_inv, sched, ZeroPredictor())
    np.testing.assert_allclose(back, z0, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(synthesize(None, z0, sched, ZeroPredictor()), z0 / scale, rtol=1e-12)


def test_inversion_rejects_mismatched_predictor():
    class Wrong:
        def predict(self, z, t, c):
            return np.zeros(3)

    with pytest.raises(ValueError):
        invert_latent(np.zeros(SHAPE), make_schedule(3, 0.1), Wrong())


def test_trained_round_trip_reconstructs(toy_world):
    errors = []
    for video in toy_world.train[:20]:
        guided = invert_latent(video.latent, toy_world.sched, toy_world.denoiser)
        back = synthesize(None, guided.eps_inv, toy_world.sched, toy_world.denoiser)
        errors.append(np.linalg.norm(back - video.latent) / np.linalg.norm(video.latent))
    # averaged over the 20 latents; single clips reach about 0.26
    assert np.mean(errors) < 0.15


def test_synthesis_is_deterministic(toy_world):
    c = toy_world.embedder.embed(toy_world.prompts[0])
    noise = fresh_noise(SHAPE, 4)
    a = synthesize(c, noise, toy_world.sched, toy_world.denoiser)
    b = synthesize(c, noise, toy_world.sched, toy_world.denoiser)
    assert np.array_equal(a, b)


def test_own_inversion_guides_synthesis_toward_ground_truth(toy_world):
    sched, model = toy_world.sched, toy_world.denoiser
    guided_dist, random_dist = [], []
    for video in toy_world.eval[:5]:
        c = toy_world.embedder.embed(video.caption)
        eps_inv = invert_latent(video.latent, sched, model).eps_inv
        for seed in range(20):
            for eta, out in ((0.5, guided_dist), (0.0, random_dist)):
                z = synthesize(c, mix_noise(eps_inv, MixtureConfig(eta, seed)), sched, model)
                out.append(np.linalg.norm(z - video.latent))
    assert np.mean(guided_dist) < np.mean(random_dist)
