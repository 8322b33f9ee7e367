import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from gradient_cases import CASES
from oracles import finite_difference_check, scalar_stepwise_mse
from hvp.objectives import (
    AlphaSchedule,
    SequenceCritic,
    alpha_at,
    augment_for_critic,
    critic_loss,
    generator_adv_loss,
    gradient_penalty,
    loss_e2e,
    loss_epva,
    loss_epva_adversarial,
)
from hvp.model import EncodingFeatures, NetSpec


def _rand(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


class FirstFeature(torch.nn.Module):
    """Critic that scores each step by its first feature."""

    def forward(self, seq):
        return seq[..., 0]


class LinearCritic(torch.nn.Module):
    def __init__(self, weight):
        super().__init__()
        self.weight = weight

    def forward(self, seq):
        return seq @ self.weight


def test_e2e_identical_is_zero():
    x = _rand(2, 3, 3, 4, 4)
    assert float(loss_e2e(x, x.clone()).total) == 0.0


def test_e2e_single_pixel():
    out = loss_e2e(torch.full((1, 1, 1, 1, 1), 0.5), torch.zeros(1, 1, 1, 1, 1))
    assert float(out.total) == 0.25


def test_e2e_matches_scalar_loop():
    a, b = _rand(2, 4, 3, 5, 5, seed=1), _rand(2, 4, 3, 5, 5, seed=2)
    assert float(loss_e2e(a, b).total) == pytest.approx(scalar_stepwise_mse(a, b), rel=1e-6)


def test_e2e_length_mismatch():
    with pytest.raises(ValueError):
        loss_e2e(_rand(1, 3, 1, 2, 2), _rand(1, 4, 1, 2, 2))


def test_time_permutation_covariance():
    a, b = _rand(2, 5, 3, 4, 4, seed=3), _rand(2, 5, 3, 4, 4, seed=4)
    perm = torch.tensor([3, 0, 4, 1, 2])
    assert float(loss_e2e(a[:, perm], b[:, perm]).total) == pytest.approx(float(loss_e2e(a, b).total), rel=1e-12)
    e, f = _rand(2, 5, 2, seed=5), _rand(2, 5, 2, seed=6)
    lhs = loss_epva(a[:, perm], b[:, perm], e, f, 0.0).image_l2
    assert float(lhs) == pytest.approx(float(loss_epva(a, b, e, f, 0.0).image_l2), rel=1e-12)


def test_alpha_schedule_endpoints():
    s = AlphaSchedule(1e-7, 0.1, 1000)
    assert alpha_at(s, 0) == pytest.approx(1e-7, rel=1e-12)
    assert alpha_at(s, 1000) == 0.1
    assert alpha_at(s, 10**6) == 0.1
    assert alpha_at(s, 500) == pytest.approx(math.sqrt(1e-7 * 0.1), rel=1e-9)
    assert alpha_at(s, 500) == pytest.approx(1e-4, rel=1e-9)
    with pytest.raises(ValueError):
        alpha_at(s, -1)
    with pytest.raises(ValueError):
        AlphaSchedule(0.2, 0.1, 10)


@settings(max_examples=50, deadline=None)
@given(
    start_exp=st.floats(-9, -1),
    span=st.floats(0, 3),
    ramp=st.integers(0, 5000),
    a=st.integers(0, 10000),
    b=st.integers(0, 10000),
)
def test_alpha_monotone_and_clamped(start_exp, span, ramp, a, b):
    s = AlphaSchedule(10**start_exp, 10 ** (start_exp + span), ramp)
    lo, hi = sorted((a, b))
    assert alpha_at(s, lo) <= alpha_at(s, hi) * (1 + 1e-12)
    assert alpha_at(s, hi) <= s.alpha_end * (1 + 1e-12)


def test_epva_hand_case():
    pred = torch.tensor([[[0.1, -0.1], [0.1, -0.1]]], dtype=torch.float64)
    true = torch.zeros(1, 2, 2, dtype=torch.float64)
    img = torch.zeros(1, 2, 1, 2, 2, dtype=torch.float64)
    out = loss_epva(img, img, pred, true, alpha=0.1)
    assert float(out.total) == pytest.approx(0.002, rel=1e-12)
    assert float(out.image_l2) == 0.0
    assert float(out.encoding_l2) == pytest.approx(0.02, rel=1e-12)


def test_epva_terms():
    img, tgt = _rand(2, 3, 3, 4, 4, seed=1), _rand(2, 3, 3, 4, 4, seed=2)
    e = _rand(2, 3, 5, seed=3)
    same = loss_epva(img, tgt, e, e.clone(), 0.5)
    assert float(same.encoding_l2) == 0.0 and float(same.total) == float(same.image_l2)
    z1 = loss_epva(img, tgt, _rand(2, 3, 5, seed=7), e, 0.0)
    z2 = loss_epva(img, tgt, _rand(2, 3, 5, seed=8), e, 0.0)
    assert float(z1.total) == float(z2.total)
    with pytest.raises(ValueError):
        loss_epva(img, tgt, e[:, :2], e[:, :2], 0.1)


def test_augment_shape_and_determinism():
    spec = NetSpec(image_size=(16, 16), d=4, s=4, m=3, conv_widths=(4, 4))
    f_enc = EncodingFeatures(spec)
    e = torch.randn(2, 5, 4)
    out = augment_for_critic(f_enc, e)
    assert out.shape == (2, 5, spec.s * spec.s * spec.m + spec.d)
    assert torch.equal(out, augment_for_critic(f_enc, e))
    assert torch.equal(out[..., -4:], e)
    assert augment_for_critic(f_enc, e[0, 0]).shape == (spec.s * spec.s * spec.m + spec.d,)


def _exact_unit_vector(features, rng):
    """Unit vectors whose squared entries sum to 1 with no rounding: signed one-hots or four +-1/2 entries."""
    w = torch.zeros(features, dtype=torch.float64)
    k = 4 if features >= 4 and rng.random() < 0.5 else 1
    idx = rng.choice(features, size=k, replace=False)
    w[idx] = torch.from_numpy(rng.choice([-1.0, 1.0], size=k) / (2.0 if k == 4 else 1.0))
    return w


@settings(max_examples=25, deadline=None)
@given(features=st.integers(1, 12), steps=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_linear_unit_critic_has_zero_penalty(features, steps, seed):
    rng = np.random.default_rng(seed)
    g = torch.Generator().manual_seed(seed)
    real = torch.randn(3, steps, features, generator=g, dtype=torch.float64)
    fake = torch.randn(3, steps, features, generator=g, dtype=torch.float64)
    exact = LinearCritic(_exact_unit_vector(features, rng))
    w = torch.randn(features, generator=g, dtype=torch.float64)
    rounded = LinearCritic(w / w.norm())
    for at_fake in (False, True):
        assert float(critic_loss(exact, real, fake, gp_at_fake=at_fake, generator=g).gradient_penalty) == 0.0
        # a numerically normalized vector is unit norm only up to rounding
        assert float(critic_loss(rounded, real, fake, gp_at_fake=at_fake, generator=g).gradient_penalty) < 1e-28


def test_equal_scores_zero_loss():
    w = torch.tensor([0.6, 0.8], dtype=torch.float64)
    x = _rand(2, 3, 2)
    assert float(critic_loss(LinearCritic(w), x, x.clone()).total) == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10**6), at_fake=st.booleans())
def test_gradient_penalty_nonnegative(seed, at_fake):
    torch.manual_seed(seed)
    critic = SequenceCritic(5, 4).double()
    g = torch.Generator().manual_seed(seed)
    real, fake = torch.randn(2, 3, 5, generator=g, dtype=torch.float64), torch.randn(2, 3, 5, generator=g, dtype=torch.float64)
    out = critic_loss(critic, real, fake, gp_at_fake=at_fake, generator=g)
    assert float(out.gradient_penalty.detach()) >= 0.0


def test_gradient_penalty_matches_finite_differences():
    torch.manual_seed(3)
    critic = SequenceCritic(4, 5).double()
    points = _rand(2, 3, 4, seed=9)
    gp = float(gradient_penalty(critic, points).detach())
    h = 1e-4
    penalty = 0.0
    x = points.clone()
    with torch.no_grad():
        grads = np.zeros(points.shape)
        for idx in np.ndindex(*points.shape):
            orig = float(x[idx])
            x[idx] = orig + h
            up = float(critic(x).sum())
            x[idx] = orig - h
            down = float(critic(x).sum())
            x[idx] = orig
            grads[idx] = (up - down) / (2 * h)
    norms = np.linalg.norm(grads, axis=-1)  # (B, T)
    penalty = ((norms - 1.0) ** 2).mean(axis=0).sum()
    assert gp == pytest.approx(penalty, rel=1e-3)


def test_critic_loss_mismatch():
    critic = FirstFeature()
    with pytest.raises(ValueError):
        critic_loss(critic, torch.zeros(1, 2, 3), torch.zeros(1, 3, 3))
    with pytest.raises(ValueError):
        generator_adv_loss(critic, torch.zeros(1, 2, 3), torch.zeros(1, 3, 3))


def test_generator_adv_numeric():
    real = torch.tensor([[[0.1], [0.1]]])
    fake = torch.tensor([[[0.3], [0.5]]])
    assert float(generator_adv_loss(FirstFeature(), real, fake)) == pytest.approx(-0.6, rel=1e-6)
    assert float(generator_adv_loss(FirstFeature(), real, real.clone())) == 0.0
    higher = fake + torch.tensor([[[0.0], [0.2]]])
    assert float(generator_adv_loss(FirstFeature(), real, higher)) < -0.6


def test_adversarial_breakdown_matches_scalar_recomputation():
    real, fake = _rand(2, 3, 4, seed=1), _rand(2, 3, 4, seed=2)
    img, tgt = _rand(2, 3, 3, 4, 4, seed=3), _rand(2, 3, 3, 4, 4, seed=4)
    pe, te = _rand(2, 3, 5, seed=5), _rand(2, 3, 5, seed=6)
    out = loss_epva_adversarial(FirstFeature(), real, fake, img, tgt, pe, te, beta=0.03)
    r, f = real.numpy()[..., 0], fake.numpy()[..., 0]
    adv = -sum(np.mean(f[:, t] - r[:, t]) for t in range(3))
    expected = adv + 0.03 * scalar_stepwise_mse(pe, te) + scalar_stepwise_mse(img, tgt)
    assert float(out.total) == pytest.approx(expected, rel=1e-5)
    assert float(out.critic_term) == pytest.approx(adv, rel=1e-5)
    assert out.is_finite()


def test_adversarial_reduces_to_image_term():
    const = lambda seq: torch.zeros(seq.shape[:2], dtype=seq.dtype)  # noqa: E731
    img, tgt = _rand(1, 2, 3, 4, 4, seed=3), _rand(1, 2, 3, 4, 4, seed=4)
    out = loss_epva_adversarial(const, _rand(1, 2, 4), _rand(1, 2, 4, seed=1), img, tgt,
                                _rand(1, 2, 5, seed=2), _rand(1, 2, 5, seed=7), beta=0.0)
    assert float(out.total) == float(out.image_l2)


@pytest.mark.parametrize("name", sorted(CASES))
def test_gradient_matches_finite_differences(name):
    loss_fn, params = CASES[name](0)
    assert finite_difference_check(loss_fn, params, size=10, h=1e-3, seed=0) < 1e-3
