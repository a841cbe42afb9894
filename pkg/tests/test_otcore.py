import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from otmr.errors import CapacityError, ValidationError
from otmr.otcore import (
    DiscreteMeasure,
    dual_losses_alignment,
    dual_losses_synthesis,
    dual_report,
    exact_w1,
    l1_cost,
    sinkhorn_w1,
    summarize_theorem,
    verify_theorem1,
)


def _measure(rng, n, dim=2):
    return DiscreteMeasure(rng.uniform(size=(n, dim)), rng.dirichlet(np.ones(n)))


def _w1_1d_oracle(x, a, y, b):
    """W1 on the line as the integral of |F - G|."""
    pts = np.sort(np.concatenate([x, y]))
    F = np.array([a[x <= t].sum() for t in pts[:-1]])
    G = np.array([b[y <= t].sum() for t in pts[:-1]])
    return float(np.sum(np.abs(F - G) * np.diff(pts)))


def _w1_matching_oracle(x, y):
    """Uniform equal-size measures: optimal plan is a permutation."""
    n = len(x)
    return min(np.mean(np.linalg.norm(x - y[list(p)], axis=1)) for p in itertools.permutations(range(n)))


@settings(max_examples=30, deadline=None)
@given(n=st.integers(1, 12), m=st.integers(1, 12), seed=st.integers(0, 10_000))
def test_exact_w1_matches_1d_cdf_oracle(n, m, seed):
    rng = np.random.default_rng(seed)
    x, y = rng.normal(size=n), rng.normal(size=m)
    a, b = rng.dirichlet(np.ones(n)), rng.dirichlet(np.ones(m))
    w = exact_w1(DiscreteMeasure(x, a), DiscreteMeasure(y, b))
    assert w == pytest.approx(_w1_1d_oracle(x, a, y, b), abs=1e-9)


@pytest.mark.parametrize("seed", range(8))
def test_exact_w1_matches_matching_oracle(seed):
    rng = np.random.default_rng(seed)
    n = 5
    x, y = rng.uniform(size=(n, 2)), rng.uniform(size=(n, 2))
    u = np.full(n, 1 / n)
    assert exact_w1(DiscreteMeasure(x, u), DiscreteMeasure(y, u)) == pytest.approx(_w1_matching_oracle(x, y), abs=1e-9)


def test_dirac_distance():
    assert exact_w1(DiscreteMeasure.dirac([0, 0]), DiscreteMeasure.dirac([3, 4])) == pytest.approx(5.0)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000), shift=st.tuples(st.floats(-5, 5), st.floats(-5, 5)))
def test_translation_invariance(seed, shift):
    rng = np.random.default_rng(seed)
    mu, nu = _measure(rng, 7), _measure(rng, 9)
    s = np.asarray(shift)
    moved = exact_w1(DiscreteMeasure(mu.support + s, mu.weights), DiscreteMeasure(nu.support + s, nu.weights))
    assert moved == pytest.approx(exact_w1(mu, nu), abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_metric_axioms(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (_measure(rng, int(rng.integers(1, 12))) for _ in range(3))
    ab, ba = exact_w1(a, b), exact_w1(b, a)
    assert abs(ab - ba) <= 1e-9
    assert exact_w1(a, a) <= 1e-9
    assert exact_w1(a, c) <= ab + exact_w1(b, c) + 1e-9


def test_zero_weight_points_are_ignored():
    mu = DiscreteMeasure([[0.0, 0.0], [9.0, 9.0]], [1.0, 0.0])
    assert exact_w1(mu, DiscreteMeasure.dirac([1.0, 0.0])) == pytest.approx(1.0)


def test_capacity_limit():
    rng = np.random.default_rng(0)
    with pytest.raises(CapacityError):
        exact_w1(_measure(rng, 257), _measure(rng, 3))


@pytest.mark.parametrize(
    "support,weights",
    [([[0.0]], [0.5]), ([[0.0], [1.0]], [1.5, -0.5]), ([[np.nan]], [1.0]), ([[0.0, 0, 0]], [1.0])],
)
def test_measure_validation(support, weights):
    with pytest.raises(ValidationError):
        DiscreteMeasure(support, weights)


def test_from_image_mass_and_block_reduce():
    img = np.arange(1, 37, dtype=float).reshape(6, 6)
    mu = DiscreteMeasure.from_image(img)
    assert len(mu) == 36 and mu.weights.sum() == pytest.approx(1.0)
    red = DiscreteMeasure.from_image(img, max_grid=3)
    assert len(red) == 9
    # 2x2 blocks: mass is the block sum, support the block centre in pixel units
    sums = img.reshape(3, 2, 3, 2).sum(axis=(1, 3)) / img.sum()
    np.testing.assert_allclose(red.weights, sums.ravel(), atol=1e-15)
    assert tuple(red.support[0]) == (0.5, 0.5) and tuple(red.support[-1]) == (4.5, 4.5)
    with pytest.raises(ValidationError):
        DiscreteMeasure.from_image(np.zeros((4, 4)))


@pytest.mark.parametrize("seed", range(4))
def test_sinkhorn_agrees_with_exact(seed):
    rng = np.random.default_rng(seed)
    mu, nu = _measure(rng, 20), _measure(rng, 24)
    e = exact_w1(mu, nu)
    assert sinkhorn_w1(mu, nu, epsilon=0.003) == pytest.approx(e, rel=0.01)


def test_sinkhorn_rejects_bad_epsilon():
    rng = np.random.default_rng(0)
    with pytest.raises(ValidationError):
        sinkhorn_w1(_measure(rng, 3), _measure(rng, 3), epsilon=0.0)


def _potential_critic(f):
    return lambda x: f(x.flatten(1)[:, 0])


def test_dual_with_exact_1d_potential_recovers_w1():
    """Kantorovich-Rubinstein: E_gen f - E_real f with the optimal 1-Lipschitz f equals W1."""
    rng = np.random.default_rng(3)
    gen = np.sort(rng.normal(0.5, 1.0, size=64))
    real = np.sort(rng.normal(-0.2, 0.7, size=64))
    grid = np.linspace(-6, 6, 24001)
    Fg = np.searchsorted(gen, grid, side="right") / gen.size
    Fr = np.searchsorted(real, grid, side="right") / real.size
    slope = np.sign(Fr - Fg)
    pot = np.concatenate([[0.0], np.cumsum(slope[:-1] * np.diff(grid))])

    def f(t):
        return torch.as_tensor(np.interp(t.numpy(), grid, pot))

    g_t = torch.tensor(gen)[:, None, None, None]
    r_t = torch.tensor(real)[:, None, None, None]
    rep = dual_report(_potential_critic(f), g_t, r_t, g_t)
    exact = exact_w1(DiscreteMeasure(gen, np.full(64, 1 / 64)), DiscreteMeasure(real, np.full(64, 1 / 64)))
    assert float(rep.critic_objective) == pytest.approx(exact, rel=0.02)


def test_dual_report_terms():
    critic = lambda x: x.flatten(1).sum(1)  # noqa: E731
    gen = torch.ones(3, 2, 4, 4)
    real = torch.zeros(3, 2, 4, 4)
    rep = dual_report(critic, gen, real, real, cost_weight=2.0)
    assert float(rep.critic_objective) == pytest.approx(32.0)
    assert float(rep.transport_cost_term) == pytest.approx(1.0)
    assert float(rep.generator_objective) == pytest.approx(32.0 + 2.0)
    with pytest.raises(ValidationError):
        dual_report(critic, gen[:0], real, real)


def test_dual_losses_cost_options():
    critic = lambda x: torch.zeros(x.shape[0])  # noqa: E731
    t1 = torch.full((2, 1, 4, 4), 0.25)
    t2 = torch.full((2, 2, 4, 4), 1.0)
    syn = lambda a: torch.cat([a * 2, torch.zeros_like(a)], 1)  # noqa: E731
    align = lambda x, y: (torch.zeros(2, 2, 4, 4), x)  # noqa: E731
    paired = dual_losses_alignment(critic, align, syn, t1, t2, t2, cost="paired")
    source = dual_losses_alignment(critic, align, syn, t1, t2, t2, cost="source")
    # generated image is 0.5 in the real channel
    assert float(paired.transport_cost_term) == pytest.approx((0.5 + 1.0) / 2)
    assert float(source.transport_cost_term) == pytest.approx((0.25 + 0.0) / 2)
    rep = dual_losses_synthesis(critic, syn, t1, t2)
    assert float(rep.transport_cost_term) == pytest.approx(float(paired.transport_cost_term))
    with pytest.raises(ValidationError):
        dual_losses_synthesis(critic, syn, t1[:1], t2)


def test_l1_cost_lifts_magnitude():
    x = torch.full((1, 1, 2, 2), 0.5)
    y = torch.zeros(1, 2, 2, 2)
    assert float(l1_cost(x, y)) == pytest.approx(0.25)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_theorem_triangle_slack(seed):
    rng = np.random.default_rng(seed)
    x_r, x_g, x_t2 = (rng.uniform(size=(12, 12)) for _ in range(3))
    rec = verify_theorem1(x_r, x_g, x_t2)
    assert rec["triangle_slack"] <= 1e-9
    assert rec["C"] == pytest.approx(1 / math.hypot(11, 11))
    assert rec["lhs"] == pytest.approx(np.abs(x_r - x_g).sum())
    assert rec["holds"] == (rec["lhs"] <= rec["rhs"])


def test_theorem_equal_inputs():
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(8, 8))
    rec = verify_theorem1(x, x, rng.uniform(size=(8, 8)))
    assert rec["lhs"] == 0.0 and rec["holds"]
    s = summarize_theorem([rec, rec])
    assert s["fraction_holds"] == 1.0 and s["n_samples"] == 2


def test_theorem_shape_check():
    with pytest.raises(ValidationError):
        verify_theorem1(np.zeros((4, 4)), np.zeros((4, 5)), np.zeros((4, 4)))
