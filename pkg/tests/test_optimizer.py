import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from trusreg.optimizer import (OptimizerConfig, bracket_minimum, brent_minimize,
                               powell_minimize)

TIGHT = OptimizerConfig(param_tolerance=1e-9, value_tolerance=1e-14, max_iterations=200,
                        bracket_step=0.5)


def test_brent_parabola():
    r = brent_minimize(lambda x: (x - 2) ** 2, (0, 1, 5), tol=1e-8)
    assert r.converged and abs(r.x - 2) <= 1e-7
    assert r.fun == (r.x - 2) ** 2


def test_brent_kink():
    r = brent_minimize(lambda x: abs(x) + x * x, (-1, -0.1, 1), tol=1e-8)
    assert abs(r.x) <= 1e-6


def test_brent_cosine():
    r = brent_minimize(math.cos, (2, 3, 4), tol=1e-8)
    assert abs(r.x - math.pi) <= 1e-6


def test_brent_iteration_budget():
    r = brent_minimize(math.cos, (2, 3, 4), tol=1e-12, max_iter=3)
    assert not r.converged and r.nfev <= 3 + 1
    assert r.fun == math.cos(r.x)


def test_bracket_contains_minimum():
    a, b, c, fa, fb, fc, _ = bracket_minimum(lambda x: (x - 7.3) ** 2, 1.0)
    assert min(a, c) < 7.3 < max(a, c) and fb <= fa and fb <= fc


def test_powell_quadratic_bowl(rng):
    c = rng.uniform(-1, 1, 6)
    r = powell_minimize(lambda x: float(np.sum((x - c) ** 2)), np.zeros(6), TIGHT)
    assert np.allclose(r.x, c, atol=1e-6, rtol=0) and r.converged


def test_powell_rosenbrock():
    def rosen(x):
        return 100.0 * (x[1] - x[0] ** 2) ** 2 + (1 - x[0]) ** 2
    r = powell_minimize(rosen, [-1.2, 1.0], TIGHT)
    assert r.converged
    assert np.allclose(r.x, [1, 1], atol=1e-4, rtol=0)


def test_powell_undefined_region_never_accepted():
    # the minimum of the bowl lies in the undefined half-space x0 > 0.5
    def f(x):
        return None if x[0] > 0.5 else float((x[0] - 2) ** 2 + x[1] ** 2)
    r = powell_minimize(f, [0.0, 1.0], TIGHT)
    assert r.x[0] <= 0.5 and math.isfinite(r.fun)
    assert r.x[0] == pytest.approx(0.5, abs=1e-6)


def bumpy(c):
    def f(x):
        return float(np.sum((x - c) ** 2) + 0.1 * np.sum(np.sin(3 * x) ** 2))
    return f


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_powell_monotone_and_never_worse(seed):
    rng = np.random.default_rng(seed)
    f = bumpy(rng.uniform(-2, 2, 4))
    x0 = rng.uniform(-2, 2, 4)
    r = powell_minimize(f, x0)
    assert all(b <= a for a, b in zip(r.history, r.history[1:]))
    assert r.fun <= f(x0)
    assert r.fun == f(r.x)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_powell_deterministic(seed):
    rng = np.random.default_rng(seed)
    f = bumpy(rng.uniform(-2, 2, 3))
    x0 = rng.uniform(-2, 2, 3)
    a, b = powell_minimize(f, x0), powell_minimize(f, x0)
    assert np.array_equal(a.x, b.x) and a.history == b.history and a.nfev == b.nfev


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_powell_scale_equivariance(seed):
    rng = np.random.default_rng(seed)
    c = rng.uniform(-1, 1, 4)
    w = rng.uniform(0.5, 2.0, 4)
    s = rng.uniform(0.2, 5.0, 4)

    def f(x):
        return float(np.sum(w * (x - c) ** 2))
    r = powell_minimize(lambda y: f(s * y), rng.uniform(-1, 1, 4) / s, TIGHT)
    assert np.allclose(r.x, c / s, atol=1e-5, rtol=0)


def test_config_invariants():
    with pytest.raises(ValueError):
        OptimizerConfig(param_tolerance=0)
    with pytest.raises(ValueError):
        OptimizerConfig(max_iterations=0)
    d = OptimizerConfig()
    assert (d.value_tolerance, d.param_tolerance, d.max_iterations, d.bracket_step) == (
        1e-4, 1e-3, 50, 1.0)
