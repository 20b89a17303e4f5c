import math

import numpy as np
import pytest

from envqueue import sde
from envqueue.builtins import build
from envqueue.errors import DivergenceError, DomainError, FitRejected, SpecError


@pytest.fixture(scope="module")
def case_a():
    return build("case-a-rbm-arrival")


def test_improper_quad():
    v, ok = sde.improper_quad(lambda x: x**-0.5, 0.0, 1.0)
    assert ok and v == pytest.approx(2.0, abs=1e-9)
    v, ok = sde.improper_quad(lambda x: (1 - x) ** -0.5, 0.0, 0.95)
    assert ok and v == pytest.approx(2 * (1 - math.sqrt(0.05)), abs=1e-9)
    assert sde.improper_quad(lambda x: 1 / x, 0.0, 1.0) == (math.inf, False)
    assert sde.improper_quad(lambda x: x**2, -1.0, 2.0)[0] == pytest.approx(3.0)


def test_reflect_fold_and_clamp(case_a):
    z, d = sde.reflect(case_a, [-0.2])
    assert z[0] == pytest.approx(0.2) and d == pytest.approx([0.4, 0.0])
    z, d = sde.reflect(case_a, [1.0])
    assert z[0] == pytest.approx(0.8) and d == pytest.approx([0.0, 0.2])
    z, d = sde.reflect(case_a, [1.0], "clamp")
    assert z[0] == pytest.approx(0.9) and d == pytest.approx([0.0, 0.1])
    with pytest.raises(SpecError):
        sde.reflect(case_a, [0.5], "bounce")


def test_reflect_cone_returns_inside():
    s = build("case-c-cone")
    z, d = sde.reflect(s, [1.0, 0.95])
    assert s.domain.contains(z)
    assert d[s.domain.face_names.index("slope")] > 0


def test_step_reflected(case_a):
    st = sde.initial_state(case_a, 0.3)
    nxt = sde.step_reflected(case_a, st, 0.01, noise=[0.0])
    assert nxt.z[0] == pytest.approx(0.3) and nxt.t == pytest.approx(0.01)
    # a big kick reflects and charges the upper face
    nxt = sde.step_reflected(case_a, st, 0.01, noise=[8.0])
    assert nxt.z[0] == pytest.approx(0.9 - (0.3 + 0.8 - 0.9))
    assert nxt.ell[1] == pytest.approx(2 * 0.2)
    with pytest.raises(DomainError):
        sde.initial_state(case_a, 1.5)
    with pytest.raises(SpecError):
        sde.step_reflected(case_a, st, 0.01)


def test_sample_jump():
    s = build("rbm-uniform-jumps", jump_rate=50.0)
    rng = np.random.default_rng(0)
    hits = [sde.sample_jump(s, 0.5, rng, 0.01) for _ in range(4000)]
    landed = [h[0] for h in hits if h is not None]
    assert len(landed) / 4000 == pytest.approx(0.5, abs=0.04)
    assert 0 <= min(landed) and max(landed) <= 1
    with pytest.raises(SpecError):
        sde.sample_jump(s, 0.5, rng, 0.1)
    assert sde.sample_jump(build("case-a-rbm-arrival"), 0.5, rng, 0.01) is None


def test_theta_density_closed_form():
    s = build("ex3.1-theta-drift")
    d = sde.stationary_density_1d(s)
    assert d.closed_form and d.normalizable and d.drift_integrable
    assert d.normalizer == pytest.approx(4 * (1 - math.sqrt(0.05)), rel=1e-10)
    zs = np.linspace(0.0, 0.9, 7)
    assert np.allclose(d.q(zs), 2 * (1 - zs) ** -0.5, rtol=1e-12)
    assert d.mass(0.0, 0.95) == pytest.approx(1.0, abs=1e-9)
    edges = np.linspace(0, 0.95, 6)
    assert d.bin_masses(edges).sum() == pytest.approx(1.0, abs=1e-9)


def test_numerical_exponent_matches_closed_form():
    # a non-constant diffusion coefficient forces the quadrature path
    from envqueue.env import DiffusionEnvSpec, Domain, RateField
    from envqueue.fields import affine, const, linear
    s = DiffusionEnvSpec(Domain("interval", 0.0, 0.9), (affine(0.3, -0.5),), ((affine(1.0, 0.0),),),
                         RateField(linear(1.0), const(1.0), 0.9, 1.0))
    ref = build("case-a-rbm-arrival")
    d = sde.stationary_density_1d(s)
    assert not d.closed_form
    zs = np.array([0.2, 0.7])
    assert np.allclose(sde._exponent(s, 0.0, zs), 2 * (0.3 * zs - 0.25 * zs**2), rtol=1e-10)
    assert sde.stationary_density_1d(ref).pdf(0.4) == pytest.approx(1 / 0.9)


def test_divergence_flags():
    at_pole = build("ex3.1-theta-drift", z_max=1.0)
    d = sde.stationary_density_1d(at_pole)
    assert d.normalizable and not d.drift_integrable
    strong = build("ex3.1-theta-drift", theta=0.5, z_max=1.0)
    d = sde.stationary_density_1d(strong)
    assert not d.normalizable
    with pytest.raises(DivergenceError):
        d.pdf(0.3)
    assert sde.xi_diffusive(strong) == math.inf
    with pytest.raises(SpecError):
        sde.stationary_density_1d(build("case-c-cone"))


def test_xi_diffusive_forms(case_a):
    ref = math.log(10) / 0.9
    assert sde.xi_diffusive(case_a) == pytest.approx(ref, rel=1e-12)
    assert sde.xi_diffusive(case_a, method="series") == pytest.approx(ref, rel=1e-10)


def test_threshold_check():
    r = sde.threshold_check(build("ex3.1-threshold"))
    assert r["finite"] and r["n0"] == 3
    assert r["parts"][0] == pytest.approx(4 * (1 - math.sqrt(0.1)), rel=1e-9)


def test_couple_1d_is_monotone(case_a):
    taus, flips = sde.couple_1d(case_a, 0.1, 0.8, 1e-3, seed=3, n_runs=2000)
    assert flips == 0
    assert np.isfinite(taus).all() and taus.min() > 0
    again, _ = sde.couple_1d(case_a, 0.1, 0.8, 1e-3, seed=3, n_runs=2000)
    assert np.array_equal(taus, again)
    fit = sde.fit_coupling_constants(taus)
    assert fit.alpha >= 1 and fit.gamma > 0 and fit.r2 > 0.98
    with pytest.raises(DomainError):
        sde.couple_1d(case_a, 0.1, 0.95, 1e-3, seed=3)


def test_fit_rejects_small_or_flat_samples():
    with pytest.raises(FitRejected):
        sde.fit_coupling_constants(np.ones(10))
    with pytest.raises(FitRejected):
        sde.fit_coupling_constants(np.ones(5000))
