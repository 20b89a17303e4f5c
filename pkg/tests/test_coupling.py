import math

import numpy as np
import pytest

from envqueue import coupling as cp
from envqueue.builtins import build
from envqueue.errors import PreconditionError, SpecError


def test_m_func_roots():
    assert cp.m_func(1.0, 1.0, 4.0) == 0.0
    assert cp.m_func(1.0, 0.37, 2.9) == 0.0
    for lb, mb in [(1.0, 4.0), (0.3, 1.0), (2.5, 2.6)]:
        cs = cp.c_star(lb, mb)
        assert cp.m_func(cs, lb, mb) == pytest.approx((math.sqrt(mb) - math.sqrt(lb)) ** 2, abs=1e-12)
        assert cp.m_max(lb, mb) == pytest.approx(cp.m_func(cs, lb, mb), abs=1e-12)
    assert np.allclose(cp.m_func(np.array([1.0, 2.0]), 1.0, 4.0), [0.0, 1.0])


def test_theta_values():
    assert cp.theta(2, 1, 1, 0.5) == pytest.approx(1.5285954792089684, rel=1e-12)
    assert cp.theta(1.5, 1, 1, 0.5) == pytest.approx(1.4556689460481826, rel=1e-12)
    # alpha = 1 is a plain Exp(gamma) clock: E[exp(a min)] = (beta + gamma) / (beta + gamma - a)
    assert cp.theta(1.0, 1.0, 2.0, 1.2) == pytest.approx(3 / 1.8, rel=1e-12)


def test_theta_at_zero_is_one():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        al, b, g = 1 + 5 * rng.random(), 0.01 + 5 * rng.random(), 0.01 + 5 * rng.random()
        assert abs(cp.theta(al, b, g, 0.0) - 1.0) <= 1e-12
        assert abs(cp.theta(al, b, g, 1e-14) - 1.0) <= 1e-12


@pytest.mark.parametrize("al,b,g", [(2, 1, 1), (1.5, 1, 3), (3, 2, 0.5), (1.0001, 0.7, 2.0)])
def test_theta_continuous_at_special_points(al, b, g):
    lim = 1 + b / g + b * math.log(al) / g
    assert cp.theta(al, b, g, b) == pytest.approx(lim, abs=1e-14)
    for h in (1e-8, -1e-8, 1e-10, 1e-13):
        assert abs(cp.theta(al, b, g, b + h) - lim) < 1e-6
    if g < b + g:
        near = [cp.theta(al, b, g, g + h) for h in (-1e-9, 0.0, 1e-9)]
        assert max(near) - min(near) < 1e-6


def test_theta_domain():
    with pytest.raises(PreconditionError):
        cp.theta(0.5, 1, 1, 0.1)
    with pytest.raises(PreconditionError):
        cp.theta(2, 1, 1, 2.0)
    with pytest.raises(PreconditionError):
        cp.theta(2, 1, 1, -0.1)


def test_success_prob_and_feasibility():
    assert cp.success_prob(1.0, 1.0, 1.0) == pytest.approx(0.5)
    assert cp.success_prob(2.0, 1.0, 1.0) == pytest.approx(0.25)
    assert cp.feasible(1.05, 0.5, 2.0, 1.0, 1.0, 4.0)
    assert not cp.feasible(1.9, 0.01, 2.0, 1.0, 1.0, 4.0)
    assert cp.feasibility_margin(1.0, 0.5, 2.0, 1.0, 1.0, 4.0) == -math.inf
    assert cp.feasibility_margin(1.05, 1.5, 2.0, 1.0, 1.0, 4.0) == -math.inf


def test_optimize_rate_frozen():
    cert = cp.optimize_rate(2, 1, 1, 4)
    assert cert.ok
    assert cert.kappa == pytest.approx(0.16302448124793414, rel=1e-9)
    assert cert.kappa < cp.m_max(1, 4)
    assert cert.margin == pytest.approx(0.01, abs=1e-9)
    assert cp.feasible(cert.c, cert.eps, 2, 1, 1, 4)
    assert cert.kappa >= cert.grid_kappa
    assert cert.bound(0, 0.0) == pytest.approx(2 * cert.C)
    with pytest.raises(SpecError):
        cert.bound(0, 1.0, "other")
    with pytest.raises(PreconditionError):
        cp.optimize_rate(2, 1, 4, 1)


def test_robert_bound():
    assert cp.robert_bound(2, 1.0, 1, 4) == pytest.approx(5 / math.e)
    assert cp.robert_bound(0, 0.0, 1, 4) == 2.0
    ts = np.array([0.5, 1, 2, 5])
    for n in (0, 2, 5):
        assert np.all(cp.mm1_tv_exact(n, ts, 1, 4) <= cp.robert_bound(n, ts, 1, 4))


def test_two_state_lazy_kernels():
    T = [[0, 1], [1, 0]]
    assert cp.optimal_clock_rate(T) == 2.0
    assert cp.jump_coupling(T).q == 0.0
    jc = cp.jump_coupling(T, 4.0)
    assert jc.q == pytest.approx(0.5) and jc.gamma == pytest.approx(2.0)
    with pytest.raises(PreconditionError):
        cp.jump_coupling(T, 0.5)
    with pytest.raises(PreconditionError):
        cp.jump_coupling([[0.0]])


def test_optimal_clock_rate_is_first_maximizer():
    T = np.array([[0, 1, 2], [0.5, 0, 0.5], [3, 0, 0]])
    lam = cp.optimal_clock_rate(T)
    best = cp.jump_coupling(T, lam).gamma
    assert lam == pytest.approx(3.5)
    assert all(cp.jump_coupling(T, x).gamma <= best + 1e-12 for x in np.linspace(lam, 10, 9))
    assert cp.jump_coupling(T, 3.2).gamma < best


def test_maximal_coupling_draw():
    p = np.array([0.5, 0.3, 0.2])
    q = np.array([0.2, 0.3, 0.5])
    rng = np.random.default_rng(3)
    draws = [cp.maximal_coupling_draw(p, q, rng) for _ in range(20000)]
    same = np.mean([d[2] for d in draws])
    assert same == pytest.approx(0.7, abs=0.015)
    xs = np.bincount([d[0] for d in draws], minlength=3) / 20000
    ys = np.bincount([d[1] for d in draws], minlength=3) / 20000
    assert np.allclose(xs, p, atol=0.015) and np.allclose(ys, q, atol=0.015)
    assert all(d[0] == d[1] for d in draws if d[2])


def test_clock_coupling_survival():
    jc = cp.jump_coupling([[0, 1], [1, 0]], 4.0)
    rng = np.random.default_rng(8)
    taus = np.array([cp.maximal_coupling_jump(jc, 0, 1, rng).tau for _ in range(4000)])
    assert taus.mean() == pytest.approx(1 / jc.gamma, rel=0.06)
    cut = cp.maximal_coupling_jump(jc, 0, 1, np.random.default_rng(1), horizon=0.0)
    assert cut.tau == math.inf


def test_discrete_coupling_decomposition():
    s = build("two-state")
    for rep in range(20):
        tr = cp.couple_joint(s, (4, 0), (0, 1), seed=5, replica=rep)
        assert tr.coupled and tr.J == len(tr.phases) - 1
        assert tr.tau == pytest.approx(tr.decomposition(), rel=1e-12)
        assert tr.tau0 == tr.phases[0][0]
    same = cp.couple_joint(s, (2, 1), (2, 1), seed=5)
    assert same.tau == 0.0 and same.J == 0


def test_single_state_coupling_is_emptying_time():
    s = build("single-state")
    tr = cp.couple_joint(s, (3, 0), (0, 0), seed=2)
    assert tr.J == 0 and tr.tau == pytest.approx(tr.tau0)


def test_mgf_min_check():
    rep = cp.mgf_min_check(1.5, 1.0, 1.0, 0.5, lambda rng, n: rng.exponential(1.0, n), 20000, seed=4)
    assert rep.ok and rep.mgf_bound == pytest.approx(1.4556689460481826)
    assert rep.p_win_bound == pytest.approx(0.5 / 1.5)
    with pytest.raises(PreconditionError):
        cp.mgf_min_check(1.5, 1, 1, 0.5, lambda rng, n: np.zeros(n), 100, seed=4)
    with pytest.raises(PreconditionError):
        # survival too heavy for alpha = 1, gamma = 3
        cp.mgf_min_check(1.0, 1, 3.0, 0.5, lambda rng, n: rng.exponential(1.0, n), 5000, seed=4)


def test_tv_decay_small():
    rep = cp.tv_decay_check(build("two-state"), 20, [0, 3], [1.0, 4.0])
    assert rep.ok_bound and rep.certificate.ok
    assert all(r[3] <= r[4] for r in rep.rows)
    assert rep.jump.q == 0.0
