"""Acceptance suite: one test per numbered criterion.

A PASS/FAIL line per criterion is printed in the terminal summary (see conftest.py).
Simulation criteria run the shipped configs, so ``envqueue run`` reproduces them.
"""
import math
import time
from importlib import resources

import numpy as np
import pytest

from envqueue import coupling as cp
from envqueue import discrete as dc
from envqueue.builtins import build
from envqueue.config import load_config, parse_config
from envqueue.experiments import run_experiment
from envqueue.stats import dkw_epsilon, empirical_survival

CONFIGS = resources.files("envqueue") / "configs"


def _cfg(name):
    return load_config(CONFIGS / f"{name}.yaml")


def _timed(fn, *a, **kw):
    t0 = time.perf_counter()
    out = fn(*a, **kw)
    return out, time.perf_counter() - t0


def _checks(res):
    return {c.name: c for c in res.checks}


@pytest.mark.criterion(1, "discrete invariant measure: closed form vs linear solve, balance")
def test_c01_discrete_invariant_measure(record_property):
    specs = [build("two-state"), build("ex2.1-cyclic"), build("ex2.1-uniform", M=7, m=5),
             build("ex2.1-cyclic", m=[2, 4, 3], shift=2)]
    assert dc.xi_discrete(specs[0]) == pytest.approx(3.25, abs=1e-14)
    t0 = time.perf_counter()
    worst_err = worst_bal = 0.0
    for s in specs:
        G = dc.build_generator(s, 40)
        closed = dc.invariant_measure_discrete(s, 40).vector()
        err = float(np.max(np.abs(closed - dc.gth_stationary(G.R))))
        bal = dc.check_balance(G, closed)
        worst_err, worst_bal = max(worst_err, err), max(worst_bal, bal)
        assert err <= 1e-8, s.name
        assert bal <= 1e-10, s.name
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max err {worst_err:.1e}, max balance {worst_bal:.1e}, {elapsed:.2f}s")
    assert elapsed < 5


@pytest.mark.criterion(2, "ergodicity: TV(P^t, pi) <= 1e-6 at t = 50/gap, two-state")
def test_c02_ergodicity(record_property):
    s = build("two-state")
    t0 = time.perf_counter()
    # n_max = 40: rates reach 0.2^-40, far past any uniformization budget; squaring is used
    G = dc.build_generator(s, 40)
    pi = dc.invariant_measure_discrete(s, 40).vector()
    gap = dc.spectral_gap(G, pi)
    t = 50 / gap
    method = dc.choose_transient_method(G, t)
    P = dc.transient_matrix(G, t)
    tv40 = max(dc.tv_truncated(P[x], pi) for x in range(G.size))
    # literal uniformization where its term count is affordable, cross-checked against squaring
    tv_unif = 0.0
    for n_max in (2, 3, 4):
        Gs = dc.build_generator(s, n_max)
        ps = dc.invariant_measure_discrete(s, n_max).vector()
        ts = 50 / dc.spectral_gap(Gs, ps)
        assert dc.choose_transient_method(Gs, ts) == "uniformization"
        law = dc.transient_law(Gs, (n_max, 0), ts, method="uniformization")
        tv_unif = max(tv_unif, dc.tv_truncated(law, ps))
        assert np.max(np.abs(law - dc.stochastic_expm(Gs.R, ts)[Gs.index(n_max, 0)])) < 1e-10
    elapsed = time.perf_counter() - t0
    record_property("detail", f"n_max 40 via {method}: gap {gap:.4g}, t {t:.0f}, max TV {tv40:.1e}; "
                              f"uniformization n_max<=4: TV {tv_unif:.1e}; {elapsed:.1f}s")
    assert tv40 <= 1e-6 and tv_unif <= 1e-6
    assert elapsed < 10


@pytest.mark.criterion(3, "diffusive joint stationarity, case (a): global TV <= 0.05")
def test_c03_case_a_stationarity(tmp_path, record_property):
    cfg = _cfg("case-a-stationary")
    assert cfg.run.dt == 1e-3 and cfg.run.replicas == 8
    assert cfg.run.n_cap == 12 and cfg.run.bins == 30 and cfg.assertions.global_tv_max == 0.05
    res, elapsed = _timed(run_experiment, cfg, tmp_path)
    cmp = res.results["comparison"]
    record_property("detail", f"global TV {cmp['global_tv']:.4f}, queue TV {cmp['queue_tv']:.4f}, "
                              f"{res.results['steps']:.3g} steps, {elapsed:.0f}s")
    assert cmp["global_tv"] <= 0.05
    assert res.ok
    assert elapsed < 300


@pytest.mark.criterion(4, "threshold variant: layer TV <= 0.05 for n <= 10, frozen environment static")
@pytest.mark.parametrize("name", ["ex3.1-threshold", "ex3.2-threshold"])
def test_c04_threshold(name, tmp_path, record_property):
    cfg = _cfg(name)
    assert cfg.assertions.layer_tv_max == 0.05 and cfg.assertions.layers == 10 and cfg.run.n_cap >= 10
    res, elapsed = _timed(run_experiment, cfg, tmp_path)
    layer_tv = res.results["comparison"]["layer_tv"][:11]
    record_property("detail", f"{name}: max layer TV {max(layer_tv):.4f}, "
                              f"frozen moves {res.results['frozen_moves']}, {elapsed:.0f}s")
    assert res.results["frozen_moves"] == 0
    assert all(v <= 0.05 for v in layer_tv)
    assert res.ok
    assert elapsed < 300


@pytest.mark.criterion(5, "1-D stationary density, theta drift: TV <= 0.03")
def test_c05_theta_density(tmp_path, record_property):
    cfg = _cfg("theta-drift-density")
    spec = build("ex3.1-theta-drift")
    assert spec.drift[0].params[0] == 0.25 and cfg.assertions.env_tv_max == 0.03
    res, elapsed = _timed(run_experiment, cfg, tmp_path)
    # the reference is the normalized 2 (1 - z)^(-1/2) on the simulated bins
    edges = np.linspace(0.0, 0.95, cfg.run.bins + 1)
    ref = -4 * np.diff(np.sqrt(1 - edges))
    ref /= ref.sum()
    table = res.tables["env"][1]
    assert np.allclose([r[4] for r in table], ref, atol=1e-9)
    tv = res.results["env_tv"]
    record_property("detail", f"TV {tv:.4f}, {elapsed:.0f}s")
    assert tv <= 0.03
    assert elapsed < 120


@pytest.mark.criterion(6, "rate functions: m(1), m(c*), theta(.,0) and continuity at a in {beta, gamma}")
def test_c06_rate_functions(record_property):
    rng = np.random.default_rng(2024)
    for lb, mb in [(1.0, 4.0), (0.3, 1.0), (2.0, 2.5), (1.0, 1.05)]:
        assert cp.m_func(1.0, lb, mb) == 0.0
        assert abs(cp.m_func(cp.c_star(lb, mb), lb, mb) - (math.sqrt(mb) - math.sqrt(lb)) ** 2) <= 1e-12
    worst0 = 0.0
    for _ in range(1000):
        al, b, g = 1 + 9 * rng.random(), 0.01 + 10 * rng.random(), 0.01 + 10 * rng.random()
        worst0 = max(worst0, abs(cp.theta(al, b, g, 0.0) - 1.0))
    worst_lim = 0.0
    for _ in range(200):
        al, b, g = 1 + 4 * rng.random(), 0.1 + 3 * rng.random(), 0.1 + 3 * rng.random()
        for pt in (b, g):
            here = cp.theta(al, b, g, pt)
            for h in (1e-9, -1e-9, 1e-12, -1e-12):
                if 0 <= pt + h < b + g:
                    worst_lim = max(worst_lim, abs(cp.theta(al, b, g, pt + h) - here))
        lim = 1 + b / g + b * math.log(al) / g
        worst_lim = max(worst_lim, abs(cp.theta(al, b, g, b) - lim))
    record_property("detail", f"max |theta(.,0)-1| {worst0:.1e}, max jump near beta/gamma {worst_lim:.1e}")
    assert worst0 <= 1e-12
    assert worst_lim <= 1e-6


@pytest.mark.criterion(7, "min-of-clocks lemma: exact and Monte Carlo checks")
def test_c07_mgf_lemma(tmp_path, record_property):
    cfg = _cfg("mgf-lemma")
    r = cfg.run
    assert (r.alpha, r.beta, r.gamma, r.a, r.samples) == (1.5, 1, 1, 0.5, 100_000)
    res, elapsed = _timed(run_experiment, cfg, tmp_path)
    th = cp.theta(1.5, 1, 1, 0.5)
    c = _checks(res)
    assert c["exact_mgf_below_theta"].value == pytest.approx(4 / 3) and c["exact_mgf_below_theta"].ok
    assert c["exact_win_above_bound"].value == 0.5 and c["exact_win_above_bound"].limit == pytest.approx(1 / 3)
    assert c["exact_win_above_bound"].ok
    record_property("detail", f"E exp = 4/3 <= theta {th:.5f}; MC {res.results['mgf']:.4f} "
                              f"+- {res.results['mgf_se']:.4f}; P(win) MC {res.results['p_win']:.4f}; {elapsed:.1f}s")
    assert c["mc_mgf_matches_exact"].ok and c["mc_win_matches_exact"].ok
    assert res.ok
    assert elapsed < 10


@pytest.mark.criterion(8, "clock coupling: survival <= exp(-(1-q) Lambda t) + DKW, q in {0, 0.5}")
def test_c08_clock_coupling(record_property):
    T = [[0, 1], [1, 0]]
    t0 = time.perf_counter()
    ts = np.linspace(0.0, 3.0, 20)
    eps = dkw_epsilon(10_000, 0.05)
    qs, worst = [], -math.inf
    rng = np.random.default_rng(77)
    for lam in (2.0, 4.0):
        jc = cp.jump_coupling(T, lam)
        qs.append(jc.q)
        taus = np.array([cp.maximal_coupling_jump(jc, 0, 1, rng).tau for _ in range(10_000)])
        worst = max(worst, float(np.max(empirical_survival(taus, ts) - np.exp(-jc.gamma * ts) - eps)))
    elapsed = time.perf_counter() - t0
    record_property("detail", f"q = {qs}, max(survival - bound - DKW) {worst:.4f}, {elapsed:.1f}s")
    assert qs == [0.0, 0.5]
    assert worst <= 0
    assert elapsed < 30


@pytest.mark.criterion(9, "coupling harness: E exp(m(c) tau0) <= c^3 + 3 se, retries geometric")
def test_c09_coupling_harness(tmp_path, record_property):
    cfg = _cfg("joint-coupling")
    j = cfg.run.joint
    assert (j.x1[0], j.x2[0], j.c) == (3, 0, 1.2)
    res, elapsed = _timed(run_experiment, cfg, tmp_path)
    jr = res.results["joint"]
    c = _checks(res)
    record_property("detail", f"mgf {jr['mgf']:.4f} (se {jr['mgf_se']:.4f}) vs c^3 {jr['bound']:.3f}; "
                              f"p {jr['p']}; mean J {jr['mean_J']}; {elapsed:.1f}s")
    assert jr["bound"] == pytest.approx(1.728)
    assert c["tau0_mgf"].ok and c["retries_geometric"].ok
    assert elapsed < 60


@pytest.mark.criterion(10, "certified TV decay on the two-state joint chain")
def test_c10_tv_decay(tmp_path, record_property):
    cfg = _cfg("tv-decay")
    r = cfg.run
    assert r.n_max == 60 and list(r.n0s) == [0, 3, 6] and list(r.ts) == [0.5, 1, 2, 4, 8] and r.alpha == 1.0001
    res, elapsed = _timed(run_experiment, cfg, tmp_path)
    rows = res.tables["tv"][1]
    worst = max(row[3] / row[4] for row in rows)
    cert = res.results["certificate"]
    record_property("detail", f"kappa {cert['kappa']:.4f}, gamma {res.results['clock']['gamma']}, "
                              f"max TV/bound {worst:.2e}, {elapsed:.1f}s")
    assert len(rows) == 3 * 2 * 5
    assert all(row[3] <= row[4] for row in rows)
    assert res.ok
    assert elapsed < 120


@pytest.mark.criterion(11, "classical M/M/1 bound holds for the exact TV")
def test_c11_robert_bound(record_property):
    t0 = time.perf_counter()
    ts = [0.5, 1.0, 2.0, 5.0]
    worst = -math.inf
    for n in (0, 2, 5):
        tv = cp.mm1_tv_exact(n, ts, 1.0, 4.0)
        bound = cp.robert_bound(n, np.array(ts), 1.0, 4.0)
        worst = max(worst, float(np.max(tv / bound)))
        assert np.all(tv <= bound)
    elapsed = time.perf_counter() - t0
    record_property("detail", f"max TV/bound {worst:.3f}, {elapsed:.2f}s")
    assert elapsed < 30


REPRO = {
    "stationary-discrete": "two-state-simulated",
    "stationary-diffusive": "case-a-quick",
    "rate-certificate": "rate-certificate",
    "coupling-harness": "two-state-joint-coupling",
    "tv-decay": "tv-decay",
    "mgf-lemma": "mgf-lemma",
}


@pytest.mark.criterion(12, "reproducibility: identical CSV bytes on rerun")
def test_c12_reproducibility(tmp_path, record_property):
    cfgs = [_cfg(n) for n in REPRO.values()]
    # shorter versions of the slow configs; byte identity does not depend on run length
    short = _cfg("two-state-joint-coupling").model_dump(mode="json")
    short["run"]["joint"]["runs"] = 300
    thr = _cfg("ex3.1-threshold").model_dump(mode="json")
    thr["run"].update(horizon=20.0, replicas=2)
    cfgs = [c for c in cfgs if c.kind != "coupling-harness"] + [parse_config(short), parse_config(thr)]
    count = 0
    for i, cfg in enumerate(cfgs):
        a, b = tmp_path / f"{i}a", tmp_path / f"{i}b"
        run_experiment(cfg, a)
        run_experiment(cfg, b)
        files = sorted(p.name for p in a.glob("*.csv"))
        assert files and files == sorted(p.name for p in b.glob("*.csv"))
        for f in files:
            assert (a / f).read_bytes() == (b / f).read_bytes(), f
            count += 1
    record_property("detail", f"{count} CSV files over {len(cfgs)} configs, all byte-identical")
