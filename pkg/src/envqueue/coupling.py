"""Exponential rates from coupling, and the coupling constructions behind them.

The certified rate is ``kappa = (1 - eps) m(c)``, where

    m(c) = -lambda_bar c - mu_bar / c + lambda_bar + mu_bar

and ``(c, eps)`` must satisfy ``c theta(alpha, lambda_bar, gamma, m(c)) < (1 - p)**(-eps / (1 - eps))``.
``(alpha, gamma)`` are the constants of the environment coupling time at an
empty queue, ``P(zeta > t) <= alpha exp(-gamma t)``.  ``p`` is the resulting lower
bound on the chance that one coupling attempt succeeds.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .discrete import (build_generator, invariant_measure_discrete, single_state, spectral_gap,
                       transient_law, tv_truncated)
from .env import DiscreteEnvSpec
from .errors import PreconditionError, SpecError
from .seeds import replica_rng
from .stats import mean_se, verify_survival_bound


def m_func(c, lambda_bar: float, mu_bar: float):
    """Exponent with E[exp(m(c) T_n)] = c**n for the M/M/1 emptying time from n."""
    c = np.asarray(c, dtype=float)
    # factored so that m(1) is exactly zero
    return ((c - 1.0) * (mu_bar / c - lambda_bar))[()]


def c_star(lambda_bar: float, mu_bar: float) -> float:
    return math.sqrt(mu_bar / lambda_bar)


def m_max(lambda_bar: float, mu_bar: float) -> float:
    return (math.sqrt(mu_bar) - math.sqrt(lambda_bar)) ** 2


def theta(alpha: float, beta: float, gamma: float, a: float) -> float:
    """Bound on E[exp(a min(xi, eta))] for xi ~ Exp(beta) and P(eta > t) <= alpha exp(-gamma t).

    Valid for 0 <= a < beta + gamma.  The textbook form has a removable
    singularity at a = beta; writing x = a - beta it equals

        beta expm1(x ln(alpha) / gamma) / x + (beta + gamma) alpha**(x / gamma) / (beta + gamma - a)

    which is smooth through x = 0, where the first term is beta ln(alpha) / gamma.
    """
    if not (alpha >= 1 and beta > 0 and gamma > 0):
        raise PreconditionError("theta needs alpha >= 1, beta > 0, gamma > 0")
    if a < 0 or a >= beta + gamma:
        raise PreconditionError(f"theta needs 0 <= a < beta + gamma, got a={a}")
    if a == 0:
        return 1.0
    x = a - beta
    L = math.log(alpha) / gamma
    head = beta * L if x == 0 else beta * math.expm1(x * L) / x
    return head + (beta + gamma) * math.exp(x * L) / (beta + gamma - a)


def success_prob(alpha: float, gamma: float, lambda_bar: float) -> float:
    """Lower bound on P(zeta < eta) with eta ~ Exp(lambda_bar)."""
    return gamma / (lambda_bar + gamma) * alpha ** (-lambda_bar / gamma)


def feasibility_margin(c: float, eps: float, alpha: float, gamma: float, lambda_bar: float, mu_bar: float) -> float:
    """log RHS - log LHS of the feasibility inequality; positive means feasible."""
    mc = float(m_func(c, lambda_bar, mu_bar))
    if not (c > 1 and 0 < eps < 1) or mc >= lambda_bar + gamma or mc < 0:
        return -math.inf
    p = success_prob(alpha, gamma, lambda_bar)
    if p <= 0 or p >= 1:
        return -math.inf
    kc = c * theta(alpha, lambda_bar, gamma, mc)
    return -eps / (1 - eps) * math.log1p(-p) - math.log(kc)


def feasible(c, eps, alpha, gamma, lambda_bar, mu_bar) -> bool:
    return feasibility_margin(c, eps, alpha, gamma, lambda_bar, mu_bar) > 0


@dataclass
class RateCertificate:
    ok: bool
    kappa: float = 0.0
    c: float = math.nan
    eps: float = math.nan
    C_star: float = math.inf   # E[exp(kappa tau)] <= C_star (c**n1 + c**n2)
    C: float = math.inf        # theorem constant, C_star / (1 - sqrt(rho_bar))
    kappa_c: float = math.nan  # c * theta(alpha, lambda_bar, gamma, m(c))
    p: float = math.nan
    margin: float = math.nan
    grid_kappa: float = 0.0
    inputs: dict = field(default_factory=dict)
    reason: str = ""

    def bound(self, n0: int, t, which: str = "theorem"):
        """Certified bound on the total variation distance to stationarity from queue length ``n0``.

        ``theorem``  C (1 + c**n0) exp(-kappa t)
        ``coupling`` C_star (c**n0 + E_pi c**N) exp(-kappa t); needs ``inputs['pi_mgf']``
        """
        t = np.asarray(t, dtype=float)
        if which == "theorem":
            return (self.C * (1 + self.c**n0) * np.exp(-self.kappa * t))[()]
        if which == "coupling":
            return (self.C_star * (self.c**n0 + self.inputs["pi_mgf"]) * np.exp(-self.kappa * t))[()]
        raise SpecError(f"unknown bound {which!r}")

    def to_dict(self) -> dict:
        return {k: v for k, v in self.__dict__.items()}


def _kappa_at(c, alpha, gamma, lb, mb, margin):
    """Best eps at c for the given log margin, and the resulting kappa."""
    mc = float(m_func(c, lb, mb))
    p = success_prob(alpha, gamma, lb)
    kc = c * theta(alpha, lb, gamma, mc)
    r = (math.log(kc) + margin) / (-math.log1p(-p))
    eps = r / (1 + r)
    return (1 - eps) * mc, eps, kc, p


def optimize_rate(alpha: float, gamma: float, lambda_bar: float, mu_bar: float,
                  margin: float = 0.01, grid: int = 200) -> RateCertificate:
    """Largest certified kappa over feasible (c, eps).

    A ``grid x grid`` log-spaced search over (c, eps) finds the best feasible
    cell.  Golden-section refinement along the feasibility boundary follows,
    kept ``margin`` inside it in log space.  The margin keeps C_star finite.
    """
    inputs = {"alpha": alpha, "gamma": gamma, "lambda_bar": lambda_bar, "mu_bar": mu_bar, "margin": margin}
    if not lambda_bar < mu_bar:
        raise PreconditionError("a rate certificate needs lambda_bar < mu_bar")
    if not (alpha >= 1 and gamma > 0):
        raise PreconditionError("coupling constants need alpha >= 1 and gamma > 0")
    lb, mb = lambda_bar, mu_bar
    p = success_prob(alpha, gamma, lb)
    if not 0 < p < 1 or -math.log1p(-p) <= 0:
        return RateCertificate(False, p=p, inputs=inputs, reason="success probability underflows")
    cs = c_star(lb, mb)
    cs_grid = 1 + (cs - 1) * np.logspace(-6, 0, grid)[:-1]
    cs_grid = cs_grid[np.array([m_func(c, lb, mb) < lb + gamma for c in cs_grid])]
    if len(cs_grid) == 0:
        return RateCertificate(False, p=p, inputs=inputs, reason="no c with m(c) < lambda_bar + gamma")
    eps_grid = np.logspace(-6, 0, grid)[:-1]
    best, best_j = 0.0, -1
    for j, c in enumerate(cs_grid):
        mc = float(m_func(c, lb, mb))
        kc = c * theta(alpha, lb, gamma, mc)
        marg = -eps_grid / (1 - eps_grid) * math.log1p(-p) - math.log(kc)
        ok = marg > margin
        if ok.any():
            k = float(np.max((1 - eps_grid[ok]) * mc))
            if k > best:
                best, best_j = k, j
    if best_j < 0:
        return RateCertificate(False, p=p, inputs=inputs, reason="no feasible (c, eps) on the grid")
    lo = cs_grid[max(best_j - 1, 0)]
    hi = cs_grid[min(best_j + 1, len(cs_grid) - 1)]
    f = lambda c: -_kappa_at(c, alpha, gamma, lb, mb, margin)[0]
    g = (math.sqrt(5) - 1) / 2
    a, b = lo, hi
    x1, x2 = b - g * (b - a), a + g * (b - a)
    f1, f2 = f(x1), f(x2)
    for _ in range(80):
        if f1 < f2:
            b, x2, f2 = x2, x1, f1
            x1 = b - g * (b - a)
            f1 = f(x1)
        else:
            a, x1, f1 = x1, x2, f2
            x2 = a + g * (b - a)
            f2 = f(x2)
    c = min([x1, x2, cs_grid[best_j]], key=f)
    kappa, eps, kc, _ = _kappa_at(c, alpha, gamma, lb, mb, margin)
    q = 1 - p
    denom = 1 - kc ** ((1 - eps) / eps) * q
    C_star = p * kc ** ((1 - eps) * (1 / eps + 1)) / denom
    C = C_star / (1 - math.sqrt(lb / mb))
    return RateCertificate(True, kappa, c, eps, C_star, C, kc, p,
                           feasibility_margin(c, eps, alpha, gamma, lb, mb), best, inputs)


def robert_bound(n: int, t, lambda_bar: float, mu_bar: float):
    """Classical M/M/1 bound (1 + rho**(-n/2)) exp(-(sqrt(lambda) - sqrt(mu))**2 t)."""
    rho = lambda_bar / mu_bar
    t = np.asarray(t, dtype=float)
    return ((1 + rho ** (-n / 2)) * np.exp(-m_max(lambda_bar, mu_bar) * t))[()]


def mm1_tv_exact(n: int, ts, lambda_bar: float, mu_bar: float, n_trunc: int = 60) -> np.ndarray:
    """TV(P^t(n, .), Geometric) for the M/M/1 queue truncated at ``n_trunc``, by uniformization."""
    spec = single_state(lambda_bar, mu_bar)
    G = build_generator(spec, n_trunc)
    pi = invariant_measure_discrete(spec, n_trunc).vector()
    return np.array([tv_truncated(transient_law(G, (n, 0), float(t), method="uniformization"), pi) for t in ts])


# --- environment coupling by a common clock -----------------------------------

@dataclass
class JumpCouplingSpec:
    """Maximal coupling of a finite jump generator through a common Poisson clock.

    At rate ``Lambda`` both copies draw from the lazy kernels
    ``T(x, .) / Lambda + (1 - T(x, D) / Lambda) delta_x`` jointly and maximally.
    Then ``P(tau > t) <= exp(-(1 - q) Lambda t)``, where ``q`` is the largest
    total variation distance between two lazy kernels.
    """

    T: np.ndarray
    Lambda: float
    nu: np.ndarray
    q: float

    @property
    def gamma(self) -> float:
        return (1.0 - self.q) * self.Lambda


def _lazy(T, Lam):
    nu = T / Lam
    np.fill_diagonal(nu, 0.0)
    np.fill_diagonal(nu, 1.0 - nu.sum(axis=1))
    return nu


def _max_tv(nu) -> float:
    m = nu.shape[0]
    q = 0.0
    for x in range(m):
        for y in range(x + 1, m):
            q = max(q, 0.5 * float(np.abs(nu[x] - nu[y]).sum()))
    return q


def _contraction(T, out, Lam) -> float:
    """(1 - q(Lambda)) Lambda = min over pairs of sum_w min(Lambda nu(x, w), Lambda nu(y, w))."""
    m = T.shape[0]
    best = math.inf
    for x in range(m):
        for y in range(x + 1, m):
            a = T[x].copy()
            b = T[y].copy()
            a[x] = Lam - out[x]
            b[y] = Lam - out[y]
            best = min(best, float(np.minimum(a, b).sum()))
    return best


def optimal_clock_rate(T) -> float:
    """Smallest Lambda maximizing (1 - q(Lambda)) Lambda.

    The objective is concave, piecewise linear and non-decreasing in Lambda, with
    kinks at out(x) + T(y, x).  It is flat beyond the largest kink, so the first
    kink (or the largest jump rate) that attains the final value is the answer.
    """
    T = np.array(T, dtype=float)
    np.fill_diagonal(T, 0.0)
    out = T.sum(axis=1)
    m = T.shape[0]
    sup = float(out.max())
    kinks = sorted({sup} | {float(out[x] + T[y, x]) for x in range(m) for y in range(m) if x != y and out[x] + T[y, x] > sup})
    top = _contraction(T, out, kinks[-1])
    for lam in kinks:
        if _contraction(T, out, lam) >= top - 1e-12 * max(1.0, top):
            return lam
    return kinks[-1]


def jump_coupling(T, Lambda: float | None = None) -> JumpCouplingSpec:
    T = np.array(T, dtype=float)
    np.fill_diagonal(T, 0.0)
    if T.shape[0] < 2:
        raise PreconditionError("jump coupling needs at least two states")
    sup = float(T.sum(axis=1).max())
    if Lambda is None:
        Lambda = optimal_clock_rate(T)
    if Lambda < sup * (1 - 1e-12) or Lambda <= 0:
        raise PreconditionError(f"clock rate {Lambda} is below the largest jump rate {sup}")
    nu = _lazy(T, Lambda)
    q = _max_tv(nu)
    if q >= 1 - 1e-12:
        raise PreconditionError("some lazy kernels are mutually singular (q = 1); no contraction")
    return JumpCouplingSpec(T, float(Lambda), nu, q)


def maximal_coupling_draw(p, q, rng) -> tuple[int, int, bool]:
    """Draw (X, Y) with X ~ p, Y ~ q and P(X = Y) = 1 - TV(p, q)."""
    w = np.minimum(p, q)
    s = float(w.sum())
    if rng.random() < s:
        k = int(rng.choice(len(p), p=w / s))
        return k, k, True
    a = (p - w) / (1 - s)
    b = (q - w) / (1 - s)
    return int(rng.choice(len(p), p=a)), int(rng.choice(len(q), p=b)), False


@dataclass
class JumpCouplingRun:
    tau: float
    rings: int
    path: list  # (time, x, y) after every ring until coupling


def maximal_coupling_jump(jc: JumpCouplingSpec, x: int, y: int, rng, horizon: float = math.inf,
                          record_until: float = -1.0) -> JumpCouplingRun:
    """Run the clock coupling from (x, y) until the copies meet or ``horizon`` passes."""
    t, rings = 0.0, 0
    path = [(0.0, x, y)]
    while x != y:
        t += rng.exponential(1.0 / jc.Lambda)
        if t > horizon:
            return JumpCouplingRun(math.inf, rings, path)
        x, y, _ = maximal_coupling_draw(jc.nu[x], jc.nu[y], rng)
        rings += 1
        if t <= record_until or record_until < 0:
            path.append((t, x, y))
    return JumpCouplingRun(t, rings, path)


def _state_at(path, t):
    x, y = path[0][1], path[0][2]
    for s, a, b in path:
        if s > t:
            break
        x, y = a, b
    return x, y


# --- coupling of two joint processes ------------------------------------------

@dataclass
class CouplingTrace:
    """Phase decomposition of one coupling run.

    ``phases[k] = (tau_k, eta_k, zeta_k)``: time for the dominating queue to empty,
    then the arrival clock and the environment coupling time of attempt k.
    The last attempt is the successful one, so ``J = len(phases) - 1`` and
    ``tau = sum_{j<J} (tau_j + eta_j) + tau_J + zeta_J``.
    """

    tau0: float
    phases: list
    J: int
    tau: float
    coupled: bool = True

    @property
    def etas(self):
        return [p[1] for p in self.phases]

    @property
    def zetas(self):
        return [p[2] for p in self.phases]

    def decomposition(self) -> float:
        if not self.phases:
            return 0.0
        tot = sum(tk + ek for tk, ek, _ in self.phases[:-1])
        tk, _, zk = self.phases[-1]
        return tot + tk + zk


def couple_joint_discrete(spec: DiscreteEnvSpec, x1, x2, rng, jc: JumpCouplingSpec | None = None,
                          horizon: float = 1e6, max_events: int = 10_000_000) -> CouplingTrace:
    """Dominated coupling of two copies of the joint chain started at (n, k) pairs.

    Both copies see one dominating M/M/1 queue with rates (lambda_bar, mu_bar).
    Arrivals are thinned with one shared uniform.  Departures at mu_bar are
    shared; the excess mu(z) - mu_bar is private.  Once the dominating queue
    empties, the environments run the clock coupling ``jc`` on layer 0 against
    an Exp(lambda_bar) arrival clock.  The coupling is run to completion even
    when it loses the race, which yields the attempt's zeta.
    """
    lam, mu = spec.rate_arrays()
    lb, mb = spec.rates.lambda_bar, spec.rates.mu_bar
    rho = lam / mu
    taus = {}

    def tau_n(n):
        if n not in taus:
            taus[n] = spec.tau_matrix(n)
        return taus[n]

    (n1, k1), (n2, k2) = x1, x2
    if (n1, k1) == (n2, k2):
        return CouplingTrace(0.0, [(0.0, 0.0, 0.0)], 0, 0.0)
    if jc is None and spec.m > 1:
        jc = jump_coupling(tau_n(0))
    nbar = max(n1, n2)
    t = 0.0
    phases = []
    events = 0
    start_a = 0.0
    tau0 = None
    while True:
        # phase A: dominating queue busy, copies move independently
        while nbar > 0:
            rates = [lb, mb]
            env = []
            for n, k in ((n1, k1), (n2, k2)):
                extra = mu[k] - mb if n > 0 else 0.0
                row = tau_n(n)[k] * (rho[k] ** (-n) if n > 0 else 1.0) if spec.m > 1 else np.zeros(1)
                env.append(row)
                rates.append(extra)
                rates.append(float(row.sum()))
            total = sum(rates)
            t += rng.exponential(1.0 / total)
            events += 1
            if t > horizon or events > max_events:
                return CouplingTrace(tau0 if tau0 is not None else t, phases, len(phases), math.inf, False)
            u = rng.random() * total
            if u < lb:
                v = rng.random()
                nbar += 1
                n1 += v < lam[k1] / lb
                n2 += v < lam[k2] / lb
            elif u < lb + mb:
                nbar -= 1
                n1 = max(n1 - 1, 0)
                n2 = max(n2 - 1, 0)
            else:
                u -= lb + mb
                if u < rates[2]:
                    n1 -= 1
                elif u < rates[2] + rates[3]:
                    k1 = int(rng.choice(spec.m, p=env[0] / env[0].sum()))
                elif u < rates[2] + rates[3] + rates[4]:
                    n2 -= 1
                else:
                    k2 = int(rng.choice(spec.m, p=env[1] / env[1].sum()))
        tk = t - start_a
        if tau0 is None:
            tau0 = tk
        # phase B: empty queues, environments race an arrival
        eta = rng.exponential(1.0 / lb)
        if k1 == k2:
            zeta, path = 0.0, [(0.0, k1, k2)]
        else:
            run = maximal_coupling_jump(jc, k1, k2, rng)
            zeta, path = run.tau, run.path
        phases.append((tk, eta, zeta))
        if zeta < eta:
            t += zeta
            return CouplingTrace(tau0, phases, len(phases) - 1, t)
        t += eta
        k1, k2 = _state_at(path, eta)
        v = rng.random()
        nbar = 1
        n1 = int(v < lam[k1] / lb)
        n2 = int(v < lam[k2] / lb)
        start_a = t


def couple_joint(spec, x1, x2, seed: int, replica: int = 0, **kw) -> CouplingTrace:
    """Coupling trace for a discrete or 1-D diffusive environment."""
    if isinstance(spec, DiscreteEnvSpec):
        return couple_joint_discrete(spec, x1, x2, replica_rng(seed, replica), **kw)
    from .joint import couple_joint_diffusive
    return couple_joint_diffusive(spec, x1, x2, seed, replica=replica, **kw)


# --- lemma-level checks ---------------------------------------------------------

@dataclass
class MgfReport:
    mgf: float
    mgf_se: float
    mgf_bound: float
    p_win: float
    p_win_se: float
    p_win_bound: float
    n: int
    tail_ok: bool
    tail_excess: float
    mgf_exact: float | None = None
    p_win_exact: float | None = None

    @property
    def mgf_ok(self) -> bool:
        return self.mgf <= self.mgf_bound + 3 * self.mgf_se

    @property
    def p_win_ok(self) -> bool:
        return self.p_win >= self.p_win_bound - 3 * self.p_win_se

    @property
    def ok(self) -> bool:
        return self.tail_ok and self.mgf_ok and self.p_win_ok


def mgf_min_check(alpha: float, beta: float, gamma: float, a: float, eta_sampler, n: int, seed: int,
                  exact: dict | None = None) -> MgfReport:
    """Monte Carlo check of the two bounds for xi ~ Exp(beta) independent of eta.

    ``eta_sampler(rng, n)`` returns n positive samples.  Their survival must
    lie below alpha exp(-gamma t) within the DKW band.  Zero or negative samples are
    rejected because the bounds assume eta > 0.
    """
    rng = replica_rng(seed, 0)
    eta = np.asarray(eta_sampler(rng, n), dtype=float)
    if np.any(eta <= 0):
        raise PreconditionError("eta must be strictly positive")
    tail_ok, excess = verify_survival_bound(eta, alpha, gamma)
    if not tail_ok:
        raise PreconditionError(f"eta survival exceeds alpha exp(-gamma t) by {excess:.3g}")
    xi = rng.exponential(1.0 / beta, size=n)
    mn = np.minimum(xi, eta)
    mg, mg_se = mean_se(np.exp(a * mn))
    pw, pw_se = mean_se((eta < xi).astype(float))
    exact = exact or {}
    return MgfReport(mg, mg_se, theta(alpha, beta, gamma, a), pw, pw_se,
                     alpha ** (-beta / gamma) * gamma / (beta + gamma), n, tail_ok, excess,
                     exact.get("mgf"), exact.get("p_win"))


@dataclass
class TvDecayReport:
    certificate: RateCertificate
    ts: np.ndarray
    rows: list      # (n0, k, t, tv_exact, bound_theorem, bound_coupling)
    gap: float
    fitted_rate: float
    ok_bound: bool
    ok_slope: bool
    jump: JumpCouplingSpec
    method: str

    @property
    def ok(self) -> bool:
        return self.ok_bound and self.ok_slope and self.certificate.ok


def tv_decay_check(spec: DiscreteEnvSpec, n_max: int, n0s, ts, alpha: float = 1.0001,
                   margin: float = 0.01) -> TvDecayReport:
    """Exact TV decay of the truncated chain against the certified bound.

    The environment coupling constants are (alpha, (1 - q) Lambda), taken from the
    layer-0 clock coupling.  Every exact TV must sit under the theorem bound.
    The late-time decay rate fitted from the exact curve must be at least kappa.
    """
    jc = jump_coupling(spec.tau_matrix(0))
    lb, mb = spec.rates.lambda_bar, spec.rates.mu_bar
    cert = optimize_rate(alpha, jc.gamma, lb, mb, margin=margin)
    G = build_generator(spec, n_max)
    dpi = invariant_measure_discrete(spec, n_max)
    pi = dpi.vector()
    marg = dpi.queue_marginal() / dpi.queue_marginal().sum()
    if cert.ok:
        cert.inputs["pi_mgf"] = float(np.sum(marg * cert.c ** np.arange(n_max + 1)))
    ts = np.asarray(ts, dtype=float)
    rows = []
    ok_bound = cert.ok
    from .discrete import stochastic_expm
    Ps = {float(t): stochastic_expm(G.R, float(t)) for t in ts}
    for n0 in n0s:
        for k in range(spec.m):
            for t in ts:
                tv = tv_truncated(Ps[float(t)][G.index(n0, k)], pi)
                bt = cert.bound(n0, t) if cert.ok else math.inf
                bc = cert.bound(n0, t, "coupling") if cert.ok else math.inf
                ok_bound &= tv <= bt
                rows.append((n0, k, float(t), tv, float(bt), float(bc)))
    gap = spectral_gap(G, pi)
    late = [r for r in rows if r[2] >= ts[len(ts) // 2] and r[3] > 1e-13]
    if len(late) >= 2 and len({r[2] for r in late}) >= 2:
        tt = np.array([r[2] for r in late])
        lv = np.log([r[3] for r in late])
        # one slope per starting state, report the slowest
        rates = []
        for n0 in n0s:
            for k in range(spec.m):
                sel = [(r[2], math.log(r[3])) for r in late if r[0] == n0 and r[1] == k]
                if len(sel) >= 2:
                    a = np.array(sel)
                    rates.append(-np.polyfit(a[:, 0], a[:, 1], 1)[0])
        fitted = float(min(rates)) if rates else gap
    else:
        fitted = gap
    ok_slope = cert.ok and min(fitted, gap) >= cert.kappa
    return TvDecayReport(cert, ts, rows, gap, fitted, bool(ok_bound), bool(ok_slope), jc, "squaring")
