"""Joint queue-environment chain for finite environments.

States are ordered layer-major: ``index = n * m + k`` for queue length ``n``
and environment state ``k``.  On layer ``n`` the environment jumps with rates
``rho(z)**(-n) * tau_n(z, z')``.  Truncation at ``n_max`` drops the arrival
from the top layer.  The closed-form law ``rho(z)**n v(z) / Xi`` restricted to
``n <= n_max`` and renormalized is then exactly stationary for the truncated
chain.  Every queue transition balances within its own environment state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.sparse as sp
from numba import njit
from scipy.stats import poisson

from .env import DiscreteEnvSpec, RateField
from .errors import BudgetExceeded, ScaleOverflow, SpecError
from .fields import const, linear, table
from .seeds import replica_seed

LOG_MAX = 700.0


@dataclass
class GeneratorMatrix:
    R: sp.csr_matrix
    n_max: int
    m: int

    @property
    def size(self) -> int:
        return self.R.shape[0]

    def index(self, n: int, k: int) -> int:
        return n * self.m + k

    def state(self, idx: int) -> tuple[int, int]:
        return divmod(int(idx), self.m)

    def dense(self) -> np.ndarray:
        return self.R.toarray()


def build_generator(spec: DiscreteEnvSpec, n_max: int, rf: RateField | None = None) -> GeneratorMatrix:
    """Sparse generator of the chain truncated at ``n_max``.

    Raises ScaleOverflow when ``rho(z)**(-n) * tau_n`` is not a finite double.
    """
    if n_max < 0:
        raise SpecError("n_max must be non-negative")
    if rf is not None:
        spec = DiscreteEnvSpec(spec.states, spec.tau, spec.v, rf, spec.name, spec.params)
    lam, mu = spec.rate_arrays()
    m = spec.m
    with np.errstate(divide="ignore"):
        log_rho = np.log(lam / mu)
    rows, cols, vals = [], [], []
    for n in range(n_max + 1):
        t = spec.tau_matrix(n)
        base = n * m
        if n < n_max:
            rows.append(base + np.arange(m)); cols.append(base + m + np.arange(m)); vals.append(lam)
        if n > 0:
            rows.append(base + np.arange(m)); cols.append(base - m + np.arange(m)); vals.append(mu)
        i, j = np.nonzero(t)
        if len(i):
            with np.errstate(divide="ignore", invalid="ignore"):
                lg = np.log(t[i, j]) - n * log_rho[i] if n > 0 else np.log(t[i, j])
            if np.any(~np.isfinite(lg)) or np.any(lg > LOG_MAX):
                raise ScaleOverflow(f"environment rate rho^-n * tau overflows at layer n={n}", n)
            rows.append(base + i); cols.append(base + j); vals.append(np.exp(lg))
    r = np.concatenate(rows) if rows else np.zeros(0, int)
    c = np.concatenate(cols) if cols else np.zeros(0, int)
    v = np.concatenate(vals) if vals else np.zeros(0)
    keep = v > 0
    N = (n_max + 1) * m
    off = sp.csr_matrix((v[keep], (r[keep], c[keep])), shape=(N, N))
    diag = -np.asarray(off.sum(axis=1)).ravel()
    R = (off + sp.diags(diag)).tocsr()
    R.sort_indices()
    return GeneratorMatrix(R, n_max, m)


@dataclass
class DiscretePi:
    """Closed-form stationary law ``pi(n, k) = rho_k**n v_k / Xi``."""

    xi: float
    weights: np.ndarray  # (n_max + 1, m), untruncated probabilities
    tail_mass: float     # exact mass on layers above n_max
    rho: np.ndarray
    v: np.ndarray

    @property
    def n_max(self) -> int:
        return self.weights.shape[0] - 1

    def vector(self) -> np.ndarray:
        """Layer-major law renormalized on n <= n_max: the truncated chain's stationary law."""
        w = self.weights.ravel()
        return w / w.sum()

    def queue_marginal(self) -> np.ndarray:
        return self.weights.sum(axis=1)


def xi_discrete(spec: DiscreteEnvSpec) -> float:
    rho = spec.rho()
    if np.any(rho >= 1):
        return math.inf
    return float(np.sum(spec.v / (1.0 - rho)))


def invariant_measure_discrete(spec: DiscreteEnvSpec, n_max: int) -> DiscretePi:
    rho = spec.rho()
    if np.any(rho >= 1):
        raise SpecError("rho(z) >= 1 somewhere; the normalizer diverges")
    xi = float(np.sum(spec.v / (1.0 - rho)))
    n = np.arange(n_max + 1)[:, None]
    w = rho[None, :] ** n * spec.v[None, :] / xi
    tail = float(np.sum(rho ** (n_max + 1) * spec.v / (1.0 - rho)) / xi)
    return DiscretePi(xi, w, tail, rho, spec.v.copy())


def gth_stationary(R) -> np.ndarray:
    """Stationary law of an irreducible generator by subtraction-free state reduction.

    Componentwise accurate even when rates span dozens of orders of magnitude,
    which is why it is the reference solver here.
    """
    A = np.array(R.toarray() if sp.issparse(R) else R, dtype=float)
    N = A.shape[0]
    np.fill_diagonal(A, 0.0)
    for k in range(N - 1, 0, -1):
        s = A[k, :k].sum()
        if s <= 0:
            raise SpecError("generator is reducible")
        A[:k, k] /= s
        A[:k, :k] += np.outer(A[:k, k], A[k, :k])
    pi = np.zeros(N)
    pi[0] = 1.0
    for k in range(1, N):
        pi[k] = pi[:k] @ A[:k, k]
    return pi / pi.sum()


def balance_residuals(G: GeneratorMatrix, pi) -> np.ndarray:
    """``pi R`` entrywise."""
    return np.asarray(G.R.T @ np.asarray(pi, dtype=float)).ravel()


def check_balance(G: GeneratorMatrix, pi, interior_only: bool = True) -> float:
    """max |(pi R)(y)| over states, by default only layers n < n_max."""
    r = balance_residuals(G, pi)
    if interior_only:
        r = r[: G.n_max * G.m]
    return float(np.max(np.abs(r))) if len(r) else 0.0


# --- transient laws ---------------------------------------------------------

def stochastic_expm(R, t: float, tol: float = 1e-6) -> np.ndarray:
    """Dense ``exp(tR)`` for a generator, robust to extreme stiffness.

    Starts from a third-order expansion at ``h = t / 2**k`` with ``h*max rate <= tol``
    and squares ``k`` times.  After every step the diagonal is rebuilt from the
    off-diagonal mass, so rows stay stochastic and no information carried by
    tiny off-diagonal entries is lost to cancellation.
    """
    A = np.array(R.toarray() if sp.issparse(R) else R, dtype=float)
    N = A.shape[0]
    if t == 0:
        return np.eye(N)
    q = float(np.max(-np.diag(A))) * t
    k = max(0, math.ceil(math.log2(q / tol))) if q > 0 else 0
    A *= t / 2.0**k
    A2 = A @ A
    P = A + A2 / 2 + (A2 @ A) / 6
    _restochasticize(P)
    for _ in range(k):
        P = P @ P
        _restochasticize(P)
    return P


def _restochasticize(P):
    np.fill_diagonal(P, 0.0)
    np.maximum(P, 0.0, out=P)
    np.fill_diagonal(P, np.maximum(1.0 - P.sum(axis=1), 0.0))


def uniformization_terms(G: GeneratorMatrix, t: float, tol: float = 1e-12) -> int:
    lam = float(np.max(-G.R.diagonal())) * t
    if lam == 0:
        return 1
    return int(poisson.isf(tol, lam)) + 2


def _uniformize(G: GeneratorMatrix, x0: int, t: float, tol: float) -> np.ndarray:
    Lam = float(np.max(-G.R.diagonal()))
    N = G.size
    v = np.zeros(N)
    v[x0] = 1.0
    if Lam == 0 or t == 0:
        return v
    PT = (sp.identity(N, format="csr") + G.R / Lam).T.tocsr()
    K = uniformization_terms(G, t, tol)
    w = poisson.pmf(np.arange(K + 1), Lam * t)
    acc = np.zeros(N)
    for k in range(K + 1):
        acc += w[k] * v
        v = PT @ v
    return acc / acc.sum()


def choose_transient_method(G: GeneratorMatrix, t: float, max_terms: int = 200_000, max_dense: int = 3000) -> str:
    """Uniformization if the Poisson term count fits, else dense stochastic squaring."""
    if uniformization_terms(G, t) <= max_terms:
        return "uniformization"
    if G.size <= max_dense:
        return "squaring"
    raise BudgetExceeded(f"uniformization rate overflow: {uniformization_terms(G, t)} terms needed and "
                         f"{G.size} states is too many for dense squaring")


def transient_law(G: GeneratorMatrix, x0, t: float, method: str = "auto", tol: float = 1e-12) -> np.ndarray:
    """Law of the truncated chain at time ``t`` started from ``x0`` (index or ``(n, k)``)."""
    if t < 0:
        raise SpecError("t must be non-negative")
    if not isinstance(x0, (int, np.integer)):
        x0 = G.index(*x0)
    if method == "auto":
        method = choose_transient_method(G, t)
    if method == "uniformization":
        return _uniformize(G, x0, t, tol)
    if method == "squaring":
        return stochastic_expm(G.R, t)[x0]
    if method == "expm":
        return scipy.linalg.expm(t * G.dense())[x0]
    raise SpecError(f"unknown transient method {method!r}")


def transient_matrix(G: GeneratorMatrix, t: float) -> np.ndarray:
    return stochastic_expm(G.R, t)


def spectral_gap(G: GeneratorMatrix, pi=None, reversible_tol: float = 1e-9) -> float:
    """Spectral gap from the eigenvalues of ``P(t0) = exp(t0 R)``.

    Working with the stochastic matrix keeps every entry in [0, 1], so the
    slow eigenvalues are resolved even when rates span 1e40.  For reversible
    chains ``sqrt(P_ij P_ji)`` is the symmetrized kernel.
    """
    if pi is None:
        pi = gth_stationary(G.R)
    t0 = 1.0
    for _ in range(40):
        P = stochastic_expm(G.R, t0)
        flux = pi[:, None] * P
        rev = np.max(np.abs(flux - flux.T)) <= reversible_tol
        if rev:
            ev = np.sort(np.linalg.eigvalsh(np.sqrt(P * P.T)))[::-1]
            lam2 = ev[1]
        else:
            mods = np.sort(np.abs(np.linalg.eigvals(P)))[::-1]
            lam2 = mods[1]
        if lam2 > 0.95:
            t0 *= 8.0
        elif lam2 < 1e-3:
            t0 /= 8.0
        else:
            return float(-math.log(lam2) / t0)
    raise BudgetExceeded("spectral gap bracketing did not settle")


def tv_truncated(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum())


# --- simulation ---------------------------------------------------------------

@njit(cache=True)
def _gillespie(indptr, indices, rates, exit_rates, x0, horizon, max_events, max_log, seed):
    np.random.seed(seed)
    N = exit_rates.shape[0]
    occ = np.zeros(N)
    log_t = np.zeros(max_log)
    log_x = np.zeros(max_log, dtype=np.int64)
    t = 0.0
    x = x0
    events = 0
    nlog = 0
    status = 0
    while True:
        q = exit_rates[x]
        if q <= 0.0:
            occ[x] += horizon - t
            t = horizon
            break
        dt = np.random.exponential(1.0 / q)
        if t + dt >= horizon:
            occ[x] += horizon - t
            t = horizon
            break
        if events >= max_events:
            status = 1
            break
        occ[x] += dt
        t += dt
        u = np.random.random() * q
        acc = 0.0
        y = indices[indptr[x + 1] - 1]
        for p in range(indptr[x], indptr[x + 1]):
            acc += rates[p]
            if u < acc:
                y = indices[p]
                break
        x = y
        events += 1
        if nlog < max_log:
            log_t[nlog] = t
            log_x[nlog] = x
            nlog += 1
    return occ, log_t[:nlog], log_x[:nlog], events, t, x, status


@dataclass
class CtmcPath:
    """Sample path of the truncated chain: event log plus exact occupation times."""

    times: np.ndarray
    states: np.ndarray
    occupation: np.ndarray
    x0: int
    t_end: float
    events: int
    n_max: int
    m: int
    meta: dict = field(default_factory=dict)

    def layers(self) -> np.ndarray:
        return self.states // self.m

    def occupation_law(self) -> np.ndarray:
        return self.occupation / self.occupation.sum()


def simulate_ctmc(G: GeneratorMatrix, x0, horizon: float | None, seed: int,
                  max_events: int = 10_000_000, max_log: int = 100_000, replica: int = 0) -> CtmcPath:
    """Exact Gillespie path of the truncated chain.

    With ``horizon=None`` the run stops after exactly ``max_events`` events.
    With a finite horizon, running out of events is an error.
    """
    if not isinstance(x0, (int, np.integer)):
        x0 = G.index(*x0)
    off = G.R.copy().tolil()
    off.setdiag(0)
    off = off.tocsr()
    off.eliminate_zeros()
    off.sort_indices()
    exit_rates = np.asarray(off.sum(axis=1)).ravel()
    h = math.inf if horizon is None else float(horizon)
    occ, lt, lx, ev, t, x, status = _gillespie(off.indptr.astype(np.int64), off.indices.astype(np.int64),
                                               off.data, exit_rates, int(x0), h, int(max_events),
                                               int(max_log), replica_seed(seed, replica))
    if status == 1 and horizon is not None:
        raise BudgetExceeded(f"event budget {max_events} exhausted at t={t:.6g} < horizon={h}")
    return CtmcPath(lt, lx, occ, int(x0), t, int(ev), G.n_max, G.m,
                    {"seed": seed, "replica": replica, "final_state": int(x)})


# --- example environments -----------------------------------------------------

def _label_rates(lam, mu) -> RateField:
    lam = np.asarray(lam, dtype=float)
    mu = np.asarray(mu, dtype=float)
    m = len(lam)
    labels = np.arange(m, dtype=float)
    if m == 1:
        lf, mf = const(lam[0]), const(mu[0])
    else:
        lf, mf = table(labels, lam), table(labels, mu)
    return RateField(lf, mf, float(lam.max()) if lam.max() > 0 else 1e-300, float(mu.min()))


def matrix_env(lam, mu, tau, v=None, name: str = "matrix") -> DiscreteEnvSpec:
    """Environment with per-state rates and a layer-independent kernel ``tau``."""
    tau = np.asarray(tau, dtype=float)
    m = tau.shape[0]
    v = np.ones(m) if v is None else np.asarray(v, dtype=float)
    return DiscreteEnvSpec(np.arange(m, dtype=float), lambda n, _t=tau: _t, v, _label_rates(lam, mu),
                           name, {"lam": list(map(float, lam)), "mu": list(map(float, mu)),
                                  "tau": tau.tolist(), "v": v.tolist()})


def two_state(rho=(0.2, 0.5), rate: float = 1.0, mu: float = 1.0) -> DiscreteEnvSpec:
    lam = [r * mu for r in rho]
    spec = matrix_env(lam, [mu, mu], [[0.0, rate], [rate, 0.0]], name="two-state")
    spec.params.update(rho=list(rho), rate=rate)
    return spec


def single_state(lam: float, mu: float) -> DiscreteEnvSpec:
    return matrix_env([lam], [mu], [[0.0]], name="single-state")


def _layer_flags(L, n: int) -> bool:
    if L == "none":
        return False
    if L == "all":
        return True
    if L == "even":
        return n % 2 == 0
    if L == "odd":
        return n % 2 == 1
    return n in set(L)


def nested_cyclic(M: int = 6, m=3, shift: int = 1, L="none", beta: float = 1.0,
                  z_lo: float = 0.1, z_hi: float = 0.8) -> DiscreteEnvSpec:
    """Finite points of (0, 1) with rho(z) = z.  Layer n moves on a window D_n of size m_n.

    On layers in ``L`` the walk jumps uniformly inside D_n at total rate ``beta``.
    Elsewhere it is the nearest-neighbour cycle through D_n with rate ``beta/2`` each way.
    Points outside D_n are frozen on that layer.  The counting measure is
    invariant on every layer.
    """
    ms = [m] if isinstance(m, int) else list(m)
    if any(k < 2 or k > M for k in ms):
        raise SpecError("each m_n must satisfy 2 <= m_n <= M")
    pts = np.linspace(z_lo, z_hi, M)

    def window(n):
        k = ms[n % len(ms)]
        return [(n * shift + i) % M for i in range(k)]

    def tau(n):
        t = np.zeros((M, M))
        w = window(n)
        k = len(w)
        if _layer_flags(L, n):
            for a in w:
                for b in w:
                    if a != b:
                        t[a, b] += beta / (k - 1)
        else:
            for i, a in enumerate(w):
                t[a, w[(i + 1) % k]] += beta / 2
                t[a, w[(i - 1) % k]] += beta / 2
        return t

    rf = RateField(linear(1.0), const(1.0), float(pts.max()), 1.0)
    return DiscreteEnvSpec(pts, tau, np.ones(M), rf, "ex2.1",
                           {"M": M, "m": ms, "shift": shift, "L": L, "beta": beta, "z_lo": z_lo, "z_hi": z_hi})


def shift_window(W: int = 20, rho0: float = 0.3, power: float = 1.0, beta: float = 1.0, rho=None) -> DiscreteEnvSpec:
    """States i = -W..W on a ring; on layer n the environment shifts i -> i + n at rate beta.

    ``rho_i = 1 - (1 - rho0) / (1 + |i|)**power`` unless an explicit list is given.
    Shifts are permutations, so the counting measure is invariant on every layer.
    On the full lattice that same measure has infinite mass, so the normalizer
    is finite only on the window.
    """
    K = 2 * W + 1
    idx = np.arange(-W, W + 1)
    if rho is None:
        rho = 1.0 - (1.0 - rho0) / (1.0 + np.abs(idx)) ** power
    rho = np.asarray(rho, dtype=float)
    if rho.shape != (K,):
        raise SpecError(f"explicit rho needs {K} entries")

    def tau(n):
        t = np.zeros((K, K))
        s = n % K
        if s:
            t[np.arange(K), (np.arange(K) + s) % K] = beta
        return t

    rf = _label_rates(rho, np.ones(K))
    return DiscreteEnvSpec(np.arange(K, dtype=float), tau, np.ones(K), rf, "ex2.2",
                           {"W": W, "rho0": rho0, "power": power, "beta": beta, "rho": rho.tolist()})


def xi_variants(spec: DiscreteEnvSpec) -> dict:
    """Normalizer on the configured state set and on the infinite model it stands for."""
    out = {"window": xi_discrete(spec)}
    if spec.name == "ex2.2":
        out["full_lattice"] = math.inf
        out["note"] = "v is counting measure on an infinite set, so the full-lattice sum has infinitely many terms >= 1"
    return out


def example_env(kind: str, **params) -> DiscreteEnvSpec:
    builders = {"ex2.1": nested_cyclic, "ex2.2": shift_window, "two-state": two_state,
                "single-state": single_state, "matrix": matrix_env}
    if kind not in builders:
        raise SpecError(f"unknown discrete example {kind!r}; choose from {sorted(builders)}")
    return builders[kind](**params)
