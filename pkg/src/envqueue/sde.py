"""Reflected diffusions with jumps: single steps, 1-D stationary densities, coupling."""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import integrate

from .env import DiffusionEnvSpec
from .errors import DivergenceError, DomainError, SpecError
from .stats import CouplingFit, fit_exponential_tail

QUAD_TOL = 1e-10


@dataclass(frozen=True)
class SdeState:
    z: np.ndarray
    ell: np.ndarray  # cumulative displacement per face
    t: float = 0.0


def initial_state(spec: DiffusionEnvSpec, z) -> SdeState:
    z = np.atleast_1d(np.asarray(z, dtype=float))
    if not spec.domain.contains(z):
        raise DomainError(f"initial point {z} is outside the domain")
    return SdeState(z, np.zeros(len(spec.domain.face_names)), 0.0)


def reflect(spec: DiffusionEnvSpec, z, reflection: str = "fold", interval=None) -> tuple[np.ndarray, np.ndarray]:
    """Map a proposal back into the domain; return (point, displacement per face).

    ``fold`` mirrors overshoot across the face, so the displacement is twice the
    overshoot.  ``clamp`` projects onto the face along its reflection direction.
    """
    from ._kernels import _fold_1d, _reflect_poly
    fold = reflection == "fold"
    if reflection not in ("fold", "clamp"):
        raise SpecError(f"unknown reflection {reflection!r}")
    z = np.array(z, dtype=float)
    if spec.dim == 1:
        lo, hi = interval if interval is not None else (spec.domain.lo, spec.domain.hi)
        buf = np.zeros(2)
        return np.array([_fold_1d(float(z[0]), lo, hi, fold, buf)]), buf
    fn, fc = spec.domain.faces()
    fr = spec.domain.reflections()
    buf = np.zeros(len(fc))
    zz = z.copy()
    if not _reflect_poly(zz, fn, fc, fr, fold, buf):
        raise DomainError("reflection did not return to the domain")
    return zz, buf


def step_reflected(spec: DiffusionEnvSpec, s: SdeState, dt: float, scale: float = 1.0, noise=None,
                   reflection: str = "fold", rng=None, interval=None) -> SdeState:
    """One Euler step of environment time ``scale * dt`` followed by reflection.

    ``noise`` is a standard normal vector; it is drawn from ``rng`` when omitted.
    """
    d = spec.dim
    if noise is None:
        if rng is None:
            raise SpecError("step_reflected needs noise or rng")
        noise = rng.standard_normal(d)
    noise = np.atleast_1d(np.asarray(noise, dtype=float))
    u = scale * dt
    if not math.isfinite(u):
        raise SpecError("non-finite environment step")
    cov = spec.covariance(s.z)
    L = np.linalg.cholesky(cov) if d > 1 else np.sqrt(cov)
    prop = s.z + spec.drift_at(s.z) * u + math.sqrt(u) * (L @ noise)
    z, disp = reflect(spec, prop, reflection, interval)
    return SdeState(z, s.ell + disp, s.t + dt)


def sample_jump(spec: DiffusionEnvSpec, z, rng, dt: float, scale: float = 1.0, interval=None):
    """Thinned jump: with probability ``rate(z) * scale * dt`` return a uniform landing point, else None."""
    if spec.jumps is None:
        return None
    p = spec.jumps.rate(z) * scale * dt
    if p > 1:
        raise SpecError(f"jump probability {p:.3g} per step exceeds 1; reduce dt")
    if rng.random() >= p:
        return None
    if spec.dim == 1:
        lo, hi = interval if interval is not None else (spec.domain.lo, spec.domain.hi)
        return np.array([rng.uniform(lo, hi)])
    return spec.domain.sample(1, rng)[0]


# --- quadrature ------------------------------------------------------------------

def improper_quad(f, lo: float, hi: float, tol: float = QUAD_TOL) -> tuple[float, bool]:
    """Integral of f on (lo, hi), possibly singular at the ends.

    Divergence is diagnosed from the tail pieces near each end: shrinking the
    excluded end interval by 100x must shrink the added mass geometrically.
    """
    import warnings
    w = hi - lo
    deltas = [1e-2, 1e-4, 1e-6, 1e-8, 1e-10]

    def piece(a, b):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return integrate.quad(f, a, b, epsabs=tol, epsrel=tol, limit=200)[0]

    core = piece(lo + deltas[0] * w, hi - deltas[0] * w)
    total = core
    for side in ("lo", "hi"):
        incs = []
        for d0, d1 in zip(deltas, deltas[1:]):
            if side == "lo":
                incs.append(piece(lo + d1 * w, lo + d0 * w))
            else:
                incs.append(piece(hi - d0 * w, hi - d1 * w))
        incs = np.abs(incs)
        conv = all(b <= 0.5 * a + 1e-300 for a, b in zip(incs, incs[1:]) if a > 1e-13)
        if not conv or not np.all(np.isfinite(incs)):
            return math.inf, False
        # remaining piece below the smallest delta, bounded by geometric extrapolation
        a, b = incs[-2], incs[-1]
        rest = b * (b / a) / (1 - b / a) if a > 0 and b > 0 else 0.0
        total += float(np.sum(incs)) + rest
    return total, True


@dataclass
class StationaryDensity1D:
    """Unnormalized density ``q(z) = (2 / a(z)) exp(int_lo^z 2 b / a)`` on [lo, hi]."""

    spec: DiffusionEnvSpec
    lo: float
    hi: float
    normalizer: float
    normalizable: bool
    drift_integrable: bool
    closed_form: bool

    def q(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return (2.0 / self.spec.diffusion[0][0].grid(z)) * np.exp(_exponent(self.spec, self.lo, z))

    def pdf(self, z) -> np.ndarray:
        if not self.normalizable:
            raise DivergenceError("density is not normalizable on this domain")
        return self.q(z) / self.normalizer

    def mass(self, a: float, b: float) -> float:
        """Normalized probability of [a, b]."""
        v, ok = improper_quad(lambda x: float(self.q(x)), a, b)
        if not ok:
            raise DivergenceError("density mass diverges")
        return v / self.normalizer

    def bin_masses(self, edges) -> np.ndarray:
        return np.array([self.mass(a, b) for a, b in zip(edges[:-1], edges[1:])])


def _exponent(spec: DiffusionEnvSpec, lo: float, z) -> np.ndarray:
    """F(z) = int_lo^z 2 b / a."""
    b = spec.drift[0]
    a = spec.diffusion[0][0]
    z = np.asarray(z, dtype=float)
    if a.kind == "const":
        s = a.params[0]
        p = b.params
        if b.kind == "const":
            return 2 * p[0] * (z - lo) / s
        if b.kind == "affine":
            return 2 * (p[0] * (z - lo) + p[1] * (z**2 - lo**2) / 2) / s
        if b.kind == "pole":
            with np.errstate(divide="ignore"):
                return -2 * p[0] / s * (np.log(np.abs(p[1] - z)) - math.log(abs(p[1] - lo)))
    f = lambda x: 2 * b(x) / a(x)
    out = np.array([integrate.quad(f, lo, float(x), epsabs=1e-12, epsrel=1e-12, limit=200)[0]
                    for x in np.atleast_1d(z)])
    return out.reshape(z.shape)


def stationary_density_1d(spec: DiffusionEnvSpec, lo: float | None = None,
                          hi: float | None = None) -> StationaryDensity1D:
    """Speed-measure density of the reflected 1-D diffusion on [lo, hi] (default: the domain).

    ``normalizable`` tells whether the density integrates.
    ``drift_integrable`` tells whether int |b| / a < infinity.
    """
    if spec.dim != 1:
        raise SpecError("closed-form stationary densities are 1-D only")
    lo = spec.domain.lo if lo is None else lo
    hi = spec.domain.hi if hi is None else hi
    a, b = spec.diffusion[0][0], spec.drift[0]
    closed = a.kind == "const" and b.kind in ("const", "affine", "pole")
    drift_int, drift_ok = improper_quad(lambda x: abs(b(x)) / a(x), lo, hi)
    dens = StationaryDensity1D(spec, lo, hi, math.nan, False, drift_ok, closed)
    norm, ok = improper_quad(lambda x: float(dens.q(x)), lo, hi)
    dens.normalizer = norm
    dens.normalizable = ok and math.isfinite(norm)
    return dens


def xi_diffusive(spec: DiffusionEnvSpec, dens: StationaryDensity1D | None = None, method: str = "direct") -> float:
    """Normalizer ``int nu(dz) / (1 - rho(z))`` with nu the normalized environment law.

    ``series`` sums ``int rho**n nu`` layer by layer and adds the exact remainder
    ``int rho**N nu / (1 - rho)`` once ``rho_bar**N / (1 - rho_bar) < 1e-10``.
    """
    dens = dens or stationary_density_1d(spec)
    if not dens.normalizable:
        return math.inf
    rf = spec.rates
    rho = lambda x: rf.lam(x) / rf.mu(x)
    nu = lambda x: float(dens.q(x)) / dens.normalizer
    if method == "direct":
        v, ok = improper_quad(lambda x: nu(x) / (1 - rho(x)), dens.lo, dens.hi)
        return v if ok else math.inf
    rb = max(rho(x) for x in np.linspace(dens.lo, dens.hi, 2001))
    if rb >= 1:
        raise DivergenceError("series form needs sup rho < 1")
    N = max(1, math.ceil(math.log(1e-10 * (1 - rb)) / math.log(rb))) if rb > 0 else 1
    total = sum(improper_quad(lambda x, n=n: rho(x) ** n * nu(x), dens.lo, dens.hi)[0] for n in range(N))
    rest = improper_quad(lambda x: rho(x) ** N * nu(x) / (1 - rho(x)), dens.lo, dens.hi)[0]
    return total + rest


def threshold_check(spec: DiffusionEnvSpec, n_max_check: int = 200) -> dict:
    """Finiteness of ``sum_n int_{D_n} rho**n q`` with q the unnormalized density on D.

    Layers from n0 on share one interval, so their sum is ``int rho**n0 q / (1 - rho)``.
    """
    dens = stationary_density_1d(spec)
    rf = spec.rates
    rho = lambda x: rf.lam(x) / rf.mu(x)
    levels = spec.threshold.levels if spec.threshold is not None else ((spec.domain.lo, spec.domain.hi),)
    parts = []
    finite = True
    for n, (lo, hi) in enumerate(levels[:-1]):
        v, ok = improper_quad(lambda x, n=n: rho(x) ** n * float(dens.q(x)), lo, hi)
        parts.append(v)
        finite &= ok
    n0 = len(levels) - 1
    lo, hi = levels[-1]
    v, ok = improper_quad(lambda x: rho(x) ** n0 * float(dens.q(x)) / (1 - rho(x)), lo, hi)
    parts.append(v)
    finite &= ok
    return {"finite": bool(finite), "value": float(sum(parts)) if finite else math.inf, "parts": parts, "n0": n0}


# --- coupling of the environment ---------------------------------------------------

def _packed(spec):
    from .joint import pack_spec
    return pack_spec(spec)


def couple_1d(spec: DiffusionEnvSpec, z1: float, z2: float, dt: float, seed: int, n_runs: int = 1,
              horizon: float = 1e4, scale: float | None = None, tol: float = 1e-12, replica: int = 0):
    """Synchronous (shared-noise) coupling of two reflected 1-D diffusions with clamping.

    Returns ``(taus, flips)``: coupling times and how many runs lost the initial
    order before meeting (zero for a monotone scheme).
    """
    from ._kernels import couple_env_kernel
    from .seeds import replica_seed
    if spec.dim != 1:
        raise SpecError("couple_1d needs a 1-D environment")
    for z in (z1, z2):
        if not spec.domain.contains(z):
            raise DomainError(f"{z} is outside the domain")
    pk = _packed(spec)
    sc = spec.beta(0) if scale is None else scale
    taus, flips = couple_env_kernel(pk.fk, pk.fp, spec.domain.lo, spec.domain.hi, float(z1), float(z2),
                                    float(dt), float(sc), int(n_runs), float(horizon),
                                    replica_seed(seed, replica), float(tol))
    return taus, int(flips)


def fit_coupling_constants(samples, level: float = 0.05) -> CouplingFit:
    """``(alpha, gamma)`` with ``P(zeta > t) <= alpha exp(-gamma t)`` on the sample range."""
    return fit_exponential_tail(samples, level=level)
