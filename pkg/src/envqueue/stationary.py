"""Closed-form invariant laws of the joint process and empirical comparison."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate

from .discrete import invariant_measure_discrete, xi_discrete
from .env import DiffusionEnvSpec, DiscreteEnvSpec
from .errors import DivergenceError, SpecError
from .sde import improper_quad, stationary_density_1d

XI_TOL = 1e-8
SERIES_TOL = 1e-10


def tv_distance(p, q) -> float:
    """Half L1 distance between two mass vectors on the same partition."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if p.shape != q.shape:
        raise SpecError(f"partitions differ: {p.shape} vs {q.shape}")
    return 0.5 * float(np.abs(p - q).sum())


def _series_terms(rho_bar: float) -> int:
    if rho_bar <= 0:
        return 1
    return max(1, math.ceil(math.log(SERIES_TOL * (1 - rho_bar)) / math.log(rho_bar)))


@dataclass
class StationaryLaw:
    """Invariant law pi(n, dz) = rho(z)**n nu(dz) / Xi.

    ``layer_mass(n, a, b)`` is the mass of {n} x [a, b] (of z[0] in 2-D).  For
    threshold specs the law is the one conditioned on Z in D_N: layer n lives
    on its active interval only, and Xi sums over those intervals.
    """

    xi: float
    kind: str
    layer_mass: Callable[[int, float, float], float]
    intervals: Callable[[int], tuple[float, float]]
    rho: Callable
    env_density: Callable | None = None
    face_points: tuple = ()
    face_weights: tuple = ()
    discrete: object = None
    meta: dict = field(default_factory=dict)

    def queue_marginal(self, n: int) -> float:
        lo, hi = self.intervals(n)
        return self.layer_mass(n, lo, hi)

    def layer_density(self, n: int, z) -> float:
        """Density of pi({n}, dz) at a 1-D point z (zero outside the active interval)."""
        if self.env_density is None:
            raise SpecError("pointwise density is available for 1-D diffusive laws only")
        lo, hi = self.intervals(n)
        if not lo <= z <= hi:
            return 0.0
        return float(self.rho(z)) ** n * float(self.env_density(z)) / self.xi

    def table(self, n_cap: int, z_bins: int) -> tuple[np.ndarray, float]:
        """Masses on {0..n_cap} x (z_bins equal bins of each active interval), and the tail n > n_cap."""
        if self.kind == "discrete":
            raise SpecError("discrete laws have no z bins; use .discrete")
        out = np.empty((n_cap + 1, z_bins))
        for n in range(n_cap + 1):
            lo, hi = self.intervals(n)
            edges = np.linspace(lo, hi, z_bins + 1)
            out[n] = [self.layer_mass(n, a, b) for a, b in zip(edges[:-1], edges[1:])]
        return out, max(0.0, 1.0 - float(out.sum()))

    def queue_marginals(self, n_cap: int) -> np.ndarray:
        q = np.array([self.queue_marginal(n) for n in range(n_cap + 1)])
        return np.append(q, max(0.0, 1.0 - q.sum()))

    def boundary(self, n: int) -> np.ndarray | None:
        """Intrinsic local-time rate per face in layer n: rho(z_F)**n a(z_F) nu(z_F) / (2 Xi)."""
        if not self.face_points:
            return None
        return np.array([float(self.rho(z)) ** n * w for z, w in zip(self.face_points, self.face_weights)]) / self.xi


def _density(spec: DiffusionEnvSpec):
    dens = stationary_density_1d(spec)
    if not dens.normalizable:
        raise DivergenceError(f"environment density of {spec.name or 'spec'} is not normalizable on the domain")
    return dens


def _rho_fn(spec):
    rf = spec.rates
    return lambda z: rf.lam(z) / rf.mu(z)


def _check_rho(spec: DiffusionEnvSpec, lo: float, hi: float) -> float:
    rho = _rho_fn(spec)
    rb = max(rho(x) for x in np.linspace(lo, hi, 2001))
    return rb


def xi_constant(spec) -> float:
    """Normalizer Xi, cross-checked between the 1/(1-rho) form and the layer series."""
    if isinstance(spec, DiscreteEnvSpec):
        direct = xi_discrete(spec)
        if not math.isfinite(direct):
            raise DivergenceError("rho >= 1 at some environment state")
        rho, v = spec.rho(), spec.v
        N = _series_terms(float(rho.max()))
        series = float(sum(np.sum(rho**n * v) for n in range(N)) + np.sum(rho**N * v / (1 - rho)))
        _agree(direct, series)
        return direct
    if spec.dim == 2:
        return _xi_cone(spec)
    dens = _density(spec)
    rho = _rho_fn(spec)
    nu = lambda x: float(dens.q(x)) / dens.normalizer
    levels = spec.threshold.levels if spec.threshold is not None else ((spec.domain.lo, spec.domain.hi),)
    n0 = len(levels) - 1
    head = [improper_quad(lambda x, n=n: rho(x) ** n * nu(x), *levels[n]) for n in range(n0)]
    lo, hi = levels[-1]
    last, ok = improper_quad(lambda x: rho(x) ** n0 * nu(x) / (1 - rho(x)), lo, hi)
    if not ok or not all(h[1] for h in head):
        raise DivergenceError("int nu / (1 - rho) diverges: rho approaches 1 too slowly")
    direct = sum(h[0] for h in head) + last
    rb = _check_rho(spec, lo, hi)
    if rb < 1:
        N = _series_terms(rb)
        s = sum(improper_quad(lambda x, n=n: rho(x) ** n * nu(x), lo, hi)[0] for n in range(n0, n0 + N))
        s += improper_quad(lambda x: rho(x) ** (n0 + N) * nu(x) / (1 - rho(x)), lo, hi)[0]
        _agree(direct, sum(h[0] for h in head) + s)
    return direct


def _agree(a: float, b: float):
    if abs(a - b) > XI_TOL * max(1.0, abs(a)):
        raise DivergenceError(f"the two forms of Xi disagree: {a!r} vs {b!r}")


def _check_uniform_cone(spec: DiffusionEnvSpec):
    flat = [f for row in spec.diffusion for f in row] + list(spec.drift)
    if any(f.kind != "const" for f in flat):
        raise SpecError("cone laws need constant drift and covariance")
    if any(f.params[0] != 0 for f in spec.drift):
        raise SpecError("cone laws are available for zero drift only")
    s = np.array([[f.params[0] for f in row] for row in spec.diffusion])
    if abs(s[0, 1]) > 0 or abs(s[0, 0] - s[1, 1]) > 0:
        raise SpecError("cone laws need an isotropic covariance")
    if spec.domain.reflection is not None or spec.jumps is not None or spec.threshold is not None:
        raise SpecError("cone laws need normal reflection, no jumps and no thresholds")


def _cone_parts(spec):
    d = spec.domain
    top = 1.0 - d.delta
    area = top * (d.hi**2 - d.lo**2) / 2
    rho = lambda z1, z2: spec.rates.lam((z1, z2)) / spec.rates.mu((z1, z2))
    return d, top, area, rho


def _xi_cone(spec) -> float:
    _check_uniform_cone(spec)
    d, top, area, rho = _cone_parts(spec)
    f = lambda z2, z1: 1.0 / (1.0 - rho(z1, z2))
    v, _ = integrate.dblquad(f, d.lo, d.hi, lambda z1: 0.0, lambda z1: top * z1, epsabs=1e-12, epsrel=1e-10)
    return v / area


def joint_invariant(spec) -> StationaryLaw:
    xi = xi_constant(spec)
    if isinstance(spec, DiscreteEnvSpec):
        rho, v = spec.rho(), spec.v
        return StationaryLaw(
            xi, "discrete",
            layer_mass=lambda n, a, b: float(np.sum((rho**n * v)[(spec.states >= a) & (spec.states <= b)]) / xi),
            intervals=lambda n: (-math.inf, math.inf),
            rho=lambda k: rho[k],
            discrete=lambda n_max: invariant_measure_discrete(spec, n_max),
        )
    if spec.dim == 2:
        d, top, area, rho = _cone_parts(spec)

        def cone_mass(n, a, b):
            f = lambda z2, z1: rho(z1, z2) ** n
            v, _ = integrate.dblquad(f, a, b, lambda z1: 0.0, lambda z1: top * z1, epsabs=1e-13, epsrel=1e-10)
            return v / area / xi

        return StationaryLaw(xi, "cone", cone_mass, lambda n: (d.lo, d.hi), rho, meta={"area": area})
    dens = _density(spec)
    rho = _rho_fn(spec)
    nu = lambda x: float(dens.q(x)) / dens.normalizer

    def mass(n, a, b):
        lo, hi = spec.active_interval(n)
        a, b = max(a, lo), min(b, hi)
        if b <= a:
            return 0.0
        f = lambda x: rho(x) ** n * nu(x)
        if a > lo and b < hi:
            # interior bins carry no endpoint singularity
            return integrate.quad(f, a, b, epsabs=1e-13, epsrel=1e-10, limit=200)[0] / xi
        v, ok = improper_quad(f, a, b)
        if not ok:
            raise DivergenceError(f"layer {n} mass diverges on [{a}, {b}]")
        return v / xi

    faces, weights = (), ()
    if spec.threshold is None:
        a = spec.diffusion[0][0]
        pts = (spec.domain.lo, spec.domain.hi)
        w = []
        for z in pts:
            with np.errstate(divide="ignore", over="ignore"):
                val = float(a(z)) * float(nu(z)) / 2
            w.append(val)
        if all(math.isfinite(x) for x in w):
            faces, weights = pts, tuple(w)
    return StationaryLaw(xi, "diffusive", mass, spec.active_interval, rho, env_density=nu,
                         face_points=faces, face_weights=weights,
                         meta={"closed_form_density": dens.closed_form})


@dataclass
class ComparisonReport:
    global_tv: float
    queue_tv: float
    layer_tv: list[float]
    fitted_rho: list[float]
    model_rho: list[float]
    n_cap: int
    z_bins: int

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in
                ("global_tv", "queue_tv", "layer_tv", "fitted_rho", "model_rho", "n_cap", "z_bins")}


def _conditional(row: np.ndarray) -> np.ndarray:
    s = row.sum()
    return row / s if s > 0 else np.zeros_like(row)


def compare_empirical(law: StationaryLaw, layer_bins, tail: float, min_mass: float = 1e-3) -> ComparisonReport:
    """Compare an occupation table (n_cap + 1, z_bins) plus tail mass with the law.

    ``layer_tv[n]`` is the TV between the conditional z-laws in layer n (NaN
    when the layer has no empirical mass).  ``fitted_rho[b]`` is exp of the
    least-squares slope of log occupation in n for bin b, over layers whose
    bin mass exceeds ``min_mass``, next to the model rho at the bin midpoint.
    """
    emp = np.asarray(layer_bins, dtype=float)
    n_cap, z_bins = emp.shape[0] - 1, emp.shape[1]
    ref, ref_tail = law.table(n_cap, z_bins)
    g = 0.5 * (np.abs(emp - ref).sum() + abs(tail - ref_tail))
    q = tv_distance(np.append(emp.sum(axis=1), tail), np.append(ref.sum(axis=1), ref_tail))
    layer_tv = [tv_distance(_conditional(emp[n]), _conditional(ref[n])) if emp[n].sum() > 0 else math.nan
                for n in range(n_cap + 1)]
    fitted, model = [], []
    lo, hi = law.intervals(0)
    mids = lo + (np.arange(z_bins) + 0.5) * (hi - lo) / z_bins
    for b in range(z_bins):
        ns = [n for n in range(n_cap + 1) if emp[n, b] > min_mass and law.intervals(n) == (lo, hi)]
        if len(ns) >= 2:
            slope = np.polyfit(ns, np.log(emp[ns, b]), 1)[0]
            fitted.append(float(math.exp(slope)))
        else:
            fitted.append(math.nan)
        model.append(float(law.rho(mids[b])) if law.kind != "cone" else math.nan)
    return ComparisonReport(float(g), q, layer_tv, fitted, model, n_cap, z_bins)


def law_rows(law: StationaryLaw, n_cap: int, z_bins: int) -> list[tuple[int, float, float, float]]:
    """CSV rows (n, z_low, z_high, mass)."""
    tab, _ = law.table(n_cap, z_bins)
    rows = []
    for n in range(n_cap + 1):
        lo, hi = law.intervals(n)
        edges = np.linspace(lo, hi, z_bins + 1)
        rows.extend((n, float(edges[b]), float(edges[b + 1]), float(tab[n, b])) for b in range(z_bins))
    return rows
