"""Environment specifications, rate fields and structural validation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import BoundViolation, DomainError, SpecError
from .fields import Field, const

RATE_TOL = 1e-12


@dataclass(frozen=True)
class Domain:
    """Polyhedral environment domain.

    ``interval``  [lo, hi]
    ``ray``       [lo, inf) simulated on [lo, hi]; ``hi`` is an artificial cap
    ``cone``      {0 <= z2 <= (1 - delta) z1, lo <= z1 <= hi}; the base face exists only when lo > 0
    """

    kind: str = "interval"
    lo: float = 0.0
    hi: float = 1.0
    delta: float = 0.0
    reflection: tuple[tuple[float, ...], ...] | None = None

    def __post_init__(self):
        if self.kind not in ("interval", "ray", "cone"):
            raise SpecError(f"unknown domain kind {self.kind!r}")
        if self.kind in ("interval", "ray") and not self.hi > self.lo:
            raise SpecError("domain needs lo < hi")
        if self.kind == "cone" and not (0 <= self.delta < 1 and self.hi > self.lo >= 0):
            raise SpecError("cone needs 0 <= delta < 1 and 0 <= lo < hi")
        if self.reflection is not None and len(self.reflection) != len(self.face_names):
            raise SpecError("one reflection vector per face is required")

    @property
    def dim(self) -> int:
        return 2 if self.kind == "cone" else 1

    @property
    def face_names(self) -> tuple[str, ...]:
        if self.kind == "cone":
            return ("floor", "slope", "cap") + (("base",) if self.lo > 0 else ())
        return ("lower", "cap" if self.kind == "ray" else "upper")

    def faces(self) -> tuple[np.ndarray, np.ndarray]:
        """Inward unit normals ``n_i`` and offsets ``c_i`` with D = {n_i . z >= c_i}."""
        if self.kind == "cone":
            s = 1.0 - self.delta
            nrm = math.hypot(s, 1.0)
            normals = [[0.0, 1.0], [s / nrm, -1.0 / nrm], [-1.0, 0.0]]
            offsets = [0.0, 0.0, -self.hi]
            if self.lo > 0:
                normals.append([1.0, 0.0])
                offsets.append(self.lo)
            normals, offsets = np.array(normals), np.array(offsets)
        else:
            normals = np.array([[1.0], [-1.0]])
            offsets = np.array([self.lo, -self.hi])
        return normals, offsets

    def reflections(self) -> np.ndarray:
        normals, _ = self.faces()
        if self.reflection is None:
            return normals
        r = np.array(self.reflection, dtype=float)
        return r / np.linalg.norm(r, axis=1, keepdims=True)

    def contains(self, z, tol: float = 1e-12) -> bool:
        z = np.atleast_1d(np.asarray(z, dtype=float))
        if z.shape != (self.dim,):
            return False
        normals, offsets = self.faces()
        return bool(np.all(normals @ z - offsets >= -tol))

    def bbox(self) -> tuple[np.ndarray, np.ndarray]:
        if self.kind == "cone":
            return np.array([self.lo, 0.0]), np.array([self.hi, (1 - self.delta) * self.hi])
        return np.array([self.lo]), np.array([self.hi])

    def sample(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform points of D, shape (k, dim)."""
        lo, hi = self.bbox()
        if self.kind != "cone":
            return rng.uniform(lo, hi, size=(k, 1))
        out = np.empty((0, 2))
        while len(out) < k:
            pts = rng.uniform(lo, hi, size=(2 * k, 2))
            keep = pts[:, 1] <= (1 - self.delta) * pts[:, 0]
            out = np.vstack([out, pts[keep]])
        return out[:k]

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "lo": self.lo, "hi": self.hi}
        if self.kind == "cone":
            d["delta"] = self.delta
        if self.reflection is not None:
            d["reflection"] = [list(r) for r in self.reflection]
        return d


@dataclass(frozen=True)
class RateField:
    """Arrival and service rates with their uniform envelope."""

    lam: Field
    mu: Field
    lambda_bar: float
    mu_bar: float

    def __post_init__(self):
        if not (self.lambda_bar > 0 and self.mu_bar > 0):
            raise SpecError("lambda_bar and mu_bar must be positive")

    @property
    def rho_bar(self) -> float:
        return self.lambda_bar / self.mu_bar

    def to_dict(self) -> dict:
        return {"lambda": self.lam.to_dict(), "mu": self.mu.to_dict(),
                "lambda_bar": self.lambda_bar, "mu_bar": self.mu_bar}


def eval_rates(rf: RateField, z, domain: Domain | None = None) -> tuple[float, float, float]:
    """Return ``(lambda(z), mu(z), rho(z))`` after checking the envelope."""
    if domain is not None and not domain.contains(z):
        raise DomainError(f"z={z!r} is outside the {domain.kind} domain")
    lam, mu = rf.lam(z), rf.mu(z)
    if not (lam >= 0 and mu > 0):
        raise BoundViolation(f"rates must satisfy lambda >= 0 < mu, got {lam}, {mu} at z={z!r}")
    if lam > rf.lambda_bar * (1 + RATE_TOL):
        raise BoundViolation(f"lambda(z)={lam} exceeds lambda_bar={rf.lambda_bar} at z={z!r}")
    if mu < rf.mu_bar * (1 - RATE_TOL):
        raise BoundViolation(f"mu(z)={mu} is below mu_bar={rf.mu_bar} at z={z!r}")
    return lam, mu, lam / mu


@dataclass(frozen=True)
class Beta:
    """Positive per-layer speed factors: ``values[n]``, then geometric with ``ratio``."""

    values: tuple[float, ...] = (1.0,)
    ratio: float = 1.0

    def __post_init__(self):
        if not self.values or min(self.values) <= 0 or self.ratio <= 0:
            raise SpecError("beta values and ratio must be positive")

    def __call__(self, n: int) -> float:
        return math.exp(self.log(n))

    def log(self, n: int) -> float:
        k = len(self.values)
        if n < k:
            return math.log(self.values[n])
        return math.log(self.values[-1]) + (n - k + 1) * math.log(self.ratio)

    def to_dict(self) -> dict:
        return {"values": list(self.values), "ratio": self.ratio}


@dataclass(frozen=True)
class JumpSpec:
    """Jumps at rate ``rate(z)`` landing uniformly on the active domain."""

    rate: Field
    kind: str = "uniform"

    def __post_init__(self):
        if self.kind != "uniform":
            raise SpecError(f"unknown jump kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"rate": self.rate.to_dict(), "kind": self.kind}


@dataclass(frozen=True)
class Threshold:
    """Layer-dependent active intervals D_n; the last entry repeats for all larger n."""

    levels: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.levels:
            raise SpecError("threshold needs at least one level")
        for lo, hi in self.levels:
            if not hi > lo:
                raise SpecError("each threshold interval needs lo < hi")

    def interval(self, n: int) -> tuple[float, float]:
        return self.levels[min(n, len(self.levels) - 1)]

    @property
    def n0(self) -> int:
        return len(self.levels) - 1

    def to_dict(self) -> dict:
        return {"levels": [list(x) for x in self.levels]}


@dataclass(frozen=True)
class DiffusionEnvSpec:
    """Reflected diffusion environment with optional jumps and threshold layers."""

    domain: Domain
    drift: tuple[Field, ...]
    diffusion: tuple[tuple[Field, ...], ...]
    rates: RateField
    beta: Beta = Beta()
    jumps: JumpSpec | None = None
    threshold: Threshold | None = None
    ellipticity: float = 1e-6
    name: str = "custom"

    def __post_init__(self):
        d = self.domain.dim
        if len(self.drift) != d or len(self.diffusion) != d or any(len(r) != d for r in self.diffusion):
            raise SpecError(f"drift and diffusion shapes must match dimension {d}")
        if self.threshold is not None:
            if d != 1:
                raise SpecError("threshold layers are supported for 1-D environments only")
            for lo, hi in self.threshold.levels:
                if lo < self.domain.lo - 1e-12 or hi > self.domain.hi + 1e-12:
                    raise SpecError("threshold intervals must lie inside the domain")

    @property
    def dim(self) -> int:
        return self.domain.dim

    def active_interval(self, n: int) -> tuple[float, float]:
        if self.threshold is None:
            return self.domain.lo, self.domain.hi
        return self.threshold.interval(n)

    def covariance(self, z) -> np.ndarray:
        return np.array([[f(z) for f in row] for row in self.diffusion])

    def drift_at(self, z) -> np.ndarray:
        return np.array([f(z) for f in self.drift])

    def to_dict(self) -> dict:
        return {
            "type": "diffusion",
            "domain": self.domain.to_dict(),
            "drift": [f.to_dict() for f in self.drift],
            "diffusion": [[f.to_dict() for f in row] for row in self.diffusion],
            "rates": self.rates.to_dict(),
            "beta": self.beta.to_dict(),
            "jumps": None if self.jumps is None else self.jumps.to_dict(),
            "threshold": None if self.threshold is None else self.threshold.to_dict(),
            "ellipticity": self.ellipticity,
        }


@dataclass(frozen=True, eq=False)
class DiscreteEnvSpec:
    """Finite environment with layer-dependent jump kernels ``tau(n)``.

    ``tau(n)`` returns the off-diagonal rate matrix of the environment on layer n
    before the ``rho**(-n)`` speed-up; ``v`` is the reference measure that every
    ``tau(n)`` must keep in balance.
    """

    states: np.ndarray
    tau: Callable[[int], np.ndarray]
    v: np.ndarray
    rates: RateField
    name: str = "custom"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        v = np.asarray(self.v, dtype=float)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "v", v)
        if states.ndim != 1 or len(states) == 0:
            raise SpecError("states must be a non-empty 1-D array of labels")
        if v.shape != states.shape or np.any(v <= 0):
            raise SpecError("v must be positive with one weight per state")

    @property
    def m(self) -> int:
        return len(self.states)

    def tau_matrix(self, n: int) -> np.ndarray:
        t = np.array(self.tau(n), dtype=float)
        if t.shape != (self.m, self.m):
            raise SpecError(f"tau({n}) has shape {t.shape}, expected {(self.m, self.m)}")
        if np.any(t < 0):
            raise SpecError(f"tau({n}) has negative rates")
        np.fill_diagonal(t, 0.0)
        return t

    def rate_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        lam = self.rates.lam.grid(self.states)
        mu = self.rates.mu.grid(self.states)
        for i, z in enumerate(self.states):
            eval_rates(self.rates, z)
        return lam, mu

    def rho(self) -> np.ndarray:
        lam, mu = self.rate_arrays()
        return lam / mu


def balance_residual(spec: DiscreteEnvSpec, n: int) -> float:
    """Largest |v(z) tau_n(z, D) - sum_z' v(z') tau_n(z', z)| over states."""
    t = spec.tau_matrix(n)
    out_flow = spec.v * t.sum(axis=1)
    in_flow = spec.v @ t
    return float(np.max(np.abs(out_flow - in_flow)))


@dataclass
class Check:
    name: str
    ok: bool
    value: float | None = None
    detail: str = ""
    severity: str = "error"


@dataclass
class ValidationReport:
    checks: list[Check] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks if c.severity == "error")

    def add(self, name, ok, value=None, detail="", severity="error"):
        self.checks.append(Check(name, bool(ok), None if value is None else float(value), detail, severity))

    def get(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failures(self) -> list[Check]:
        return [c for c in self.checks if not c.ok and c.severity == "error"]

    def to_dict(self) -> dict:
        return {"ok": self.ok, "checks": [c.__dict__ for c in self.checks]}


def validate_spec(spec, n_check: int = 40, grid: int = 2001, balance_tol: float = 1e-10) -> ValidationReport:
    """Structural checks of a discrete or diffusion spec.

    Errors: balance of every ``tau(n)`` against ``v``, the rate envelope,
    ``rho < 1``, finite normalizer, ellipticity, reflection directions and
    threshold geometry.  ``lambda_bar < mu_bar`` and representability of the
    layer speed-up at ``n_check`` are reported as warnings because some models
    only satisfy them on part of the analysis.
    """
    rep = ValidationReport()
    rf = spec.rates
    rep.add("traffic_envelope", rf.lambda_bar < rf.mu_bar, rf.rho_bar,
            "lambda_bar < mu_bar (needed for rate certificates)", severity="warning")
    if isinstance(spec, DiscreteEnvSpec):
        _validate_discrete(spec, rep, n_check, balance_tol)
    elif isinstance(spec, DiffusionEnvSpec):
        _validate_diffusion(spec, rep, n_check, grid)
    else:
        raise SpecError(f"cannot validate {type(spec).__name__}")
    return rep


def _validate_discrete(spec, rep, n_check, balance_tol):
    try:
        lam, mu = spec.rate_arrays()
        rep.add("rate_envelope", True)
    except BoundViolation as e:
        rep.add("rate_envelope", False, detail=str(e))
        return
    rho = lam / mu
    rep.add("rho_below_one", np.all(rho < 1), rho.max())
    worst, worst_n = 0.0, 0
    for n in range(n_check + 1):
        r = balance_residual(spec, n)
        if r > worst:
            worst, worst_n = r, n
    rep.add("balance", worst <= balance_tol, worst, f"worst layer n={worst_n}")
    if np.all(rho < 1):
        rep.add("normalizer_finite", True, float(np.sum(spec.v / (1 - rho))))
    with np.errstate(divide="ignore", over="ignore"):
        speed = np.where(rho > 0, rho ** (-float(n_check)), np.inf)
    rep.add("scale_representable", np.all(np.isfinite(speed)), np.max(speed),
            f"rho^-n at n={n_check}", severity="warning")


def _validate_diffusion(spec, rep, n_check, grid):
    dom = spec.domain
    rng = np.random.default_rng(0)
    if dom.dim == 1:
        pts = np.linspace(dom.lo, dom.hi, grid)[:, None]
    else:
        pts = dom.sample(grid, rng)
    rf = spec.rates
    lam = rf.lam.grid(pts)
    mu = rf.mu.grid(pts)
    ok_env = (np.all(lam >= 0) and np.all(mu > 0)
              and np.all(lam <= rf.lambda_bar * (1 + RATE_TOL))
              and np.all(mu >= rf.mu_bar * (1 - RATE_TOL)))
    rep.add("rate_envelope", ok_env, float(np.max(lam) - rf.lambda_bar))
    rho = lam / mu
    rep.add("rho_below_one", np.all(rho < 1), rho.max())
    rep.add("rho_bar_below_one", np.max(rho) < 1, np.max(rho), "sup of rho over D", severity="warning")
    d = dom.dim
    cov = np.moveaxis(np.array([[f.grid(pts) for f in row] for row in spec.diffusion]), 2, 0)
    eig = np.linalg.eigvalsh(0.5 * (cov + np.transpose(cov, (0, 2, 1))))
    rep.add("ellipticity", eig.min() >= spec.ellipticity, eig.min(), f"declared delta={spec.ellipticity}")
    drift = np.stack([f.grid(pts) for f in spec.drift], axis=1)
    rep.add("drift_finite", np.all(np.isfinite(drift)), None)
    normals, _ = dom.faces()
    refl = dom.reflections()
    dots = np.sum(normals * refl, axis=1)
    rep.add("reflection_inward", np.all(dots > 0), dots.min(), "r_i . n_i > 0 on every face")
    if spec.jumps is not None:
        jr = spec.jumps.rate.grid(pts)
        rep.add("jump_rate_bounded", np.all(jr >= 0) and np.all(np.isfinite(jr)), jr.max())
    if spec.threshold is not None:
        levels = spec.threshold.levels
        overlaps = [min(a[1], b[1]) - max(a[0], b[0]) for a, b in zip(levels, levels[1:])]
        rep.add("threshold_overlap", all(o > 0 for o in overlaps),
                min(overlaps) if overlaps else None, "consecutive D_n share an open set")
        lo = min(a for a, _ in levels)
        hi = max(b for _, b in levels)
        covered = _union_covers(levels, dom.lo, dom.hi)
        rep.add("threshold_cover", covered and lo <= dom.lo + 1e-12 and hi >= dom.hi - 1e-12, None,
                "the union of D_n is D")
    if d == 1 and spec.drift[0].kind != "table":
        from .sde import stationary_density_1d, xi_diffusive
        try:
            dens = stationary_density_1d(spec)
            rep.add("density_normalizable", dens.normalizable, dens.normalizer)
            if dens.normalizable:
                xi = xi_diffusive(spec, dens)
                rep.add("normalizer_finite", math.isfinite(xi), xi)
        except Exception as e:  # quadrature failures are reported, not raised
            rep.add("density_normalizable", False, detail=str(e))
    zmin = np.min(rho[rho > 0]) if np.any(rho > 0) else 0.0
    with np.errstate(divide="ignore", over="ignore"):
        big = spec.beta(n_check) * (zmin ** (-float(n_check)) if zmin > 0 else np.inf)
    rep.add("scale_representable", np.isfinite(big), big, f"beta_n rho^-n at n={n_check}", severity="warning")


def _union_covers(levels, lo, hi) -> bool:
    segs = sorted(levels)
    reach = lo
    for a, b in segs:
        if a > reach + 1e-12:
            return False
        reach = max(reach, b)
    return reach >= hi - 1e-12


def default_diffusion(dim: int, sigma2: float = 1.0) -> tuple[tuple[Field, ...], ...]:
    return tuple(tuple(const(sigma2 if i == j else 0.0) for j in range(dim)) for i in range(dim))


def diffusion_spec_from_dict(d: dict, name: str = "custom") -> DiffusionEnvSpec:
    """Inverse of ``DiffusionEnvSpec.to_dict``; missing optional parts take their defaults."""
    try:
        dom = d["domain"]
        domain = Domain(dom["kind"], float(dom.get("lo", 0.0)), float(dom["hi"]), float(dom.get("delta", 0.0)),
                        tuple(tuple(map(float, r)) for r in dom["reflection"]) if dom.get("reflection") else None)
        drift = tuple(Field.from_dict(f) for f in d["drift"])
        diffusion = tuple(tuple(Field.from_dict(f) for f in row) for row in d["diffusion"])
        r = d["rates"]
        rates = RateField(Field.from_dict(r["lambda"]), Field.from_dict(r["mu"]),
                          float(r["lambda_bar"]), float(r["mu_bar"]))
        b = d.get("beta") or {}
        beta = Beta(tuple(map(float, b.get("values", (1.0,)))), float(b.get("ratio", 1.0)))
        j = d.get("jumps")
        jumps = JumpSpec(Field.from_dict(j["rate"]), j.get("kind", "uniform")) if j else None
        t = d.get("threshold")
        threshold = Threshold(tuple(tuple(map(float, x)) for x in t["levels"])) if t else None
    except (KeyError, TypeError) as e:
        raise SpecError(f"malformed diffusion spec: {e}") from e
    return DiffusionEnvSpec(domain, drift, diffusion, rates, beta, jumps, threshold,
                            float(d.get("ellipticity", 1e-6)), name)
