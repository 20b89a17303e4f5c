"""Named model catalog used by configs and ``envqueue list-builtins``."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from . import discrete
from .env import Beta, DiffusionEnvSpec, Domain, JumpSpec, RateField, Threshold, default_diffusion
from .errors import SpecError
from .fields import const, linear, pole


@dataclass(frozen=True)
class Builtin:
    name: str
    family: str  # "discrete" or "diffusion"
    embodies: str
    defaults: dict
    build: Callable


def _case_a(z_max=0.9, sigma2=1.0, beta=1.0):
    return DiffusionEnvSpec(Domain("interval", 0.0, z_max), (const(0.0),), default_diffusion(1, sigma2),
                            RateField(linear(1.0), const(1.0), z_max, 1.0), Beta((beta,)), name="case-a-rbm-arrival")


def _case_b(mu0=1.5, z_max=6.0, sigma2=1.0, beta=1.0):
    return DiffusionEnvSpec(Domain("ray", mu0, z_max), (const(0.0),), default_diffusion(1, sigma2),
                            RateField(const(1.0), linear(1.0), 1.0, mu0), Beta((beta,)), name="case-b-rbm-service")


def _case_c(delta=0.2, z_min=0.5, z_max=2.0, beta=1.0):
    dom = Domain("cone", z_min, z_max, delta)
    return DiffusionEnvSpec(dom, (const(0.0), const(0.0)), default_diffusion(2),
                            RateField(linear(1.0, coord=1), linear(1.0, coord=0), (1 - delta) * z_max, z_min),
                            Beta((beta,)), name="case-c-cone")


def _theta_drift(theta=0.25, z_max=0.95, beta=1.0):
    return DiffusionEnvSpec(Domain("interval", 0.0, z_max), (pole(theta, 1.0),), default_diffusion(1),
                            RateField(linear(1.0), const(1.0), z_max, 1.0), Beta((beta,)), name="ex3.1-theta-drift")


def _theta_threshold(theta=0.25, z_max=0.9, alpha_star=0.75, n0=3, beta=1.0):
    if not 0 < alpha_star < z_max:
        raise SpecError("need 0 < alpha_star < z_max")
    levels = tuple([(0.0, z_max)] * n0 + [(0.0, alpha_star)])
    return DiffusionEnvSpec(Domain("interval", 0.0, z_max), (pole(theta, 1.0),), default_diffusion(1),
                            RateField(linear(1.0), const(1.0), z_max, 1.0), Beta((beta,)),
                            threshold=Threshold(levels), name="ex3.1-threshold")


def _service_threshold(z_lo=1.1, z_hi=3.0, alpha_n0=1.5, n0=3, beta=1.0):
    if not z_lo < alpha_n0 < z_hi:
        raise SpecError("need z_lo < alpha_n0 < z_hi")
    levels = tuple([(z_lo, z_hi)] * n0 + [(alpha_n0, z_hi)])
    return DiffusionEnvSpec(Domain("interval", z_lo, z_hi), (const(0.0),), default_diffusion(1),
                            RateField(const(1.0), linear(1.0), 1.0, z_lo), Beta((beta,)),
                            threshold=Threshold(levels), name="ex3.2-threshold")


def _rbm_jumps(z_max=1.0, jump_rate=1.0, lam=0.3, mu=1.0):
    return DiffusionEnvSpec(Domain("interval", 0.0, z_max), (const(0.0),), default_diffusion(1),
                            RateField(const(lam), const(mu), lam, mu), Beta((1.0,)),
                            jumps=JumpSpec(const(jump_rate)), name="rbm-uniform-jumps")


BUILTINS: dict[str, Builtin] = {b.name: b for b in [
    Builtin("two-state", "discrete",
            "two environment states with fixed traffic ratios, symmetric switching at a common rate",
            {"rho": [0.2, 0.5], "rate": 1.0, "mu": 1.0}, discrete.two_state),
    Builtin("single-state", "discrete", "constant environment: the plain M/M/1 queue",
            {"lam": 1.0, "mu": 4.0}, discrete.single_state),
    Builtin("ex2.1-cyclic", "discrete",
            "finite points of (0,1) with rho(z)=z; each layer walks a nearest-neighbour cycle on a window of points",
            {"M": 6, "m": 3, "shift": 1, "L": "none", "beta": 1.0}, discrete.nested_cyclic),
    Builtin("ex2.1-uniform", "discrete",
            "as ex2.1-cyclic but selected layers jump uniformly inside the window",
            {"M": 6, "m": 3, "shift": 1, "L": "all", "beta": 1.0}, discrete.nested_cyclic),
    Builtin("ex2.2-shift", "discrete",
            "ring of 2W+1 states; layer n shifts the environment by n steps; traffic ratios increase toward 1",
            {"W": 20, "rho0": 0.3, "power": 1.0, "beta": 1.0}, discrete.shift_window),
    Builtin("case-a-rbm-arrival", "diffusion",
            "arrival rate equals a reflected Brownian motion on [0, z_max], unit service rate",
            {"z_max": 0.9, "sigma2": 1.0, "beta": 1.0}, _case_a),
    Builtin("case-b-rbm-service", "diffusion",
            "unit arrival rate, service rate a reflected Brownian motion on [mu0, inf) capped at z_max",
            {"mu0": 1.5, "z_max": 6.0, "sigma2": 1.0, "beta": 1.0}, _case_b),
    Builtin("case-c-cone", "diffusion",
            "(service, arrival) rates a reflected Brownian motion in the cone 0 <= z2 <= (1-delta) z1",
            {"delta": 0.2, "z_min": 0.5, "z_max": 2.0, "beta": 1.0}, _case_c),
    Builtin("ex3.1-theta-drift", "diffusion",
            "arrival rate diffusing on [0, z_max] with drift theta/(1-z) toward 1; "
            "stationary density proportional to (1-z)^(-2 theta)",
            {"theta": 0.25, "z_max": 0.95, "beta": 1.0}, _theta_drift),
    Builtin("ex3.1-threshold", "diffusion",
            "theta-drift arrival rate that may only move in [0, alpha_star] once the queue reaches n0; "
            "frozen outside",
            {"theta": 0.25, "z_max": 0.9, "alpha_star": 0.75, "n0": 3, "beta": 1.0}, _theta_threshold),
    Builtin("ex3.2-threshold", "diffusion",
            "unit arrivals, service rate reflected Brownian motion on [z_lo, z_hi] restricted to "
            "[alpha_n0, z_hi] from layer n0 on",
            {"z_lo": 1.1, "z_hi": 3.0, "alpha_n0": 1.5, "n0": 3, "beta": 1.0}, _service_threshold),
    Builtin("rbm-uniform-jumps", "diffusion",
            "reflected Brownian motion on [0, z_max] relocated uniformly at a constant jump rate; constant queue rates",
            {"z_max": 1.0, "jump_rate": 1.0, "lam": 0.3, "mu": 1.0}, _rbm_jumps),
]}


def build(name: str, **params):
    if name not in BUILTINS:
        raise SpecError(f"unknown builtin {name!r}; run `envqueue list-builtins`")
    b = BUILTINS[name]
    unknown = set(params) - set(b.defaults)
    if unknown:
        raise SpecError(f"builtin {name!r} has no parameters {sorted(unknown)}")
    kw = dict(b.defaults)
    kw.update(params)
    return b.build(**kw)


def catalog() -> list[dict]:
    return [{"name": b.name, "family": b.family, "embodies": b.embodies, "parameters": b.defaults}
            for b in BUILTINS.values()]
