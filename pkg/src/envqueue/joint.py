"""Joint simulation of the queue and a diffusive environment."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .coupling import CouplingTrace
from .env import DiffusionEnvSpec
from .errors import BudgetExceeded, DomainError, ScaleOverflow, SpecError
from .fields import const, encode_many
from .seeds import replica_seed


@dataclass
class Packed:
    fk: np.ndarray
    fp: np.ndarray
    has_jump: bool
    fn: np.ndarray
    fc: np.ndarray
    fr: np.ndarray
    thr: np.ndarray
    use_thr: bool
    lbv: np.ndarray
    lbr: float
    blo: np.ndarray
    bhi: np.ndarray


def pack_spec(spec: DiffusionEnvSpec, beta_table: int = 64) -> Packed:
    zero = const(0.0)
    d = spec.dim
    g1 = spec.drift[1] if d == 2 else zero
    s01 = spec.diffusion[0][1] if d == 2 else zero
    s11 = spec.diffusion[1][1] if d == 2 else zero
    jr = spec.jumps.rate if spec.jumps is not None else zero
    fk, fp = encode_many([spec.rates.lam, spec.rates.mu, spec.drift[0], g1, spec.diffusion[0][0], s01, s11, jr])
    fn, fc = spec.domain.faces()
    fr = spec.domain.reflections()
    if d == 1:
        fn = np.hstack([fn, np.zeros((2, 1))])
        fr = np.hstack([fr, np.zeros((2, 1))])
    thr = np.array(spec.threshold.levels if spec.threshold is not None else [[spec.domain.lo, spec.domain.hi]],
                   dtype=float)
    lbv = np.array([spec.beta.log(n) for n in range(beta_table)])
    blo, bhi = spec.domain.bbox()
    return Packed(fk, fp, spec.jumps is not None, np.ascontiguousarray(fn), fc, np.ascontiguousarray(fr),
                  thr, spec.threshold is not None, lbv, math.log(spec.beta.ratio),
                  np.append(blo, 0.0)[:2], np.append(bhi, 1.0)[:2])


@dataclass
class JointPath:
    """Aggregated output of one or more replicas.

    Occupation arrays have shape (segments, n_cap + 2, z_bins); the last
    layer row collects n > n_cap.  ``occ_in`` bins the environment over the
    active interval of each layer, ``occ_out`` over the whole domain (only
    frozen threshold time lands there).  Local times are per face;
    ``ell_int`` divides each increment by the layer speed-up.
    """

    occ_in: np.ndarray
    occ_out: np.ndarray
    ell: np.ndarray
    ell_int: np.ndarray
    horizon: float
    n_cap: int
    z_bins: int
    steps: int
    frozen_moves: int
    queue_events: int
    env_jumps: int
    jump_times: list = field(default_factory=list)
    events: list = field(default_factory=list)   # per replica (t, n, z0, z1)
    records: list = field(default_factory=list)  # per replica (t, n, z0, z1, ell...)
    final: list = field(default_factory=list)    # per replica (n, z)
    meta: dict = field(default_factory=dict)

    @property
    def segments(self) -> int:
        return self.occ_in.shape[0]


def simulate_joint(spec: DiffusionEnvSpec, x0, horizon: float, dt: float, seed: int, replicas: int = 1,
                   n_cap: int = 40, z_bins: int = 20, segments: int = 20, adaptive: bool = True,
                   reflection: str = "fold", queue: bool = True, max_steps: int = 2_000_000_000,
                   max_log: int = 0, record_every: int = 0, max_records: int = 0, workers: int = 1,
                   burn_in: float = 0.0, speed_cap: float = math.inf) -> JointPath:
    """Simulate replicas of the joint process from ``x0 = (n, z)`` and merge them.

    ``adaptive`` shrinks the real step by the environment speed-up, at most
    by ``speed_cap``; the plain scheme (``adaptive=False``) keeps ``h = dt``.
    Replica ``i`` uses seed ``replica_seed(seed, i)``.  Merging is by sum in
    replica order, so the result does not depend on ``workers``.  Occupation
    and local time are only charged after ``burn_in`` (absolute time).
    """
    n0, z0 = x0
    z0 = np.atleast_1d(np.asarray(z0, dtype=float))
    if not spec.domain.contains(z0):
        raise DomainError(f"initial point {z0} is outside the domain")
    if n0 < 0 or horizon <= 0 or dt <= 0 or not speed_cap >= 1:
        raise SpecError("need n >= 0, horizon > 0, dt > 0 and speed_cap >= 1")
    pk = pack_spec(spec)
    zi = np.zeros(2)
    zi[: len(z0)] = z0

    def one(i):
        return K.joint_kernel(spec.dim, pk.fk, pk.fp, pk.has_jump, pk.fn, pk.fc, pk.fr, pk.thr, pk.use_thr,
                              float(spec.domain.lo), float(spec.domain.hi), pk.blo, pk.bhi, pk.lbv, pk.lbr,
                              zi, int(n0), float(horizon), float(dt), bool(adaptive), reflection == "fold",
                              bool(queue), int(n_cap), int(z_bins), int(segments), replica_seed(seed, i),
                              int(max_steps), int(max_log), int(record_every), int(max_records), float(burn_in),
                              math.log(speed_cap) if speed_cap < math.inf else 1e300)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            outs = list(ex.map(one, range(replicas)))
    else:
        outs = [one(i) for i in range(replicas)]
    for i, o in enumerate(outs):
        status, bad_n = o[16], o[17]
        if status == 1:
            raise BudgetExceeded(f"replica {i}: step budget {max_steps} exhausted at t={o[10]:.6g}")
        if status == 2:
            raise ScaleOverflow(f"replica {i}: non-finite environment step at layer n={bad_n}", int(bad_n))
    path = JointPath(
        occ_in=sum(o[0] for o in outs), occ_out=sum(o[1] for o in outs),
        ell=sum(o[2] for o in outs), ell_int=sum(o[3] for o in outs),
        horizon=float(horizon) * replicas, n_cap=n_cap, z_bins=z_bins,
        steps=sum(int(o[9]) for o in outs), frozen_moves=sum(int(o[15]) for o in outs),
        queue_events=sum(int(o[13]) for o in outs), env_jumps=sum(int(o[14]) for o in outs),
        jump_times=[o[7] for o in outs],
        events=[np.column_stack([o[4], o[5], o[6]]) for o in outs],
        records=[o[8] for o in outs], final=[(int(o[12]), o[11][: spec.dim].copy()) for o in outs],
        meta={"seed": seed, "replicas": replicas, "dt": dt, "adaptive": adaptive, "reflection": reflection, "speed_cap": speed_cap,
              "horizon_per_replica": horizon, "burn_in": burn_in,
              "faces": list(spec.domain.face_names),
              "intervals": [list(spec.active_interval(n)) for n in range(n_cap + 1)],
              "domain": [spec.domain.lo, spec.domain.hi] if spec.dim == 1 else None},
    )
    return path


def simulate_joint_threshold(spec: DiffusionEnvSpec, x0, horizon: float, dt: float, seed: int, **kw) -> JointPath:
    if spec.threshold is None:
        raise SpecError("spec has no threshold layers")
    return simulate_joint(spec, x0, horizon, dt, seed, **kw)


@dataclass
class OccupationSummary:
    """Normalized occupation: ``layer_bins[n, b]`` for n <= n_cap plus ``tail`` for n > n_cap.

    With thresholds, ``layer_bins`` covers only time inside D_n, and
    ``outside`` is the fraction of time spent frozen outside D_n.
    """

    layer_bins: np.ndarray
    tail: float
    outside: float
    n_cap: int
    z_bins: int
    total_time: float
    halves: tuple | None = None

    def queue_marginal(self) -> np.ndarray:
        return np.append(self.layer_bins.sum(axis=1), self.tail)


def occupation_summary(path: JointPath, n_cap: int | None = None, z_bins: int | None = None,
                       burn_frac: float = 0.0, restrict_active: bool = False) -> OccupationSummary:
    """Merge segments after discarding the first ``burn_frac`` of them.

    ``n_cap`` may be lowered (higher layers fold into the tail) and ``z_bins``
    may be any divisor of the simulated bin count.  With
    ``restrict_active`` the law is conditioned on Z in D_N.
    """
    S = path.segments
    drop = math.ceil(burn_frac * S - 1e-9)
    if burn_frac > 0.9 or drop >= S:
        raise SpecError("burn-in would discard more than 90% of the path")
    n_cap = path.n_cap if n_cap is None else n_cap
    z_bins = path.z_bins if z_bins is None else z_bins
    if n_cap > path.n_cap or path.z_bins % z_bins:
        raise SpecError("summary grid must coarsen the simulated grid")

    def reduce(occ):
        a = occ.sum(axis=0)
        f = path.z_bins // z_bins
        a = a.reshape(a.shape[0], z_bins, f).sum(axis=2)
        main = a[: n_cap + 1]
        tail = a[n_cap + 1 :].sum()
        return main, tail

    def summarize(sl):
        mi, ti = reduce(path.occ_in[sl])
        mo, to = reduce(path.occ_out[sl])
        tot = mi.sum() + ti + mo.sum() + to
        if restrict_active:
            norm = mi.sum() + ti
            if norm == 0:
                return np.zeros_like(mi), 0.0, 1.0, tot
            return mi / norm, ti / norm, (mo.sum() + to) / tot, tot
        return mi / tot, ti / tot, (mo.sum() + to) / tot, tot

    keep = slice(drop, S)
    lb, tl, out, tot = summarize(keep)
    halves = None
    if S - drop >= 2:
        mid = drop + (S - drop) // 2
        halves = (summarize(slice(drop, mid))[:2], summarize(slice(mid, S))[:2])
    return OccupationSummary(lb, float(tl), float(out), n_cap, z_bins, float(tot), halves)


def boundary_measure_estimate(path: JointPath, intrinsic: bool = True, burn_frac: float = 0.0) -> np.ndarray:
    """Local time per unit time, by layer and face: shape (n_cap + 2, faces).

    With ``intrinsic`` each increment is divided by the layer speed-up.  That is
    the normalization in which the boundary measure of layer n is proportional
    to rho(z_face)**n.
    """
    drop = math.ceil(burn_frac * path.segments - 1e-9)
    arr = (path.ell_int if intrinsic else path.ell)[drop:].sum(axis=0)
    used = path.horizon * (path.segments - drop) / path.segments
    return arr / used


def couple_joint_diffusive(spec: DiffusionEnvSpec, x1, x2, seed: int, replica: int = 0, dt: float = 1e-3,
                           horizon: float = 1e4, tol: float = 1e-9, max_attempts: int = 64) -> CouplingTrace:
    out, att = couple_joint_batch(spec, x1, x2, seed, 1, replica=replica, dt=dt, horizon=horizon, tol=tol,
                                  max_attempts=max_attempts)
    return _trace_from(out[0], att[0])


def _trace_from(row, att) -> CouplingTrace:
    J = int(row[1])
    phases = [tuple(float(x) for x in att[k]) for k in range(min(J + 1, att.shape[0])) if not np.isnan(att[k, 0])]
    return CouplingTrace(float(row[0]), phases, J, float(row[2]), bool(row[3]))


def couple_joint_batch(spec: DiffusionEnvSpec, x1, x2, seed: int, n_runs: int, replica: int = 0,
                       dt: float = 1e-3, horizon: float = 1e4, tol: float = 1e-9, max_attempts: int = 64):
    """Many independent coupling runs of two joint processes on a 1-D environment.

    Phase A moves both copies with independent noise under a dominating
    M/M/1 queue.  Phase B races the shared-noise clamped coupling of the
    environments against an Exp(lambda_bar) arrival.  Returns raw arrays
    ``(runs x [tau0, J, tau, coupled], runs x attempts x [tau_k, eta_k, zeta_k])``.
    """
    if spec.dim != 1:
        raise SpecError("joint coupling is implemented for 1-D environments")
    pk = pack_spec(spec)
    (n1, z1), (n2, z2) = x1, x2
    for z in (z1, z2):
        if not spec.domain.contains(z):
            raise DomainError(f"{z} is outside the domain")
    rf = spec.rates
    return K.couple_joint_kernel(pk.fk, pk.fp, float(spec.domain.lo), float(spec.domain.hi), pk.lbv, pk.lbr,
                                 float(rf.lambda_bar), float(rf.mu_bar), int(n1), float(z1), int(n2), float(z2),
                                 float(dt), int(n_runs), float(horizon), replica_seed(seed, replica), float(tol),
                                 int(max_attempts))
