"""Config-driven experiments: run, assert, write CSV and JSON artifacts."""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import discrete as dc
from .builtins import build
from .config import ConfigError, config_hash
from .coupling import (couple_joint_discrete, feasibility_margin, feasible, jump_coupling, m_func,
                       maximal_coupling_jump, mgf_min_check, mm1_tv_exact, optimize_rate, robert_bound,
                       success_prob, tv_decay_check)
from .env import DiffusionEnvSpec, DiscreteEnvSpec, diffusion_spec_from_dict
from .errors import SpecError
from .joint import boundary_measure_estimate, couple_joint_batch, occupation_summary, simulate_joint
from .seeds import replica_rng
from .stationary import compare_empirical, joint_invariant, tv_distance, xi_constant
from .stats import dkw_epsilon, empirical_survival, mean_se

FLOAT_FMT = "{:.12e}"


@dataclass
class CheckResult:
    name: str
    ok: bool
    value: float | None = None
    limit: float | None = None
    detail: str = ""

    def to_dict(self) -> dict:
        return {"name": self.name, "ok": bool(self.ok), "value": _jsonable(self.value),
                "limit": _jsonable(self.limit), "detail": self.detail}


@dataclass
class ExperimentResult:
    kind: str
    config_hash: str
    checks: list[CheckResult]
    results: dict
    tables: dict = field(default_factory=dict)  # name -> (header, rows)
    artifacts: list[str] = field(default_factory=list)
    elapsed: float = 0.0

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def report(self) -> dict:
        return {"kind": self.kind, "config_hash": self.config_hash, "version": __version__, "ok": self.ok,
                "checks": [c.to_dict() for c in self.checks], "results": _jsonable(self.results),
                "artifacts": self.artifacts, "elapsed_s": round(self.elapsed, 3)}


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return x if math.isfinite(x) else str(x)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def _cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT.format(float(v)) if math.isfinite(v) else str(float(v))
    return str(v)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def resolve_spec(ref):
    if ref.builtin is not None:
        return build(ref.builtin, **ref.params)
    d = dict(ref.inline)
    if d.get("type") == "discrete":
        try:
            return dc.matrix_env(d["lam"], d["mu"], d["tau"], d.get("v"), name=d.get("name", "custom"))
        except KeyError as e:
            raise SpecError(f"inline discrete spec is missing {e}") from None
    return diffusion_spec_from_dict(d, d.get("name", "custom"))


def _need(spec, cls, kind):
    if not isinstance(spec, cls):
        want = "a discrete" if cls is DiscreteEnvSpec else "a diffusion"
        raise ConfigError(f"{kind} needs {want} environment, got {getattr(spec, 'name', spec)!r}")


def _check(checks, name, value, limit, upper=True, detail=""):
    ok = bool(value <= limit) if upper else bool(value >= limit)
    checks.append(CheckResult(name, ok, float(value), float(limit), detail))


# --- kinds ------------------------------------------------------------------

def _stationary_discrete(cfg):
    spec = resolve_spec(cfg.spec)
    _need(spec, DiscreteEnvSpec, cfg.kind)
    run, a = cfg.run, cfg.assertions
    G = dc.build_generator(spec, run.n_max)
    dpi = dc.invariant_measure_discrete(spec, run.n_max)
    closed = dpi.vector()
    solve = dc.gth_stationary(G.R)
    err = float(np.max(np.abs(closed - solve)))
    bal = dc.check_balance(G, closed)
    checks = []
    _check(checks, "closed_form_vs_solve", err, a.max_abs_error)
    _check(checks, "interior_balance", bal, a.balance_max)
    res = {"xi": xi_constant(spec), "states": G.size, "max_abs_error": err, "balance_residual": bal,
           "tail_mass_beyond_n_max": dpi.tail_mass}
    rows = [(n, k, float(spec.states[k]), closed[G.index(n, k)], solve[G.index(n, k)])
            for n in range(run.n_max + 1) for k in range(spec.m)]
    tables = {"pi": (["n", "k", "z", "closed_form", "solve"], rows)}
    if run.ergodic_check:
        gap = dc.spectral_gap(G, closed)
        t = run.ergodic_gap_multiple / gap
        method = dc.choose_transient_method(G, t)
        P = dc.transient_matrix(G, t) if method == "squaring" else None
        tvs = []
        for x in range(G.size):
            law = P[x] if P is not None else dc.transient_law(G, x, t, method=method)
            tvs.append(dc.tv_truncated(law, closed))
        _check(checks, "ergodic_tv", max(tvs), a.ergodic_tv_max, detail=f"t = {run.ergodic_gap_multiple}/gap")
        res.update(gap=gap, t=t, transient_method=method, ergodic_tv_max=max(tvs))
        tables["ergodic"] = (["n", "k", "tv"], [(*G.state(x), tvs[x]) for x in range(G.size)])
    if run.simulate_events:
        path = dc.simulate_ctmc(G, (0, 0), None, run.seed, max_events=run.simulate_events, max_log=0)
        tv = dc.tv_truncated(path.occupation_law(), closed)
        res["simulation_tv"] = tv
        if a.sim_tv_max is not None:
            _check(checks, "simulation_tv", tv, a.sim_tv_max)
        tables["pi"] = (tables["pi"][0] + ["simulated"],
                        [r + (path.occupation_law()[i],) for i, r in enumerate(tables["pi"][1])])
    return checks, res, tables


def _default_z(spec: DiffusionEnvSpec):
    d = spec.domain
    if d.kind == "cone":
        z1 = 0.5 * (d.lo + d.hi)
        return [z1, 0.5 * (1 - d.delta) * z1]
    return [0.5 * (d.lo + d.hi)]


def _simulate(cfg, spec):
    r = cfg.run
    z0 = r.x0_z if r.x0_z is not None else _default_z(spec)
    path = simulate_joint(spec, (r.x0_n, z0), r.horizon, r.dt, r.seed, replicas=r.replicas, n_cap=r.n_cap,
                          z_bins=r.bins, adaptive=r.adaptive, reflection=r.reflection, queue=r.queue,
                          max_steps=r.max_steps, workers=r.workers,
                          burn_in=r.burn_in if r.burn_in is not None else 0.2 * r.horizon,
                          speed_cap=r.speed_cap if r.adaptive else math.inf)
    return path


def _occupation_rows(law, summ, ref, ref_tail):
    rows = []
    for n in range(summ.n_cap + 1):
        lo, hi = law.intervals(n)
        edges = np.linspace(lo, hi, summ.z_bins + 1)
        for b in range(summ.z_bins):
            rows.append((n, float(edges[b]), float(edges[b + 1]), summ.layer_bins[n, b], ref[n, b]))
    lo, hi = law.intervals(summ.n_cap + 1)
    rows.append((summ.n_cap + 1, lo, hi, summ.tail, ref_tail))
    return rows


def _stationary_diffusive(cfg, threshold=False):
    spec = resolve_spec(cfg.spec)
    _need(spec, DiffusionEnvSpec, cfg.kind)
    if threshold and spec.threshold is None:
        raise ConfigError("stationary-threshold needs a spec with threshold layers")
    r, a = cfg.run, cfg.assertions
    law = joint_invariant(spec)
    path = _simulate(cfg, spec)
    summ = occupation_summary(path, restrict_active=threshold)
    res = {"xi": law.xi, "steps": path.steps, "queue_events": path.queue_events, "env_jumps": path.env_jumps,
           "simulated_time": path.horizon, "frozen_fraction": summ.outside}
    checks = []
    header = ["n", "z_low", "z_high", "empirical", "model"]
    if not r.queue:
        n = r.x0_n
        ref_tab, _ = law.table(n, r.bins)
        ref = ref_tab[n] / ref_tab[n].sum()
        emp = summ.layer_bins[n] / summ.layer_bins[n].sum()
        tv = tv_distance(emp, ref)
        res["env_tv"] = tv
        if a.env_tv_max is not None:
            _check(checks, "env_tv", tv, a.env_tv_max, detail=f"environment law in layer {n}")
        lo, hi = law.intervals(n)
        edges = np.linspace(lo, hi, r.bins + 1)
        rows = [(n, float(edges[b]), float(edges[b + 1]), emp[b], ref[b]) for b in range(r.bins)]
        return checks, res, {"env": (header, rows)}
    rep = compare_empirical(law, summ.layer_bins, summ.tail)
    ref, ref_tail = law.table(summ.n_cap, summ.z_bins)
    res["comparison"] = rep.to_dict()
    if threshold:
        res["frozen_moves"] = path.frozen_moves
        checks.append(CheckResult("frozen_environment_static", path.frozen_moves == 0, path.frozen_moves, 0,
                                  "environment displacement outside the active interval"))
        for n in range(min(a.layers, summ.n_cap) + 1):
            tv = rep.layer_tv[n]
            if math.isnan(tv):
                checks.append(CheckResult(f"layer_tv[{n}]", False, None, a.layer_tv_max, "layer never visited"))
            else:
                _check(checks, f"layer_tv[{n}]", tv, a.layer_tv_max)
    else:
        if a.global_tv_max is not None:
            _check(checks, "global_tv", rep.global_tv, a.global_tv_max)
        if a.queue_tv_max is not None:
            _check(checks, "queue_tv", rep.queue_tv, a.queue_tv_max)
        if law.face_points:
            est = boundary_measure_estimate(path)
            res["boundary"] = {"faces": list(spec.domain.face_names),
                               "estimate": est[: min(4, summ.n_cap + 1)].tolist(),
                               "model": [law.boundary(n).tolist() for n in range(min(4, summ.n_cap + 1))]}
    return checks, res, {"occupation": (header, _occupation_rows(law, summ, ref, ref_tail))}


def _rate_certificate(cfg):
    r, a = cfg.run, cfg.assertions
    cert = optimize_rate(r.alpha, r.gamma, r.lambda_bar, r.mu_bar, margin=r.margin, grid=r.grid)
    checks = []
    if a.kappa_positive:
        checks.append(CheckResult("kappa_positive", cert.ok and cert.kappa > 0, cert.kappa, 0.0, cert.reason))
    res = {"certificate": cert.to_dict()}
    tables = {"certificate": (["kappa", "c", "epsilon", "C_star", "C", "p", "kappa_c", "margin"],
                              [(cert.kappa, cert.c, cert.eps, cert.C_star, cert.C, cert.p, cert.kappa_c,
                                cert.margin)])}
    if r.c is not None:
        marg = feasibility_margin(r.c, r.epsilon, r.alpha, r.gamma, r.lambda_bar, r.mu_bar)
        ok = feasible(r.c, r.epsilon, r.alpha, r.gamma, r.lambda_bar, r.mu_bar)
        res["given"] = {"c": r.c, "epsilon": r.epsilon, "feasible": ok, "margin": marg,
                        "kappa": (1 - r.epsilon) * float(m_func(r.c, r.lambda_bar, r.mu_bar))}
        if a.given_feasible:
            checks.append(CheckResult("given_feasible", ok, marg, 0.0))
    if r.robert_ns:
        rows = []
        for n in r.robert_ns:
            tv = mm1_tv_exact(n, r.robert_ts, r.lambda_bar, r.mu_bar)
            for t, v in zip(r.robert_ts, tv):
                rows.append((n, t, v, float(robert_bound(n, t, r.lambda_bar, r.mu_bar))))
        worst = max(row[2] - row[3] for row in rows)
        _check(checks, "robert_bound", worst, 0.0, detail="max of exact TV minus bound")
        tables["robert"] = (["n", "t", "tv_exact", "bound"], rows)
    return checks, res, tables


def _coupling_harness(cfg):
    r, a = cfg.run, cfg.assertions
    checks, res, tables = [], {}, {}
    if r.clock is not None:
        cl = r.clock
        rng = replica_rng(r.seed, 0)
        ts = np.linspace(0.0, cl.t_max, cl.t_points)
        eps = dkw_epsilon(cl.runs, a.dkw_level)
        rows, worst = [], -math.inf
        res["clock"] = []
        for Lam in cl.Lambdas:
            jc = jump_coupling(cl.T, Lam)
            taus = np.array([maximal_coupling_jump(jc, cl.start[0], cl.start[1], rng).tau for _ in range(cl.runs)])
            surv = empirical_survival(taus, ts)
            bound = np.exp(-jc.gamma * ts)
            worst = max(worst, float(np.max(surv - bound - eps)))
            rows.extend((Lam, jc.q, t, s, b, b + eps) for t, s, b in zip(ts, surv, bound))
            res["clock"].append({"Lambda": Lam, "q": jc.q, "gamma": jc.gamma, "mean_tau": float(taus.mean())})
        _check(checks, "clock_survival_bound", worst, 0.0, detail="max of survival - bound - DKW epsilon")
        tables["clock"] = (["Lambda", "q", "t", "survival", "bound", "bound_plus_dkw"], rows)
    if r.joint is not None:
        jr = r.joint
        spec = resolve_spec(cfg.spec)
        lb, mb = spec.rates.lambda_bar, spec.rates.mu_bar
        mc = float(m_func(jr.c, lb, mb))
        if isinstance(spec, DiscreteEnvSpec):
            x1, x2 = (jr.x1[0], int(jr.x1[1])), (jr.x2[0], int(jr.x2[1]))
            if spec.m > 1:
                jc = jump_coupling(spec.tau_matrix(0))
                p = success_prob(jr.alpha, jc.gamma, lb)
            else:
                jc, p = None, 1.0
            rng = replica_rng(r.seed, 1)
            traces = [couple_joint_discrete(spec, x1, x2, rng, jc, horizon=jr.horizon) for _ in range(jr.runs)]
            tau0 = np.array([t.tau0 for t in traces])
            J = np.array([t.J for t in traces])
            coupled = np.array([t.coupled for t in traces])
        else:
            out, _ = couple_joint_batch(spec, jr.x1, jr.x2, r.seed, jr.runs, dt=jr.dt, horizon=jr.horizon)
            tau0, J, coupled = out[:, 0], out[:, 1].astype(int), out[:, 3].astype(bool)
            p = math.nan
        nbar = max(jr.x1[0], jr.x2[0])
        mgf, se = mean_se(np.exp(mc * tau0))
        bound = jr.c**nbar
        _check(checks, "tau0_mgf", mgf, bound + a.se_multiple * se, detail=f"E exp(m(c) tau0) <= c^{nbar}")
        res["joint"] = {"m_c": mc, "mgf": mgf, "mgf_se": se, "bound": bound, "p": p,
                        "coupled_fraction": float(coupled.mean()), "mean_J": float(J.mean())}
        rows = [("mgf", 0, mgf, bound)]
        if math.isfinite(p):
            eps = dkw_epsilon(jr.runs, a.dkw_level)
            worst = -math.inf
            for k in range(jr.k_max + 1):
                emp = float(np.mean(J >= k))
                geo = (1 - p) ** k
                worst = max(worst, emp - geo - eps)
                rows.append(("retries_at_least", k, emp, geo))
            _check(checks, "retries_geometric", worst, 0.0, detail="max of P(J>=k) - (1-p)^k - DKW epsilon")
        tables["joint"] = (["quantity", "k", "empirical", "bound"], rows)
    return checks, res, tables


def _tv_decay(cfg):
    spec = resolve_spec(cfg.spec)
    _need(spec, DiscreteEnvSpec, cfg.kind)
    r = cfg.run
    rep = tv_decay_check(spec, r.n_max, r.n0s, r.ts, alpha=r.alpha, margin=r.margin)
    checks = [CheckResult("certificate", rep.certificate.ok, rep.certificate.kappa, 0.0, rep.certificate.reason)]
    worst = max(row[3] - row[4] for row in rep.rows)
    _check(checks, "tv_below_bound", worst, 0.0, detail="max of exact TV minus theorem bound")
    if cfg.assertions.check_slope:
        checks.append(CheckResult("decay_rate", rep.ok_slope, min(rep.fitted_rate, rep.gap),
                                  rep.certificate.kappa, "min(fitted rate, gap) >= kappa"))
    res = {"certificate": rep.certificate.to_dict(), "gap": rep.gap, "fitted_rate": rep.fitted_rate,
           "clock": {"Lambda": rep.jump.Lambda, "q": rep.jump.q, "gamma": rep.jump.gamma},
           "transient_method": rep.method}
    tables = {"tv": (["n0", "k", "t", "tv_exact", "bound_theorem", "bound_coupling"], rep.rows)}
    return checks, res, tables


def _mgf_lemma(cfg):
    r, a = cfg.run, cfg.assertions
    exact = {"mgf": (r.beta + r.gamma) / (r.beta + r.gamma - r.a), "p_win": r.gamma / (r.beta + r.gamma)}
    sampler = lambda rng, n: rng.exponential(1.0 / r.gamma, size=n)
    rep = mgf_min_check(r.alpha, r.beta, r.gamma, r.a, sampler, r.samples, r.seed, exact=exact)
    k = a.se_multiple
    checks = []
    _check(checks, "exact_mgf_below_theta", exact["mgf"], rep.mgf_bound)
    _check(checks, "exact_win_above_bound", exact["p_win"], rep.p_win_bound, upper=False)
    _check(checks, "mc_mgf_matches_exact", abs(rep.mgf - exact["mgf"]), k * rep.mgf_se)
    _check(checks, "mc_win_matches_exact", abs(rep.p_win - exact["p_win"]), k * rep.p_win_se)
    checks.append(CheckResult("eta_tail", rep.tail_ok, rep.tail_excess, 0.0))
    res = rep.__dict__.copy()
    rows = [("mgf", rep.mgf, rep.mgf_se, exact["mgf"], rep.mgf_bound),
            ("p_win", rep.p_win, rep.p_win_se, exact["p_win"], rep.p_win_bound)]
    return checks, res, {"mgf": (["quantity", "estimate", "se", "exact", "bound"], rows)}


_RUNNERS = {
    "stationary-discrete": _stationary_discrete,
    "stationary-diffusive": _stationary_diffusive,
    "stationary-threshold": lambda cfg: _stationary_diffusive(cfg, threshold=True),
    "rate-certificate": _rate_certificate,
    "coupling-harness": _coupling_harness,
    "tv-decay": _tv_decay,
    "mgf-lemma": _mgf_lemma,
}


def run_experiment(cfg, out_dir=None) -> ExperimentResult:
    """Run a validated config; write artifacts when ``out_dir`` (or ``cfg.output``) is set.

    Files are named ``<kind>-<hash12>-<table>.csv`` and ``<kind>-<hash12>-report.json``.
    """
    h = config_hash(cfg)
    t0 = time.perf_counter()
    checks, res, tables = _RUNNERS[cfg.kind](cfg)
    result = ExperimentResult(cfg.kind, h, checks, res, tables, elapsed=time.perf_counter() - t0)
    out = out_dir if out_dir is not None else cfg.output
    if out is not None:
        d = Path(out)
        d.mkdir(parents=True, exist_ok=True)
        stem = f"{cfg.kind}-{h[:12]}"
        for name in sorted(tables):
            header, rows = tables[name]
            p = d / f"{stem}-{name}.csv"
            write_csv(p, header, rows)
            result.artifacts.append(p.name)
        rp = d / f"{stem}-report.json"
        result.artifacts.append(rp.name)
        rp.write_text(json.dumps(result.report(), indent=2, sort_keys=True) + "\n")
    return result
