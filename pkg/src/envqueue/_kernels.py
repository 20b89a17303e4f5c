"""Compiled time-stepping kernels for diffusive environments.

One step of the joint process, with queue length n and environment point z:

* speed ``s = beta_n * rho(z)**(-n)`` (in log space).  The real step is
  ``h = dt / max(1, s)`` in the adaptive scheme and ``h = dt`` otherwise, and
  the environment advances by ``u = s * h`` of its own time;
* the adaptive scheme simulates the speed ``min(s, cap)``: states where the
  true speed exceeds the cap run slower than they should;
* occupation is charged at the left point with weight h;
* the environment takes an Euler step of length u and is folded (or clamped)
  back into the active domain, and local time collects the displacement;
* at most one of {environment jump, arrival, departure} fires, by a single
  categorical draw.  The rates are evaluated at the left point.

Under thresholds, an environment outside its layer domain D_n is frozen.
"""
import math

import numpy as np
from numba import njit

from .fields import feval

LAM, MU, G0, G1, S00, S01, S11, JR = range(8)
NFIELDS = 8
POLY_TOL = 1e-13


@njit(cache=True)
def _log_scale(fk, fp, n, z0, z1, logb):
    if n == 0:
        return logb
    lam = feval(fk[LAM], fp[LAM], z0, z1)
    mu = feval(fk[MU], fp[MU], z0, z1)
    if lam <= 0.0:
        return np.inf
    return logb - n * math.log(lam / mu)


@njit(cache=True)
def _log_beta(lbv, lbr, n):
    k = lbv.shape[0]
    if n < k:
        return lbv[n]
    return lbv[k - 1] + (n - k + 1) * lbr


@njit(cache=True)
def _fold_1d(x, lo, hi, fold, ell):
    """Map x into [lo, hi]; ell[0] / ell[1] collect lower / upper displacement."""
    width = hi - lo
    k = 0
    while (x < lo or x > hi) and k < 64:
        if x < lo:
            d = lo - x
            if fold:
                x = lo + d
                ell[0] += 2.0 * d
            else:
                x = lo
                ell[0] += d
        else:
            d = x - hi
            if fold:
                x = hi - d
                ell[1] += 2.0 * d
            else:
                x = hi
                ell[1] += d
        k += 1
    if x < lo or x > hi:
        y = (x - lo) % (2.0 * width)
        if y > width:
            y = 2.0 * width - y
        x = lo + y
    return x


@njit(cache=True)
def _reflect_poly(z, fn, fc, fr, fold, ell):
    """Oblique fold/clamp into {fn_i . z >= fc_i}; ell[i] collects |displacement| along r_i.

    Residuals above -POLY_TOL count as inside; a clamp can land a rounding error short of its face.
    """
    m = fn.shape[0]
    for _ in range(64):
        worst = -POLY_TOL
        iw = -1
        for i in range(m):
            d = fn[i, 0] * z[0] + fn[i, 1] * z[1] - fc[i]
            if d < worst:
                worst = d
                iw = i
        if iw < 0:
            return True
        rn = fr[iw, 0] * fn[iw, 0] + fr[iw, 1] * fn[iw, 1]
        amt = -worst / rn
        if fold:
            amt *= 2.0
        z[0] += amt * fr[iw, 0]
        z[1] += amt * fr[iw, 1]
        ell[iw] += amt
    # fall back to clamping, which converges for inward reflections
    for _ in range(256):
        worst = -POLY_TOL
        iw = -1
        for i in range(m):
            d = fn[i, 0] * z[0] + fn[i, 1] * z[1] - fc[i]
            if d < worst:
                worst = d
                iw = i
        if iw < 0:
            return True
        rn = fr[iw, 0] * fn[iw, 0] + fr[iw, 1] * fn[iw, 1]
        amt = -worst / rn
        z[0] += amt * fr[iw, 0]
        z[1] += amt * fr[iw, 1]
        ell[iw] += amt
    return False


@njit(cache=True)
def _env_move(dim, fk, fp, z, u, fn, fc, fr, lo, hi, fold, ellbuf, xi0, xi1):
    """Euler step of environment time u from z (in place), then reflection."""
    z0 = z[0]
    z1 = z[1]
    g0 = feval(fk[G0], fp[G0], z0, z1)
    a00 = feval(fk[S00], fp[S00], z0, z1)
    su = math.sqrt(u)
    if dim == 1:
        x = z0 + g0 * u + math.sqrt(a00) * su * xi0
        ellbuf[0] = 0.0
        ellbuf[1] = 0.0
        z[0] = _fold_1d(x, lo, hi, fold, ellbuf)
        return True
    g1 = feval(fk[G1], fp[G1], z0, z1)
    a01 = feval(fk[S01], fp[S01], z0, z1)
    a11 = feval(fk[S11], fp[S11], z0, z1)
    l00 = math.sqrt(a00)
    l10 = a01 / l00
    l11 = math.sqrt(max(a11 - l10 * l10, 0.0))
    z[0] = z0 + g0 * u + su * l00 * xi0
    z[1] = z1 + g1 * u + su * (l10 * xi0 + l11 * xi1)
    for i in range(ellbuf.shape[0]):
        ellbuf[i] = 0.0
    return _reflect_poly(z, fn, fc, fr, fold, ellbuf)


@njit(cache=True)
def _uniform_point(dim, lo, hi, blo, bhi, fn, fc, z):
    if dim == 1:
        z[0] = lo + (hi - lo) * np.random.random()
        return
    while True:
        a = blo[0] + (bhi[0] - blo[0]) * np.random.random()
        b = blo[1] + (bhi[1] - blo[1]) * np.random.random()
        ok = True
        for i in range(fn.shape[0]):
            if fn[i, 0] * a + fn[i, 1] * b < fc[i]:
                ok = False
        if ok:
            z[0] = a
            z[1] = b
            return


@njit(cache=True)
def joint_kernel(dim, fk, fp, has_jump, fn, fc, fr, thr, use_thr, dlo, dhi, blo, bhi,
                 lbv, lbr, z_init, n_init, horizon, dt, adaptive, fold, queue_on,
                 n_cap, zb, nseg, seed, max_steps, max_log, rec_every, max_rec, burn_time, log_cap):
    np.random.seed(seed)
    m = fn.shape[0]
    occ_in = np.zeros((nseg, n_cap + 2, zb))
    occ_out = np.zeros((nseg, n_cap + 2, zb))
    ell = np.zeros((nseg, n_cap + 2, m))
    ell_int = np.zeros((nseg, n_cap + 2, m))
    ev_t = np.zeros(max_log)
    ev_n = np.zeros(max_log, dtype=np.int64)
    ev_z = np.zeros((max_log, 2))
    jt = np.zeros(max_log)
    rec = np.zeros((max_rec, 4 + m))
    ellbuf = np.zeros(max(m, 2))
    ell_tot = np.zeros(m)
    z = np.zeros(2)
    z[0] = z_init[0]
    z[1] = z_init[1]
    n = n_init
    t = 0.0
    steps = 0
    nev = 0
    njump = 0
    nrec = 0
    frozen_moves = 0
    status = 0
    bad_n = -1
    while t < horizon:
        if steps >= max_steps:
            status = 1
            break
        if use_thr:
            k = min(n, thr.shape[0] - 1)
            lo = thr[k, 0]
            hi = thr[k, 1]
        else:
            lo = dlo
            hi = dhi
        active = True
        if use_thr and (z[0] < lo or z[0] > hi):
            active = False
        logb = _log_beta(lbv, lbr, n)
        ls = _log_scale(fk, fp, n, z[0], z[1], logb)
        if active:
            if adaptive:
                # the speed saturates at the cap, so u stays at dt
                ls = min(ls, log_cap)
                if ls > 0.0:
                    h = dt * math.exp(-ls)
                    u = dt
                else:
                    h = dt
                    u = dt * math.exp(ls)
            else:
                h = dt
                u = dt * math.exp(ls)
                if not math.isfinite(u):
                    status = 2
                    bad_n = n
                    break
        else:
            h = dt
            u = 0.0
        if t + h > horizon:
            frac = (horizon - t) / h
            h = horizon - t
            u *= frac
        z0 = z[0]
        z1 = z[1]
        lam = feval(fk[LAM], fp[LAM], z0, z1)
        mu = feval(fk[MU], fp[MU], z0, z1)
        nb = n if n <= n_cap else n_cap + 1
        seg = min(int(t / horizon * nseg), nseg - 1)
        if t >= burn_time:
            if dim == 1:
                if active:
                    b = int((z0 - lo) / (hi - lo) * zb)
                    b = min(max(b, 0), zb - 1)
                    occ_in[seg, nb, b] += h
                else:
                    b = int((z0 - dlo) / (dhi - dlo) * zb)
                    b = min(max(b, 0), zb - 1)
                    occ_out[seg, nb, b] += h
            else:
                b = int((z0 - blo[0]) / (bhi[0] - blo[0]) * zb)
                b = min(max(b, 0), zb - 1)
                occ_in[seg, nb, b] += h
        pj = 0.0
        if active and has_jump:
            pj = feval(fk[JR], fp[JR], z0, z1) * u
        pu = lam * h if queue_on else 0.0
        pd = mu * h if (queue_on and n > 0) else 0.0
        if active and u > 0.0:
            xi0 = np.random.standard_normal()
            xi1 = np.random.standard_normal() if dim == 2 else 0.0
            ok = _env_move(dim, fk, fp, z, u, fn, fc, fr, lo, hi, fold, ellbuf, xi0, xi1)
            if not ok or not math.isfinite(z[0]) or not math.isfinite(z[1]):
                status = 2
                bad_n = n
                break
            sc = math.exp(ls) if ls < 700.0 else np.inf
            for i in range(m):
                if ellbuf[i] > 0.0:
                    ell_tot[i] += ellbuf[i]
                    if t >= burn_time:
                        ell[seg, nb, i] += ellbuf[i]
                        ell_int[seg, nb, i] += ellbuf[i] / sc
        elif not active:
            pass
        r = np.random.random()
        if r < pj:
            _uniform_point(dim, lo, hi, blo, bhi, fn, fc, z)
            if njump < max_log:
                jt[njump] = t + h
            njump += 1
        elif r < pj + pu:
            n += 1
            if nev < max_log:
                ev_t[nev] = t + h
                ev_n[nev] = n
                ev_z[nev, 0] = z[0]
                ev_z[nev, 1] = z[1]
            nev += 1
        elif r < pj + pu + pd:
            n -= 1
            if nev < max_log:
                ev_t[nev] = t + h
                ev_n[nev] = n
                ev_z[nev, 0] = z[0]
                ev_z[nev, 1] = z[1]
            nev += 1
        if not active:
            # frozen environments must not move
            if z[0] != z0 or z[1] != z1:
                frozen_moves += 1
        t += h
        steps += 1
        if rec_every > 0 and steps % rec_every == 0 and nrec < max_rec:
            rec[nrec, 0] = t
            rec[nrec, 1] = n
            rec[nrec, 2] = z[0]
            rec[nrec, 3] = z[1]
            for i in range(m):
                rec[nrec, 4 + i] = ell_tot[i]
            nrec += 1
    return (occ_in, occ_out, ell, ell_int, ev_t[:min(nev, max_log)], ev_n[:min(nev, max_log)],
            ev_z[:min(nev, max_log)], jt[:min(njump, max_log)], rec[:nrec], steps, t, z, n,
            nev, njump, frozen_moves, status, bad_n)


@njit(cache=True)
def couple_env_kernel(fk, fp, lo, hi, z1, z2, dt, scale, n_runs, horizon, seed, tol):
    """Synchronous coupling of two reflected 1-D diffusions with clamping at the walls.

    Returns coupling times (inf if not met by ``horizon``) and the number of
    runs in which the order of the two copies flipped before meeting.
    """
    np.random.seed(seed)
    taus = np.full(n_runs, np.inf)
    flips = 0
    buf = np.zeros(2)
    for r in range(n_runs):
        a = z1
        b = z2
        sgn = 1.0 if a > b else -1.0
        t = 0.0
        flipped = False
        while t < horizon:
            if abs(a - b) <= tol:
                taus[r] = t
                break
            xi = np.random.standard_normal()
            u = dt * scale
            sa = math.sqrt(feval(fk[S00], fp[S00], a, 0.0) * u)
            sb = math.sqrt(feval(fk[S00], fp[S00], b, 0.0) * u)
            a = _fold_1d(a + feval(fk[G0], fp[G0], a, 0.0) * u + sa * xi, lo, hi, False, buf)
            b = _fold_1d(b + feval(fk[G0], fp[G0], b, 0.0) * u + sb * xi, lo, hi, False, buf)
            t += dt
            if (a - b) * sgn < 0.0 and abs(a - b) > tol:
                flipped = True
        if flipped:
            flips += 1
    return taus, flips


@njit(cache=True)
def _coupled_env_until(fk, fp, lo, hi, a, b, dt, scale, eta, tol, max_t):
    """Run the synchronous coupling until it meets; also return the states at time eta."""
    buf = np.zeros(2)
    t = 0.0
    a_eta = a
    b_eta = b
    seen = False
    while abs(a - b) > tol and t < max_t:
        if not seen and t + dt > eta:
            a_eta = a
            b_eta = b
            seen = True
        xi = np.random.standard_normal()
        u = dt * scale
        a = _fold_1d(a + feval(fk[G0], fp[G0], a, 0.0) * u
                     + math.sqrt(feval(fk[S00], fp[S00], a, 0.0) * u) * xi, lo, hi, False, buf)
        b = _fold_1d(b + feval(fk[G0], fp[G0], b, 0.0) * u
                     + math.sqrt(feval(fk[S00], fp[S00], b, 0.0) * u) * xi, lo, hi, False, buf)
        t += dt
    if not seen:
        a_eta = a
        b_eta = b
    return t, a_eta, b_eta, abs(a - b) <= tol


@njit(cache=True)
def couple_joint_kernel(fk, fp, lo, hi, lbv, lbr, lam_bar, mu_bar, n1, z1, n2, z2, dt,
                        n_runs, horizon, seed, tol, max_att):
    """Dominated coupling of two copies of the joint process, 1-D environment.

    Per run: tau0, J, tau, coupled flag, and (tau_k, eta_k, zeta_k) for the
    first ``max_att`` attempts.
    """
    np.random.seed(seed)
    out = np.zeros((n_runs, 4))
    att = np.full((n_runs, max_att, 3), np.nan)
    buf = np.zeros(2)
    for r in range(n_runs):
        a_n = n1
        b_n = n2
        a = z1
        b = z2
        nbar = max(a_n, b_n)
        t = 0.0
        tau0 = -1.0
        start = 0.0
        J = 0
        done = False
        if a_n == b_n and abs(a - b) <= tol:
            out[r, 0] = 0.0
            out[r, 1] = 0
            out[r, 2] = 0.0
            out[r, 3] = 1.0
            att[r, 0, 0] = 0.0
            att[r, 0, 1] = 0.0
            att[r, 0, 2] = 0.0
            continue
        while t < horizon:
            # phase A: dominating queue busy
            while nbar > 0 and t < horizon:
                la = _log_scale(fk, fp, a_n, a, 0.0, _log_beta(lbv, lbr, a_n))
                lb_ = _log_scale(fk, fp, b_n, b, 0.0, _log_beta(lbv, lbr, b_n))
                ls = max(la, lb_, 0.0)
                h = dt * math.exp(-ls) if ls < 700.0 else 0.0
                ua = h * math.exp(la) if la < 700.0 else dt
                ub = h * math.exp(lb_) if lb_ < 700.0 else dt
                lam_a = feval(fk[LAM], fp[LAM], a, 0.0)
                lam_b = feval(fk[LAM], fp[LAM], b, 0.0)
                ex_a = (feval(fk[MU], fp[MU], a, 0.0) - mu_bar) * h if a_n > 0 else 0.0
                ex_b = (feval(fk[MU], fp[MU], b, 0.0) - mu_bar) * h if b_n > 0 else 0.0
                xa = np.random.standard_normal()
                xb = np.random.standard_normal()
                a = _fold_1d(a + feval(fk[G0], fp[G0], a, 0.0) * ua
                             + math.sqrt(feval(fk[S00], fp[S00], a, 0.0) * ua) * xa, lo, hi, False, buf)
                b = _fold_1d(b + feval(fk[G0], fp[G0], b, 0.0) * ub
                             + math.sqrt(feval(fk[S00], fp[S00], b, 0.0) * ub) * xb, lo, hi, False, buf)
                u = np.random.random()
                if u < lam_bar * h:
                    v = np.random.random()
                    nbar += 1
                    if v < lam_a / lam_bar:
                        a_n += 1
                    if v < lam_b / lam_bar:
                        b_n += 1
                elif u < (lam_bar + mu_bar) * h:
                    nbar -= 1
                    if a_n > 0:
                        a_n -= 1
                    if b_n > 0:
                        b_n -= 1
                elif u < (lam_bar + mu_bar) * h + ex_a:
                    a_n -= 1
                elif u < (lam_bar + mu_bar) * h + ex_a + ex_b:
                    b_n -= 1
                t += h
            if nbar > 0:
                break
            tk = t - start
            if tau0 < 0.0:
                tau0 = tk
            # phase B: both queues empty
            eta = np.random.exponential(1.0 / lam_bar)
            scale0 = math.exp(_log_beta(lbv, lbr, 0))
            zeta, ae, be, met = _coupled_env_until(fk, fp, lo, hi, a, b, dt, scale0, eta, tol, horizon)
            if J < max_att:
                att[r, J, 0] = tk
                att[r, J, 1] = eta
                att[r, J, 2] = zeta
            if met and zeta < eta:
                t += zeta
                done = True
                break
            t += eta
            a = ae
            b = be
            v = np.random.random()
            nbar = 1
            a_n = 1 if v < feval(fk[LAM], fp[LAM], a, 0.0) / lam_bar else 0
            b_n = 1 if v < feval(fk[LAM], fp[LAM], b, 0.0) / lam_bar else 0
            start = t
            J += 1
        out[r, 0] = tau0 if tau0 >= 0.0 else t
        out[r, 1] = J
        out[r, 2] = t if done else np.inf
        out[r, 3] = 1.0 if done else 0.0
    return out, att
