"""Compiled inner loops.

These functions mirror, step for step, the reference implementations in
``network``, ``plant`` and ``controllers``; the test suite checks them
against each other.  Everything here works on flat numpy arrays so the
whole simulation state stays serialisable.
"""
from __future__ import annotations

import math

import numpy as np
from numba import njit

RL, RC, RES, MAG, SRC = 0, 1, 2, 3, 4

# ---- per-generator parameter columns
(P_KIND, P_KI, P_KE, P_BAND, P_TD, P_ZV, P_GAMMA, P_TAU, P_PHI, P_PSIMIN,
 P_PSIMAX, P_LBFC, P_LF, P_CF, P_VNOM, P_C, P_TM, P_PMAX, P_LB, P_VST,
 P_PRATE, P_KP, P_DMAX, P_K1, P_K2, P_K3, P_TAUD, P_GOV, P_PSINOM,
 P_VTREF, P_SBASE, P_RF) = range(32)
N_PARAM = 32

# ---- per-generator state columns
(S_VDC, S_PIN, S_PINREF, S_IS, S_DUTY, S_XF, S_GINT, S_DTH, S_MINT,
 S_FREEZE, S_TFLAG, S_PE, S_THETA, S_SPEED, S_MAG, S_PESUM, S_POSTPEAK,
 S_WPOS, S_WCOUNT, S_CROSS_T) = range(20)
N_STATE = 20

# per-generator recorded channels, in this order
WPG_CHANNELS = (
    ("v_dc", "V"), ("p_e", "MW"), ("p_in", "MW"), ("p_s", "MW"), ("mode", "flag"),
    ("i_l_a", "pu"), ("i_l_b", "pu"), ("i_l_c", "pu"),
    ("i_t_a", "pu"), ("i_t_b", "pu"), ("i_t_c", "pu"),
    ("v_pcc_a", "pu"), ("v_pcc_b", "pu"), ("v_pcc_c", "pu"),
    ("psi_t_a", "pu"), ("psi_t_b", "pu"), ("psi_t_c", "pu"),
    ("i_m_a", "pu"), ("i_m_b", "pu"), ("i_m_c", "pu"),
    ("theta", "rad"),
)
N_WCH = len(WPG_CHANNELS)
C_IT = 8  # offset of the transformer current channels

# stop codes of run_chunk
DONE, TOPOLOGY, FAULT_DC, FAULT_NAN = 0, 1, 2, 3


@njit(cache=True)
def net_refresh(v, i, vc, psi, f, t, kind, r, k_l, m_c, m_mag, closed, opening,
                l0, ls, knee, G, hist, seg):
    """Companion conductances and history currents.

    Returns True if a magnetizing segment changed or a switch interrupted
    its current (either needs a new nodal matrix).
    """
    changed = False
    for b in range(kind.shape[0]):
        vb = v[f[b]] - v[t[b]]
        k = kind[b]
        if k == RL or k == SRC:
            g = 1.0 / (r[b] + k_l[b])
            G[b] = g
            hist[b] = g * (vb + (k_l[b] - r[b]) * i[b])
        elif k == RC:
            g = 1.0 / (r[b] + m_c[b])
            G[b] = g
            hist[b] = -g * (vc[b] + m_c[b] * i[b])
        elif k == RES:
            if closed[b] and opening[b] != 0 and i[b] * opening[b] <= 0.0:
                closed[b] = False
                opening[b] = 0
                changed = True
            G[b] = 1.0 / r[b] if closed[b] else 0.0
            hist[b] = 0.0
        else:
            p = psi[b]
            s = 0
            if p > knee[b]:
                s = 1
            elif p < -knee[b]:
                s = -1
            if s != seg[b]:
                changed = True
                seg[b] = s
            lseg = l0[b] if s == 0 else ls[b]
            off = s * knee[b] * (1.0 / l0[b] - 1.0 / ls[b])
            G[b] = m_mag / lseg
            hist[b] = (p + m_mag * vb) / lseg + off
    return changed


@njit(cache=True)
def net_solve(v, i, vc, psi, f, t, kind, m_c, m_mag, G, hist, e, yinv, n, rhs, heff):
    """One nodal solve and state update; False if the solution is not finite."""
    m = kind.shape[0]
    for k in range(n):
        rhs[k] = 0.0
    for b in range(m):
        h = hist[b] + 2.0 * G[b] * e[b]
        heff[b] = h
        if f[b] < n:
            rhs[f[b]] -= h
        if t[b] < n:
            rhs[t[b]] += h
    vnew = yinv @ rhs
    for k in range(n):
        if not math.isfinite(vnew[k]):
            return False
    for b in range(m):
        if kind[b] == MAG:
            psi[b] += m_mag * (v[f[b]] - v[t[b]])
    for k in range(n):
        v[k] = vnew[k]
    for b in range(m):
        vb = v[f[b]] - v[t[b]]
        inew = G[b] * vb + heff[b]
        if kind[b] == RC:
            vc[b] += m_c[b] * (inew + i[b])
        elif kind[b] == MAG:
            psi[b] += m_mag * vb
        i[b] = inew
    return True


@njit(cache=True)
def _clamp(x, lo, hi):
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


@njit(cache=True)
def _sv_mag(a, b, c):
    al = (2.0 * a - b - c) / 3.0
    be = (b - c) / math.sqrt(3.0)
    return math.sqrt(al * al + be * be)


@njit(cache=True)
def _sv_angle(a, b, c):
    al = (2.0 * a - b - c) / 3.0
    be = (b - c) / math.sqrt(3.0)
    return math.atan2(be, al)


@njit(cache=True)
def magnetizing(psi, l0, knee, ls):
    a = abs(psi)
    if a <= knee:
        out = a / l0
    else:
        out = knee / l0 + (a - knee) / ls
    return out if psi >= 0 else -out


@njit(cache=True)
def plant_step(P, S, w, p_e, dt):
    """Machine side, governor, storage boost and DC link of generator ``w``.

    Returns False on DC-link collapse.
    """
    # machine-side lag
    target = _clamp(S[w, S_PINREF], 0.0, P[w, P_PMAX])
    alpha = 1.0 - math.exp(-dt / P[w, P_TM])
    pin = S[w, S_PIN] + (target - S[w, S_PIN]) * alpha
    S[w, S_PIN] = _clamp(pin, 0.0, P[w, P_PMAX])
    v_dc = S[w, S_VDC]
    vnom = P[w, P_VNOM]
    # governor
    i_ref = 0.0
    if P[w, P_GOV] > 0:
        dv = v_dc / vnom - 1.0
        xf = S[w, S_XF]
        deriv = (dv - xf) / P[w, P_TAUD]
        cmd = P[w, P_K1] * dv + P[w, P_K2] * deriv + P[w, P_K3] * S[w, S_GINT]
        i_ref = -cmd * P[w, P_SBASE] / vnom
        lim = P[w, P_PRATE] / vnom
        sat = abs(i_ref) >= lim
        i_ref = _clamp(i_ref, -lim, lim)
        a = dt / P[w, P_TAUD]
        S[w, S_XF] = xf + (dv - xf) * min(a, 1.0)
        gi = S[w, S_GINT]
        if not sat:
            gi += dv * dt
        if P[w, P_K3] > 0:
            cap = P[w, P_PRATE] / P[w, P_SBASE] / P[w, P_K3]
            gi = _clamp(gi, -cap, cap)
        S[w, S_GINT] = gi
    # storage boost
    ilim = P[w, P_PRATE] / v_dc
    iref = _clamp(i_ref, -ilim, ilim)
    i_s = S[w, S_IS]
    duty = 1.0 - (P[w, P_VST] - P[w, P_KP] * (iref - i_s)) / v_dc
    duty = _clamp(duty, 0.0, P[w, P_DMAX])
    di = (P[w, P_VST] - (1.0 - duty) * v_dc) / P[w, P_LB]
    i_s = _clamp(i_s + di * dt, -ilim, ilim)
    S[w, S_IS] = i_s
    S[w, S_DUTY] = duty
    # DC link
    u = v_dc * v_dc + 2.0 * ((S[w, S_PIN] + i_s * v_dc) - p_e) * dt / P[w, P_C]
    if not u > 0.0:
        return False
    S[w, S_VDC] = math.sqrt(u)
    return True



@njit(cache=True)
def _hysteresis(err, band, sw, w):
    for j in range(3):
        if err[j] > band:
            sw[w, j] = 1
        elif err[j] < -band:
            sw[w, j] = 0


@njit(cache=True)
def controller_step(P, S, w, t, dt, omega, vp, il, ic, psi_meas, v_prev, sw, q,
                    flux_acc, win, win_sum, entered, log, ctr, step):
    """Mode switch, phase/magnitude loops and switch decision of generator ``w``."""
    kind = int(P[w, P_KIND])
    err = np.empty(3)
    if kind == 0:
        for j in range(3):
            psi_meas[w, j] += 0.5 * omega * dt * (vp[j] + v_prev[w, j])
            v_prev[w, j] = vp[j]
    was = S[w, S_TFLAG] > 0
    if kind == 0 and P[w, P_LBFC] > 0:
        if not was:
            if max(abs(il[0]), max(abs(il[1]), abs(il[2]))) >= P[w, P_GAMMA]:
                S[w, S_TFLAG] = 1.0
                for j in range(3):
                    flux_acc[w, j] = 0.0
                    win_sum[w, j] = 0.0
                    entered[w, j] = 0.0
                    for k in range(win.shape[2]):
                        win[w, j, k] = 0.0
                S[w, S_WPOS] = 0.0
                S[w, S_WCOUNT] = 0.0
                if ctr[2] < log.shape[0]:
                    log[ctr[2], 0] = w
                    log[ctr[2], 1] = step
                    log[ctr[2], 2] = 1
                ctr[2] += 1
        else:
            size = win.shape[2]
            pos = int(S[w, S_WPOS])
            for j in range(3):
                flux_acc[w, j] += omega * dt * vp[j]
                old = win[w, j, pos]
                win[w, j, pos] = flux_acc[w, j]
                win_sum[w, j] += flux_acc[w, j] - old
            pos += 1
            if pos == size:
                pos = 0
                for j in range(3):
                    acc = 0.0
                    for k in range(size):
                        acc += win[w, j, k]
                    win_sum[w, j] = acc
            S[w, S_WPOS] = pos
            S[w, S_WCOUNT] += 1.0
            if S[w, S_WCOUNT] >= size:
                dev = 0.0
                for j in range(3):
                    d = abs(flux_acc[w, j] - win_sum[w, j] / size)
                    if d > dev:
                        dev = d
                if dev >= P[w, P_TAU]:
                    S[w, S_TFLAG] = 0.0
                    if ctr[2] < log.shape[0]:
                        log[ctr[2], 0] = w
                        log[ctr[2], 1] = step
                        log[ctr[2], 2] = 0
                    ctr[2] += 1
    now = S[w, S_TFLAG] > 0
    if now and not was:
        S[w, S_FREEZE] = 1.0
        for j in range(3):
            q[w, j] = 1 if il[j] >= 0.0 else 0
    elif was and not now:
        S[w, S_FREEZE] = 0.0
        S[w, S_DTH] = _sv_angle(psi_meas[w, 0], psi_meas[w, 1], psi_meas[w, 2]) - omega * t
    # phase and magnitude loops
    vnom = P[w, P_VNOM]
    x = (S[w, S_VDC] * S[w, S_VDC] - vnom * vnom) / (vnom * vnom)
    S[w, S_DTH] += P[w, P_KI] * x * dt
    speed = omega + P[w, P_KI] * x
    theta = S[w, S_DTH] + omega * t
    S[w, S_SPEED] = speed
    S[w, S_THETA] = theta
    psinom = P[w, P_PSINOM]
    ke = P[w, P_KE]
    if S[w, S_FREEZE] == 0.0:
        mi = S[w, S_MINT] + (P[w, P_VTREF] - _sv_mag(vp[0], vp[1], vp[2])) * dt
        if ke > 0:
            mi = _clamp(mi, (P[w, P_PSIMIN] - psinom) / ke, (P[w, P_PSIMAX] - psinom) / ke)
        S[w, S_MINT] = mi
    mag = _clamp(psinom + ke * S[w, S_MINT], P[w, P_PSIMIN], P[w, P_PSIMAX])
    S[w, S_MAG] = mag
    if now:
        phi = P[w, P_PHI]
        n_out = 0
        q_out = 0
        agree = True
        for j in range(3):
            qj = (il[j] >= phi) or (il[j] > -phi and q[w, j] == 1)
            q[w, j] = 1 if qj else 0
            if not (-phi < il[j] < phi):
                if n_out > 0 and q[w, j] != q_out:
                    agree = False
                q_out = q[w, j]
                n_out += 1
        for j in range(3):
            if n_out > 0 and agree and -phi < il[j] < phi:
                q[w, j] = 1 - q_out
            sw[w, j] = 1 - q[w, j]
            if abs(il[j]) <= phi:
                entered[w, j] = 1.0
            if entered[w, j] > 0 and abs(il[j]) > S[w, S_POSTPEAK]:
                S[w, S_POSTPEAK] = abs(il[j])
        return
    vref = np.empty(3)
    dvref = np.empty(3)
    td = P[w, P_TD]
    for j in range(3):
        shift = 0.0 if j == 0 else (-2.0 * math.pi / 3.0 if j == 1 else 2.0 * math.pi / 3.0)
        if kind == 0:
            ang = theta + shift
            ref = mag * math.cos(ang)
            dref = -mag * speed * math.sin(ang)
            vref[j] = (dref + (ref - psi_meas[w, j]) / td) / omega
            dvref[j] = -speed * speed / omega * ref
        else:
            ang = theta + 0.5 * math.pi + shift
            amp = mag * (speed / omega)
            vref[j] = amp * math.cos(ang)
            dvref[j] = -speed * math.sin(ang) * amp
    cf = P[w, P_CF]
    zv = P[w, P_ZV]
    for j in range(3):
        icr = cf * dvref[j] / omega + (vref[j] - vp[j]) / zv
        err[j] = P[w, P_LF] * (icr - ic[j])
    mean = (err[0] + err[1] + err[2]) / 3.0
    for j in range(3):
        err[j] -= mean
    _hysteresis(err, P[w, P_BAND], sw, w)


@njit(cache=True)
def run_chunk(n0, n1, dt, omega, v_peak, decim,
              # network
              v, i, vc, psi, f, t, kind, r, k_l, m_c, m_mag, closed, opening, l0, ls, knee,
              G, hist, seg, e, yinv, n, rhs, heff,
              # generators
              P, S, pcc, src, cap, leak, magb, psi_meas, v_prev, sw, q,
              flux_acc, win, win_sum, entered, log, ctr,
              # recording
              rec_buses, rec_time, rec_data, peaks, seg_peaks, cyc_buf, cyc_cos,
              cyc_sin, cyc_t, cyc_mean, cyc_fund):
    """Advance steps ``n0 .. n1-1``; returns (next step, stop code, info)."""
    nw = P.shape[0]
    vp = np.empty(3)
    il = np.empty(3)
    ic = np.empty(3)
    nch = rec_data.shape[1]
    row = np.empty(nch)
    spc = cyc_buf.shape[1]
    gamma_any = False
    for step in range(n0, n1):
        tt = step * dt
        for w in range(nw):
            for j in range(3):
                vp[j] = v[pcc[w, j]]
                il[j] = i[src[w, j]]
                ic[j] = i[cap[w, j]]
            controller_step(P, S, w, tt, dt, omega, vp, il, ic, psi_meas, v_prev, sw, q,
                            flux_acc, win, win_sum, entered, log, ctr, step)
            vdc = S[w, S_VDC] / v_peak
            ssum = sw[w, 0] + sw[w, 1] + sw[w, 2]
            u_on = -(vdc / 3.0) * ssum
            # DC-link draw with the step-average filter current, the end
            # value predicted from the filter equation at the held PCC voltage
            kf = 2.0 * P[w, P_LF] / (omega * dt)
            rf = P[w, P_RF]
            pe = 0.0
            for j in range(3):
                ej = vdc * sw[w, j] + u_on
                e[src[w, j]] = ej
                i1 = (2.0 * (ej - vp[j]) + (kf - rf) * il[j]) / (kf + rf)
                pe += ej * 0.5 * (il[j] + i1)
            pe = (2.0 / 3.0) * pe * P[w, P_SBASE]
            S[w, S_PE] = pe
            S[w, S_PESUM] += pe
            if not plant_step(P, S, w, pe, dt):
                return step, FAULT_DC, w
        ok = net_solve(v, i, vc, psi, f, t, kind, m_c, m_mag, G, hist, e, yinv, n, rhs, heff)
        if not ok:
            return step, FAULT_NAN, -1
        changed = net_refresh(v, i, vc, psi, f, t, kind, r, k_l, m_c, m_mag, closed, opening,
                              l0, ls, knee, G, hist, seg)
        # ---- record the state at (step + 1) * dt
        nxt = step + 1
        tn = nxt * dt
        for w in range(nw):
            base = w * N_WCH
            row[base + 0] = S[w, S_VDC]
            row[base + 1] = 0.0
            row[base + 2] = S[w, S_PIN] / 1e6
            row[base + 3] = S[w, S_IS] * S[w, S_VDC] / 1e6
            row[base + 4] = S[w, S_TFLAG]
            for j in range(3):
                row[base + 5 + j] = i[src[w, j]]
                row[base + 8 + j] = i[leak[w, j]] + i[magb[w, j]]
                row[base + 11 + j] = v[pcc[w, j]]
                row[base + 14 + j] = psi[magb[w, j]]
                row[base + 17 + j] = magnetizing(psi[magb[w, j]], l0[magb[w, j]],
                                                 knee[magb[w, j]], ls[magb[w, j]])
                if S[w, S_CROSS_T] < 0 and abs(i[src[w, j]]) >= P[w, P_GAMMA]:
                    S[w, S_CROSS_T] = tn
            row[base + 20] = S[w, S_DTH]
        off = nw * N_WCH
        for b in range(rec_buses.shape[0]):
            for j in range(3):
                row[off + 3 * b + j] = v[rec_buses[b, j]]
        for k in range(nch):
            a = abs(row[k])
            if a > peaks[k]:
                peaks[k] = a
            if a > seg_peaks[k]:
                seg_peaks[k] = a
        # per-cycle statistics of the transformer currents
        pos = ctr[3]
        for w in range(nw):
            for j in range(3):
                cyc_buf[3 * w + j, pos] = row[w * N_WCH + C_IT + j]
        pos += 1
        if pos == spc:
            pos = 0
            c = ctr[1]
            if c < cyc_t.shape[0]:
                cyc_t[c] = tn
                for ch in range(cyc_buf.shape[0]):
                    sm = 0.0
                    re = 0.0
                    im = 0.0
                    for k in range(spc):
                        x = cyc_buf[ch, k]
                        sm += x
                        re += x * cyc_cos[k]
                        im += x * cyc_sin[k]
                    cyc_mean[c, ch] = sm / spc
                    cyc_fund[c, ch] = 2.0 / spc * math.sqrt(re * re + im * im)
            ctr[1] = c + 1
        ctr[3] = pos
        if nxt % decim == 0:
            rr = ctr[0]
            rec_time[rr] = tn
            for w in range(nw):
                row[w * N_WCH + 1] = S[w, S_PESUM] / decim / 1e6
                S[w, S_PESUM] = 0.0
            for k in range(nch):
                rec_data[rr, k] = row[k]
            ctr[0] = rr + 1
        if changed:
            return nxt, TOPOLOGY, 0
    return n1, DONE, 0
