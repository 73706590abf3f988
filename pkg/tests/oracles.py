"""Independent reference implementations used only by the test-suite.

Geodesy is evaluated with mpmath at 50 significant digits straight from the
closed forms. Nothing here imports seqnav's numerical code.
"""

import mpmath as mp

mp.mp.dps = 50

A_WGS84 = mp.mpf(6378137)
E2_WGS84 = mp.mpf("0.00669437999014")


def rad(deg):
    return mp.mpf(deg) * mp.pi / 180


def dlon(lon1, lon2):
    d = mp.mpf(lon2) - mp.mpf(lon1)
    while d > 180:
        d -= 360
    while d <= -180:
        d += 360
    return rad(d)


def radii(phi, a=A_WGS84, e2=E2_WGS84):
    phi = mp.mpf(phi)
    w = 1 - e2 * mp.sin(phi) ** 2
    return a * (1 - e2) / w ** mp.mpf(1.5), a / mp.sqrt(w)


def bearing(lat1, lon1, lat2, lon2):
    p1, p2 = rad(lat1), rad(lat2)
    dl = dlon(lon1, lon2)
    b = mp.atan2(mp.sin(dl) * mp.cos(p2), mp.cos(p1) * mp.sin(p2) - mp.sin(p1) * mp.cos(p2) * mp.cos(dl))
    if b <= -mp.pi:
        b += 2 * mp.pi
    return b


def global_to_local(r_lat, r_lon, c_lat, c_lon, beta):
    phi_c = rad(c_lat)
    cm, ce = radii(phi_c)
    dx = ce * mp.cos(phi_c) * dlon(c_lon, r_lon)
    dy = cm * rad(mp.mpf(r_lat) - mp.mpf(c_lat))
    beta = mp.mpf(beta)
    return mp.cos(beta) * dx - mp.sin(beta) * dy, mp.sin(beta) * dx + mp.cos(beta) * dy


def haversine(lat1, lon1, lat2, lon2):
    p1, p2 = rad(lat1), rad(lat2)
    _, r = radii((p1 + p2) / 2)
    h = mp.sin((p2 - p1) / 2) ** 2 + mp.cos(p1) * mp.cos(p2) * mp.sin(dlon(lon1, lon2) / 2) ** 2
    return 2 * r * mp.asin(mp.sqrt(h))


# -- scalar-loop oracles for the learning stack --------------------------------

def gru_step_loop(z, h, Wr, Wu, Wh, br, bu, bh):
    """Literal per-component loop of the GRU update (plain Python floats)."""
    import math

    n_in, n_h = len(z), len(h)
    zh = list(z) + list(h)
    r = [0.0] * n_h
    u = [0.0] * n_h
    for i in range(n_h):
        sr = br[i]
        su = bu[i]
        for j in range(n_in + n_h):
            sr += Wr[i][j] * zh[j]
            su += Wu[i][j] * zh[j]
        r[i] = 1.0 / (1.0 + math.exp(-sr))
        u[i] = 1.0 / (1.0 + math.exp(-su))
    zrh = list(z) + [r[k] * h[k] for k in range(n_h)]
    out = [0.0] * n_h
    for i in range(n_h):
        s = bh[i]
        for j in range(n_in + n_h):
            s += Wh[i][j] * zrh[j]
        cand = math.tanh(s)
        out[i] = (1.0 - u[i]) * h[i] + u[i] * cand
    return out


def rollout_loop(h, W, b):
    """Affine deltas per step followed by a running sum from the origin."""
    pts = []
    wx, wy = 0.0, 0.0
    for ell in range(len(W)):
        dx = b[ell][0]
        dy = b[ell][1]
        for j in range(len(h)):
            dx += W[ell][0][j] * h[j]
            dy += W[ell][1][j] * h[j]
        wx, wy = wx + dx, wy + dy
        pts.append((wx, wy))
    return pts


def motion_reference_formula(w1, w2, gamma):
    import math

    ax, ay = (w1[0] + w2[0]) / 2, (w1[1] + w2[1]) / 2
    return math.atan2(ay, ax), gamma * math.sqrt((w1[0] - w2[0]) ** 2 + (w1[1] - w2[1]) ** 2), (ax, ay)


def pid_loop(errors, kp, ki, kd, dt, clamp=1.0):
    """Textbook discrete PID with a clamped integral and no derivative on the first tick."""
    out = []
    integ = 0.0
    prev = None
    for e in errors:
        integ = max(-clamp, min(clamp, integ + e * dt))
        d = 0.0 if prev is None else (e - prev) / dt
        out.append(kp * e + ki * integ + kd * d)
        prev = e
    return out


def mlp_loop(h, W1, b1, W2, b2):
    import math

    hid = []
    for i in range(len(b1)):
        s = b1[i]
        for j in range(len(h)):
            s += W1[i][j] * h[j]
        hid.append(math.tanh(s))
    out = []
    for k in range(3):
        s = b2[k]
        for i in range(len(hid)):
            s += W2[k][i] * hid[i]
        out.append(max(-1.0, min(1.0, s)))
    return out


def seg_loss_loop(pred, truth, floor=1e-7, eps=1e-6):
    import math

    n = len(pred)
    bce = 0.0
    inter = sp = st = 0.0
    for p, t in zip(pred, truth):
        p = min(1 - floor, max(floor, p))
        bce -= t * math.log(p) + (1 - t) * math.log(1 - p)
        inter += p * t
        sp += p
        st += t
    return bce / n + 1 - (2 * inter + eps) / (sp + st + eps)


def l1l2_loop(pred, truth):
    n = len(pred)
    return sum(abs(p - t) for p, t in zip(pred, truth)) / n + sum((p - t) ** 2 for p, t in zip(pred, truth)) / n


# -- per-pixel BEV reference --------------------------------------------------------

def bev_loop(labels, depth, fx, fy, cx, cy, R, t, rows=128, cols=256, classes=20, cell=0.125,
             half_width=16.0, ceiling=2.5, prev=None, alpha=0.5):
    """Majority-vote BEV built one pixel at a time, then EMA-fused with ``prev``.

    ``labels`` and ``depth`` are nested lists indexed ``[v][u]``; ``R`` and
    ``t`` map camera optical-frame points to the robot frame.
    """
    import math

    import numpy as np

    votes = {}
    for v in range(len(depth)):
        for u in range(len(depth[v])):
            d = float(depth[v][u])
            if not (math.isfinite(d) and d > 0):
                continue
            xc = (u - cx) * d / fx
            yc = (v - cy) * d / fy
            zc = d
            x = R[0][0] * xc + R[0][1] * yc + R[0][2] * zc + t[0]
            y = R[1][0] * xc + R[1][1] * yc + R[1][2] * zc + t[1]
            z = R[2][0] * xc + R[2][1] * yc + R[2][2] * zc + t[2]
            if not x > 0 or z > ceiling:
                continue
            i = math.floor(x / cell)
            j = math.floor((y + half_width) / cell)
            if 0 <= i < rows and 0 <= j < cols:
                counts = votes.setdefault((i, j), [0] * classes)
                counts[labels[v][u]] += 1
    grid = np.zeros((rows, cols, classes))
    for (i, j), counts in votes.items():
        best = 0
        for c in range(1, classes):
            if counts[c] > counts[best]:
                best = c
        grid[i, j, best] = 1.0
    if prev is None or alpha == 1.0:
        return grid
    out = np.zeros_like(grid)
    # cells that are zero in both inputs stay exactly zero
    for i, j, c in zip(*np.nonzero((grid != 0) | (prev != 0))):
        p = float(prev[i, j, c])
        out[i, j, c] = alpha * (float(grid[i, j, c]) - p) + p
    return out
