"""Compiled inner loops: Dormand-Prince stepping, model right-hand sides,
parameter preparation, Gaussian log-likelihood and the annealing walk.

Everything here is called millions of times per experiment, so the model
dispatch is done with small integer codes instead of Python callables.
"""
import numpy as np
from numba import njit

RHS_LINEAR = 0
RHS_BATCH = 1

PREP_TOY = 0
PREP_CCM = 1
PREP_CML = 2
PREP_BR = 3

OK = 0
FAIL_UNDERFLOW = 1
FAIL_MAX_STEPS = 2
FAIL_NONFINITE = 3

# Dormand-Prince 5(4) tableau with the 4th order continuous extension.
C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0])
A = np.array([
    [0.0, 0.0, 0.0, 0.0, 0.0],
    [1 / 5, 0.0, 0.0, 0.0, 0.0],
    [3 / 40, 9 / 40, 0.0, 0.0, 0.0],
    [44 / 45, -56 / 15, 32 / 9, 0.0, 0.0],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729, 0.0],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
])
B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84])
E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200,
              -22 / 525, 1 / 40])
P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608,
     -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933,
     87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304,
     -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408,
     701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883,
     -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423,
     69997945 / 29380423],
])

SAFETY = 0.9
MIN_FACTOR = 0.2
MAX_FACTOR = 10.0
EPS = np.finfo(np.float64).eps


@njit(cache=True)
def rhs(kind, t, x, p, dx, row):
    """Write f(t, x) into ``dx[row]``."""
    if kind == RHS_LINEAR:
        # p = [K row-major, input amplitude, input decay rate]
        d = x.shape[0]
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += p[i * d + j] * x[j]
            dx[row, i] = acc
        amp = p[d * d]
        if amp != 0.0:
            dx[row, 0] += amp * np.exp(-p[d * d + 1] * t)
    else:
        # p = (b1, b2, mu_m, K_s, Y, K_d)
        growth = p[2] * x[1] * x[0] / (p[3] + x[1])
        dx[row, 0] = growth - p[5] * x[0]
        dx[row, 1] = -growth / p[4]


@njit(cache=True)
def prep(kind, theta, consts, p, x0):
    """Fill the rhs parameter block ``p`` and initial state ``x0`` from theta."""
    if kind == PREP_TOY:
        p[0] = -theta[0] * theta[1]
        p[1] = 0.0
        p[2] = 0.0
        x0[0] = consts[0]
    elif kind == PREP_CCM:
        n = int(consts[0])
        for i in range(n * n):
            p[i] = 0.0
        for i in range(n - 1):
            up = theta[n + i]            # k_{i,i+1}
            low = theta[2 * n - 1 + i]   # k_{i+1,i}
            p[i * n + i + 1] = up
            p[(i + 1) * n + i] = low
        for i in range(n):
            out = theta[i]
            for r in range(n):
                if r != i:
                    out += p[r * n + i]
            p[i * n + i] = -out
        p[n * n] = consts[1] * consts[2]
        p[n * n + 1] = consts[2]
        for i in range(n):
            x0[i] = 0.0
    elif kind == PREP_CML:
        k01, k02, k03, k04 = theta[0], theta[1], theta[2], theta[3]
        k12, k21, k23, k42, k34, k43 = (theta[4], theta[5], theta[6],
                                        theta[7], theta[8], theta[9])
        for i in range(16):
            p[i] = 0.0
        p[0] = -(k01 + k21)
        p[1] = k12
        p[4] = k21
        p[5] = -(k02 + k12 + k42)
        p[6] = k23
        p[10] = -(k03 + k23 + k43)
        p[11] = k34
        p[13] = k42
        p[14] = k43
        p[15] = -(k04 + k34)
        p[16] = consts[0] * consts[1]
        p[17] = consts[1]
        for i in range(4):
            x0[i] = 0.0
    else:
        for i in range(6):
            p[i] = theta[i]
        x0[0] = theta[0]
        x0[1] = theta[1]


@njit(cache=True)
def _rms_scaled(v, scale):
    acc = 0.0
    for i in range(v.shape[0]):
        r = v[i] / scale[i]
        acc += r * r
    return np.sqrt(acc / v.shape[0])


@njit(cache=True)
def _finite(v):
    for i in range(v.shape[0]):
        if not np.isfinite(v[i]):
            return False
    return True


@njit(cache=True)
def _finite_row(k, row):
    for i in range(k.shape[1]):
        if not np.isfinite(k[row, i]):
            return False
    return True


@njit(cache=True)
def dopri5(kind, p, x0, grid, rtol, atol, max_steps, out):
    """Integrate from grid[0] with x0, writing states at every grid time.

    Returns (status, time reached).
    """
    d = x0.shape[0]
    n_out = grid.shape[0]
    t = grid[0]
    x = x0.copy()
    for j in range(d):
        out[0, j] = x[j]
    if n_out == 1:
        return OK, t
    t_end = grid[n_out - 1]

    k = np.empty((7, d))
    xs = np.empty(d)
    xn = np.empty(d)
    err = np.empty(d)
    scale = np.empty(d)

    rhs(kind, t, x, p, k, 0)
    if not _finite_row(k, 0):
        return FAIL_NONFINITE, t

    # starting step (Hairer, Norsett & Wanner, II.4)
    for j in range(d):
        scale[j] = atol + abs(x[j]) * rtol
    d0 = _rms_scaled(x, scale)
    for j in range(d):
        err[j] = k[0, j]
    d1 = _rms_scaled(err, scale)
    if d0 < 1e-5 or d1 < 1e-5:
        h0 = 1e-6
    else:
        h0 = 0.01 * d0 / d1
    h0 = min(h0, t_end - t)
    for j in range(d):
        xs[j] = x[j] + h0 * k[0, j]
    rhs(kind, t + h0, xs, p, k, 1)
    for j in range(d):
        err[j] = k[1, j] - k[0, j]
    d2 = _rms_scaled(err, scale) / h0
    if not np.isfinite(d2):
        h1 = h0
    elif d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    h = min(100.0 * h0, h1, t_end - t)

    idx = 1
    steps = 0
    rejected = False
    while idx < n_out:
        if steps >= max_steps:
            return FAIL_MAX_STEPS, t
        min_step = 10.0 * EPS * max(abs(t), 1.0)
        if h < min_step:
            return FAIL_UNDERFLOW, t
        last = False
        if t + h >= t_end:
            h = t_end - t
            last = True

        for s in range(1, 6):
            for j in range(d):
                acc = x[j]
                for q in range(s):
                    acc += h * A[s, q] * k[q, j]
                xs[j] = acc
            rhs(kind, t + C[s] * h, xs, p, k, s)
        for j in range(d):
            acc = x[j]
            for q in range(6):
                acc += h * B[q] * k[q, j]
            xn[j] = acc
        t_new = t_end if last else t + h
        rhs(kind, t_new, xn, p, k, 6)

        for j in range(d):
            acc = 0.0
            for q in range(7):
                acc += E[q] * k[q, j]
            err[j] = h * acc
            scale[j] = atol + max(abs(x[j]), abs(xn[j])) * rtol
        norm = _rms_scaled(err, scale)

        if not np.isfinite(norm) or not _finite(xn) or not _finite_row(k, 6):
            h *= MIN_FACTOR
            rejected = True
            steps += 1
            continue

        if norm < 1.0:
            if norm == 0.0:
                factor = MAX_FACTOR
            else:
                factor = min(MAX_FACTOR, SAFETY * norm ** -0.2)
            if rejected:
                factor = min(1.0, factor)
            while idx < n_out and grid[idx] <= t_new:
                if grid[idx] == t_new:
                    for j in range(d):
                        out[idx, j] = xn[j]
                else:
                    th = (grid[idx] - t) / h
                    th2 = th * th
                    th3 = th2 * th
                    th4 = th3 * th
                    for j in range(d):
                        acc = 0.0
                        for q in range(7):
                            acc += k[q, j] * (P[q, 0] * th + P[q, 1] * th2
                                              + P[q, 2] * th3 + P[q, 3] * th4)
                        out[idx, j] = x[j] + h * acc
                idx += 1
            t = t_new
            for j in range(d):
                x[j] = xn[j]
                k[0, j] = k[6, j]
            h *= factor
            rejected = False
        else:
            h *= max(MIN_FACTOR, SAFETY * norm ** -0.2)
            rejected = True
        steps += 1
    return OK, t


@njit(cache=True)
def neg_log_likelihood(prep_kind, rhs_kind, theta, consts, times, ys, obs_idx,
                       inv_var, log_norm, rtol, atol, max_steps, p, x0, states):
    """Negative Gaussian log-likelihood; +inf when integration fails."""
    prep(prep_kind, theta, consts, p, x0)
    status, _ = dopri5(rhs_kind, p, x0, times, rtol, atol, max_steps, states)
    if status != OK:
        return np.inf
    acc = 0.0
    for i in range(times.shape[0]):
        for j in range(obs_idx.shape[0]):
            r = ys[i, j] - states[i, obs_idx[j]]
            acc += r * r * inv_var[j]
    val = 0.5 * acc + log_norm
    if not np.isfinite(val):
        return np.inf
    return val


@njit(cache=True)
def evaluate_points(prep_kind, rhs_kind, points, consts, times, ys, obs_idx,
                    inv_var, log_norm, rtol, atol, max_steps, n_p, d):
    p = np.empty(n_p)
    x0 = np.empty(d)
    states = np.empty((times.shape[0], d))
    vals = np.empty(points.shape[0])
    for i in range(points.shape[0]):
        vals[i] = neg_log_likelihood(prep_kind, rhs_kind, points[i], consts,
                                     times, ys, obs_idx, inv_var, log_norm,
                                     rtol, atol, max_steps, p, x0, states)
    return vals


@njit(cache=True)
def reflect(v, lo, hi):
    w = hi - lo
    if w <= 0.0:
        return lo
    u = (v - lo) % (2.0 * w)
    if u > w:
        u = 2.0 * w - u
    return lo + u


@njit(cache=True)
def anneal(prep_kind, rhs_kind, start, f_start, t0, lo, hi, normals, uniforms,
           cool_every, cool_factor, step_frac, consts, times, ys, obs_idx,
           inv_var, log_norm, rtol, atol, max_steps, n_p, d):
    """Metropolis walk with geometric cooling and reflecting proposals.

    ``normals`` (M x n) and ``uniforms`` (M,) are the pre-drawn random
    numbers; one row is consumed per evaluation.  Returns the best point,
    its objective, the number of accepted moves and the final temperature.
    """
    n = start.shape[0]
    p = np.empty(n_p)
    x0 = np.empty(d)
    states = np.empty((times.shape[0], d))
    cur = start.copy()
    f_cur = f_start
    best = start.copy()
    f_best = f_start
    cand = np.empty(n)
    temp = t0
    accepted = 0
    for it in range(normals.shape[0]):
        if it > 0 and it % cool_every == 0:
            temp *= cool_factor
        shrink = np.sqrt(temp / t0)
        for i in range(n):
            step = step_frac * (hi[i] - lo[i]) * shrink
            cand[i] = reflect(cur[i] + step * normals[it, i], lo[i], hi[i])
        f = neg_log_likelihood(prep_kind, rhs_kind, cand, consts, times, ys,
                               obs_idx, inv_var, log_norm, rtol, atol,
                               max_steps, p, x0, states)
        if not np.isfinite(f):
            continue
        delta = f - f_cur
        if delta <= 0.0 or uniforms[it] < np.exp(-delta / temp):
            for i in range(n):
                cur[i] = cand[i]
            f_cur = f
            accepted += 1
            if f < f_best:
                f_best = f
                for i in range(n):
                    best[i] = cand[i]
    return best, f_best, accepted, temp
