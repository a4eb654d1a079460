"""Right-censored exponential scale mixtures.

This is the two-state chain with one absorbing state and every path
starting in the other state: the absorption time is exponential with rate
``theta`` and is censored at the horizon ``T``.  The null rate is 1.

Observations are ``x = min(Y, T)``; ``x == T`` marks a censored value.
Passing ``T = inf`` gives the uncensored model wherever that makes sense.
"""

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .streams import stream

LOG_4PI = math.log(4.0 * math.pi)
GUMBEL_MEDIAN = -math.log(math.log(2.0))
SERIES_CUTOFF = 1e-4
P_TOL = 1e-12


@dataclass(frozen=True)
class CensExpModel:
    theta: float
    T: float

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError("theta must be positive")
        if not self.T > 0:
            raise ValueError("T must be positive")


@dataclass(frozen=True, eq=False)
class CensExpSample:
    x: np.ndarray
    T: float

    def __post_init__(self):
        x = np.array(self.x, dtype=float).ravel()
        if x.size == 0:
            raise ValueError("empty sample")
        if np.any(x <= 0) or np.any(x > self.T):
            raise ValueError("observations must lie in (0, T]")
        x.setflags(write=False)
        object.__setattr__(self, "x", x)

    @property
    def n(self):
        return self.x.size

    @property
    def censored(self):
        return self.x == self.T

    def split(self):
        """Uncensored values and the number of censored ones."""
        c = self.censored
        return self.x[~c], int(c.sum())


@dataclass(frozen=True)
class ThetaSearch:
    """Geometric grid over ``[theta_min, theta_max]`` followed by
    golden-section refinement (in ``log theta``) of the best local maxima."""

    theta_min: float
    theta_max: float
    grid_points: int = 512
    refine_tol: float = 1e-6
    n_refine: int = 3

    def __post_init__(self):
        if not 0 < self.theta_min < self.theta_max:
            raise ValueError("need 0 < theta_min < theta_max")
        if self.grid_points < 16:
            raise ValueError("grid_points must be at least 16")
        if not self.refine_tol > 0:
            raise ValueError("refine_tol must be positive")

    @classmethod
    def default(cls, n, T, **kw):
        """Two-sided search ``[1/(T n), 10 n]``."""
        return cls(1.0 / (T * n), 10.0 * n, **kw)

    @classmethod
    def one_sided(cls, n, **kw):
        """The interval ``(log n, n / (log n)^4)``, used for the one-sided
        uncensored problem; it is empty unless ``n`` is very large."""
        lo, hi = math.log(n), n / math.log(n) ** 4
        if not lo < hi:
            raise ValueError(f"(log n, n/(log n)^4) is empty for n={n}")
        return cls(lo, hi, **kw)


def density(x, model):
    x = np.asarray(x, dtype=float)
    th, T = model.theta, model.T
    inside = (x > 0) & (x < T)
    out = np.where(inside, th * np.exp(-th * np.where(inside, x, 0.0)), 0.0)
    out = np.where(x == T, math.exp(-th * T), out)
    return out[()] if out.ndim == 0 else out


def ratio(x, theta, T):
    """``f(x; theta) / f(x; 1)`` on the support."""
    x = np.asarray(x, dtype=float)
    out = np.where(x == T, np.exp(-(theta - 1.0) * T), theta * np.exp(-(theta - 1.0) * x))
    return out[()] if out.ndim == 0 else out


def _phi(a, T):
    """``(1 - exp(-a T)) / a`` with the removable singularity at 0 filled in."""
    a = np.asarray(a, dtype=float)
    if math.isinf(T):
        with np.errstate(divide="ignore"):
            out = np.where(a > 0, 1.0 / np.where(a > 0, a, 1.0), np.inf)
        return out
    small = np.abs(a) < SERIES_CUTOFF
    aT = a * T
    series = T * (1.0 - aT / 2.0 + aT ** 2 / 6.0 - aT ** 3 / 24.0)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        direct = -np.expm1(-aT) / np.where(small, 1.0, a)
    return np.where(small, series, direct)


def _scalar(out):
    return out[()] if np.ndim(out) == 0 else out


def v_theta(theta, T):
    """Null variance of the density ratio, ``(theta-1)^2 phi(2 theta - 1)``."""
    theta = np.asarray(theta, dtype=float)
    return _scalar((theta - 1.0) ** 2 * _phi(2.0 * theta - 1.0, T))


def cov_scores(theta1, theta2, T):
    t1 = np.asarray(theta1, dtype=float)
    t2 = np.asarray(theta2, dtype=float)
    return _scalar((t1 - 1.0) * (t2 - 1.0) * _phi(t1 + t2 - 1.0, T))


def theta_of(s):
    """Scale transform ``theta = e^s + 1/2``."""
    return np.exp(s) + 0.5


def _rho_abs(s, t, T=None):
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    base = 1.0 / np.cosh((s - t) / 2.0)
    if T is None or math.isinf(T):
        return base
    es, et = np.exp(s), np.exp(t)
    log_cens = (np.log(-np.expm1(-T * (es + et)))
                - 0.5 * (np.log(-np.expm1(-2 * T * es)) + np.log(-np.expm1(-2 * T * et))))
    return base * np.exp(log_cens)


def rho(s, t, T=None):
    """Correlation of the standardised scores at ``theta(s)`` and ``theta(t)``.

    Without ``T`` this is the uncensored ``1 / cosh((s - t)/2)``; with ``T``
    the censoring factor is included.  The sign is negative when the two
    rates lie on opposite sides of the null rate 1.
    """
    sign = np.sign((np.exp(np.asarray(s, float)) - 0.5) * (np.exp(np.asarray(t, float)) - 0.5))
    return _scalar(sign * _rho_abs(s, t, T))


def _one_minus_rho_abs(t, delta, T):
    # 1 - sech(x) = 2 sinh(x/2)^2 / cosh(x), free of cancellation.
    x = delta / 2.0
    one_minus_base = 2.0 * np.sinh(x / 2.0) ** 2 / np.cosh(x)
    if T is None or math.isinf(T):
        return one_minus_base
    es, et = np.exp(t), np.exp(t + delta)
    log_cens = (np.log(-np.expm1(-T * (es + et)))
                - 0.5 * (np.log(-np.expm1(-2 * T * es)) + np.log(-np.expm1(-2 * T * et))))
    base = 1.0 / np.cosh(x)
    return one_minus_base + base * (-np.expm1(log_cens))


def local_stationarity_estimate(t, T=None, deltas=None):
    """Estimate ``V(t)`` in ``|rho(t, t + d)| = 1 - V(t) d^2 + o(d^2)``.

    Returns the ratios ``(1 - |rho|) / d^2`` for each ``d`` and their
    Richardson extrapolation to ``d = 0`` (the polynomial in ``d`` through
    all the points).  With censoring the ratio has a term linear in ``d``,
    so the extrapolation cannot assume an expansion in ``d^2`` alone.
    """
    if deltas is None:
        deltas = 0.2 / 2.0 ** np.arange(6)
    deltas = np.asarray(deltas, dtype=float)
    if np.any(deltas <= 0):
        raise ValueError("deltas must be positive")
    ratios = _one_minus_rho_abs(t, deltas, T) / deltas ** 2
    h = deltas
    # Neville's scheme evaluated at h = 0.
    table = ratios.copy()
    k = len(h)
    for level in range(1, k):
        for i in range(k - level):
            table[i] = (h[i] * table[i + 1] - h[i + level] * table[i]) / (h[i] - h[i + level])
    return ratios, float(table[0])


def long_range_ratio(delta, t=0.0, T=None):
    """``rho(t, t + delta) * exp(delta / 2)``; tends to 2 when uncensored."""
    return float(_rho_abs(t, t + delta, T) * math.exp(delta / 2.0))


# ---------------------------------------------------------------------------
# Scores and likelihood ratio statistics


def score_statistic(sample, theta):
    """Standardised score ``(n v)^(-1/2) sum(r(x_i) - 1)``."""
    v = v_theta(theta, sample.T)
    if not v > 0:
        raise ValueError("score is undefined at theta = 1 (zero variance)")
    if not np.isfinite(v):
        raise ValueError("score variance is infinite at this theta")
    y = _log_ratio(sample.x, theta, sample.T)
    return float(np.expm1(y).sum() / math.sqrt(sample.n * v))


def _log_ratio(x, theta, T):
    return np.where(x == T, -(theta - 1.0) * T, math.log(theta) - (theta - 1.0) * x)


def _solve_p(Y, yg, wg):
    """Maximise ``sum log(1 + p y)`` over ``p`` in [0, 1], row by row.

    ``Y`` (m, L) holds individual values of ``y = r - 1``; ``yg`` and ``wg``
    (m, G) hold values shared by ``wg`` points each (censored points, and
    points whose ratio underflows to 0).  The objective is concave; the root
    of its derivative is found by Newton steps kept inside a shrinking
    bisection bracket, to an absolute tolerance of 1e-12 in ``p``.
    """
    m = Y.shape[0]
    p = np.zeros(m)
    has = wg > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        d0 = Y.sum(axis=1) + (wg * yg).sum(axis=1)
        d1 = (Y / (1.0 + Y)).sum(axis=1) + np.where(has, wg * yg / (1.0 + yg), 0.0).sum(axis=1)
    d1 = np.where(np.isnan(d1), -np.inf, d1)
    p[(d1 >= 0) & (d0 > 0)] = 1.0
    rows = np.flatnonzero((d0 > 0) & (d1 < 0))
    if rows.size:
        Yr, ygr, wgr = Y[rows], yg[rows], wg[rows]
        lo, hi = np.zeros(rows.size), np.ones(rows.size)
        den = (Yr ** 2).sum(axis=1) + (wgr * ygr ** 2).sum(axis=1)
        x = np.clip(d0[rows] / den, 0.0, 1.0)
        x = np.where((x > 0) & (x < 1), x, 0.5)
        live = np.arange(rows.size)
        for _ in range(200):
            xl = x[live]
            q = Yr[live] / (1.0 + xl[:, None] * Yr[live])
            qg = ygr[live] / (1.0 + xl[:, None] * ygr[live])
            wl = wgr[live]
            g1 = q.sum(axis=1) + (wl * qg).sum(axis=1)
            g2 = -((q ** 2).sum(axis=1) + (wl * qg ** 2).sum(axis=1))
            up = g1 > 0
            lo[live] = np.where(up, xl, lo[live])
            hi[live] = np.where(up, hi[live], xl)
            with np.errstate(divide="ignore", invalid="ignore"):
                newton = xl - g1 / g2
            inside = (newton > lo[live]) & (newton < hi[live])
            nx = np.where(inside, newton, 0.5 * (lo[live] + hi[live]))
            # An exact root stays put; the stopping test below then retires it.
            nx = np.where(g1 == 0, xl, nx)
            step = np.abs(nx - xl)
            x[live] = nx
            keep = (step > P_TOL) & (hi[live] - lo[live] > P_TOL) & (g1 != 0)
            live = live[keep]
            if not live.size:
                break
        p[rows] = x
    return p


def _objective(Y, yg, wg, p):
    with np.errstate(divide="ignore", invalid="ignore"):
        grp = np.where(wg > 0, wg * np.log1p(p[:, None] * yg), 0.0).sum(axis=1)
    return np.log1p(p[:, None] * Y).sum(axis=1) + grp


# exp(-40) is below half an ulp of 1, so expm1 of anything smaller is -1.
_UNDERFLOW = 40.0


class _Profile:
    """Profile statistic of one sample as a function of theta."""

    def __init__(self, sample, chunk_elems=2_000_000):
        x_u, self.k = sample.split()
        self.x = np.sort(x_u)
        self.T = sample.T
        self.chunk_elems = chunk_elems

    def rows(self, th):
        """Individual and grouped ``y`` values for a block of thetas."""
        th_min = th.min()
        L = self.x.size
        if th_min > 1.0:
            cut = (_UNDERFLOW + math.log(th_min)) / (th_min - 1.0)
            L = int(np.searchsorted(self.x, cut, side="right"))
        Y = np.expm1(np.log(th)[:, None] - (th - 1.0)[:, None] * self.x[None, :L])
        y_c = np.expm1(-(th - 1.0) * self.T) if math.isfinite(self.T) else np.zeros(th.size)
        yg = np.column_stack([y_c, np.full(th.size, -1.0)])
        wg = np.tile([float(self.k), float(self.x.size - L)], (th.size, 1))
        return Y, yg, wg

    def blocks(self, thetas):
        a = 0
        while a < thetas.size:
            th0 = thetas[a]
            L = self.x.size
            if th0 > 1.0:
                L = int(np.searchsorted(self.x, (_UNDERFLOW + math.log(th0)) / (th0 - 1.0), side="right"))
            b = a + max(1, self.chunk_elems // max(1, L))
            yield a, min(b, thetas.size)
            a = b

    def solve(self, thetas):
        thetas = np.asarray(thetas, dtype=float)
        lam, phat = np.zeros(thetas.size), np.zeros(thetas.size)
        order = np.argsort(thetas, kind="stable")
        ts = thetas[order]
        for a, b in self.blocks(ts):
            Y, yg, wg = self.rows(ts[a:b])
            p = _solve_p(Y, yg, wg)
            val = _objective(Y, yg, wg, p)
            lam[order[a:b]] = np.maximum(np.where(p > 0, val, 0.0), 0.0)
            phat[order[a:b]] = p
        return lam, phat

    def upper_bounds(self, thetas):
        """Upper bound on the profile statistic at each theta.

        Uses ``log(1+z) <= z - z^2/(2(1+z))`` for ``z >= 0`` and
        ``log(1+z) <= z - z^2/2`` for ``z < 0``, which bound the objective
        by ``p d0 - p^2 B / 2`` on [0, 1].
        """
        thetas = np.asarray(thetas, dtype=float)
        out = np.zeros(thetas.size)
        for a, b in self.blocks(thetas):
            Y, yg, wg = self.rows(thetas[a:b])
            d0 = Y.sum(axis=1) + (wg * yg).sum(axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                Bm = np.where(Y > 0, Y ** 2 / (1.0 + Y), Y ** 2).sum(axis=1)
                Bm = Bm + (wg * np.where(yg > 0, yg ** 2 / (1.0 + yg), yg ** 2)).sum(axis=1)
            with np.errstate(divide="ignore", invalid="ignore"):
                ub = np.where(d0 <= Bm, d0 ** 2 / (2.0 * Bm), d0 - Bm / 2.0)
            out[a:b] = np.where(d0 > 0, ub, 0.0)
        return out

    def grid(self, thetas, batch=8):
        """Exact profile values where they can matter for the maximum.

        Rows are solved in decreasing order of their upper bound until the
        next bound cannot beat the best exact value; the rest are ``-inf``.
        """
        thetas = np.asarray(thetas, dtype=float)
        ub = self.upper_bounds(thetas)
        lam = np.full(thetas.size, -np.inf)
        order = np.argsort(-ub, kind="stable")
        best = 0.0
        for a in range(0, order.size, batch):
            idx = order[a:a + batch]
            if ub[idx[0]] <= best:
                break
            vals, _ = self.solve(thetas[idx])
            lam[idx] = vals
            best = max(best, float(vals.max()))
        return lam


def _profile_many(x_u, k, T, thetas):
    """Profile statistic and maximising weight at each theta (no pruning)."""
    x = np.r_[x_u, np.full(k, T)]
    return _Profile(CensExpSample(x, T)).solve(thetas)


def profile_lambda(sample, theta):
    """Maximise the mixture log-likelihood ratio over the weight ``p``.

    Returns ``(lambda_p, p_hat)`` with ``lambda_p >= 0``; ``p_hat = 0``
    whenever the derivative at ``p = 0`` is not positive.
    """
    if not theta > 0:
        raise ValueError("theta must be positive")
    lam, p = _Profile(sample).solve([theta])
    return float(lam[0]), float(p[0])


@dataclass(frozen=True)
class SupResult:
    lam: float
    theta_hat: float
    p_hat: float


_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


def _golden_max(f, a, b, tol):
    c, d = b - _GOLD * (b - a), a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLD * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLD * (b - a)
            fd = f(d)
    return (c, fc) if fc >= fd else (d, fd)


def lambda_sup(sample, search=None):
    """Supremum of the profile statistic over ``theta``.

    The profile is evaluated on a geometric grid (rows whose upper bound
    cannot reach the running maximum are skipped) and the ``n_refine``
    highest local maxima are refined by golden-section search in
    ``log theta``.  A flat (all-zero) profile returns ``lambda = 0`` at
    ``theta = 1``.
    """
    if search is None:
        search = ThetaSearch.default(sample.n, sample.T)
    prof = _Profile(sample)
    u = np.linspace(math.log(search.theta_min), math.log(search.theta_max), search.grid_points)
    lam = prof.grid(np.exp(u))
    if not lam.max() > 0:
        return SupResult(0.0, 1.0, 0.0)
    left = np.r_[-np.inf, lam[:-1]]
    right = np.r_[lam[1:], -np.inf]
    peaks = np.flatnonzero((lam > 0) & (lam >= left) & (lam > right))
    # Highest first; ties broken toward smaller theta by the stable sort.
    peaks = peaks[np.argsort(-lam[peaks], kind="stable")][: search.n_refine]
    i0 = int(np.argmax(lam))
    best = (float(lam[i0]), float(u[i0]))

    def f(v):
        return prof.solve([math.exp(v)])[0][0]

    for i in peaks:
        a, b = u[max(i - 1, 0)], u[min(i + 1, u.size - 1)]
        v, fv = _golden_max(f, a, b, search.refine_tol)
        if fv > best[0] or (fv == best[0] and v < best[1]):
            best = (float(fv), float(v))
    theta_hat = math.exp(best[1])
    lam_hat, p_hat = prof.solve([theta_hat])
    return SupResult(float(lam_hat[0]), theta_hat, float(p_hat[0]))


def gumbel_center(lam, n):
    """``lambda - log log n + log(4 pi)``."""
    if n < 16:
        raise ValueError("centering needs n >= 16")
    return lam - math.log(math.log(n)) + LOG_4PI


def gumbel_cdf(x):
    return np.exp(-np.exp(-np.asarray(x, dtype=float)))[()]


def sample_censored(theta, T, n, rng):
    if not theta > 0 or not T > 0 or n < 1:
        raise ValueError("need theta > 0, T > 0, n >= 1")
    x = np.minimum(rng.exponential(1.0 / theta, size=n), T)
    return CensExpSample(x, T)


# ---------------------------------------------------------------------------
# Monte Carlo of the sup statistic


@dataclass
class CensoredMC:
    n: int
    T: float
    theta_true: float
    lam: np.ndarray
    theta_hat: np.ndarray
    p_hat: np.ndarray

    @property
    def centered(self):
        return np.array([gumbel_center(v, self.n) for v in self.lam])

    def ks_gumbel(self):
        """Kolmogorov-Smirnov distance of the centred values to the Gumbel law."""
        g = np.sort(self.centered)
        F = gumbel_cdf(g)
        m = g.size
        return float(max(np.max(np.arange(1, m + 1) / m - F), np.max(F - np.arange(m) / m)))

    def cdf_table(self, points=None):
        g = np.sort(self.centered)
        if points is None:
            points = np.linspace(-3.0, 6.0, 91)
        emp = np.searchsorted(g, points, side="right") / g.size
        return np.column_stack([points, emp, gumbel_cdf(points)])


def _mc_block(args):
    n, T, seed, theta_true, search, start, stop = args
    out = np.zeros((stop - start, 3))
    for i in range(start, stop):
        r = lambda_sup(sample_censored(theta_true, T, n, stream(seed, n, i)), search)
        out[i - start] = r.lam, r.theta_hat, r.p_hat
    return out


def censored_monte_carlo(n, reps, T=1.0, seed=0, theta_true=1.0, grid_points=512, refine_tol=1e-6, workers=1):
    """Sup statistic on ``reps`` samples of size ``n`` drawn at ``theta_true``.

    Replicate ``i`` uses the stream ``(seed, n, i)``, so the output does
    not depend on ``workers``.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    search = ThetaSearch.default(n, T, grid_points=grid_points, refine_tol=refine_tol)
    step = max(1, -(-reps // (4 * workers)))
    jobs = [(n, T, seed, theta_true, search, a, min(a + step, reps)) for a in range(0, reps, step)]
    if workers == 1 or len(jobs) == 1:
        parts = [_mc_block(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(_mc_block, jobs))
    out = np.concatenate(parts)
    return CensoredMC(n, T, theta_true, out[:, 0], out[:, 1], out[:, 2])


def write_sample(sample, path, theta_true=None):
    """Write ``path`` (CSV with header ``x``) and ``path + '.json'``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["x"])
        for v in sample.x:
            wr.writerow([f"{v:.17g}"])
    meta = {"T": sample.T, "n": sample.n}
    if theta_true is not None:
        meta["theta_true"] = theta_true
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh)


def read_sample(path):
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    with open(path, newline="") as fh:
        rd = csv.reader(fh)
        header = next(rd, None)
        if header != ["x"]:
            raise ValueError(f"{path}:1: expected header 'x'")
        vals = []
        for lineno, row in enumerate(rd, 2):
            try:
                vals.append(float(row[0]))
            except (ValueError, IndexError):
                raise ValueError(f"{path}:{lineno}: not a number") from None
    if len(vals) != meta["n"]:
        raise ValueError(f"{path}: expected {meta['n']} values, found {len(vals)}")
    return CensExpSample(np.array(vals), float(meta["T"]))
