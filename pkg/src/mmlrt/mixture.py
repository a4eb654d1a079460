"""One- and two-component CTMC fits and the homogeneity LRT.

Both mixture components share the jump matrix ``gamma``.  The ``gamma``
factor of the path density is then common to the two components, so the
E-step only needs the initial state, occupation times and exit counts of
each path, and the ``gamma`` MLE is the pooled transition frequency
whatever the responsibilities are.

The EM core works on stacked arrays of shape (datasets, restarts, paths,
states) so that many bootstrap replicates can be fitted in one loop.
"""

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .ctmc import CtmcParams, StatsBatch, as_batch, log_density_batch
from .streams import stream

_NEG = -1e300
DEGENERATE_TOL = 1e-12
LAMBDA_EPS = 1e-8
NULL_TIE_RTOL = 1e-12
INIT_P = (0.3, 0.5, 0.7)


@dataclass(frozen=True, eq=False)
class MixtureParams:
    p: float
    comp0: tuple
    comp1: tuple
    gamma_shared: np.ndarray
    horizon_T: float

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("p must lie in [0, 1]")
        # Validates both components.
        self.component(0)
        self.component(1)

    def component(self, c):
        alpha, beta = (self.comp0, self.comp1)[c]
        return CtmcParams(alpha, beta, self.gamma_shared, self.horizon_T)

    def to_dict(self):
        return {
            "p": float(self.p),
            "comp0": {"alpha": list(map(float, self.comp0[0])), "beta": list(map(float, self.comp0[1]))},
            "comp1": {"alpha": list(map(float, self.comp1[0])), "beta": list(map(float, self.comp1[1]))},
            "gamma": np.asarray(self.gamma_shared, dtype=float).tolist(),
            "T": float(self.horizon_T),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            d["p"],
            (d["comp0"]["alpha"], d["comp0"]["beta"]),
            (d["comp1"]["alpha"], d["comp1"]["beta"]),
            np.array(d["gamma"], dtype=float),
            d["T"],
        )

    @classmethod
    def from_components(cls, p, c0, c1):
        return cls(p, (c0.alpha, c0.beta), (c1.alpha, c1.beta), c0.gamma, c0.horizon_T)


@dataclass(frozen=True)
class FitOptions:
    max_iters: int = 500
    loglik_tol: float = 1e-8
    n_restarts: int = 10
    init_jitter: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")
        if not self.loglik_tol > 0:
            raise ValueError("loglik_tol must be positive")
        if self.n_restarts < 1:
            raise ValueError("n_restarts must be at least 1")
        if not self.init_jitter > 0:
            raise ValueError("init_jitter must be positive")


@dataclass(eq=False)
class FitResult:
    """Outcome of a fit.

    ``params`` is a :class:`CtmcParams` for one component and a
    :class:`MixtureParams` for two.  ``flags`` lists anything a reader of
    the fit should know about (unvisited states, boundary rates,
    degeneracy).
    """

    params: object
    loglik: float
    trace: list
    converged: bool
    degenerate: bool = False
    flags: list = field(default_factory=list)
    n_iter: int = 0
    restart: int = -1

    def to_dict(self):
        return {
            "kind": "mixture" if isinstance(self.params, MixtureParams) else "ctmc",
            "params": self.params.to_dict(),
            "loglik": float(self.loglik),
            "trace": [float(v) for v in self.trace],
            "converged": bool(self.converged),
            "degenerate": bool(self.degenerate),
            "flags": list(self.flags),
            "n_iter": int(self.n_iter),
            "restart": int(self.restart),
        }


class LrtResult(NamedTuple):
    lam: float
    fit2: FitResult
    fit1: FitResult

    @property
    def doubled(self):
        return 2.0 * self.lam

    @property
    def raw(self):
        return self.fit2.loglik - self.fit1.loglik

    @property
    def converged(self):
        return self.fit2.converged

    def to_dict(self):
        return {
            "lambda": self.lam,
            "lambda_doubled": self.doubled,
            "lambda_raw": self.raw,
            "converged": self.converged,
            "fit2": self.fit2.to_dict(),
            "fit1": self.fit1.to_dict(),
        }


def mixture_log_density(stats, mp):
    """``log[(1 - p) f0 + p f1]`` evaluated by log-sum-exp."""
    batch = StatsBatch(np.array([stats.z0]), stats.tau[None], stats.njk[None], mp.horizon_T)
    return float(_mixture_loglik_rows(batch, mp)[0])


def _mixture_loglik_rows(batch, mp):
    l0 = log_density_batch(batch, mp.component(0))
    l1 = log_density_batch(batch, mp.component(1))
    with np.errstate(divide="ignore"):
        a = np.log1p(-mp.p) + l0
        b = np.log(mp.p) + l1
    return np.logaddexp(a, b)


def mixture_loglik(samples, mp):
    return float(_mixture_loglik_rows(as_batch(samples, mp.horizon_T), mp).sum())


# ---------------------------------------------------------------------------
# One component


def _one_component_arrays(onehot, tau, njk):
    """Closed-form MLE; inputs carry a leading dataset axis."""
    n = onehot.shape[1]
    alpha = onehot.sum(axis=1) / n
    trans = njk.sum(axis=1).astype(float)
    exits = trans.sum(axis=2)
    time = tau.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        beta = np.where(exits > 0, exits / np.where(time > 0, time, 1.0), 0.0)
        gamma = np.where(exits[..., None] > 0, trans / np.where(exits > 0, exits, 1.0)[..., None], 0.0)
    return alpha, beta, gamma


def fit_one_component(samples, T=None):
    """Closed-form maximum likelihood fit of a single chain.

    ``alpha`` is the empirical start distribution, ``gamma`` the observed
    transition frequencies and ``beta[j]`` the exits from ``j`` divided by
    the time spent there.  States with no exits get ``beta = 0`` and a zero
    ``gamma`` row; states never visited are reported in ``flags``.
    """
    batch = as_batch(samples, T)
    w = batch.w
    onehot = np.eye(w)[batch.z0]
    alpha, beta, gamma = _one_component_arrays(onehot[None], batch.tau[None], batch.njk[None])
    alpha, beta, gamma = alpha[0], beta[0], gamma[0]
    flags = []
    time = batch.tau.sum(axis=0)
    exits = batch.exits.sum(axis=0)
    for j in range(w):
        if time[j] == 0:
            flags.append(f"unvisited:{j}")
        elif exits[j] == 0:
            flags.append(f"no_exits:{j}")
    params = CtmcParams(alpha, beta, gamma, batch.horizon_T)
    loglik = float(log_density_batch(batch, params).sum())
    return FitResult(params, loglik, [loglik], True, flags=flags, n_iter=0)


# ---------------------------------------------------------------------------
# EM core


@dataclass
class _Data:
    start: np.ndarray  # (D, n)
    onehot: np.ndarray  # (D, n, w)
    tau: np.ndarray  # (D, n, w)
    exits: np.ndarray  # (D, n, w)
    gamma_term: np.ndarray  # (D,)  sum over paths of n_jk log gamma_jk

    @classmethod
    def stack(cls, batches, gammas):
        start = np.stack([b.z0 for b in batches])
        w = batches[0].w
        tau = np.stack([b.tau for b in batches])
        exits = np.stack([b.exits for b in batches]).astype(float)
        terms = []
        for b, g in zip(batches, gammas):
            counts = b.njk.sum(axis=0)
            with np.errstate(divide="ignore"):
                lg = np.where(counts > 0, np.log(np.where(g > 0, g, 1.0)), 0.0)
            if np.any((counts > 0) & (g <= 0)):
                terms.append(-np.inf)
            else:
                terms.append(float((counts * lg).sum()))
        return cls(start, np.eye(w)[start], tau, exits, np.array(terms))


def _component_loglik(start, tauT, exitsT, alpha, beta):
    """Component log-densities without the shared gamma factor, (K, n)."""
    with np.errstate(divide="ignore"):
        la = np.log(alpha)
        lb = np.where(beta > 0, np.log(np.where(beta > 0, beta, 1.0)), _NEG)
    out = np.take_along_axis(la, start, axis=1)
    out = out - np.matmul(beta[:, None, :], tauT)[:, 0]
    out = out + np.matmul(lb[:, None, :], exitsT)[:, 0]
    return np.where(out < 0.5 * _NEG, -np.inf, out)


def _weighted_update(weights, onehotT, tauT, exitsT, old_alpha, old_beta):
    s = weights.sum(axis=-1)
    wt = weights[:, :, None]
    alpha = np.matmul(onehotT, wt)[..., 0]
    ex = np.matmul(exitsT, wt)[..., 0]
    tm = np.matmul(tauT, wt)[..., 0]
    with np.errstate(divide="ignore", invalid="ignore"):
        alpha = alpha / s[:, None]
        beta = np.where(ex > 0, ex / np.where(tm > 0, tm, 1.0), 0.0)
    ok = (s > 0)[:, None]
    return np.where(ok, alpha, old_alpha), np.where(ok, beta, old_beta)


def _em(data, p, a0, b0, a1, b1, max_iters, tol, fixed0=False, tie_alpha=False):
    """Run EM on every (dataset, restart) pair until each one converges.

    Parameters come in with shape (D, R[, w]).  Only pairs that have not
    converged are updated.  Returns final parameters, the last
    log-likelihood, the per-iteration trace (iters, D, R), the iteration
    count and a convergence mask.
    """
    D, R = p.shape
    w = a0.shape[-1]
    n = data.start.shape[1]
    K = D * R
    dk = np.repeat(np.arange(D), R)
    # Working copies hold only the pairs still running; they are compacted
    # whenever a pair converges and written back to the full arrays then.
    st = data.start[dk]
    oh = data.onehot.transpose(0, 2, 1)[dk]
    tT = data.tau.transpose(0, 2, 1)[dk]
    eT = data.exits.transpose(0, 2, 1)[dk]
    g = data.gamma_term[dk]
    cur = [p.reshape(K).astype(float)] + [np.array(v, dtype=float).reshape(K, w) for v in (a0, b0, a1, b1)]
    final = [v.copy() for v in cur]
    last = np.zeros(K)
    converged = np.zeros(K, dtype=bool)
    n_iter = np.zeros(K, dtype=int)
    trace = np.full((max_iters + 1, K), np.nan)
    live = np.arange(K)
    prev = None
    for it in range(max_iters + 1):
        pl, c0a, c0b, c1a, c1b = cur
        l0 = _component_loglik(st, tT, eT, c0a, c0b)
        l1 = _component_loglik(st, tT, eT, c1a, c1b)
        with np.errstate(divide="ignore"):
            lp0 = np.log1p(-pl)[:, None] + l0
            lp1 = np.log(pl)[:, None] + l1
        lse = np.logaddexp(lp0, lp1)
        ll = lse.sum(axis=-1) + g
        trace[it, live] = ll
        last[live] = ll
        keep = np.ones(live.size, dtype=bool) if prev is None else ll - prev >= tol
        if it == max_iters or not keep.any():
            break
        if not keep.all():
            gone = live[~keep]
            converged[gone] = True
            for f, c in zip(final, cur):
                f[gone] = c[~keep]
            live = live[keep]
            st, oh, tT, eT, g = st[keep], oh[keep], tT[keep], eT[keep], g[keep]
            cur = [c[keep] for c in cur]
            pl, c0a, c0b, c1a, c1b = cur
            lp1, lse, ll = lp1[keep], lse[keep], ll[keep]
        prev = ll
        n_iter[live] += 1
        with np.errstate(invalid="ignore"):
            resp = np.exp(lp1 - lse)
        resp = np.where(np.isnan(resp), pl[:, None], resp)
        na1, nb1 = _weighted_update(resp, oh, tT, eT, c1a, c1b)
        if tie_alpha:
            na1 = c0a
        if not fixed0:
            c0a, c0b = _weighted_update(1.0 - resp, oh, tT, eT, c0a, c0b)
        cur = [resp.sum(axis=-1) / n, c0a, c0b, na1, nb1]
    converged[live[~keep]] = True
    for f, c in zip(final, cur):
        f[live] = c
    shape = lambda v: v.reshape((D, R) + v.shape[1:])
    state = tuple(shape(v) for v in final)
    return state, shape(last), trace[: it + 1].reshape(it + 1, D, R), shape(n_iter), shape(converged)


def _initial_states(alpha_hat, beta_hat, opts, rng, null=None, tie_alpha=False):
    """Jittered starting points for one dataset, arrays of shape (R, w)."""
    R, w = opts.n_restarts, alpha_hat.shape[0]
    u = rng.uniform(-opts.init_jitter, opts.init_jitter, size=(R, 2, w))
    p = np.array([INIT_P[r % len(INIT_P)] for r in range(R)])
    b0 = beta_hat * np.exp(u[:, 0])
    b1 = beta_hat * np.exp(u[:, 1])
    a0 = np.tile(alpha_hat, (R, 1))
    a1 = a0.copy()
    if null is not None:
        a0 = np.tile(null.alpha, (R, 1))
        b0 = np.tile(null.beta, (R, 1))
        if tie_alpha:
            a1 = a0.copy()
    return p, a0, b0, a1, b1


def _pack_results(batches, data, state, ll, trace, n_iter, converged, fit1s, gammas, opts, fixed0):
    p, a0, b0, a1, b1 = state
    out = []
    for d, batch in enumerate(batches):
        fit1 = fit1s[d]
        r = int(np.argmax(ll[d]))
        best = ll[d, r]
        # The null embedded in the mixture is a fixed point of EM; it is
        # always a candidate so the supremum never falls below the null.
        # Gains at the level of rounding error count as no gain.
        if not best > fit1.loglik + NULL_TIE_RTOL * max(1.0, abs(fit1.loglik)):
            fit2 = _null_embedding(fit1, batch, fixed0)
        else:
            pd = float(p[d, r])
            flags = []
            if pd < DEGENERATE_TOL or pd > 1.0 - DEGENERATE_TOL:
                fit2 = _null_embedding(fit1, batch, fixed0)
                fit2.flags.append("degenerate_p")
                fit2.converged = True
            else:
                moving = (gammas[d] > 0).any(axis=1)
                for c, bb in ((0, b0[d, r]), (1, b1[d, r])):
                    flags += [f"comp{c}_zero_rate:{j}" for j in np.flatnonzero((bb == 0) & moving)]
                a0d = _renorm(a0[d, r])
                a1d = _renorm(a1[d, r])
                mp = MixtureParams(pd, (a0d, b0[d, r]), (a1d, b1[d, r]), gammas[d], batch.horizon_T)
                tr = trace[: int(n_iter[d, r]) + 1, d, r].tolist()
                fit2 = FitResult(mp, float(best), tr, bool(converged[d, r]), flags=flags, n_iter=int(n_iter[d, r]), restart=r)
        out.append(fit2)
    return out


def _renorm(a):
    a = np.clip(a, 0.0, None)
    return a / a.sum()


def _null_embedding(fit1, batch, fixed0):
    null = fit1.params
    mp = MixtureParams(0.0, (null.alpha, null.beta), (null.alpha, null.beta), null.gamma, batch.horizon_T)
    return FitResult(mp, fit1.loglik, [fit1.loglik], True, degenerate=True, flags=["null_embedding"], restart=-1)


def _fit_many(batches, opts, rngs, null=None, tie_alpha=False):
    """Fit one- and two-component models to several datasets together.

    ``null`` given means simple mode: component 0 and ``gamma`` are held at
    the null, and only ``p`` and component 1 are estimated.
    """
    fit1s, gammas, inits = [], [], []
    for batch, rng in zip(batches, rngs):
        hat = fit_one_component(batch)
        if null is None:
            fit1s.append(hat)
            gammas.append(hat.params.gamma)
        else:
            ll0 = float(log_density_batch(batch, null).sum())
            fit1s.append(FitResult(null, ll0, [ll0], True))
            gammas.append(null.gamma)
        inits.append(_initial_states(hat.params.alpha, hat.params.beta, opts, rng, null, tie_alpha))
    data = _Data.stack(batches, gammas)
    init = [np.stack(x) for x in zip(*inits)]
    state, ll, trace, n_iter, converged = _em(
        data, *init, opts.max_iters, opts.loglik_tol, fixed0=null is not None, tie_alpha=tie_alpha
    )
    fit2s = _pack_results(batches, data, state, ll, trace, n_iter, converged, fit1s, gammas, opts, null is not None)
    return fit2s, fit1s


def em_fit_two_component(samples, opts=None, init=None):
    """EM fit of the two-component mixture with shared ``gamma``.

    With ``init`` (a :class:`MixtureParams`) a single EM run starts from
    that point; otherwise the best of ``opts.n_restarts`` jittered starts
    around the one-component fit is returned.  A fit whose weight collapses
    to 0 or 1 is reported as degenerate and equals the one-component fit.
    """
    opts = opts or FitOptions()
    batch = as_batch(samples)
    if len(batch) < 2:
        raise ValueError("need at least two paths")
    if init is None:
        fit2s, _ = _fit_many([batch], opts, [stream(opts.seed)])
        return fit2s[0]
    gamma = np.asarray(init.gamma_shared, dtype=float)
    data = _Data.stack([batch], [gamma])
    arr = lambda v: np.asarray(v, dtype=float)[None, None]
    state, ll, trace, n_iter, converged = _em(
        data, np.array([[init.p]]), arr(init.comp0[0]), arr(init.comp0[1]), arr(init.comp1[0]), arr(init.comp1[1]),
        opts.max_iters, opts.loglik_tol,
    )
    p, a0, b0, a1, b1 = (s[0, 0] for s in state)
    degenerate = p < DEGENERATE_TOL or p > 1.0 - DEGENERATE_TOL
    mp = MixtureParams(float(p), (_renorm(a0), b0), (_renorm(a1), b1), gamma, batch.horizon_T)
    tr = trace[: int(n_iter[0, 0]) + 1, 0, 0].tolist()
    return FitResult(mp, float(ll[0, 0]), tr, bool(converged[0, 0]) or degenerate, degenerate=bool(degenerate),
                     flags=["degenerate_p"] if degenerate else [], n_iter=int(n_iter[0, 0]), restart=0)


def lrt_statistic(samples, mode="composite", null_params=None, opts=None, tie_alpha=False):
    """Log-likelihood ratio for one versus two components.

    The statistic is the raw difference of maximised log-likelihoods (not
    doubled; ``result.doubled`` gives twice the value).  In ``"simple"``
    mode component 0 and ``gamma`` are fixed at ``null_params`` and only
    ``(p, alpha_1, beta_1)`` are fitted; ``tie_alpha`` fixes ``alpha_1`` at
    the null's ``alpha`` as well.
    """
    opts = opts or FitOptions()
    batch = as_batch(samples)
    return lrt_many([batch], mode, null_params, opts, [stream(opts.seed)], tie_alpha)[0]


def lrt_many(batches, mode, null_params, opts, rngs, tie_alpha=False):
    if mode not in ("simple", "composite"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "simple" and null_params is None:
        raise ValueError("simple mode needs null_params")
    for b in batches:
        if len(b) < 2:
            raise ValueError("need at least two paths")
    null = null_params if mode == "simple" else None
    fit2s, fit1s = _fit_many(batches, opts, rngs, null, tie_alpha)
    out = []
    for f2, f1 in zip(fit2s, fit1s):
        raw = f2.loglik - f1.loglik
        if raw < -LAMBDA_EPS:
            raise RuntimeError(f"two-component fit below the null by {-raw:g}")
        out.append(LrtResult(max(raw, 0.0), f2, f1))
    return out


# ---------------------------------------------------------------------------
# Information criteria


@dataclass
class PenaltyReport:
    rows: list
    caution: str

    def to_dict(self):
        return {"rows": self.rows, "caution": self.caution}


CAUTION = (
    "The difference in parameter count d between one and two components is not "
    "well defined: the one-component model is reached either by setting p = 0 or by "
    "equating the component parameters. Penalties that depend on d alone (AIC, BIC) "
    "have no unambiguous value here; the rows below show each candidate d."
)


def penalty_report(loglik1, loglik2, n, d_choices):
    """AIC- and BIC-style penalised differences for each candidate ``d``.

    Each row gives the penalty on both the log-likelihood scale
    (``diff - pen``) and the doubled scale (``2 diff - pen``), because the
    two conventions are both in use.
    """
    d_choices = list(d_choices)
    if not d_choices:
        raise ValueError("d_choices must be nonempty")
    diff = loglik2 - loglik1
    rows = []
    for d in d_choices:
        aic, bic = 2.0 * d, d * math.log(n)
        rows.append({
            "d": int(d),
            "aic_penalty": aic,
            "bic_penalty": bic,
            "aic_diff": diff - aic,
            "bic_diff": diff - bic,
            "aic_diff_doubled": 2.0 * diff - aic,
            "bic_diff_doubled": 2.0 * diff - bic,
        })
    return PenaltyReport(rows, CAUTION)


def dump_json(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
