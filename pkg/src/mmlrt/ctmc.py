"""Finite-state continuous-time Markov chains observed on (0, T].

A chain is described by an initial distribution ``alpha``, exit rates
``beta`` and a jump matrix ``gamma`` with zero diagonal.  Absorbing states
have an all-zero ``gamma`` row and ``beta = 0``.  States are 0-based.

The path density only depends on the initial state, the occupation time in
each state and the transition counts, so most of the package works with
:class:`SuffStats` (one path) or :class:`StatsBatch` (many paths stacked
into arrays).
"""

import json
import math
from dataclasses import dataclass, field

import numpy as np

TIME_TOL = 1e-10
PROB_TOL = 1e-12


@dataclass(frozen=True)
class StateSpace:
    w: int
    absorbing: tuple

    def __post_init__(self):
        if self.w < 2:
            raise ValueError("state space needs at least two states")
        if len(self.absorbing) != self.w:
            raise ValueError("absorbing flags must have length w")

    @classmethod
    def from_gamma(cls, gamma):
        gamma = np.asarray(gamma, dtype=float)
        return cls(gamma.shape[0], tuple(bool(b) for b in ~(gamma > 0).any(axis=1)))


def _as_array(x, ndim, name):
    a = np.array(x, dtype=float)
    if a.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {a.shape}")
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class CtmcParams:
    """Parameters of one chain.

    ``beta[j]`` may be 0 for a state with a non-zero ``gamma`` row; such a
    state is never left (fitted components can land on this boundary).
    """

    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    horizon_T: float

    def __post_init__(self):
        alpha = _as_array(self.alpha, 1, "alpha")
        beta = _as_array(self.beta, 1, "beta")
        gamma = _as_array(self.gamma, 2, "gamma")
        object.__setattr__(self, "alpha", alpha)
        object.__setattr__(self, "beta", beta)
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "horizon_T", float(self.horizon_T))
        w = alpha.shape[0]
        if w < 2:
            raise ValueError("need at least two states")
        if beta.shape != (w,) or gamma.shape != (w, w):
            raise ValueError("alpha, beta and gamma have inconsistent shapes")
        if not self.horizon_T > 0:
            raise ValueError("horizon_T must be positive")
        if (alpha < 0).any() or abs(alpha.sum() - 1.0) > PROB_TOL:
            raise ValueError("alpha must be a probability vector")
        if (gamma < 0).any() or np.any(np.diag(gamma) != 0):
            raise ValueError("gamma must be nonnegative with zero diagonal")
        rows = gamma.sum(axis=1)
        absorbing = rows == 0
        if np.any(np.abs(rows[~absorbing] - 1.0) > PROB_TOL):
            raise ValueError("non-absorbing rows of gamma must sum to 1")
        if not np.all(np.isfinite(beta)) or (beta < 0).any():
            raise ValueError("beta must be finite and nonnegative")
        if np.any(beta[absorbing] != 0):
            raise ValueError("absorbing states must have beta = 0")

    @property
    def w(self):
        return self.alpha.shape[0]

    @property
    def absorbing(self):
        return ~(self.gamma > 0).any(axis=1)

    @property
    def state_space(self):
        return StateSpace.from_gamma(self.gamma)

    def with_beta(self, beta):
        return CtmcParams(self.alpha, beta, self.gamma, self.horizon_T)

    def to_dict(self):
        return {
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "gamma": self.gamma.tolist(),
            "T": self.horizon_T,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["alpha"], d["beta"], d["gamma"], d["T"])


@dataclass(frozen=True)
class SamplePath:
    z0: int
    segments: tuple
    horizon_T: float

    def __post_init__(self):
        segs = tuple((int(s), float(t)) for s, t in self.segments)
        object.__setattr__(self, "segments", segs)
        if not segs:
            raise ValueError("a path has at least one segment")
        if segs[0][0] != self.z0:
            raise ValueError("first segment must be in the initial state")
        if any(t <= 0 for _, t in segs):
            raise ValueError("sojourn times must be positive")
        if any(a[0] == b[0] for a, b in zip(segs, segs[1:])):
            raise ValueError("consecutive segments must change state")
        if abs(math.fsum(t for _, t in segs) - self.horizon_T) > TIME_TOL:
            raise ValueError("sojourn times must sum to the horizon")

    @property
    def m(self):
        return len(self.segments) - 1

    def to_dict(self):
        return {"z0": self.z0, "segments": [list(s) for s in self.segments], "T": self.horizon_T}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["z0"]), d["segments"], float(d["T"]))


@dataclass(frozen=True, eq=False)
class SuffStats:
    z0: int
    m: int
    tau: np.ndarray
    njk: np.ndarray

    def __post_init__(self):
        tau = _as_array(self.tau, 1, "tau")
        njk = np.array(self.njk, dtype=np.int64)
        if njk.shape != (tau.shape[0], tau.shape[0]):
            raise ValueError("njk must be w x w")
        if (tau < 0).any() or (njk < 0).any():
            raise ValueError("tau and njk must be nonnegative")
        if int(njk.sum()) != self.m:
            raise ValueError("m must equal the total number of transitions")
        njk.setflags(write=False)
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "njk", njk)

    @property
    def w(self):
        return self.tau.shape[0]

    def to_dict(self):
        return {"z0": self.z0, "m": self.m, "tau": self.tau.tolist(), "njk": self.njk.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["z0"]), int(d["m"]), d["tau"], d["njk"])


@dataclass(eq=False)
class StatsBatch:
    """Sufficient statistics of ``n`` paths stored as arrays.

    Attributes
    ----------
    z0 : (n,) int array
    tau : (n, w) float array
    njk : (n, w, w) int array
    horizon_T : float
    """

    z0: np.ndarray
    tau: np.ndarray
    njk: np.ndarray
    horizon_T: float
    _exits: np.ndarray = field(default=None, repr=False)

    def __len__(self):
        return self.z0.shape[0]

    @property
    def w(self):
        return self.tau.shape[1]

    @property
    def m(self):
        return self.njk.sum(axis=(1, 2))

    @property
    def exits(self):
        """Number of jumps out of each state, shape (n, w)."""
        if self._exits is None:
            self._exits = self.njk.sum(axis=2)
        return self._exits

    def __getitem__(self, i):
        return SuffStats(int(self.z0[i]), int(self.njk[i].sum()), self.tau[i], self.njk[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_stats(cls, stats, horizon_T=None):
        stats = list(stats)
        if not stats:
            raise ValueError("empty sample")
        if len({s.w for s in stats}) != 1:
            raise ValueError("all paths must share one state space")
        tau = np.stack([s.tau for s in stats])
        if horizon_T is None:
            horizon_T = float(tau[0].sum())
        return cls(
            np.array([s.z0 for s in stats], dtype=np.int64),
            tau,
            np.stack([s.njk for s in stats]).astype(np.int64),
            float(horizon_T),
        )


def as_batch(samples, horizon_T=None):
    """Accept a StatsBatch, a list of SuffStats or a list of SamplePath."""
    if isinstance(samples, StatsBatch):
        return samples
    samples = list(samples)
    if samples and isinstance(samples[0], SamplePath):
        return paths_to_batch(samples)
    return StatsBatch.from_stats(samples, horizon_T)


def _simulate(params, n, rng):
    """Simulate ``n`` paths; returns padded (n, steps) state and sojourn arrays."""
    w, T = params.w, params.horizon_T
    beta = params.beta
    cum_gamma = np.cumsum(params.gamma, axis=1)
    state = np.minimum(np.searchsorted(np.cumsum(params.alpha), rng.random(n) * params.alpha.sum(), side="right"), w - 1)
    elapsed = np.zeros(n)
    states = [state.copy()]
    sojourns = []
    active = np.arange(n)
    while True:
        soj = np.zeros(n)
        nxt = np.full(n, -1)
        if active.size:
            z = state[active]
            rate = beta[z]
            draw = rng.exponential(size=active.size)
            with np.errstate(divide="ignore"):
                hold = np.where(rate > 0, draw / np.where(rate > 0, rate, 1.0), np.inf)
            stop = elapsed[active] + hold >= T
            # Final sojourn is the truncated remainder, not a re-summation.
            soj[active] = np.where(stop, T - elapsed[active], hold)
            going = active[~stop]
            if going.size:
                row = cum_gamma[state[going]]
                u = rng.random(going.size) * row[:, -1]
                k = (row > u[:, None]).argmax(axis=1)
                elapsed[going] += hold[~stop]
                state[going] = k
                nxt[going] = k
            active = going
        sojourns.append(soj)
        if not active.size:
            break
        states.append(nxt)
    return np.stack(states, axis=1), np.stack(sojourns, axis=1)


def _batch_from_padded(states, sojourns, w, T):
    n, steps = states.shape
    valid = states >= 0
    rows = np.repeat(np.arange(n), steps).reshape(n, steps)
    tau = np.zeros((n, w))
    np.add.at(tau, (rows[valid], states[valid]), sojourns[valid])
    njk = np.zeros((n, w, w), dtype=np.int64)
    if steps > 1:
        hop = valid[:, 1:]
        np.add.at(njk, (rows[:, 1:][hop], states[:, :-1][hop], states[:, 1:][hop]), 1)
    return StatsBatch(states[:, 0].copy(), tau, njk, T)


def simulate_stats(params, n, rng):
    """Sufficient statistics of ``n`` independent paths (vectorised)."""
    states, sojourns = _simulate(params, n, rng)
    return _batch_from_padded(states, sojourns, params.w, params.horizon_T)


def sample_paths(params, n, rng):
    states, sojourns = _simulate(params, n, rng)
    paths = []
    for z, t in zip(states, sojourns):
        keep = z >= 0
        paths.append(SamplePath(int(z[0]), list(zip(z[keep].tolist(), t[keep].tolist())), params.horizon_T))
    return paths


def sample_path(params, rng):
    """Draw one path: initial state from ``alpha``, exponential sojourns at
    the current state's rate, next state from its ``gamma`` row, stopping at
    the horizon or on entering an absorbing state."""
    return sample_paths(params, 1, rng)[0]


def suff_stats(path, w=None):
    """Occupation times and transition counts of ``path``.

    ``w`` defaults to one more than the largest state visited.
    """
    if w is None:
        w = max(s for s, _ in path.segments) + 1
    tau = np.zeros(w)
    njk = np.zeros((w, w), dtype=np.int64)
    for s, t in path.segments:
        tau[s] += t
    for (a, _), (b, _) in zip(path.segments, path.segments[1:]):
        njk[a, b] += 1
    return SuffStats(path.z0, path.m, tau, njk)


def log_density_batch(batch, params):
    """Log path density for every row of ``batch``; ``-inf`` off the support."""
    if batch.w != params.w:
        raise ValueError("state space mismatch")
    T = params.horizon_T
    log_alpha = np.log(params.alpha, where=params.alpha > 0, out=np.full(params.w, -np.inf))
    out = log_alpha[batch.z0] - batch.tau @ params.beta
    support = params.gamma > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        log_bg = np.where(support, np.log(params.beta)[:, None] + np.log(np.where(support, params.gamma, 1.0)), 0.0)
    nz = batch.njk > 0
    # 0 * (-inf) must stay 0 for transitions that do not occur.
    with np.errstate(invalid="ignore"):
        out = out + np.where(nz, batch.njk * log_bg, 0.0).sum(axis=(1, 2))
    bad = (nz & ~support).any(axis=(1, 2)) | (np.abs(batch.tau.sum(axis=1) - T) > TIME_TOL)
    out[bad] = -np.inf
    return np.where(np.isnan(out), -np.inf, out)


def log_density(stats, params):
    """Log density of one path given its sufficient statistics.

    For ``m = 0`` this is ``log alpha(z0) - beta(z0) T``; otherwise the
    occupation-time and transition terms are added.  Returns ``-inf`` when
    the path lies outside the support of ``params``.
    """
    batch = StatsBatch(np.array([stats.z0]), stats.tau[None, :], stats.njk[None, :, :], params.horizon_T)
    return float(log_density_batch(batch, params)[0])


def write_params(params, path):
    with open(path, "w") as fh:
        json.dump(params.to_dict(), fh, indent=2)


def read_params(path):
    with open(path) as fh:
        d = json.load(fh)
    try:
        return CtmcParams.from_dict(d)
    except KeyError as exc:
        raise ValueError(f"{path}: missing field {exc}") from None


def write_paths(paths, path):
    with open(path, "w") as fh:
        for p in paths:
            fh.write(json.dumps(p.to_dict()) + "\n")


def read_paths(path):
    """Read JSON-lines path records, reporting the offending line on error."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(SamplePath.from_dict(json.loads(line)))
            except KeyError as exc:
                raise ValueError(f"{path}:{lineno}: missing field {exc}") from None
            except (ValueError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
    if not out:
        raise ValueError(f"{path}: no paths")
    return out


def paths_to_batch(paths, w=None):
    if w is None:
        w = max(s for p in paths for s, _ in p.segments) + 1
    return StatsBatch.from_stats([suff_stats(p, w) for p in paths], paths[0].horizon_T)
