"""Monte Carlo for ``dy_t = dw_t - grad V(y_t) dt``: exit times and heat-kernel tails.

Paths are simulated by Euler-Maruyama with a drift compiled by numba from
the expression tree of the potential.  Path ``i`` draws every random number
(including its start point) from ``Philox(key=(seed, i))``, so statistics are
bit-identical for any path ordering or thread count.

Exit times record the first step with ``|y - c| >= r - BOUNDARY_SHIFT * sqrt(dt)``
and interpolate the crossing time linearly between the last two distances.
The shift is the continuity correction for discrete monitoring of a unit
diffusion: it removes the leading ``O(sqrt(dt))`` delay caused by excursions
that leave and re-enter the ball within one step.  Paths still inside at
``time_cap_factor * r**2`` are censored and counted.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy import stats
from scipy.optimize import brentq, minimize_scalar

from .errors import ConfigError
from .landscape import Landscape, as_landscape
from .potential import MultiscaleModel

# -zeta(1/2) / sqrt(2 pi): overshoot constant of Gaussian random walks.
BOUNDARY_SHIFT = 0.5825971579390106

# Fallback step when the drift is identically zero and no step is given.
FREE_DT = 1e-3


@dataclass(frozen=True)
class SdeConfig:
    """Settings for Euler-Maruyama simulations.

    Parameters
    ----------
    dt : float, optional
        Time step.  Defaults to the largest step allowed by the policy
        ``dt <= min(c1 / L**2, c2 * lam**2)`` with ``L`` a bound on
        ``|grad V|`` and ``lam`` the finest wavelength.  An explicit ``dt``
        above that bound is rejected.
    seed : int
        64-bit seed; path ``i`` uses the stream ``Philox(key=(seed, i))``.
    paths : int
        Number of paths (at least 100).
    c1, c2 : float
        Policy constants.
    drift_sign : float
        ``-1`` simulates ``dy = dw - grad V dt``.  ``+1`` flips the drift and
        exists only for mutation testing.
    time_cap_factor : float
        Paths are censored at ``time_cap_factor * r**2``.
    max_censored_fraction : float
        Records with a larger censored fraction are flagged invalid.
    threads : int, optional
        Worker threads; defaults to ``HOMOG_THREADS`` or the CPU count.
    boundary_shift : bool
        Apply the discrete-monitoring continuity correction (see module notes).
    """

    dt: float | None = None
    seed: int = 0
    paths: int = 10_000
    c1: float = 0.01
    c2: float = 0.01
    drift_sign: float = -1.0
    time_cap_factor: float = 1e4
    max_censored_fraction: float = 0.01
    threads: int | None = None
    boundary_shift: bool = True

    def __post_init__(self):
        if self.dt is not None and not (self.dt > 0 and math.isfinite(self.dt)):
            raise ConfigError(f"dt must be positive, got {self.dt!r}")
        if int(self.paths) < 100:
            raise ConfigError(f"path budget must be at least 100, got {self.paths!r}")
        if not 0 <= int(self.seed) < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if self.c1 <= 0 or self.c2 <= 0:
            raise ConfigError("dt policy constants must be positive")
        if self.drift_sign not in (-1.0, 1.0):
            raise ConfigError("drift_sign must be -1 or +1")
        if self.time_cap_factor <= 0:
            raise ConfigError("time_cap_factor must be positive")
        if self.threads is not None and int(self.threads) < 1:
            raise ConfigError("threads must be at least 1")

    def max_dt(self, V: Landscape) -> float:
        """Largest step allowed by the policy for ``V`` (``inf`` for a flat potential)."""
        L = V.lipschitz_bound
        lam = V.finest_wavelength
        a = self.c1 / L**2 if L > 0 else math.inf
        b = self.c2 * lam**2 if math.isfinite(lam) else math.inf
        return min(a, b)

    def step(self, V: Landscape) -> float:
        bound = self.max_dt(V)
        if self.dt is None:
            return bound if math.isfinite(bound) else FREE_DT
        if self.dt > bound * (1 + 1e-12):
            raise ConfigError(f"dt={self.dt:g} violates the step policy bound {bound:.4g}")
        return float(self.dt)

    def worker_count(self) -> int:
        if self.threads is not None:
            return int(self.threads)
        env = os.environ.get("HOMOG_THREADS")
        if env:
            try:
                return max(1, int(env))
            except ValueError:
                raise ConfigError(f"HOMOG_THREADS must be an integer, got {env!r}") from None
        return os.cpu_count() or 1


def path_generator(seed: int, i: int) -> np.random.Generator:
    """The random stream of path ``i``."""
    return np.random.Generator(np.random.Philox(key=[int(seed), int(i)]))


# ---------------------------------------------------------------------------
# Compiled kernels
# ---------------------------------------------------------------------------

_KERNELS: dict[tuple[str, str], object] = {}

_EXIT_TEMPLATE = """
def kernel(start, center, r, dt, sign, max_steps, gen):
    sq = math.sqrt(dt)
{unpack}
    dprev = math.sqrt({dist})
    if dprev >= r:
        return 0.0, False
    for step in range(max_steps):
{grad}
{update}
        dn = math.sqrt({dist})
        if dn >= r:
            return (step + (r - dprev) / (dn - dprev)) * dt, False
        dprev = dn
    return max_steps * dt, True
"""

_TAIL_TEMPLATE = """
def kernel(start, dt, sign, checkpoints, gen):
    sq = math.sqrt(dt)
{unpack}
    out = np.empty(checkpoints.shape[0])
    step = 0
    for j in range(checkpoints.shape[0]):
        while step < checkpoints[j]:
{grad}
{update}
            step += 1
        out[j] = math.sqrt({disp})
    return out
"""


def _indent(lines: Sequence[str], depth: int) -> str:
    return "\n".join(" " * (4 * depth) + ln for ln in lines)


def _compile(V: Landscape, kind: str):
    key = (V.key(), kind)
    if key in _KERNELS:
        return _KERNELS[key]
    import numba

    d = V.d
    xs = [f"x{i}" for i in range(d)]
    glines, gnames = V.source(xs)
    update = [f"{x} = {x} + sign * {g} * dt + sq * gen.standard_normal()" for x, g in zip(xs, gnames)]
    if kind == "exit":
        unpack = [f"x{i} = start[{i}]" for i in range(d)] + [f"c{i} = center[{i}]" for i in range(d)]
        dist = " + ".join(f"(x{i} - c{i}) * (x{i} - c{i})" for i in range(d))
        src = _EXIT_TEMPLATE.format(
            unpack=_indent(unpack, 1), dist=dist, grad=_indent(glines, 2), update=_indent(update, 2)
        )
    else:
        unpack = [f"x{i} = start[{i}]" for i in range(d)] + [f"s{i} = start[{i}]" for i in range(d)]
        disp = " + ".join(f"(x{i} - s{i}) * (x{i} - s{i})" for i in range(d))
        src = _TAIL_TEMPLATE.format(
            unpack=_indent(unpack, 1), disp=disp, grad=_indent(glines, 3), update=_indent(update, 3)
        )
    namespace = {"math": math, "np": np}
    exec(compile(src, f"<homog-{kind}-kernel>", "exec"), namespace)
    fn = numba.njit(nogil=True, fastmath=False)(namespace["kernel"])
    _KERNELS[key] = fn
    return fn


def _map_paths(fn, n: int, threads: int) -> list:
    """Apply ``fn`` to path indices ``0..n-1``; results are in index order."""
    if threads <= 1 or n < 2 * threads:
        return [fn(i) for i in range(n)]
    chunks = np.array_split(np.arange(n), threads)
    with ThreadPoolExecutor(max_workers=threads) as pool:
        parts = pool.map(lambda idx: [fn(int(i)) for i in idx], chunks)
    return [item for part in parts for item in part]


# ---------------------------------------------------------------------------
# Gibbs measure on a ball
# ---------------------------------------------------------------------------


class _BallSampler:
    """Rejection sampler for ``m(dx) ∝ e^{-2V(x)} dx`` restricted to ``B(center, r)``."""

    def __init__(self, V: Landscape, r: float, center):
        self.V = V
        self.r = float(r)
        self.center = np.broadcast_to(np.asarray(center, dtype=float), (V.d,)).copy()
        self.floor = V.ball_range(self.center, self.r)[0]
        self.flat = V.is_constant

    def _uniform(self, gen: np.random.Generator) -> np.ndarray:
        d = self.V.d
        if d == 1:
            return self.center + self.r * (2.0 * gen.random(1) - 1.0)
        v = gen.standard_normal(d)
        v /= np.linalg.norm(v)
        return self.center + self.r * gen.random() ** (1.0 / d) * v

    def draw(self, gen: np.random.Generator) -> np.ndarray:
        while True:
            x = self._uniform(gen)
            accept = 1.0 if self.flat else math.exp(-2.0 * (self.V.value(x) - self.floor))
            if gen.random() < accept:
                return x


def gibbs_ball_sampler(V, r: float, seed: int, center=None) -> Iterator[np.ndarray]:
    """Endless stream of exact samples from the Gibbs measure on ``B(center, r)``.

    Sample ``i`` uses the stream of path ``i`` (:func:`path_generator`), so the
    points coincide with the starts used by :func:`mean_exit_time`.  A
    constant potential accepts every proposal and reproduces the uniform
    stream of ``V = 0``.
    """
    V = as_landscape(V)
    sampler = _BallSampler(V, r, np.zeros(V.d) if center is None else center)
    i = 0
    while True:
        yield sampler.draw(path_generator(seed, i))
        i += 1


# ---------------------------------------------------------------------------
# Exit times
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ExitTimeRecord:
    """Monte Carlo estimate of a mean exit time from a ball.

    Attributes
    ----------
    r : float
    start : str
        ``"gibbs-ball"`` or the starting point formatted as text.
    tau_mean, stderr : float
    paths : int
    dt : float
    censored : int
        Paths still inside at the time cap (counted at the cap).
    max_censored_fraction : float
    """

    r: float
    start: str
    tau_mean: float
    stderr: float
    paths: int
    dt: float
    censored: int
    max_censored_fraction: float = 0.01

    @property
    def valid(self) -> bool:
        return self.censored <= self.max_censored_fraction * self.paths and self.tau_mean > 0

    def row(self) -> dict:
        return {
            "r": self.r,
            "start": self.start,
            "tau_mean": self.tau_mean,
            "stderr": self.stderr,
            "paths": self.paths,
            "dt": self.dt,
            "censored": self.censored,
        }


def _format_point(x) -> str:
    return " ".join(repr(float(v)) for v in np.atleast_1d(x))


def exit_times(V, r: float, start="gibbs-ball", config: SdeConfig | None = None, center=None) -> tuple[np.ndarray, np.ndarray, float]:
    """Per-path exit times, censoring flags and the step used.

    See :func:`mean_exit_time` for the arguments.
    """
    cfg = config or SdeConfig()
    V = as_landscape(V)
    d = V.d
    r = float(r)
    if not r > 0:
        raise ConfigError("radius must be positive")
    dt = cfg.step(V)
    gibbs = isinstance(start, str)
    if gibbs and start != "gibbs-ball":
        raise ConfigError(f"unknown start {start!r}")
    if gibbs:
        c = np.zeros(d) if center is None else np.broadcast_to(np.asarray(center, float), (d,)).copy()
        sampler = _BallSampler(V, r, c)
    else:
        x0 = np.broadcast_to(np.asarray(start, dtype=float), (d,)).copy()
        c = x0 if center is None else np.broadcast_to(np.asarray(center, float), (d,)).copy()
    kernel = _compile(V, "exit")
    max_steps = int(math.ceil(cfg.time_cap_factor * r * r / dt))
    sign = float(cfg.drift_sign)
    r_eff = r - BOUNDARY_SHIFT * math.sqrt(dt) if cfg.boundary_shift else r
    if r_eff <= 0:
        raise ConfigError(f"dt={dt:g} is too coarse for radius {r}")

    def one(i):
        gen = path_generator(cfg.seed, i)
        x = sampler.draw(gen) if gibbs else x0
        return kernel(x, c, r_eff, dt, sign, max_steps, gen)

    out = _map_paths(one, int(cfg.paths), cfg.worker_count())
    taus = np.array([t for t, _ in out])
    cens = np.array([c for _, c in out], dtype=bool)
    return taus, cens, dt


def mean_exit_time(V, r: float, start="gibbs-ball", config: SdeConfig | None = None, center=None) -> ExitTimeRecord:
    """Monte Carlo mean of the first exit time from ``B(center, r)``.

    Parameters
    ----------
    V : PotentialExpr, MultiscaleModel or Landscape
    r : float
    start : "gibbs-ball" or array_like
        Either the Gibbs measure on the ball or a fixed starting point.
    config : SdeConfig, optional
    center : array_like, optional
        Ball centre; defaults to the start point, or the origin for Gibbs
        starts.

    Returns
    -------
    ExitTimeRecord
    """
    cfg = config or SdeConfig()
    taus, cens, dt = exit_times(V, r, start, cfg, center)
    n = taus.size
    label = start if isinstance(start, str) else _format_point(start)
    return ExitTimeRecord(
        r=float(r),
        start=label,
        tau_mean=float(taus.mean()),
        stderr=float(taus.std(ddof=1) / math.sqrt(n)),
        paths=n,
        dt=dt,
        censored=int(cens.sum()),
        max_censored_fraction=cfg.max_censored_fraction,
    )


@dataclass(frozen=True)
class ExponentFit:
    """Exit-time exponents ``E[tau(r)] = r^{2 + nu(r)}``.

    Attributes
    ----------
    nu_pointwise : tuple of (r, nu, stderr)
    nu_slope, slope_stderr : float
        Weighted least-squares slope of ``ln tau`` against ``ln r``, minus 2.
    windows : tuple of (r, lo, hi) or None
        Target windows when spectral bounds were supplied.
    """

    nu_pointwise: tuple[tuple[float, float, float], ...]
    nu_slope: float
    slope_stderr: float
    windows: tuple[tuple[float, float, float], ...] | None = None

    def in_window(self) -> bool | None:
        if self.windows is None:
            return None
        return all(lo <= nu <= hi for (_, nu, _), (_, lo, hi) in zip(self.nu_pointwise, self.windows))

    def to_json(self) -> dict:
        out = {
            "nu_pointwise": [[r, nu] for r, nu, _ in self.nu_pointwise],
            "nu_stderr": [se for _, _, se in self.nu_pointwise],
            "nu_slope": self.nu_slope,
            "nu_slope_stderr": self.slope_stderr,
        }
        if self.windows is not None:
            out["windows"] = [list(w) for w in self.windows]
        return out


def exponent_window(r: float, lambda_min: float, lambda_max: float, rho_min: float, rho_max: float) -> tuple[float, float]:
    """``[ln(1/lambda_max)/ln rho_max - 2/ln r, ln(1/lambda_min)/ln rho_min + 2/ln r]``."""
    slack = 2.0 / math.log(r)
    return (
        math.log(1.0 / lambda_max) / math.log(rho_max) - slack,
        math.log(1.0 / lambda_min) / math.log(rho_min) + slack,
    )


def exit_exponent_fit(
    records: Sequence[ExitTimeRecord],
    scales: Sequence[float] | None = None,
    bounds: tuple[float, float, float, float] | None = None,
) -> ExponentFit:
    """Pointwise and slope-based exit exponents from records at increasing radii.

    Parameters
    ----------
    records : sequence of ExitTimeRecord
        At least three valid records with distinct radii.
    scales : sequence of float, optional
        Length scales ``R_k`` of the model; when given, the radii must span at
        least two of them.
    bounds : (lambda_min, lambda_max, rho_min, rho_max), optional
        Spectral bounds used to attach the target windows.
    """
    recs = sorted(records, key=lambda rec: rec.r)
    if len(recs) < 3 or len({rec.r for rec in recs}) < 3:
        raise ConfigError("need at least three records at distinct radii")
    if recs[0].r <= 1.0:
        raise ConfigError("exponents need radii above 1 (ln r must be positive)")
    bad = [rec.r for rec in recs if not rec.valid]
    if bad:
        raise ConfigError(f"records at r={bad} are invalid (censored)")
    if scales is not None:
        inside = [R for R in scales if recs[0].r <= R <= recs[-1].r]
        if len(inside) < 2:
            raise ConfigError("radii must span at least two scale lengths of the model")
    r = np.array([rec.r for rec in recs])
    tau = np.array([rec.tau_mean for rec in recs])
    se = np.array([rec.stderr for rec in recs])
    lr, lt = np.log(r), np.log(tau)
    lse = se / tau
    nu = lt / lr - 2.0
    nu_se = lse / lr
    w = 1.0 / lse**2
    X = np.stack([np.ones_like(lr), lr], axis=1)
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    coef = cov @ (X.T @ (w * lt))
    windows = None
    if bounds is not None:
        windows = tuple((float(ri), *exponent_window(ri, *bounds)) for ri in r)
    return ExponentFit(
        nu_pointwise=tuple((float(a), float(b), float(c)) for a, b, c in zip(r, nu, nu_se)),
        nu_slope=float(coef[1] - 2.0),
        slope_stderr=float(math.sqrt(cov[1, 1])),
        windows=windows,
    )


# ---------------------------------------------------------------------------
# Heat-kernel tails
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TailRecord:
    """Estimate of ``P_x[|y_t - x| >= r]`` with a 95% Clopper-Pearson interval."""

    t: float
    r: float
    p_hat: float
    ci_lo: float
    ci_hi: float
    paths: int
    hits: int

    def row(self) -> dict:
        return {
            "t": self.t,
            "r": self.r,
            "p_hat": self.p_hat,
            "ci_lo": self.ci_lo,
            "ci_hi": self.ci_hi,
            "paths": self.paths,
        }


def clopper_pearson(k: int, n: int, level: float = 0.95) -> tuple[float, float]:
    """Exact binomial confidence interval for ``k`` successes out of ``n``."""
    a = 1.0 - level
    lo = 0.0 if k == 0 else float(stats.beta.ppf(a / 2, k, n - k + 1))
    hi = 1.0 if k == n else float(stats.beta.ppf(1 - a / 2, k + 1, n - k))
    return lo, hi


@dataclass(frozen=True)
class TailFit:
    """Walk dimension fitted from tail probabilities.

    The unconstrained regression ``ln(-ln p) = c + a ln r + b ln t`` is
    invariant along the curves ``r^{d_w} / t = const``, which gives
    ``d_w = -a / b``.  ``d_w_constrained`` additionally forces the slope of
    ``ln(-ln p)`` against ``ln(r^{d_w}/t)`` to ``1/(d_w - 1)``; it is biased by
    prefactors of the tail and kept as a diagnostic.
    """

    d_w: float
    d_w_stderr: float
    a: float
    b: float
    c: float
    cells: int
    d_w_constrained: float

    def to_json(self) -> dict:
        return {
            "d_w": self.d_w,
            "d_w_stderr": self.d_w_stderr,
            "a": self.a,
            "b": self.b,
            "c": self.c,
            "cells": self.cells,
            "d_w_constrained": self.d_w_constrained,
        }


@dataclass(frozen=True)
class TailStudy:
    records: tuple[TailRecord, ...]
    fit: TailFit | None
    dt: float


def tail_fit(records: Sequence[TailRecord], p_range: tuple[float, float] = (0.005, 0.3)) -> TailFit:
    """Fit ``d_w`` from tail records with ``p_hat`` inside ``p_range``.

    Cells are weighted by the inverse delta-method variance of
    ``ln(-ln p_hat)``.  Zero-hit cells never enter the fit.
    """
    use = [rec for rec in records if p_range[0] <= rec.p_hat <= p_range[1] and rec.hits > 0]
    if len(use) < 4 or len({rec.r for rec in use}) < 2 or len({rec.t for rec in use}) < 2:
        raise ConfigError("not enough tail cells in the fitting range to separate r and t")
    p = np.array([rec.p_hat for rec in use])
    n = np.array([rec.paths for rec in use], dtype=float)
    lr = np.log([rec.r for rec in use])
    lt = np.log([rec.t for rec in use])
    y = np.log(-np.log(p))
    var = (1.0 - p) / (n * p * np.log(p) ** 2)
    w = 1.0 / var
    X = np.stack([np.ones_like(lr), lr, lt], axis=1)
    cov = np.linalg.inv(X.T @ (w[:, None] * X))
    c, a, b = cov @ (X.T @ (w * y))
    grad = np.array([0.0, -1.0 / b, a / b**2])
    d_w = -a / b
    se = float(math.sqrt(grad @ cov @ grad))

    def ssr(dw):
        z = (dw * lr - lt) / (dw - 1.0)
        off = float(np.sum(w * (y - z)) / np.sum(w))
        return float(np.sum(w * (y - z - off) ** 2))

    constrained = minimize_scalar(ssr, bounds=(1.05, 6.0), method="bounded").x
    return TailFit(
        d_w=float(d_w), d_w_stderr=se, a=float(a), b=float(b), c=float(c),
        cells=len(use), d_w_constrained=float(constrained),
    )


def heat_tail(
    V,
    t_list: Sequence[float],
    r_list: Sequence[float],
    config: SdeConfig | None = None,
    x0=None,
    p_range: tuple[float, float] = (0.005, 0.3),
) -> TailStudy:
    """Tail probabilities ``P_x[|y_t - x| >= r]`` on a ``(t, r)`` table and the ``d_w`` fit.

    All times must be multiples of the step.  The fit is omitted (``None``)
    when fewer than four cells fall inside ``p_range``.
    """
    cfg = config or SdeConfig()
    V = as_landscape(V)
    dt = cfg.step(V)
    ts = np.array(sorted(float(t) for t in t_list))
    steps = np.rint(ts / dt).astype(np.int64)
    if np.any(steps < 1) or np.any(np.abs(steps * dt - ts) > 1e-9 * ts):
        raise ConfigError(f"tail times must be positive multiples of dt={dt:g}")
    start = np.zeros(V.d) if x0 is None else np.broadcast_to(np.asarray(x0, float), (V.d,)).copy()
    kernel = _compile(V, "tail")
    sign = float(cfg.drift_sign)

    def one(i):
        return kernel(start, dt, sign, steps, path_generator(cfg.seed, i))

    disp = np.array(_map_paths(one, int(cfg.paths), cfg.worker_count()))
    n = disp.shape[0]
    records = []
    for j, t in enumerate(ts):
        for r in sorted(float(v) for v in r_list):
            k = int(np.count_nonzero(disp[:, j] >= r))
            lo, hi = clopper_pearson(k, n)
            records.append(TailRecord(float(t), r, k / n, lo, hi, n, k))
    try:
        fit = tail_fit(records, p_range)
    except ConfigError:
        fit = None
    return TailStudy(tuple(records), fit, dt)


# ---------------------------------------------------------------------------
# Stability probe
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StabilityReport:
    """Evidence for the two-sided exit-time sandwich at one ``(n, z, r)``.

    ``mu_hat`` is the smallest ``mu >= 1`` for which
    ``(1/mu) e^{-mu O} inf <= E <= mu e^{mu O} sup`` holds for some ``E``
    within three standard errors of the Monte Carlo estimate; ``mu_point``
    uses the estimate itself.
    """

    n: int
    n_top: int
    z: tuple[float, ...]
    r: float
    tau: float
    stderr: float
    inf_ref: float
    sup_ref: float
    osc_tail: float
    mu_hat: float
    mu_point: float
    inconclusive: bool

    def row(self) -> dict:
        return {
            "n": self.n, "n_top": self.n_top, "z": " ".join(map(repr, self.z)), "r": self.r,
            "tau": self.tau, "stderr": self.stderr, "inf_ref": self.inf_ref, "sup_ref": self.sup_ref,
            "osc_tail": self.osc_tail, "mu_hat": self.mu_hat, "mu_point": self.mu_point,
            "inconclusive": self.inconclusive,
        }


def _mu_for(need: float, osc: float) -> float:
    if need <= 1.0:
        return 1.0
    if osc == 0.0:
        return need
    if math.exp(osc) >= need:
        return 1.0
    return float(brentq(lambda m: m * math.exp(m * osc) - need, 1.0, need))


def _ball_oscillation(V: Landscape, center, r: float) -> float:
    if V.is_constant:
        return 0.0
    lo, hi = V.ball_range(center, r)
    margin = V.lipschitz_bound * (V.finest_wavelength / 16) * math.sqrt(V.d) / 2.0
    return max(0.0, (hi - margin) - (lo + margin))


def stability_probe(
    model: MultiscaleModel,
    n: int,
    z,
    r: float,
    config: SdeConfig | None = None,
    n_top: int | None = None,
    rel_tol: float = 0.05,
) -> StabilityReport:
    """Measure the sandwich constant between ``E_z^V`` and ``E^{V_0^n}`` on ``B(z, r)``.

    ``E_z^V[tau]`` is estimated by Monte Carlo for ``V = V_0^{n_top}``; the
    reference ``E_x^{V_0^n}[tau]`` comes from the exact 1-d quadrature or the
    2-d finite-volume solve, giving its infimum over ``B(z, r/2)`` and
    supremum over ``B(z, r)``.  The result is flagged inconclusive when the
    relative standard error exceeds ``rel_tol``.
    """
    from .oracles import exit_time_profile_1d, pde_exit_time

    cfg = config or SdeConfig()
    n_top = model.n_max if n_top is None else int(n_top)
    if not 0 <= n <= n_top <= model.n_max:
        raise ConfigError(f"need 0 <= n <= n_top <= {model.n_max}")
    if model.d > 2:
        raise ConfigError("stability_probe supports d <= 2")
    d = model.d
    z = np.broadcast_to(np.asarray(z, dtype=float), (d,)).copy()
    full = as_landscape(model, n_top)
    coarse = as_landscape(model, n)
    rec = mean_exit_time(full, r, start=z, config=cfg)
    if d == 1:
        wave = coarse.finest_wavelength
        m = 8192 if not math.isfinite(wave) else max(8192, int(64 * 2 * r / wave))
        xs, f = exit_time_profile_1d(coarse, (z[0] - r, z[0] + r), m)
        dist = np.abs(xs - z[0])
        inf_ref = float(f[dist <= r / 2].min())
        sup_ref = float(f.max())
    else:
        res = pde_exit_time(coarse, r, center=z, tensor=None)
        inf_ref = res.inf_within(r / 2)
        sup_ref = res.sup_within(r)
    osc = 0.0 if n == n_top else _ball_oscillation(as_landscape(model, n_top, n + 1), z, r)
    E, se = rec.tau_mean, rec.stderr

    def need(e):
        return max(inf_ref / e, e / sup_ref)

    e_best = min(max(math.sqrt(inf_ref * sup_ref), E - 3 * se), E + 3 * se)
    return StabilityReport(
        n=int(n), n_top=n_top, z=tuple(float(v) for v in z), r=float(r), tau=E, stderr=se,
        inf_ref=inf_ref, sup_ref=sup_ref, osc_tail=osc,
        mu_hat=_mu_for(need(e_best), osc), mu_point=_mu_for(need(E), osc),
        inconclusive=bool(se > rel_tol * E or not rec.valid),
    )
