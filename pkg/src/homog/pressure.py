"""Pressure of the expanding map ``x -> rho x`` and the decay-rate functional ``Z``.

The pressure is computed as the numerical limit of ``(1/n) ln I_n`` with

    I_n = integral over T^d of exp(sum_{k<n} U(rho^k x mod 1)) dx.

On a uniform grid of ``N`` nodes per axis, ``rho^k x mod 1`` maps node ``j``
to node ``rho^k j mod N``, so Birkhoff sums are gathered from a single
sampling of ``U``.  Integrals use the trapezoidal rule (spectrally accurate
for periodic integrands) in log-sum-exp form.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ResolutionError
from .potential import PotentialExpr, sample_grid

# Floor added to pressure uncertainties: the fits below cannot resolve slopes
# smaller than this reliably in double precision.
SIGMA_FLOOR = 1e-6


@dataclass(frozen=True)
class QuadratureConfig:
    """Resolution rule for Birkhoff integrals.

    Parameters
    ----------
    q : float
        Points per period of the finest Birkhoff frequency ``rho^(n-1) f_max``
        (at least 8).
    max_points : int
        Budget on the total number of grid points.
    check_doubling : bool
        Also evaluate on the doubled grid and record the change.
    """

    q: float = 8.0
    max_points: int = 1 << 24
    check_doubling: bool = True

    def __post_init__(self):
        if self.q < 8:
            raise ConfigError(f"q must be at least 8, got {self.q!r}")


@dataclass(frozen=True)
class PressureEstimate:
    """Slope of ``ln I_n`` in ``n`` for the potential fed to the Birkhoff sums."""

    rho: int
    ns: tuple[int, ...]
    ln_I: tuple[float, ...]
    resolution: tuple[int, ...]
    slope: float
    slope_stderr: float
    fit_residual: float
    aitken: float
    quadrature_change: float

    @property
    def sigma(self) -> float:
        """Combined uncertainty: fit standard error, quadrature change and a floor."""
        return math.hypot(self.slope_stderr, self.quadrature_change) + SIGMA_FLOOR


@dataclass(frozen=True)
class CocycleEstimate:
    """Sequence ``a_n = (1/n) sup |S_n U - n <U>|`` and its tail classification."""

    rho: int
    ns: tuple[int, ...]
    a: tuple[float, ...]
    limit: float
    threshold: float

    @property
    def positive(self) -> bool:
        return self.limit > self.threshold


@dataclass(frozen=True)
class ZEstimate:
    rho: int
    Z: float
    sigma: float
    plus: PressureEstimate
    minus: PressureEstimate
    cocycle: CocycleEstimate | None = None

    @property
    def classification(self) -> str:
        """``"negative"`` when ``Z < -3 sigma``, ``"zero"`` when ``|Z| <= 3 sigma``.

        ``"positive"`` would contradict ``Z <= 0`` and flags a numerical problem.
        """
        if self.Z < -3.0 * self.sigma:
            return "negative"
        if self.Z <= 3.0 * self.sigma:
            return "zero"
        return "positive"

    @property
    def consistent(self) -> bool | None:
        """Agreement between the sign of ``Z`` and the cocycle criterion."""
        if self.cocycle is None:
            return None
        return (self.classification == "negative") == self.cocycle.positive

    def to_json(self) -> dict:
        return {
            "rho": self.rho,
            "P_2U": self.plus.slope,
            "P_minus2U": self.minus.slope,
            "Z": self.Z,
            "Z_sigma": self.sigma,
            "criterion_limsup": None if self.cocycle is None else self.cocycle.limit,
            "classification": self.classification,
        }


def _birkhoff_grid(U: PotentialExpr, rho: int, n: int, q: float) -> int:
    """Grid size giving ``q`` points per period of ``rho^(n-1) * bandwidth``."""
    finest = max(U.bandwidth, 1.0) * float(rho) ** max(n - 1, 0)
    N = 8
    while N < q * finest:
        N *= 2
    return N


def _birkhoff_sum(u: np.ndarray, rho: int, n: int) -> np.ndarray:
    """``sum_{k<n} u(rho^k x)`` on the grid nodes of ``u`` (any dimension)."""
    N = u.shape[0]
    d = u.ndim
    S = np.zeros_like(u)
    base = np.arange(N, dtype=np.int64)
    mult = 1
    for _ in range(n):
        idx = (base * mult) % N
        S += u[np.ix_(*([idx] * d))]
        mult = (mult * rho) % N
    return S


def _log_mean_exp(S: np.ndarray) -> float:
    m = float(S.max())
    return m + math.log(float(np.exp(S - m).mean()))


def birkhoff_log_integral(
    U: PotentialExpr,
    rho: int,
    n: int,
    config: QuadratureConfig | None = None,
    N: int | None = None,
    shift: float = 0.0,
) -> float:
    """``ln I_n`` for ``I_n = <exp(sum_{k<n} (U + shift)(rho^k x))>`` on the unit torus.

    ``shift`` restores a constant that the normalization ``U(0) = 0`` of
    :class:`PotentialExpr` removes; it contributes exactly ``n * shift``.

    Raises
    ------
    ResolutionError
        If the grid required by the resolution rule exceeds the budget.
    """
    return _log_integral(U, rho, n, config or QuadratureConfig(), N)[0] + n * shift


def _log_integral(U, rho, n, cfg, N=None):
    if not isinstance(rho, (int, np.integer)) or rho < 2:
        raise ConfigError(f"rho must be an integer >= 2, got {rho!r}")
    if n == 0 or U.is_constant:
        return 0.0, 0, 0.0
    if N is None:
        N = _birkhoff_grid(U, rho, n, cfg.q)
    if N**U.d > cfg.max_points:
        raise ResolutionError(
            f"Birkhoff integral at n={n}, rho={rho} needs N={N} per axis (d={U.d}), beyond the budget"
        )
    u = sample_grid(U, N).samples
    val = _log_mean_exp(_birkhoff_sum(u, rho, n))
    change = 0.0
    if cfg.check_doubling and (2 * N) ** U.d <= cfg.max_points:
        u2 = sample_grid(U, 2 * N).samples
        change = abs(_log_mean_exp(_birkhoff_sum(u2, rho, n)) - val)
    return val, N, change


def feasible_n(U: PotentialExpr, rho: int, config: QuadratureConfig | None = None) -> int:
    """Largest ``n`` whose Birkhoff grid fits the budget (with room for the doubling check)."""
    cfg = config or QuadratureConfig()
    factor = 2 if cfg.check_doubling else 1
    n = 1
    while (factor * _birkhoff_grid(U, rho, n + 1, cfg.q)) ** U.d <= cfg.max_points:
        n += 1
    return n


def _slope_fit(ns: np.ndarray, ys: np.ndarray) -> tuple[float, float, float]:
    A = np.vstack([ns, np.ones_like(ns)]).T
    coef, *_ = np.linalg.lstsq(A, ys, rcond=None)
    resid = ys - A @ coef
    dof = len(ns) - 2
    s2 = float(resid @ resid) / dof if dof > 0 else 0.0
    var = s2 / float(((ns - ns.mean()) ** 2).sum())
    return float(coef[0]), math.sqrt(var), float(np.sqrt(np.mean(resid**2)))


def _aitken(increments: np.ndarray) -> float:
    if len(increments) < 3:
        return float(increments[-1])
    s0, s1, s2 = increments[-3:]
    denom = s2 - 2.0 * s1 + s0
    if abs(denom) < 1e-14 * max(1.0, abs(s2)):
        return float(s2)
    return float(s2 - (s2 - s1) ** 2 / denom)


def pressure_estimate(
    U: PotentialExpr,
    rho: int,
    n_range: Sequence[int] | None = None,
    config: QuadratureConfig | None = None,
    shift: float = 0.0,
) -> PressureEstimate:
    """Least-squares slope of ``ln I_n`` over ``n_range`` plus an Aitken estimate.

    ``shift`` is a constant added to ``U`` (see :func:`birkhoff_log_integral`).

    ``n_range`` defaults to the feasible ``n`` from the upper half of
    ``1..feasible_n`` (at least three points).
    """
    cfg = config or QuadratureConfig()
    if n_range is None:
        top = feasible_n(U, rho, cfg)
        n_range = range(max(1, top // 2), top + 1)
        if len(n_range) < 3:
            n_range = range(max(1, top - 2), top + 1)
    ns = sorted({int(n) for n in n_range})
    if len(ns) < 3 or ns[0] < 1:
        raise ConfigError("a pressure slope needs at least three distinct values of n >= 1")
    vals, res, changes = [], [], []
    for n in ns:
        v, N, ch = _log_integral(U, rho, n, cfg)
        vals.append(v + n * shift)
        res.append(N)
        changes.append(ch)
    x = np.array(ns, dtype=float)
    y = np.array(vals)
    slope, stderr, resid = _slope_fit(x, y)
    incr = np.diff(y) / np.diff(x)
    return PressureEstimate(
        rho=int(rho),
        ns=tuple(ns),
        ln_I=tuple(float(v) for v in vals),
        resolution=tuple(res),
        slope=slope,
        slope_stderr=stderr,
        fit_residual=resid,
        aitken=_aitken(incr),
        quadrature_change=max(changes) / max(1.0, x[-1] - x[0]),
    )


def cocycle_criterion(
    U: PotentialExpr, rho: int, n_max: int, oversampling: float = 4.0, max_points: int = 1 << 24
) -> CocycleEstimate:
    """``a_n = (1/n) max |S_n U - n <U>|`` on probe grids, ``n = 1..n_max``.

    The grid for each ``n`` resolves ``rho^(n-1) * bandwidth`` with the given
    oversampling; grid maxima are lower estimates of the supremum.  The tail
    (upper half of ``n``) is fitted by ``a_n = c + b/n`` and the limit ``c``
    is compared with ``5%`` of ``max |U - <U>|``: above it the sums grow
    linearly (positive limsup), below it they stay bounded.
    """
    if n_max < 2:
        raise ConfigError("the cocycle criterion needs n_max >= 2")
    if U.is_constant:
        ns = tuple(range(1, n_max + 1))
        return CocycleEstimate(int(rho), ns, (0.0,) * n_max, 0.0, 0.0)
    ref_N = _birkhoff_grid(U, 2, 1, 16)
    u_ref = sample_grid(U, ref_N).samples
    mean = float(u_ref.mean())
    amp = float(np.abs(u_ref - mean).max())
    a = []
    for n in range(1, n_max + 1):
        N = _birkhoff_grid(U, rho, n, oversampling)
        if N**U.d > max_points:
            raise ResolutionError(f"probe grid for n={n} needs N={N}, beyond the budget")
        u = sample_grid(U, N).samples - mean
        a.append(float(np.abs(_birkhoff_sum(u, rho, n)).max()) / n)
    ns = np.arange(1, n_max + 1, dtype=float)
    tail = ns >= max(1, math.ceil(n_max / 2))
    if tail.sum() < 2:
        tail[-2:] = True
    A = np.vstack([np.ones(tail.sum()), 1.0 / ns[tail]]).T
    coef, *_ = np.linalg.lstsq(A, np.array(a)[tail], rcond=None)
    return CocycleEstimate(int(rho), tuple(int(n) for n in ns), tuple(a), float(coef[0]), 0.05 * amp)


def z_functional(
    U: PotentialExpr,
    rho: int,
    n_range: Sequence[int] | None = None,
    config: QuadratureConfig | None = None,
    cocycle_n_max: int | None = None,
) -> ZEstimate:
    """``Z(U) = -(P(2U) + P(-2U))`` with combined uncertainty and the cocycle criterion."""
    plus = pressure_estimate(2 * U, rho, n_range, config)
    minus = pressure_estimate(-2 * U, rho, plus.ns, config)
    Z = -(plus.slope + minus.slope)
    sigma = math.hypot(plus.sigma, minus.sigma)
    coc = None
    if cocycle_n_max is None:
        cocycle_n_max = max(plus.ns)
    if cocycle_n_max >= 2:
        coc = cocycle_criterion(U, rho, cocycle_n_max)
    return ZEstimate(int(rho), Z, sigma, plus, minus, coc)


def write_pressure_csv(est: PressureEstimate, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "ln_I_n", "resolution"])
        for n, v, N in zip(est.ns, est.ln_I, est.resolution):
            w.writerow([n, repr(v), N])


def write_z_json(z: ZEstimate, path) -> None:
    with open(path, "w") as fh:
        json.dump(z.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
