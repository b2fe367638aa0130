"""Multi-scale scans and audits of effective diffusivities.

* :func:`decay_scan` computes ``D(V_0^n)`` for ``n = 0..n_max`` on the torus
  of period ``R_n`` (rescaled to the unit torus) and fits decay rates.
* :func:`sandwich_audit` reports the smallest ``eps`` such that
  ``exp(-n eps) prod lambda_min(D(U_k)) <= D(V_0^n) <= exp(n eps) prod lambda_max(D(U_k))``.
* :func:`two_scale_convergence_study` compares ``D(U(R.) + T)`` with the
  two-scale limit ``D(U, T)`` for growing ``R``.
* :func:`translation_audit` measures how much ``D(U(R. + y) + T)`` moves
  with the offset ``y``.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .cell import (
    EffectiveTensor,
    SolverConfig,
    effective_diffusivity,
    log_spectral_factors,
    two_scale_diffusivity,
    voigt_reiss,
)
from .errors import ConfigError, ResolutionError
from .potential import GridField, MultiscaleModel, PotentialExpr, holder_seminorm, sample_grid


@dataclass(frozen=True, eq=False)
class DecayRecord:
    """Effective diffusivity of ``V_0^n`` with the per-scale tensors used to bound it."""

    n: int
    R_n: int
    tensor: EffectiveTensor
    per_scale: tuple[EffectiveTensor, ...]
    N: int
    seconds: float


@dataclass(frozen=True)
class RateEstimate:
    """Least-squares slopes of ``ln lambda_max`` and ``ln lambda_min`` against ``n``."""

    lambda_plus: float
    lambda_minus: float
    residual_plus: float
    residual_minus: float
    window: tuple[int, ...]


@dataclass(frozen=True, eq=False)
class DecayScan:
    records: tuple[DecayRecord, ...]
    rate: RateEstimate | None
    eps_hat: tuple[float, ...]
    within_hypothesis: bool

    def ln_lambda_max(self) -> np.ndarray:
        return np.log([r.tensor.lambda_max for r in self.records])


def _ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Slope, intercept and RMS residual of a least-squares line."""
    if len(x) == 1:
        return 0.0, float(y[0]), 0.0
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = y - A @ coef
    return float(coef[0]), float(coef[1]), float(np.sqrt(np.mean(resid**2)))


def fit_rates(records: Sequence[DecayRecord], window: Sequence[int] | None = None) -> RateEstimate:
    """Fit slopes over the last ``ceil(n_max / 2)`` records (or an explicit window)."""
    if window is None:
        ns = [r.n for r in records]
        count = max(2, math.ceil(ns[-1] / 2))
        window = ns[-count:]
    byn = {r.n: r for r in records}
    x = np.array(window, dtype=float)
    lp = np.log([byn[n].tensor.lambda_max for n in window])
    lm = np.log([byn[n].tensor.lambda_min for n in window])
    sp, _, rp = _ols(x, lp)
    sm, _, rm = _ols(x, lm)
    return RateEstimate(sp, sm, rp, rm, tuple(int(n) for n in window))


def scan_resolution(model: MultiscaleModel, n: int, config: SolverConfig, period_points: int | None) -> int:
    """Grid size for ``V_0^n(R_n x)``.

    With ``period_points`` the grid holds that many points per period of the
    smallest scale, i.e. ``N = period_points * R_n``; otherwise the solver's
    points-per-oscillation policy is applied to the whole superposition.
    """
    W = model.periodic_potential(0, n)
    if period_points is None:
        return replace(config, N=None).resolution(W.bandwidth, model.d)
    N = 4
    while N < period_points * model.R[n]:
        N *= 2
    return replace(config, N=N).resolution(W.bandwidth, model.d)


def _diffusivity_1d(W: PotentialExpr) -> EffectiveTensor:
    """Exact 1-d value ``(<exp(2W)> <exp(-2W)>)^{-1}`` by converged trapezoidal quadrature."""
    val = voigt_reiss(W, rtol=1e-12)
    return EffectiveTensor(np.array([[val]]), residual=0.0, N=0)


def decay_scan(
    model: MultiscaleModel,
    n_max: int,
    config: SolverConfig | None = None,
    period_points: int | None = None,
) -> DecayScan:
    """Effective diffusivities of ``V_0^n`` for ``n = 0..n_max``.

    In dimension one the diffusivity is the harmonic-mean formula evaluated
    by quadrature (exact up to round-off); in higher dimension the cell
    problem is solved on the unit torus after the substitution
    ``x -> R_n x``.  The per-scale tensors ``D(U_k)`` are computed at the
    same number of points per period as the superposition so that
    discretization errors are comparable.

    Raises
    ------
    ResolutionError
        Up front, if the largest grid would exceed the memory budget.
    """
    cfg = config or SolverConfig()
    if not 0 <= n_max <= model.n_max:
        raise ConfigError(f"n_max must lie in [0, {model.n_max}], got {n_max}")
    d = model.d
    sizes = []
    if d > 1:
        for n in range(n_max + 1):
            sizes.append(scan_resolution(model, n, cfg, period_points))
        if max(sizes) ** d > cfg.max_unknowns:
            raise ResolutionError(f"scan needs N={max(sizes)}, beyond the budget")
    cache: dict = {}

    def per_scale(k: int) -> EffectiveTensor:
        U = model.scales[k]
        key = (U, period_points)
        if key not in cache:
            if d == 1:
                cache[key] = _diffusivity_1d(U)
            else:
                N = scan_resolution(MultiscaleModel((U,), ()), 0, cfg, period_points)
                cache[key] = effective_diffusivity(U, replace(cfg, N=N))
        return cache[key]

    records = []
    for n in range(n_max + 1):
        t0 = time.perf_counter()
        W = model.periodic_potential(0, n)
        if d == 1:
            tensor = _diffusivity_1d(W)
            N = 0
        else:
            N = sizes[n]
            tensor = effective_diffusivity(W, replace(cfg, N=N))
        scales = tuple(per_scale(k) for k in range(n + 1))
        records.append(DecayRecord(n, model.R[n], tensor, scales, N, time.perf_counter() - t0))
    eps = sandwich_audit(records)
    rate = fit_rates(records) if n_max >= 1 else None
    return DecayScan(tuple(records), rate, tuple(eps), model.within_hypothesis())


def sandwich_audit(records: Sequence[DecayRecord], per_scale_tensors=None) -> list[float]:
    """Smallest ``eps >= 0`` validating the product sandwich at each ``n``.

    Parameters
    ----------
    records : sequence of DecayRecord
    per_scale_tensors : sequence of EffectiveTensor, optional
        ``D(U_k)`` for ``k = 0..n_max``; defaults to the tensors stored in
        each record.
    """
    out = []
    for rec in records:
        scales = rec.per_scale if per_scale_tensors is None else per_scale_tensors[: rec.n + 1]
        if rec.n == 0:
            out.append(0.0)
            continue
        upper = sum(math.log(t.lambda_max) for t in scales)
        lower = sum(math.log(t.lambda_min) for t in scales)
        eps = max(
            0.0,
            (math.log(rec.tensor.lambda_max) - upper) / rec.n,
            (lower - math.log(rec.tensor.lambda_min)) / rec.n,
        )
        out.append(eps)
    return out


def write_decay_csv(scan: DecayScan, path, include_seconds: bool = False) -> None:
    """Decay table ``n, R_n, lambda_min, lambda_max, ln_lambda_max, eps_hat, N, seconds``.

    Wall time is environment dependent; unless ``include_seconds`` is set the
    column is written empty so that reruns are byte-identical (timings go to
    the run manifest).
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["n", "R_n", "lambda_min", "lambda_max", "ln_lambda_max", "eps_hat", "N", "seconds"])
        for rec, eps in zip(scan.records, scan.eps_hat):
            t = rec.tensor
            w.writerow([
                rec.n, rec.R_n, repr(t.lambda_min), repr(t.lambda_max), repr(math.log(t.lambda_max)),
                repr(eps), rec.N, f"{rec.seconds:.3f}" if include_seconds else "",
            ])


# ---------------------------------------------------------------------------
# Two-scale convergence
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TwoScaleRow:
    R: int
    f_minus: float
    f_plus: float
    e: float
    eps_corollary: float
    tensor: EffectiveTensor


@dataclass(frozen=True, eq=False)
class TwoScaleStudy:
    D_U: EffectiveTensor
    D_T: EffectiveTensor
    D_UT: EffectiveTensor
    rows: tuple[TwoScaleRow, ...]

    def errors(self) -> np.ndarray:
        return np.array([r.e for r in self.rows])


def two_scale_convergence_study(
    U: PotentialExpr,
    T: PotentialExpr,
    R_list: Sequence[int],
    config: SolverConfig | None = None,
) -> TwoScaleStudy:
    """Compare ``D(U(R.) + T)`` with ``D(U, T)`` in the log-spectral metric.

    For each ``R`` the smallest factors ``f_minus <= f_plus`` with
    ``f_minus D(U,T) <= D(U(R.)+T) <= f_plus D(U,T)`` are reported together
    with ``e(R) = max(ln f_plus, -ln f_minus)``.  The column
    ``eps_corollary`` is the smallest ``eps`` with
    ``lambda_min(D(U)) D(T) e^{-eps} <= D(U(R.)+T) <= lambda_max(D(U)) D(T) e^{eps}``.

    The collocation scheme is used throughout (the two-scale limit needs a
    full matrix weight, and comparing like with like keeps discretization
    error out of ``e``).
    """
    cfg = replace(config or SolverConfig(), scheme="spectral", preconditioner="spectral")
    if U.d != T.d:
        raise ConfigError("U and T must share one dimension")
    for R in R_list:
        if not isinstance(R, (int, np.integer)) or R < 2:
            raise ConfigError(f"scale ratios must be integers >= 2, got {R!r}")
    D_U = effective_diffusivity(U, cfg)
    D_T = effective_diffusivity(T, cfg)
    D_UT = two_scale_diffusivity(D_U, T, cfg)
    rows = []
    for R in R_list:
        W = U.rescaled(int(R)) + T
        D_R = effective_diffusivity(W, cfg)
        fm, fp = log_spectral_factors(D_R, D_UT)
        gm, gp = log_spectral_factors(D_R, D_T)
        eps_c = max(0.0, math.log(gp / D_U.lambda_max), math.log(D_U.lambda_min / gm))
        rows.append(TwoScaleRow(int(R), fm, fp, max(math.log(fp), -math.log(fm)), eps_c, D_R))
    return TwoScaleStudy(D_U, D_T, D_UT, tuple(rows))


def write_convergence_csv(study: TwoScaleStudy, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["R", "f_minus", "f_plus", "e"])
        for r in study.rows:
            w.writerow([r.R, repr(r.f_minus), repr(r.f_plus), repr(r.e)])


# ---------------------------------------------------------------------------
# Translation audit
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TranslationRow:
    y: tuple[float, ...]
    g: float
    bound: float

    @property
    def within_bound(self) -> bool:
        return self.g <= self.bound


def translation_audit(
    U: PotentialExpr,
    T: PotentialExpr,
    R: int,
    y_list: Sequence[Sequence[float]],
    config: SolverConfig | None = None,
    alpha: float = 1.0,
    tol: float = 1e-8,
) -> list[TranslationRow]:
    """Symmetric log factor between ``D(U(R.+y) + T)`` and ``D(U(R.) + T)``.

    Each offset must be grid-commensurate (``y = R j / N`` modulo 1), so the
    translated fast scale is an exact roll of the sampled one.  The bound
    reported alongside is ``4 |T|_alpha / R^alpha + tol`` with the Hölder
    seminorm estimated on a probe grid.
    """
    cfg = config or SolverConfig()
    if U.d != T.d:
        raise ConfigError("U and T must share one dimension")
    d = U.d
    SU = U.rescaled(int(R))
    N = cfg.resolution((SU + T).bandwidth, d)
    su = sample_grid(SU, N).samples
    t = sample_grid(T, N).samples
    sub = replace(cfg, N=N)
    base = effective_diffusivity(GridField(d, N, su + t), sub)
    bound = 4.0 * holder_seminorm(T, alpha) / float(R) ** alpha + tol
    rows = []
    for y in y_list:
        y = np.broadcast_to(np.asarray(y, dtype=float), (d,))
        shift = y * N / R
        j = np.rint(shift)
        if np.any(np.abs(shift - j) > 1e-9):
            raise ConfigError(f"offset {tuple(y)} is not a multiple of R/N = {R}/{N}")
        rolled = np.roll(su, tuple(int(-v) for v in j), axis=tuple(range(d)))
        Dy = effective_diffusivity(GridField(d, N, rolled + t), sub)
        fm, fp = log_spectral_factors(Dy, base)
        rows.append(TranslationRow(tuple(float(v) for v in y), max(math.log(fp), -math.log(fm), 0.0), bound))
    return rows
