"""Deterministic oracles for exit times and discrete identities.

These are independent of the Monte Carlo engine in :mod:`homog.sde` and are
used to check it:

* :func:`exact_exit_time_1d` integrates ``(e^{-2V} f')' = -2 e^{-2V}`` with
  ``f(a) = f(b) = 0`` in closed form by nested quadrature;
* :func:`pde_exit_time` solves the same equation on a disc in two dimensions
  by finite volumes;
* :func:`ergodicity_check` verifies ``L_U psi_l = l.D(U) l`` for the
  quadratic ergodicity function built from the corrector;
* :func:`green_monotonicity_check` compares Dirichlet Green functions of two
  ordered conductivities.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.integrate import cumulative_simpson, simpson

from .cell import (
    EffectiveTensor,
    SolverConfig,
    _CellProblem,
    _fv_faces,
    _harmonic,
    _solve_refined,
    _zero_mean,
    effective_diffusivity,
)
from .errors import ConfigError, ConvergenceError, ResolutionError
from .landscape import Landscape, as_landscape
from .potential import GridField, PotentialExpr, grid_nodes, sample_grid

# Quadrature grids start at this many points per finest wavelength.
_QUAD_POINTS_PER_WAVELENGTH = 64
_QUAD_MAX_POINTS = 1 << 24


# ---------------------------------------------------------------------------
# One dimension: nested quadrature
# ---------------------------------------------------------------------------


def _quad_grid(V: Landscape, a: float, b: float, n: int, x=None) -> np.ndarray:
    nodes = np.linspace(a, b, n + 1)
    if x is not None and a < x < b:
        nodes = np.union1d(nodes, [x])
    return nodes


def _profile_on(V: Landscape, nodes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Exit-time profile ``f`` and the weight ``e^{-2V}`` on sorted nodes."""
    v = V.value(nodes)
    vmin = float(v.min())
    # Factor e^{2 vmin} cancels between the two nested integrals.
    w_minus = np.exp(-2.0 * (v - vmin))
    w_plus = np.exp(2.0 * (v - vmin))
    M = cumulative_simpson(w_minus, x=nodes, initial=0.0)
    y2 = cumulative_simpson(w_plus, x=nodes, initial=0.0)
    y3 = cumulative_simpson(w_plus * M, x=nodes, initial=0.0)
    C = 2.0 * y3[-1] / y2[-1]
    f = C * y2 - 2.0 * y3
    f[0] = 0.0
    f[-1] = 0.0
    return f, w_minus


def _initial_intervals(V: Landscape, a: float, b: float) -> int:
    wave = V.finest_wavelength
    n = 1024 if not math.isfinite(wave) else int(math.ceil(_QUAD_POINTS_PER_WAVELENGTH * (b - a) / wave))
    n = max(n, 1024)
    return n + (n % 2)


def _refine(compute, V: Landscape, a: float, b: float, rtol: float) -> float:
    n = _initial_intervals(V, a, b)
    prev = compute(n)
    while True:
        n *= 2
        if n > _QUAD_MAX_POINTS:
            raise ResolutionError(f"quadrature did not reach rtol={rtol:g} within {_QUAD_MAX_POINTS} points")
        cur = compute(n)
        if abs(cur - prev) <= rtol * abs(cur):
            return cur
        prev = cur


def _check_interval(V: Landscape, interval) -> tuple[float, float]:
    if V.d != 1:
        raise ConfigError("the 1-d exit-time oracle needs a one-dimensional potential")
    a, b = (float(t) for t in interval)
    if not a < b:
        raise ConfigError(f"interval must satisfy a < b, got ({a}, {b})")
    return a, b


def exact_exit_time_1d(V, interval, x: float, rtol: float = 1e-10) -> float:
    """Mean exit time ``E_x[tau]`` from ``(a, b)`` for ``dy = dw - V'(y) dt``.

    Solves ``(1/2) f'' - V' f' = -1`` with ``f(a) = f(b) = 0`` through

    ``f(x) = C int_a^x e^{2V} - 2 int_a^x e^{2V(s)} int_a^s e^{-2V}``

    with ``C`` fixed by ``f(b) = 0``.  Both integrals use cumulative Simpson
    rules on grids refined until two successive values agree to ``rtol``.

    Parameters
    ----------
    V : PotentialExpr, MultiscaleModel or Landscape
        One-dimensional potential.
    interval : tuple of float
    x : float
        Starting point inside the interval.
    """
    V = as_landscape(V)
    a, b = _check_interval(V, interval)
    x = float(x)
    if not a <= x <= b:
        raise ConfigError(f"start {x} lies outside ({a}, {b})")
    if x in (a, b):
        return 0.0

    def compute(n):
        nodes = _quad_grid(V, a, b, n, x)
        f, _ = _profile_on(V, nodes)
        return float(f[np.searchsorted(nodes, x)])

    return _refine(compute, V, a, b, rtol)


def exact_gibbs_exit_time_1d(V, interval, rtol: float = 1e-10) -> float:
    """``E_m[tau]`` with the start drawn from ``m(dx) ∝ e^{-2V(x)} dx`` on the interval."""
    V = as_landscape(V)
    a, b = _check_interval(V, interval)

    def compute(n):
        nodes = _quad_grid(V, a, b, n)
        f, w = _profile_on(V, nodes)
        return float(simpson(f * w, x=nodes) / simpson(w, x=nodes))

    return _refine(compute, V, a, b, rtol)


def exit_time_profile_1d(V, interval, n: int = 4096) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and ``E_x[tau]`` on a uniform grid of ``n`` intervals (``n`` even)."""
    V = as_landscape(V)
    a, b = _check_interval(V, interval)
    n = int(n) + int(n) % 2
    nodes = np.linspace(a, b, n + 1)
    f, _ = _profile_on(V, nodes)
    return nodes, f


def gibbs_mass_ratio_1d(V, interval, rtol: float = 1e-10) -> float:
    """``(b - a) / int_a^b e^{-2V}``, the Gibbs-ball mean of ``e^{2V}`` in 1-d."""
    V = as_landscape(V)
    a, b = _check_interval(V, interval)

    def compute(n):
        nodes = _quad_grid(V, a, b, n)
        return float((b - a) / simpson(np.exp(-2.0 * V.value(nodes)), x=nodes))

    return _refine(compute, V, a, b, rtol)


# ---------------------------------------------------------------------------
# Two dimensions: finite volumes on a disc
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PdeExitResult:
    """Grid solution of the exit-time problem on ``B(center, r)``.

    Attributes
    ----------
    axis : ndarray
        Node offsets from the centre along each axis.
    f : ndarray
        Mean exit time at the nodes (zero outside the disc).
    inside : ndarray of bool
        Interior mask.
    f_center : float
    ratio : float or None
        ``f(center) * lambda_max(D(U)) / r**2`` when the tensor is known.
    """

    center: np.ndarray
    r: float
    axis: np.ndarray
    f: np.ndarray
    inside: np.ndarray
    f_center: float
    ratio: float | None

    def _distance(self) -> np.ndarray:
        X, Y = np.meshgrid(self.axis, self.axis, indexing="ij")
        return np.hypot(X, Y)

    def inf_within(self, radius: float) -> float:
        """Minimum of ``f`` over nodes within ``radius`` of the centre."""
        return float(self.f[self._distance() <= radius].min())

    def sup_within(self, radius: float) -> float:
        mask = (self._distance() <= radius) & self.inside
        return float(self.f[mask].max())


def _dirichlet_operator(weight: np.ndarray, inside: np.ndarray) -> sp.csr_matrix:
    """``-div(w grad)`` times ``h^2`` on the masked nodes, zero Dirichlet data outside.

    ``weight`` covers a box whose border nodes all lie outside the mask.
    """
    shape = weight.shape
    idx = -np.ones(shape, dtype=np.int64)
    idx[inside] = np.arange(int(inside.sum()))
    rows, cols, vals = [], [], []
    diag = np.zeros(int(inside.sum()))
    for axis in range(weight.ndim):
        lo = [slice(None)] * weight.ndim
        hi = [slice(None)] * weight.ndim
        lo[axis] = slice(0, -1)
        hi[axis] = slice(1, None)
        lo, hi = tuple(lo), tuple(hi)
        face = _harmonic(weight[lo], weight[hi])
        a_idx, b_idx = idx[lo], idx[hi]
        for p_idx, q_idx in ((a_idx, b_idx), (b_idx, a_idx)):
            m = p_idx >= 0
            np.add.at(diag, p_idx[m], face[m])
            both = m & (q_idx >= 0)
            rows.append(p_idx[both])
            cols.append(q_idx[both])
            vals.append(-face[both])
    n = diag.size
    rows.append(np.arange(n))
    cols.append(np.arange(n))
    vals.append(diag)
    return sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n)
    )


def _spd_solve(A: sp.csr_matrix, b: np.ndarray, tol: float = 1e-11) -> np.ndarray:
    import pyamg

    if A.shape[0] <= 40000:
        from scipy.sparse.linalg import spsolve

        return spsolve(A.tocsc(), b)
    ml = pyamg.smoothed_aggregation_solver(A, symmetry="symmetric", max_coarse=500)
    residuals: list[float] = []
    x = ml.solve(b, tol=tol, accel="cg", maxiter=500, residuals=residuals)
    rel = float(np.linalg.norm(b - A @ x) / np.linalg.norm(b))
    if rel > 10 * tol:
        raise ConvergenceError(f"multigrid solve stalled at relative residual {rel:.3e}", residuals)
    return x


def pde_exit_time(
    U,
    r: float,
    config: SolverConfig | None = None,
    center=(0.0, 0.0),
    tensor: EffectiveTensor | None = None,
) -> PdeExitResult:
    """Mean exit time from the disc ``B(center, r)`` in two dimensions.

    Solves ``div(e^{-2U} grad f) = -2 e^{-2U}`` by node-centred finite volumes
    with harmonic face weights on a square grid.  Nodes at distance ``>= r``
    from the centre carry the Dirichlet value ``f = 0`` (a staircase
    approximation of the circle, first order in the grid spacing).

    Parameters
    ----------
    U : PotentialExpr, MultiscaleModel or Landscape
    r : float
    config : SolverConfig, optional
        ``points_per_oscillation`` sets the spacing ``h`` relative to the
        finest wavelength; ``max_unknowns`` caps the grid.
    tensor : EffectiveTensor, optional
        ``D(U)`` used for the reported ratio.  Computed when ``U`` is a
        single periodic potential and no tensor is given.
    """
    cfg = config or SolverConfig()
    V = as_landscape(U)
    if V.d != 2:
        raise ConfigError("pde_exit_time is implemented for d = 2")
    r = float(r)
    if not r > 0:
        raise ConfigError("radius must be positive")
    center = np.asarray(center, dtype=float).reshape(2)
    h = min(r / 16.0, V.finest_wavelength / cfg.points_per_oscillation)
    M = int(math.ceil(r / h)) + 1
    if (2 * M + 1) ** 2 > cfg.max_unknowns:
        raise ResolutionError(
            f"disc of radius {r} at spacing {h:.3g} needs {(2 * M + 1) ** 2} nodes, "
            f"over the budget of {cfg.max_unknowns}"
        )
    h = r / (M - 1)
    axis = np.arange(-M, M + 1) * h
    X, Y = np.meshgrid(axis, axis, indexing="ij")
    inside = np.hypot(X, Y) < r - 1e-12 * r
    pts = np.stack([X + center[0], Y + center[1]], axis=-1)
    v = V.value(pts)
    w = np.exp(-2.0 * (v - v.min()))
    A = _dirichlet_operator(w, inside)
    f = np.zeros_like(w)
    f[inside] = _spd_solve(A, 2.0 * h * h * w[inside])
    f_center = float(f[M, M])
    ratio = None
    if tensor is None and isinstance(U, PotentialExpr):
        tensor = effective_diffusivity(U, cfg)
    if tensor is not None:
        ratio = f_center * tensor.lambda_max / r**2
    return PdeExitResult(center, r, axis, f, inside, f_center, ratio)


# ---------------------------------------------------------------------------
# Ergodicity identity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ErgodicityReport:
    """Outcome of :func:`ergodicity_check`.

    Attributes
    ----------
    residual : float
        ``||L_U psi_l - l.D l||_{L^2} / (l.D l)`` over one period.
    quadratic : float
        ``l.D l`` from the same discretization.
    mean_defect : float
        Relative gap between the Gibbs mean of ``|l - grad chi|^2`` and
        ``l.D l`` (the solvability condition of the ``phi_l`` problem).
    N : int
    """

    residual: float
    quadratic: float
    mean_defect: float
    N: int


def ergodicity_check(U, l, config: SolverConfig | None = None, mean_tol: float = 1e-3) -> ErgodicityReport:
    """Verify ``L_U psi_l = l.D(U) l`` with ``psi_l = (l.x - chi_l)^2 - phi_l``.

    ``L_U = (1/2) e^{2U} div(e^{-2U} grad)`` is discretized with the same
    harmonic-face finite volumes as the corrector.  ``phi_l`` solves
    ``L_U phi_l = |l - grad chi_l|^2 - l.D l`` in the zero-mean gauge, with
    the squared gradient reconstructed at nodes as the average of the two
    adjacent face values per axis.  Neighbour values of ``(l.x - chi_l)^2``
    are formed from the periodic corrector plus the linear part, so the
    check runs on a single period.

    Raises
    ------
    ConvergenceError
        If the Gibbs mean of the source deviates from ``l.D l`` by more than
        ``mean_tol`` (relative), so the ``phi_l`` problem is not solvable.
    """
    cfg = config or SolverConfig()
    if isinstance(U, GridField):
        u, d = np.asarray(U.samples), U.d
    else:
        d = U.d
        N = cfg.resolution(U.bandwidth, d)
        u = sample_grid(U, N).samples
    N = u.shape[0]
    l = np.broadcast_to(np.asarray(l, dtype=float), (d,)).copy()
    w = np.exp(-2.0 * u)
    problem = _CellProblem(w, d, "fv", cfg.preconditioner)
    chi, _, _, _ = problem.solve(l, cfg.tol, cfg.max_iter)
    chi = chi.reshape((N,) * d)
    h = 1.0 / N
    faces = [f.reshape((N,) * d) for f in problem.op.faces]
    quad = float(l @ problem.op.mean_flux(chi.ravel(), l)) / float(w.mean())

    # Face values of l - grad chi and the node reconstruction of its square.
    g = [l[k] - (np.roll(chi, -1, axis=k) - chi) / h for k in range(d)]
    s = sum(0.5 * (gk**2 + np.roll(gk**2, 1, axis=k)) for k, gk in enumerate(g))
    s_mean = float((w * s).sum() / w.sum())
    defect = abs(s_mean - quad) / quad
    if defect > mean_tol:
        raise ConvergenceError(
            f"Gibbs mean of the source differs from l.D l by {defect:.2e} (relative)", []
        )
    rho = s - s_mean

    # A = -div(w grad) so L phi = rho reads A phi = -2 w rho.
    b = _zero_mean(-2.0 * (w * rho).ravel())
    phi, _, _, _ = _solve_refined(problem._matvec, b, problem.precond, cfg.tol, cfg.max_iter, _zero_mean)
    L_phi = -0.5 * np.exp(2.0 * u) * (problem._matvec(phi)).reshape((N,) * d)

    x = grid_nodes(d, N)
    F = x @ l - chi
    acc = np.zeros_like(F)
    for k in range(d):
        up = F + h * g[k]  # F at x + h e_k
        down = F - h * np.roll(g[k], 1, axis=k)  # F at x - h e_k
        acc += faces[k] * (up**2 - F**2) - np.roll(faces[k], 1, axis=k) * (F**2 - down**2)
    L_psi = 0.5 * np.exp(2.0 * u) * acc / h**2 - L_phi
    residual = float(np.sqrt(np.mean((L_psi - quad) ** 2))) / quad
    return ErgodicityReport(residual=residual, quadratic=quad, mean_defect=defect, N=N)


# ---------------------------------------------------------------------------
# Green-function monotonicity
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class GreenReport:
    """Outcome of :func:`green_monotonicity_check`.

    Attributes
    ----------
    lam : float
        Constant with ``M <= lam * Q`` at every node.
    ratios : ndarray
        ``<G_Q f, f> / <G_M f, f>`` per probe.
    holds : bool
        Whether every ratio is at most ``lam`` (up to round-off).
    """

    lam: float
    ratios: np.ndarray
    holds: bool


def _dirichlet_samples(field, d: int, N: int) -> np.ndarray:
    """Samples on the closed box ``[0,1]^d`` with ``N + 1`` nodes per axis."""
    if isinstance(field, (int, float)):
        return np.full((N + 1,) * d, float(field))
    if isinstance(field, np.ndarray):
        if field.shape != (N + 1,) * d:
            raise ConfigError(f"sampled field must have shape {(N + 1,) * d}, got {field.shape}")
        return field.astype(float)
    V = as_landscape(field)
    if V.d != d:
        raise ConfigError("potential dimension does not match the domain")
    axes = [np.arange(N + 1) / N] * d
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    return np.asarray(V.value(pts), dtype=float)


def green_monotonicity_check(
    U, P, N: int = 64, d: int = 2, probes: int = 20, seed: int = 0
) -> GreenReport:
    """Check ``<G_Q f, f> <= lam <G_M f, f>`` for ``M = e^{-2U}``, ``Q = e^{-2(U+P)}``.

    ``G_M`` is the inverse of the Dirichlet finite-volume operator
    ``-div(M grad)`` on ``[0,1]^d`` with ``N`` cells per axis.  ``lam`` is
    ``e^{2 Osc(P)}`` on the nodes, raised if needed so that ``M <= lam Q``
    holds at every node (harmonic face averages preserve this ordering, hence
    the operator inequality).

    Parameters
    ----------
    U, P : PotentialExpr, Landscape, float or ndarray
        Potentials on the unit box; floats are constants and arrays are node
        samples of shape ``(N + 1,)*d``.
    """
    from scipy.sparse.linalg import splu

    u = _dirichlet_samples(U, d, N)
    pert = _dirichlet_samples(P, d, N)
    M = np.exp(-2.0 * u)
    Q = np.exp(-2.0 * (u + pert))
    lam = max(math.exp(2.0 * float(pert.max() - pert.min())), float((M / Q).max()))
    inside = np.zeros(M.shape, dtype=bool)
    inside[(slice(1, -1),) * d] = True
    A_M = splu(_dirichlet_operator(M, inside).tocsc())
    A_Q = splu(_dirichlet_operator(Q, inside).tocsc())
    rng = np.random.Generator(np.random.Philox(key=[seed, 0]))
    f = rng.standard_normal((int(inside.sum()), probes))
    gm = np.einsum("ij,ij->j", f, A_M.solve(f))
    gq = np.einsum("ij,ij->j", f, A_Q.solve(f))
    ratios = gq / gm
    holds = bool(np.all(ratios <= lam * (1.0 + 1e-12)))
    return GreenReport(lam=lam, ratios=ratios, holds=holds)
