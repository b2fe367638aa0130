"""Periodic cell problems and effective tensors.

The corrector ``chi_l`` of a direction ``l`` solves the divergence-form
problem ``div(W (l - grad chi_l)) = 0`` on the unit torus, with ``W`` the
Gibbs weight ``exp(-2U)`` (scalar) or a matrix field.  The effective tensor is
the normalized mean flux ``D l = <W (l - grad chi_l)> / <w>``, where ``w`` is
the scalar Gibbs weight.

Two discretizations are provided:

``"fv"``
    Node-centred finite volumes with harmonic face averaging of scalar (or
    per-axis diagonal) weights.  Second order, robust for high contrast.
``"spectral"``
    Fourier collocation ``-div_s(W grad_s chi)`` with Nyquist modes removed
    from the derivative.  Handles full matrix weights and yields fluxes that
    are divergence-free to solver tolerance in the spectral sense.

Both are solved by preconditioned conjugate gradients with either a
constant-coefficient FFT preconditioner or a smoothed-aggregation algebraic
multigrid preconditioner (pyamg, finite volumes only).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from .errors import ConfigError, ConvergenceError, ResolutionError
from .potential import GridField, PotentialExpr, sample_grid

# A grid must provide at least this many points per finest oscillation.
MIN_POINTS_PER_OSCILLATION = 2.0


@dataclass(frozen=True)
class SolverConfig:
    """Numerical settings for cell problems.

    Parameters
    ----------
    tol : float
        Relative residual tolerance, in ``(0, 1e-4]``.
    max_iter : int
        Iteration cap for conjugate gradients (at least 100).
    points_per_oscillation : float
        Resolution policy: ``N >= points_per_oscillation * bandwidth``.
    N : int, optional
        Explicit resolution overriding the policy (still checked against
        ``MIN_POINTS_PER_OSCILLATION``).
    scheme : {"fv", "spectral"}
    preconditioner : {"spectral", "amg"}
    max_unknowns : int
        Memory budget in grid points.
    """

    tol: float = 1e-9
    max_iter: int = 2000
    points_per_oscillation: float = 16.0
    N: int | None = None
    scheme: str = "fv"
    preconditioner: str = "spectral"
    max_unknowns: int = 1 << 23

    def __post_init__(self):
        if not (0.0 < self.tol <= 1e-4):
            raise ConfigError(f"tolerance must lie in (0, 1e-4], got {self.tol!r}")
        if int(self.max_iter) < 100:
            raise ConfigError(f"max_iter must be at least 100, got {self.max_iter!r}")
        if self.points_per_oscillation < MIN_POINTS_PER_OSCILLATION:
            raise ConfigError(
                f"points_per_oscillation must be at least {MIN_POINTS_PER_OSCILLATION}"
            )
        if self.N is not None and (self.N < 4 or self.N & (self.N - 1)):
            raise ConfigError(f"N must be a power of two >= 4, got {self.N!r}")
        if self.scheme not in ("fv", "spectral"):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.preconditioner not in ("spectral", "amg"):
            raise ConfigError(f"unknown preconditioner {self.preconditioner!r}")
        if self.preconditioner == "amg" and self.scheme != "fv":
            # The collocation operator has a larger null space (Nyquist modes)
            # than the finite-volume matrix, which spoils multigrid as a preconditioner.
            raise ConfigError("the amg preconditioner is available for scheme='fv' only")

    def resolution(self, bandwidth: float, d: int) -> int:
        """Grid size for a field of the given per-axis bandwidth.

        Raises
        ------
        ResolutionError
            If the grid is under-resolved or exceeds ``max_unknowns``.
        """
        if self.N is not None:
            N = int(self.N)
        else:
            N = 8
            while N < self.points_per_oscillation * bandwidth:
                N *= 2
        if bandwidth > 0 and N < MIN_POINTS_PER_OSCILLATION * bandwidth:
            raise ResolutionError(
                f"N={N} resolves only {N / bandwidth:.2f} points per finest oscillation "
                f"(bandwidth {bandwidth:g}); at least {MIN_POINTS_PER_OSCILLATION} required"
            )
        if N**d > self.max_unknowns:
            raise ResolutionError(f"N={N} in d={d} exceeds the budget of {self.max_unknowns} unknowns")
        return N


@dataclass(frozen=True, eq=False)
class EffectiveTensor:
    """Symmetric positive-definite effective tensor with its eigen decomposition."""

    matrix: np.ndarray
    eigenvalues: np.ndarray = field(init=False)
    eigenvectors: np.ndarray = field(init=False)
    residual: float = 0.0
    N: int = 0
    asymmetry: float = 0.0

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError(f"tensor must be square, got shape {m.shape}")
        m = 0.5 * (m + m.T)
        w, v = np.linalg.eigh(m)
        for name, arr in (("matrix", m), ("eigenvalues", w), ("eigenvectors", v)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def d(self) -> int:
        return self.matrix.shape[0]

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[-1])

    def quadratic(self, l) -> float:
        l = np.asarray(l, dtype=float)
        return float(l @ self.matrix @ l)

    def to_json(self) -> dict:
        return {
            "d": self.d,
            "matrix": self.matrix.tolist(),
            "eigs": self.eigenvalues.tolist(),
            "residual": float(self.residual),
            "N": int(self.N),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EffectiveTensor":
        return cls(np.asarray(obj["matrix"], dtype=float), residual=float(obj["residual"]), N=int(obj["N"]))

    @classmethod
    def identity(cls, d: int, scale: float = 1.0) -> "EffectiveTensor":
        return cls(scale * np.eye(d))


@dataclass(frozen=True, eq=False)
class CorrectorSolution:
    """Correctors on a grid together with the data needed to post-process them.

    Attributes
    ----------
    correctors : tuple of GridField
        Zero-mean correctors, one per solved direction.
    directions : ndarray
        The directions ``l`` (rows) matching ``correctors``.
    gibbs : GridField
        Samples of the scalar Gibbs weight ``exp(-2U)``.
    mass_minus, mass_plus : float
        Grid means of ``exp(-2U)`` and ``exp(2U)`` (the integrals over the torus).
    residuals : tuple of float
        Final true relative residual per direction.
    iterations : tuple of int
    scheme : str
    tensor : EffectiveTensor or None
        Present when all coordinate directions were solved.
    """

    correctors: tuple[GridField, ...]
    directions: np.ndarray
    gibbs: GridField
    mass_minus: float
    mass_plus: float
    residuals: tuple[float, ...]
    iterations: tuple[int, ...]
    scheme: str
    tensor: EffectiveTensor | None = None
    histories: tuple[tuple[float, ...], ...] = ()

    @property
    def N(self) -> int:
        return self.gibbs.N

    @property
    def d(self) -> int:
        return self.gibbs.d

    def sup_norm(self, i: int = 0) -> float:
        """Gauge-adjusted sup norm ``max |chi - chi(0)|`` of corrector ``i``."""
        s = self.correctors[i].samples
        return float(np.abs(s - s.flat[0]).max())


# ---------------------------------------------------------------------------
# Conjugate gradients
# ---------------------------------------------------------------------------


def pcg(
    matvec: Callable[[np.ndarray], np.ndarray],
    b: np.ndarray,
    precond: Callable[[np.ndarray], np.ndarray],
    tol: float,
    max_iter: int,
) -> tuple[np.ndarray, list[float]]:
    """Preconditioned conjugate gradients on flat arrays.

    Returns the solution and the history of relative residual norms.

    Raises
    ------
    ConvergenceError
        If the relative residual stays above ``tol`` after ``max_iter`` steps.
    """
    x = np.zeros_like(b)
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        return x, [0.0]
    r = b.copy()
    z = precond(r)
    p = z.copy()
    rz = float(r @ z)
    history = [1.0]
    for _ in range(max_iter):
        Ap = matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise ConvergenceError("operator is not positive definite on the search space", history)
        alpha = rz / pAp
        x += alpha * p
        r -= alpha * Ap
        rel = float(np.linalg.norm(r)) / bnorm
        history.append(rel)
        if rel <= tol:
            return x, history
        z = precond(r)
        rz_new = float(r @ z)
        p *= rz_new / rz
        p += z
        rz = rz_new
    raise ConvergenceError(
        f"conjugate gradients did not reach tol={tol:g} in {max_iter} iterations "
        f"(last relative residual {history[-1]:.3e})",
        history,
    )


def _solve_refined(matvec, b, precond, tol, max_iter, project):
    """PCG followed by up to three rounds of residual correction."""
    bnorm = float(np.linalg.norm(b))
    x, history = pcg(matvec, b, precond, tol, max_iter)
    x = project(x)
    iters = len(history) - 1
    res = float(np.linalg.norm(b - matvec(x))) / bnorm if bnorm else 0.0
    for _ in range(3):
        if res <= tol:
            break
        r = b - matvec(x)
        dx, h = pcg(matvec, r, precond, tol * bnorm / float(np.linalg.norm(r)), max_iter)
        x = project(x + dx)
        iters += len(h) - 1
        history.extend(h[1:])
        res = float(np.linalg.norm(b - matvec(x))) / bnorm
    if res > tol:
        raise ConvergenceError(f"true residual {res:.3e} above tolerance {tol:g}", history)
    return x, res, iters, history


# ---------------------------------------------------------------------------
# Discrete operators
# ---------------------------------------------------------------------------


def _harmonic(a, b):
    return 2.0 * a * b / (a + b)


def _forward_difference(N: int, d: int, axis: int) -> sp.csr_matrix:
    """Periodic forward difference ``u[j+e_axis] - u[j]`` on the flattened grid."""
    one = sp.identity(N, format="csr")
    shift = sp.csr_matrix((np.ones(N), (np.arange(N), (np.arange(N) + 1) % N)), shape=(N, N))
    mats = [one] * d
    mats[axis] = shift - one
    out = mats[0]
    for m in mats[1:]:
        out = sp.kron(out, m, format="csr")
    return out


class _FVOperator:
    """Finite-volume operator ``-sum_k D_k^T diag(face_k) D_k`` (times ``h^-2``)."""

    def __init__(self, face_weights: Sequence[np.ndarray]):
        self.d = len(face_weights)
        self.N = face_weights[0].shape[0]
        self.h = 1.0 / self.N
        self.faces = [np.ascontiguousarray(f).ravel() for f in face_weights]
        self.diffs = [_forward_difference(self.N, self.d, k) for k in range(self.d)]
        A = None
        for Dk, fk in zip(self.diffs, self.faces):
            term = Dk.T @ sp.diags(fk) @ Dk
            A = term if A is None else A + term
        self.A = A.tocsr()

    def matvec(self, u):
        return self.A @ u

    def rhs(self, l) -> np.ndarray:
        b = np.zeros(self.N**self.d)
        for k in range(self.d):
            if l[k] != 0.0:
                b += l[k] * (self.diffs[k].T @ self.faces[k])
        return self.h * b

    def mean_flux(self, chi, l) -> np.ndarray:
        """Grid mean of the face fluxes ``face_k (l_k - D_k chi / h)``."""
        return np.array([
            np.mean(self.faces[k] * (l[k] - (self.diffs[k] @ chi) / self.h)) for k in range(self.d)
        ])

    def gradient(self, chi) -> np.ndarray:
        return np.stack([(Dk @ chi) / self.h for Dk in self.diffs])


def _fv_faces(weight: np.ndarray, d: int) -> list[np.ndarray]:
    """Harmonic face averages of a scalar ``(N,)*d`` or per-axis ``(d,)+(N,)*d`` weight."""
    per_axis = weight.ndim == d + 1
    return [
        _harmonic(w, np.roll(w, -1, axis=k))
        for k, w in ((k, weight[k] if per_axis else weight) for k in range(d))
    ]


class _SpectralOperator:
    """Collocation operator ``-div_s(W grad_s u)`` with real FFTs."""

    def __init__(self, weight: np.ndarray, d: int):
        self.d = d
        self.N = weight.shape[0]
        N = self.N
        self.shape = (N,) * d
        self.axes = tuple(range(d))
        scalar = weight.shape == self.shape
        self.W = weight if scalar else np.ascontiguousarray(weight)
        self.scalar = scalar
        self.ik = []
        for k in range(d):
            n = N // 2 + 1 if k == d - 1 else N
            m = np.fft.rfftfreq(N, 1.0 / N) if k == d - 1 else np.fft.fftfreq(N, 1.0 / N)
            m = m.copy()
            m[np.abs(m) == N // 2] = 0.0
            shape = [1] * d
            shape[k] = n
            self.ik.append((2j * np.pi * m).reshape(shape))

    def grad(self, u: np.ndarray) -> np.ndarray:
        uh = np.fft.rfftn(u.reshape(self.shape))
        return np.stack([np.fft.irfftn(ik * uh, s=self.shape, axes=self.axes) for ik in self.ik])

    def div(self, F: np.ndarray) -> np.ndarray:
        acc = None
        for k in range(self.d):
            term = self.ik[k] * np.fft.rfftn(F[k])
            acc = term if acc is None else acc + term
        return np.fft.irfftn(acc, s=self.shape, axes=self.axes)

    def apply_weight(self, G: np.ndarray) -> np.ndarray:
        if self.scalar:
            return self.W[None] * G
        return np.einsum("...ij,j...->i...", self.W, G)

    def matvec(self, u):
        return -self.div(self.apply_weight(self.grad(u))).ravel()

    def rhs(self, l) -> np.ndarray:
        L = np.stack([np.full(self.shape, float(v)) for v in l])
        return -self.div(self.apply_weight(L)).ravel()

    def flux(self, chi, l) -> np.ndarray:
        G = -self.grad(chi)
        for k in range(self.d):
            G[k] += l[k]
        return self.apply_weight(G)

    def mean_flux(self, chi, l) -> np.ndarray:
        F = self.flux(chi, l)
        return F.reshape(self.d, -1).mean(axis=1)

    def gradient(self, chi) -> np.ndarray:
        return self.grad(chi).reshape(self.d, -1)

    def mean_weight_matrix(self) -> np.ndarray:
        if self.scalar:
            return float(self.W.mean()) * np.eye(self.d)
        return self.W.reshape(-1, self.d, self.d).mean(axis=0)


def _fft_preconditioner(d: int, N: int, M: np.ndarray, fv: bool) -> Callable:
    """Inverse of the constant-coefficient operator with mean weight matrix ``M``.

    For finite volumes the symbol uses the forward-difference eigenvalues
    ``2 N sin(pi m / N)`` and only the diagonal of ``M``.
    """
    shape = (N,) * d
    syms = []
    for k in range(d):
        m = np.fft.rfftfreq(N, 1.0 / N) if k == d - 1 else np.fft.fftfreq(N, 1.0 / N)
        if fv:
            sym = 2.0 * N * np.sin(np.pi * m / N)
        else:
            sym = 2.0 * np.pi * m
            sym[np.abs(m) == N // 2] = 0.0
        s = [1] * d
        s[k] = len(m)
        syms.append(sym.reshape(s))
    symbol = np.zeros(tuple(N if k < d - 1 else N // 2 + 1 for k in range(d)))
    for i in range(d):
        for j in range(d):
            if (i == j or not fv) and M[i, j] != 0.0:
                symbol = symbol + M[i, j] * syms[i] * syms[j]
    with np.errstate(divide="ignore"):
        inv = np.where(symbol > 1e-12 * symbol.max(), 1.0 / symbol, 0.0)

    def apply(r):
        return np.fft.irfftn(np.fft.rfftn(r.reshape(shape)) * inv, s=shape, axes=tuple(range(d))).ravel()

    return apply


def _amg_preconditioner(A: sp.csr_matrix) -> Callable:
    """Smoothed-aggregation V-cycle on the matrix with node 0 pinned."""
    import pyamg

    Ap = A[1:, 1:].tocsr()
    ml = pyamg.smoothed_aggregation_solver(Ap, symmetry="symmetric", max_coarse=500)
    M = ml.aspreconditioner(cycle="V")

    def apply(r):
        out = np.empty_like(r)
        out[0] = 0.0
        out[1:] = M @ r[1:]
        return out - out.mean()

    return apply


def _zero_mean(x):
    return x - x.mean()


class _CellProblem:
    """Assembled operator plus preconditioner for one weight field."""

    def __init__(self, weight: np.ndarray, d: int, scheme: str, preconditioner: str):
        self.d = d
        self.scheme = scheme
        N = weight.shape[0]
        matrix_weight = weight.ndim == d + 2
        diag = np.stack([weight[..., k, k] for k in range(d)]) if matrix_weight else weight
        if scheme == "fv":
            if matrix_weight and np.any(weight * (1.0 - np.eye(d))):
                raise ConfigError("finite volumes support scalar or diagonal weights only")
            self.op = _FVOperator(_fv_faces(diag, d))
            self._matrix = self.op.A * float(N) ** 2
            self._matvec = lambda u: self._matrix @ u
            if preconditioner == "amg":
                self.precond = _amg_preconditioner(self._matrix)
            else:
                faces_mean = np.diag([f.mean() for f in self.op.faces])
                self.precond = _fft_preconditioner(d, N, faces_mean, fv=True)
        else:
            self.op = _SpectralOperator(weight, d)
            self._matvec = self.op.matvec
            self.precond = _fft_preconditioner(d, N, self.op.mean_weight_matrix(), fv=False)

    def solve(self, l, tol, max_iter):
        b = self.op.rhs(l)
        if self.scheme == "fv":
            b = b * float(self.op.N) ** 2
        b = _zero_mean(b)
        return _solve_refined(self._matvec, b, self.precond, tol, max_iter, _zero_mean)


# ---------------------------------------------------------------------------
# Public operations
# ---------------------------------------------------------------------------


def _as_weight(weight, d: int | None = None) -> tuple[np.ndarray, int]:
    if isinstance(weight, GridField):
        arr = weight.samples
        d = weight.d
    else:
        arr = np.asarray(weight, dtype=float)
        if d is None:
            raise ConfigError("dimension needed for raw weight arrays")
    if not np.all(np.isfinite(arr)):
        raise ConfigError("weight must be finite")
    if arr.ndim == d:
        if np.any(arr <= 0.0):
            raise ConfigError("scalar weight must be strictly positive")
    elif arr.ndim == d + 2 and arr.shape[-2:] == (d, d):
        if not np.allclose(arr, np.swapaxes(arr, -1, -2), rtol=1e-12, atol=0.0):
            raise ConfigError("matrix weight must be symmetric")
        if np.linalg.eigvalsh(arr.reshape(-1, d, d)).min() <= 0.0:
            raise ConfigError("matrix weight must be positive definite")
    else:
        raise ConfigError(f"weight of shape {arr.shape} is neither scalar nor d x d matrix valued")
    return arr, d


def solve_corrector(
    weight,
    l=None,
    config: SolverConfig | None = None,
    d: int | None = None,
    gibbs: np.ndarray | None = None,
) -> CorrectorSolution:
    """Solve ``div(W (l - grad chi)) = 0`` for zero-mean ``chi`` on the torus.

    Parameters
    ----------
    weight : GridField or ndarray
        Positive scalar weight (for example ``exp(-2U)`` samples) or a
        symmetric positive-definite matrix field of shape ``(N,)*d + (d, d)``.
    l : array_like, optional
        Direction.  When omitted all coordinate directions are solved and
        the effective tensor is attached.
    config : SolverConfig, optional
    d : int, optional
        Dimension, required when ``weight`` is a raw array.
    gibbs : ndarray, optional
        Scalar Gibbs weight used to normalize the flux; defaults to the
        scalar weight itself (or the trace-free identity mass 1 for matrix
        weights).

    Returns
    -------
    CorrectorSolution
    """
    cfg = config or SolverConfig()
    arr, d = _as_weight(weight, d)
    N = arr.shape[0]
    if cfg.N is not None and cfg.N != N:
        raise ConfigError(f"weight grid N={N} differs from configured N={cfg.N}")
    if N**d > cfg.max_unknowns:
        raise ResolutionError(f"N={N} in d={d} exceeds the budget of {cfg.max_unknowns} unknowns")
    scalar = arr.ndim == d
    if gibbs is None:
        gibbs = arr if scalar else np.ones((N,) * d)
    gibbs = np.asarray(gibbs, dtype=float)
    scheme = cfg.scheme
    if not scalar and scheme == "fv" and np.any(arr * (1.0 - np.eye(d))):
        scheme = "spectral"  # full matrix weights need the collocation scheme
    problem = _CellProblem(arr, d, scheme, cfg.preconditioner)
    full = l is None
    dirs = np.eye(d) if full else np.atleast_2d(np.asarray(l, dtype=float))
    if dirs.shape[1] != d:
        raise ConfigError(f"direction must have {d} components")
    correctors, residuals, iters, hists, fluxes = [], [], [], [], []
    for row in dirs:
        chi, res, it, hist = problem.solve(row, cfg.tol, cfg.max_iter)
        correctors.append(GridField(d, N, chi.reshape((N,) * d)))
        residuals.append(res)
        iters.append(it)
        hists.append(tuple(hist))
        fluxes.append(problem.op.mean_flux(chi, row))
    mass_minus = float(gibbs.mean())
    mass_plus = float((1.0 / gibbs).mean())
    tensor = None
    if full:
        flux = np.array(fluxes).T / mass_minus  # column m = D e_m
        asym = float(np.abs(flux - flux.T).max())
        tensor = EffectiveTensor(flux, residual=max(residuals), N=N, asymmetry=asym)
    return CorrectorSolution(
        correctors=tuple(correctors),
        directions=dirs,
        gibbs=GridField(d, N, gibbs),
        mass_minus=mass_minus,
        mass_plus=mass_plus,
        residuals=tuple(residuals),
        iterations=tuple(iters),
        scheme=scheme,
        tensor=tensor,
        histories=tuple(hists),
    )


def _potential_samples(U, cfg: SolverConfig) -> tuple[np.ndarray, int]:
    if isinstance(U, GridField):
        if cfg.N is not None and cfg.N != U.N:
            raise ConfigError(f"grid N={U.N} differs from configured N={cfg.N}")
        return np.asarray(U.samples), U.d
    if isinstance(U, PotentialExpr):
        N = cfg.resolution(U.bandwidth, U.d)
        return sample_grid(U, N).samples, U.d
    raise TypeError(f"expected PotentialExpr or GridField, got {type(U).__name__}")


def gibbs_weight(u: np.ndarray) -> np.ndarray:
    """``exp(-2 u)`` on a grid (no rescaling, so masses are the true integrals)."""
    return np.exp(-2.0 * np.asarray(u, dtype=float))


def solve_cell(U, config: SolverConfig | None = None) -> CorrectorSolution:
    """Correctors for all coordinate directions of the potential ``U``."""
    cfg = config or SolverConfig()
    u, d = _potential_samples(U, cfg)
    w = gibbs_weight(u)
    return solve_corrector(w, None, replace(cfg, N=None), d=d)


def effective_diffusivity(U, config: SolverConfig | None = None) -> EffectiveTensor:
    """Effective diffusivity ``D(U)`` of a potential or sampled potential.

    Examples
    --------
    >>> from homog.potential import PotentialExpr, sin
    >>> D = effective_diffusivity(PotentialExpr(1, sin(1)), SolverConfig(N=4096))
    >>> round(D.lambda_min, 5)
    0.19244
    """
    return solve_cell(U, config).tensor


def two_scale_diffusivity(
    D_inner: EffectiveTensor, T: PotentialExpr, config: SolverConfig | None = None
) -> EffectiveTensor:
    """``D(U, T)``: homogenize the constant tensor ``D_inner`` against the Gibbs weight of ``T``.

    The corrector solves ``div(exp(-2T) D_inner (l - grad chi)) = 0`` and the
    result is normalized by the mean of ``exp(-2T)``.
    """
    cfg = config or SolverConfig()
    Dm = np.asarray(D_inner.matrix if isinstance(D_inner, EffectiveTensor) else D_inner, dtype=float)
    u, d = _potential_samples(T, cfg)
    if Dm.shape != (d, d):
        raise ConfigError(f"inner tensor must be {d}x{d}")
    w = gibbs_weight(u)
    W = w[..., None, None] * Dm
    sol = solve_corrector(W, None, replace(cfg, N=None), d=d, gibbs=w)
    return sol.tensor


def voigt_reiss(U: PotentialExpr, rtol: float = 1e-12, max_points: int = 1 << 23) -> float:
    """Lower bound ``(<exp(2U)> <exp(-2U)>)^{-1}`` by refined trapezoidal quadrature.

    The trapezoidal rule is spectrally accurate for periodic integrands; the
    grid is doubled until the bound changes by less than ``rtol`` relative.
    """
    if U.is_constant:
        return 1.0
    cap = 8
    while (2 * cap) ** U.d <= max_points:
        cap *= 2
    N = 8
    while N < 4 * U.bandwidth and N < cap:
        N *= 2
    prev = None
    while True:
        u = sample_grid(U, N).samples
        val = 1.0 / (np.exp(2.0 * u).mean() * np.exp(-2.0 * u).mean())
        if prev is not None and abs(val - prev) <= rtol * val:
            return float(val)
        if 2 * N > cap:
            return float(val)
        prev = val
        N *= 2


def dual_diffusivity(U, config: SolverConfig | None = None) -> EffectiveTensor:
    """``Q(U)``: minimize ``<exp(2U) |l - p|^2> / <exp(2U)>`` over mean-zero solenoidal ``p``.

    Conjugate gradients run on the Fourier representation of ``p``, with the
    Leray projection ``I - k k^T / |k|^2`` (and removal of the mean and of
    the Nyquist modes) applied at every step.

    Raises
    ------
    ConfigError
        In dimension one, where the admissible set is trivial.
    """
    cfg = config or SolverConfig()
    u, d = _potential_samples(U, cfg)
    if d < 2:
        raise ConfigError("the dual diffusivity needs d >= 2 (no non-trivial solenoidal fields in d = 1)")
    N = u.shape[0]
    shape = (N,) * d
    w = np.exp(2.0 * u)
    mass = float(w.mean())
    kvec = []
    for k in range(d):
        m = np.fft.fftfreq(N, 1.0 / N).copy()
        m[np.abs(m) == N // 2] = 0.0
        s = [1] * d
        s[k] = N
        kvec.append(m.reshape(s))
    k2 = sum(kk**2 for kk in kvec)
    keep = k2 > 0
    nyq = np.zeros(shape, bool)
    for k in range(d):
        idx = [slice(None)] * d
        idx[k] = N // 2
        nyq[tuple(idx)] = True
    keep = keep & ~nyq
    safe_k2 = np.where(k2 > 0, k2, 1.0)

    def project(F):
        Fh = np.fft.fftn(F, axes=tuple(range(1, d + 1)))
        kdotF = sum(kvec[k] * Fh[k] for k in range(d))
        out = np.stack([(Fh[k] - kvec[k] * kdotF / safe_k2) * keep for k in range(d)])
        return np.fft.ifftn(out, axes=tuple(range(1, d + 1))).real

    def matvec(flat):
        P = flat.reshape((d,) + shape)
        return project(w[None] * P).ravel() / mass

    def precond(r):
        return r

    Q = np.zeros((d, d))
    residuals = []
    for m in range(d):
        lvec = np.zeros(d)
        lvec[m] = 1.0
        L = np.stack([np.full(shape, lvec[k]) for k in range(d)])
        b = project(w[None] * L).ravel() / mass
        if np.linalg.norm(b) <= 1e-13 * np.sqrt(b.size):
            # l is already optimal (e.g. a separable potential); the right-hand side is round-off.
            Q[:, m] = lvec
            residuals.append(0.0)
            continue
        p, res, _, _ = _solve_refined(matvec, b, precond, cfg.tol, cfg.max_iter, lambda x: project(x.reshape((d,) + shape)).ravel())
        P = p.reshape((d,) + shape)
        flux = (w[None] * (L - P)).reshape(d, -1).mean(axis=1) / mass
        Q[:, m] = flux
        residuals.append(res)
    return EffectiveTensor(Q, residual=max(residuals), N=N, asymmetry=float(np.abs(Q - Q.T).max()))


@dataclass(frozen=True, eq=False)
class StreamTensor:
    """Skew-symmetric stream tensor ``H[i, j, m]`` of the flux defect ``P^U``.

    ``H`` has shape ``(d, d, d) + (N,)*d``; ``P`` has shape ``(d, d) + (N,)*d``.
    """

    H: np.ndarray
    P: np.ndarray
    N: int

    @property
    def d(self) -> int:
        return self.H.shape[0]

    def divergence(self) -> np.ndarray:
        """``sum_j d_j H[i, j, m]`` by spectral differentiation, shape of ``P``."""
        d, N = self.d, self.N
        shape = (N,) * d
        ik = []
        for k in range(d):
            m = np.fft.fftfreq(N, 1.0 / N).copy()
            m[np.abs(m) == N // 2] = 0.0
            s = [1] * d
            s[k] = N
            ik.append((2j * np.pi * m).reshape(s))
        out = np.zeros((d, d) + shape)
        for i in range(d):
            for m in range(d):
                acc = sum(ik[j] * np.fft.fftn(self.H[i, j, m]) for j in range(d))
                out[i, m] = np.fft.ifftn(acc).real
        return out

    def skew_defect(self) -> float:
        """``max |H[i,j,m] + H[j,i,m]|``."""
        return float(np.abs(self.H + np.swapaxes(self.H, 0, 1)).max())


def flux_defect(U, config: SolverConfig | None = None) -> tuple[np.ndarray, EffectiveTensor]:
    """``P^U = I - (exp(-2U) / <exp(-2U)>) (I - grad chi) D^{-1}`` on the grid.

    Computed with the spectral scheme so that every column is solenoidal to
    solver tolerance.  Returns ``P`` with shape ``(d, d) + (N,)*d`` and ``D``.
    """
    cfg = replace(config or SolverConfig(), scheme="spectral")
    sol = solve_cell(U, cfg)
    d, N = sol.d, sol.N
    op = _SpectralOperator(sol.gibbs.samples, d)
    w = sol.gibbs.samples / sol.mass_minus
    Dinv = np.linalg.inv(sol.tensor.matrix)
    # G[i, q] = delta_iq - d_i chi_q
    G = np.zeros((d, d) + (N,) * d)
    for q in range(d):
        grad = op.grad(sol.correctors[q].samples)
        for i in range(d):
            G[i, q] = (1.0 if i == q else 0.0) - grad[i]
    P = -np.einsum("iq...,qm->im...", G, Dinv) * w
    for i in range(d):
        P[i, i] += 1.0
    return P, sol.tensor


def stream_tensor(U, config: SolverConfig | None = None) -> StreamTensor:
    """Stream tensor ``H_njm = (1/2i pi) sum_k (p_nm k_j - p_jm k_n) / |k|^2 e^{2i pi k.x}``.

    Skew-symmetric in ``(n, j)`` by construction; ``sum_j d_j H_njm``
    reproduces ``P_nm`` because each column of ``P`` is divergence-free with
    zero mean.
    """
    P, _ = flux_defect(U, config)
    d = P.shape[0]
    N = P.shape[-1]
    shape = (N,) * d
    kvec = []
    for k in range(d):
        m = np.fft.fftfreq(N, 1.0 / N).copy()
        m[np.abs(m) == N // 2] = 0.0
        s = [1] * d
        s[k] = N
        kvec.append(m.reshape(s))
    k2 = sum(kk**2 for kk in kvec)
    inv_k2 = np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0)
    Ph = np.fft.fftn(P, axes=tuple(range(2, d + 2)))
    H = np.zeros((d, d, d) + shape)
    for n in range(d):
        for j in range(n + 1, d):
            for m in range(d):
                coef = (Ph[n, m] * kvec[j] - Ph[j, m] * kvec[n]) * inv_k2 / (2j * np.pi)
                Hnjm = np.fft.ifftn(coef).real
                H[n, j, m] = Hnjm
                H[j, n, m] = -Hnjm
    return StreamTensor(H, P, N)


def corrector_closed_form_1d(U: PotentialExpr, N: int) -> np.ndarray:
    """Derivative of the 1-d corrector, ``1 - exp(2U) / <exp(2U)>``, at the nodes."""
    if U.d != 1:
        raise ConfigError("closed form only in dimension one")
    u = sample_grid(U, N).samples
    e = np.exp(2.0 * u)
    return 1.0 - e / e.mean()


def log_spectral_factors(A: EffectiveTensor | np.ndarray, B: EffectiveTensor | np.ndarray) -> tuple[float, float]:
    """Smallest ``f_minus <= f_plus`` with ``f_minus B <= A <= f_plus B``.

    These are the extreme eigenvalues of ``B^{-1/2} A B^{-1/2}``.
    """
    A = A.matrix if isinstance(A, EffectiveTensor) else np.asarray(A, dtype=float)
    B = B.matrix if isinstance(B, EffectiveTensor) else np.asarray(B, dtype=float)
    w, v = np.linalg.eigh(B)
    Bm = v @ np.diag(w**-0.5) @ v.T
    ev = np.linalg.eigvalsh(Bm @ A @ Bm)
    return float(ev[0]), float(ev[-1])
