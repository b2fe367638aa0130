"""Potentials on the whole space built from rescaled periodic terms.

Exit-time and heat-kernel experiments run on ``R^d`` rather than on the
torus.  A :class:`Landscape` is the sum ``V(x) = sum_k U_k(x / R_k)`` of
periodic :class:`~homog.potential.PotentialExpr` terms, which covers both a
single periodic potential (one term with ``R = 1``) and a truncated
multi-scale superposition.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ConfigError
from .potential import MultiscaleModel, PotentialExpr

# Probe grids for extrema over a ball use this many points per finest wavelength.
PROBE_POINTS_PER_WAVELENGTH = 16
_PROBE_CAP = 1 << 22


@dataclass(frozen=True)
class Landscape:
    """``V(x) = sum_k U_k(x / R_k)`` on ``R^d``.

    Parameters
    ----------
    terms : tuple of (PotentialExpr, float)
        Periodic terms with their length scales ``R_k > 0``.
    """

    terms: tuple[tuple[PotentialExpr, float], ...]

    def __post_init__(self):
        terms = tuple((u, float(R)) for u, R in self.terms)
        if not terms:
            raise ConfigError("a landscape needs at least one term")
        if len({u.d for u, _ in terms}) != 1:
            raise ConfigError("all landscape terms must share one dimension")
        if any(not (R > 0 and math.isfinite(R)) for _, R in terms):
            raise ConfigError("length scales must be positive and finite")
        object.__setattr__(self, "terms", terms)

    @property
    def d(self) -> int:
        return self.terms[0][0].d

    def _points(self, x) -> tuple[np.ndarray, bool]:
        x = np.asarray(x, dtype=float)
        if self.d == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        if x.shape[-1] != self.d:
            raise ValueError(f"points must have trailing dimension {self.d}, got shape {x.shape}")
        return x, x.ndim == 1

    def value(self, x):
        """Evaluate at a point or a batch; 1-d accepts scalars and flat arrays."""
        pts, single = self._points(x)
        out = sum(u.value(pts / R) for u, R in self.terms)
        return float(out) if single else np.asarray(out)

    __call__ = value

    def grad(self, x) -> np.ndarray:
        pts, _ = self._points(x)
        return sum(u.grad(pts / R) / R for u, R in self.terms)

    @property
    def is_constant(self) -> bool:
        return all(u.is_constant for u, _ in self.terms)

    @cached_property
    def lipschitz_bound(self) -> float:
        """Upper bound on ``sup |grad V|``."""
        return float(sum(u.lipschitz_bound() / R for u, R in self.terms))

    @cached_property
    def finest_wavelength(self) -> float:
        """Shortest period ``R_k / bandwidth_k`` among non-constant terms (``inf`` if none)."""
        waves = [R / u.bandwidth for u, R in self.terms if not u.is_constant and u.bandwidth > 0]
        return min(waves) if waves else math.inf

    def key(self) -> str:
        """Canonical JSON text, used for caching compiled drifts."""
        return json.dumps({"d": self.d, "terms": [[u.to_json(), R] for u, R in self.terms]}, sort_keys=True)

    def source(self, xvars) -> tuple[list[str], list[str]]:
        """Straight-line source for the gradient at the variables ``xvars``.

        Returns the code lines and the names of the gradient components.
        """
        lines: list[str] = []
        acc = [f"g{i}" for i in range(self.d)]
        lines += [f"{a} = 0.0" for a in acc]
        for k, (u, R) in enumerate(self.terms):
            if u.is_constant:
                continue
            inv = repr(1.0 / R)
            scaled = [f"({x} * {inv})" for x in xvars]
            body, _, gnames = u.source(scaled, prefix=f"t{k}_")
            lines += body
            lines += [f"{a} += {g} * {inv}" for a, g in zip(acc, gnames)]
        return lines, acc

    def ball_range(self, center, r: float) -> tuple[float, float]:
        """Guaranteed bounds ``(lower, upper)`` on ``inf`` and ``sup`` of ``V`` over ``B(center, r)``.

        The extrema of a probe grid are widened by the Lipschitz bound times
        the largest distance from a point of the ball to the nearest node.
        """
        if self.is_constant:
            v = self.value(np.zeros(self.d))
            return v, v
        center = np.broadcast_to(np.asarray(center, dtype=float), (self.d,))
        h = self.finest_wavelength / PROBE_POINTS_PER_WAVELENGTH
        M = int(math.ceil(r / h))
        while (2 * M + 1) ** self.d > _PROBE_CAP:
            M = (M + 1) // 2
        h = r / M
        axis = np.arange(-M, M + 1) * h
        grids = np.meshgrid(*([axis] * self.d), indexing="ij")
        offsets = np.stack([g.ravel() for g in grids], axis=-1)
        inside = np.sqrt((offsets * offsets).sum(axis=1)) <= r + 0.5 * h * math.sqrt(self.d)
        vals = self.value(center + offsets[inside])
        margin = self.lipschitz_bound * h * math.sqrt(self.d) / 2.0
        return float(vals.min()) - margin, float(vals.max()) + margin


def as_landscape(V, n: int | None = None, p: int = 0) -> Landscape:
    """Coerce a potential, multi-scale model or landscape to a :class:`Landscape`.

    For a :class:`MultiscaleModel` the terms ``p..n`` (default all) form
    ``V_p^n(x) = sum_{k=p}^{n} U_k(x / R_k)``.
    """
    if isinstance(V, Landscape):
        return V
    if isinstance(V, PotentialExpr):
        return Landscape(((V, 1.0),))
    if isinstance(V, MultiscaleModel):
        n = V.n_max if n is None else n
        V._check_range(p, n)
        R = V.R
        return Landscape(tuple((V.scales[k], float(R[k])) for k in range(p, n + 1)))
    raise TypeError(f"cannot build a landscape from {type(V).__name__}")
