"""Bundled potentials and multi-scale models.

Every entry is available by name through :func:`get_model` (used by the
command line runner) and as a plain function.
"""

from __future__ import annotations

import math

import numpy as np

from .errors import ConfigError
from .potential import (
    Add,
    Const,
    MultiscaleModel,
    Mul,
    Pow,
    PotentialExpr,
    Scale,
    Trig,
    cos,
    oscillation,
    self_similar,
    sin,
)


def figure1_potential() -> PotentialExpr:
    """Phase-modulated 2-d potential used for the multi-scale decay experiments.

    ``cos^2(2 pi x + pi sin(2 pi y) + 1) * sin(-4 pi y + pi cos(2 pi x) + 2) * cos(2 pi y + pi sin(2 pi x))``
    """
    a = Pow(2, cos(1, 0, arg=Add((Scale(math.pi, sin(0, 1)), Const(1.0)))))
    b = Trig("sin", (0, -2), Add((Scale(math.pi, cos(1, 0)), Const(2.0))))
    c = cos(0, 1, arg=Scale(math.pi, sin(1, 0)))
    return PotentialExpr(2, Mul((a, b, c)))


def figure1_model(rho: int = 4, n: int = 3) -> MultiscaleModel:
    """Self-similar superposition of :func:`figure1_potential` with ratio ``rho``."""
    return self_similar(figure1_potential(), rho, n, alpha=1.0)


def exceptional_potential(a: float = 0.5, k: int = 81) -> PotentialExpr:
    """``a (sin(2 pi x) - sin(2 pi k x))``, a coboundary for ``rho`` dividing powers of ``k``."""
    return PotentialExpr(1, Scale(a, Add((sin(1), Scale(-1.0, sin(k))))))


def exceptional_model(rho: int, n: int, a: float = 0.5, k: int = 81) -> MultiscaleModel:
    return self_similar(exceptional_potential(a, k), rho, n)


def battery_model(rho: int = 4, scales: int = 3, amplitude: float = 0.5) -> MultiscaleModel:
    """Default 1-d sub-diffusion battery: ``scales`` copies of ``amplitude * sin(2 pi x)``."""
    return self_similar(PotentialExpr(1, sin(1)) * amplitude, rho, scales - 1)


def two_scale_pair() -> tuple[PotentialExpr, PotentialExpr]:
    """Smooth 2-d pair ``(U, T)`` for two-scale convergence and translation audits."""
    U = PotentialExpr(2, Add((sin(1, 1), Scale(0.5, cos(1, -2)))))
    T = PotentialExpr(2, Scale(0.5, Mul((sin(1, 0), cos(0, 1)))))
    return U, T


_REGISTRY = {
    "figure1": lambda rho=4, n=3: figure1_model(rho, n),
    "exceptional": lambda rho=3, n=6: exceptional_model(rho, n),
    "battery": lambda rho=4, n=2: battery_model(rho, n + 1),
}


def model_names() -> tuple[str, ...]:
    return tuple(sorted(_REGISTRY))


def get_model(name: str, rho: int | None = None, n: int | None = None) -> MultiscaleModel:
    """Bundled model by name, optionally with its ratio and depth overridden."""
    try:
        make = _REGISTRY[name]
    except KeyError:
        raise ConfigError(f"unknown bundled model {name!r}; choose from {model_names()}") from None
    kwargs = {}
    if rho is not None:
        kwargs["rho"] = rho
    if n is not None:
        kwargs["n"] = n
    return make(**kwargs)


def random_trig_polynomial(
    rng: np.random.Generator, d: int, max_freq: int = 8, osc_max: float = 2.0, terms: int = 4
) -> PotentialExpr:
    """Random real trigonometric polynomial with oscillation in ``[osc_max / 4, osc_max]``."""
    nodes = []
    for _ in range(terms):
        k = np.zeros(d, dtype=int)
        while not k.any():
            k = rng.integers(-max_freq, max_freq + 1, size=d)
        make = sin if rng.random() < 0.5 else cos
        nodes.append(Scale(float(rng.standard_normal()), make(*(int(v) for v in k))))
    U = PotentialExpr(d, Add(tuple(nodes)))
    osc = oscillation(U)
    target = float(rng.uniform(0.25 * osc_max, osc_max))
    return U * (target / osc)
