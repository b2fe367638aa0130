"""Periodic and multi-scale homogenization lab.

Modules
-------
potential
    Potentials on the torus, sampling and multi-scale models.
cell
    Cell problems, effective and dual diffusivities, stream tensors.
multiscale
    Decay scans, sandwich audits, two-scale and translation studies.
pressure
    Birkhoff log-integrals, pressures and the decay functional ``Z``.
sde
    Exit times, exit exponents and heat-kernel tails by Monte Carlo.
oracles
    Deterministic references for exit times and identity checks.
runner, cli
    Config-driven runs with manifests and the ``homog`` command.
"""

__version__ = "0.1.0"
