"""Stochastic digital twin of shallow SiV- centers in diamond nanopillars.

Simulation (level structure, emitter dynamics, photon streams, PLE sweeps) and
the analysis chain (g2 correlation, Lorentzian/saturation/decay fits, sweep
statistics) live side by side so that every analysis step can be checked
against a known ground truth.
"""
__version__ = "0.1.0"
