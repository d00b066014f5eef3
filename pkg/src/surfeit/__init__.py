"""Stability of surface electrical impedance tomography: DN maps, boundary
trace equations, the generalized argument principle and correspondence maps."""

__version__ = "0.1.0"
