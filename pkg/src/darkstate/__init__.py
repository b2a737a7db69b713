"""Simulator of an optically driven quantum-dot electron spin in a quasi-static
nuclear (Overhauser) field: photon bunching, coherent population trapping and
phase-jump control of dark states."""

__version__ = "0.1.0"
