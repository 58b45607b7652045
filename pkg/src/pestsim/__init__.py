"""Simulation and analysis pipeline for a beam-break grain-probe pest monitor."""

__version__ = "0.1.0"
