"""
Ring-cavity frequency metrology simulator.

This package models a PDH-locked high-finesse ring cavity, its cascaded
servo chain, calibrated frequency-modulation injection and the lock-in
readout of the counter-propagating error signal, together with the
closed-form shot-noise budget.
"""

__version__ = "1.0.0"
__author__ = "Ring Metrology Simulation Team"
__description__ = "Simulator and analysis toolkit for ring-cavity anisotropy metrology"
