"""Simulator of an automated fiber-based squeezed-light measurement station.

The package models the optical plant (fields, parametric amplifier,
beamsplitters, fiber stretchers, detectors, slow drifts), the digital
controller stack (lock-in polarization optimization, phase locks with
stretcher resets, power and coupling-ratio stabilization), the
alignment/measurement scheduler, and the squeezing/loss analysis chain.
Runs are deterministic per (seed, config) and use compressed time so a
full day of operation executes in minutes on a desk.
"""

__version__ = "0.1.0"
