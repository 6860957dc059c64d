"""Rydberg pulse families - neural-network pulses for parametrized multi-qubit phase gates."""

__version__ = "1.0.0"
