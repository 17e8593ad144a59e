"""Simulator and security analyzer for Faraday-Sagnac-Michelson phase-coding QKD."""

__version__ = "0.1.0"
