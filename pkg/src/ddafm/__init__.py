"""Masked CSI reconstruction in the delay-Doppler-angle domain with a windowed-attention backbone."""

__version__ = "0.1.0"
