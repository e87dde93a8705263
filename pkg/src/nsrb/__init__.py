"""Certified reduced-basis and DEIM surrogates for a nonsmooth parabolic PDE."""

__version__ = "0.1.0"
