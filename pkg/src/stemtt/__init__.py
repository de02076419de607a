"""Joint per-stem timbre transfer from polyphonic mixtures, desk scale."""

__version__ = "0.1.0"
