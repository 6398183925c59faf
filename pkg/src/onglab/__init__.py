"""Continual-learning lab: OGD/OGD+ and their EKFAC natural-gradient variants ONG/ONG+."""

__version__ = "0.1.0"
