"""Particle, mean-field and statistics toolkit for the 1D Vlasov-Poisson-Fokker-Planck system."""

__version__ = "0.1.0"
