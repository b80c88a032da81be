"""Cable-system Gaussian free field and Villain model simulations."""

__version__ = "0.1.0"
