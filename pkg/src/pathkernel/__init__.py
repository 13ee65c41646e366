"""Path kernels and stochastic training dynamics of small networks."""

__version__ = "0.1.0"
