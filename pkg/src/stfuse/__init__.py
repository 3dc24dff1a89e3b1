"""Two-stage spatio-temporal exposure/health data fusion on sparse Markov random fields."""

__version__ = "0.1.0"
