"""Deep-BSDE option pricing: forward and backward time-stepped control
problems solved with small feedforward networks."""

__version__ = "0.1.0"
