"""Single-image dehazing: haze simulator, from-scratch CNNs and evaluation."""

__version__ = "0.1.0"
