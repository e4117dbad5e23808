"""canta: semi-supervised singing-voice timbre modelling toolkit."""

__version__ = "0.1.0"
