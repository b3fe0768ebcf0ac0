"""dysflux: multi-label dysfluency detection over precomputed backbone hidden states."""

__version__ = "0.1.0"
