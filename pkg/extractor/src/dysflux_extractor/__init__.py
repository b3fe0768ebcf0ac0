"""dysflux-extractor: audio -> backbone hidden states -> .dyfh feature files."""

__version__ = "0.1.0"
