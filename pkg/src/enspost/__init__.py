"""Neural post-processing of reduced weather ensembles."""

__version__ = "0.1.0"
