"""Query-adaptive late fusion of heterogeneous retrieval features."""

__version__ = "0.1.0"
