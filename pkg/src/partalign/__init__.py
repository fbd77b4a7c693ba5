"""Part-aware text-to-image vehicle retrieval at desk scale."""

__version__ = "0.1.0"
