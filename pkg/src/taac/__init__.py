"""Privacy-preserving audio condition screening at desk scale."""

__version__ = "0.1.0"
