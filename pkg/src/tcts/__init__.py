"""Teacher-critical training strategies for caption models, at desk scale."""

__version__ = "0.1.0"
