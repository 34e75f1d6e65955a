"""Event-summary contrastive retrieval for claim verification."""

__version__ = "0.1.0"
