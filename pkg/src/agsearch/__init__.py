"""Activity-graph retrieval over tracked-object archives."""

__version__ = "0.1.0"
