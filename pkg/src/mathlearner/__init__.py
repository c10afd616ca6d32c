"""Learns executable solution programs from worked math solutions and solves
new problems by feature-based retrieval with a direct-generation fallback."""

__version__ = "0.1.0"
