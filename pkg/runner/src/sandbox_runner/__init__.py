"""Sandboxed program runner speaking length-prefixed JSON frames on stdio."""

__version__ = "0.1.0"
