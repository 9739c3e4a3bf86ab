"""MaMe/MaRe - matrix-based token merging and restoration"""

__version__ = "0.1.0"
