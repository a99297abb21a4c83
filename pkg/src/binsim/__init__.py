"""Cross-architecture binary snippet similarity over instruction association graphs."""

__version__ = "0.1.0"
