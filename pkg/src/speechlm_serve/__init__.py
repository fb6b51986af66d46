"""Codec-token speech LM inference engine, streaming service and evaluation kit."""

__version__ = "0.3.0"
