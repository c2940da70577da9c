"""Command-line interface: dataset bundles on disk plus the verbs that
generate, clean, fit, score and render them."""

from .main import build_parser, main

__all__ = ["build_parser", "main"]
