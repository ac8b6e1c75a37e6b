"""Noise-agnostic enrollment guidance for target speech extraction (LGTSE / D-LGTSE)."""

__version__ = "0.1.0"
