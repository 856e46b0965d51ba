"""Forging and attacking obfuscated peaked quantum circuits at desk scale."""

from __future__ import annotations

__version__ = "0.1.0"
