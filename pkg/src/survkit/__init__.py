"""Survival analysis, phenotyping and treatment-effect estimation toolkit."""

__version__ = "0.1.0"
