"""Subglottic stenosis severity (PSA/PSD) from bronchoscopy frames."""

__version__ = "0.1.0"
