"""Modality-grouped mixture-of-experts CTR modelling on synthetic ad inventory."""

__version__ = "0.1.0"
