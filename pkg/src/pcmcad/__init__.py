"""Pseudo-color mammogram generation by multi-scale morphological sifting,
with a baseline detector and a FROC evaluation harness."""

__version__ = "0.1.0"
