"""Confidence-controlled adversarial attacks on image-forensics detectors."""

__version__ = "0.1.0"
