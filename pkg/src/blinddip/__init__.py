"""Blind single-image denoising with a deep image prior and a learned auto-stop."""

__version__ = "0.1.0"
