"""Trimap-guided matting network with axis-wise attention, on a small
numpy autodiff core, plus losses, metrics, synthetic data, and study
protocols."""

__version__ = "0.1.0"
