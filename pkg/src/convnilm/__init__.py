"""Convolutional encoder / mask-separator / decoder for energy disaggregation, on a small numpy autodiff engine."""

__version__ = "0.1.0"
