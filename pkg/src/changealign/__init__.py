"""Align-then-enhance change detection: deformable feature alignment and
gated residual change amplification on a small numpy autodiff engine."""

__version__ = "0.1.0"
