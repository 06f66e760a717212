"""Dual-pixel defocus deblurring and view synthesis on a small numpy autodiff engine."""

__version__ = "0.1.0"
