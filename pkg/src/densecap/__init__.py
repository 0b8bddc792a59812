"""Dense captioning with joint inference and visual context fusion, on a numpy autodiff engine."""

__version__ = "0.1.0"
