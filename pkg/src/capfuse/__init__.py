"""Multi-modal feature-attention video captioning on a small numpy autodiff engine."""

__version__ = "0.1.0"
