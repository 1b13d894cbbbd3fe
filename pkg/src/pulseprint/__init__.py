"""Self-supervised pre-training and probing for multi-channel 1D biosignals."""

__version__ = "0.1.0"
