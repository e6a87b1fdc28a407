"""Semi-supervised regularization with retrieved neighbor samples."""

__version__ = "0.1.0"
