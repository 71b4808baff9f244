"""Multi-channel sequential user encoder and ad encoder, with incremental serving."""

__version__ = "0.1.0"
