"""finecast: fine-tuning toolkit for autoregressive gridded forecast emulators."""

__version__ = "0.1.0"
