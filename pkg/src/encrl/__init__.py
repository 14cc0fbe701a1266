"""Two-phase compression of CTC speech models: align a small encoder with a
frozen large reference, then finetune briefly with CTC."""

__version__ = "0.1.0"
