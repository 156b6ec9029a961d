"""Desk-scale OCR training and knowledge-distillation toolkit."""

__version__ = "0.1.0"
