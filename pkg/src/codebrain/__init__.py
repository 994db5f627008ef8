"""Unified missing-modality imputation with scalar-quantized codes and a grading loss."""

__version__ = "0.1.0"
