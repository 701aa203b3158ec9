"""Lung nodule malignancy classification with learnable intensity windows."""
__version__ = '0.1.0'
