from .binary_accuracy import binary_accuracy
