import numpy as np


class binary_accuracy():
    """Accuracy of thresholded probabilities against 0 / 1 targets,
    accumulated over mini-batches.

    """
    def __init__(self, threshold: float = 0.5):
        """Initialize the metric."""
        self.threshold = threshold
        self.correct = 0
        self.total = 0

    def update(self, probs, targets):
        """Update the fields."""
        preds = probs.detach().cpu().numpy().ravel() >= self.threshold
        true = targets.detach().cpu().numpy().ravel() > 0.5

        self.correct += int(np.count_nonzero(preds == true))
        self.total += preds.size

    def compute(self):
        """Compute the accuracy, nan before any update."""
        return self.correct / self.total if self.total else float('nan')

    def reset(self):
        """Reset the fields."""
        self.correct = 0
        self.total = 0
