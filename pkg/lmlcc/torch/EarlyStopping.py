import logging

import numpy as np

from ..errors import ConfigError

logger = logging.getLogger(__name__)


class EarlyStopping(object):
    """Stop training when a monitored value stops improving.

    Any strict improvement resets the counter, there is no minimum delta.

    Args:
        patience: Number of epochs without improvement before stopping.
        direction: min if the value should decrease (loss), max if it should
            increase (accuracy, AUC).
        verbose: Log every call.

    Attributes:
        patience: Number of epochs before early stopping.
        counter: Number of epochs without improvement.
        verbose: True to log statements.
        value: Best value seen so far.
        direction: Direction of improvement.

    Raises:
        ConfigError if direction is not min or max, or patience < 1.

    """
    def __init__(self, patience: int = 10, direction: str = 'min',
                 verbose: bool = True):
        if direction not in ('min', 'max'):
            raise ConfigError('Direction parameter should be min or max.')
        if patience < 1:
            raise ConfigError(f'patience must be >= 1, got {patience}')

        self.patience = patience
        self.counter = 0
        self.verbose = verbose
        self.value = np.inf if direction == 'min' else -np.inf
        self.direction = direction

    def improved(self, value: float) -> bool:
        if self.direction == 'min':
            return value < self.value

        return value > self.value

    def __call__(self, value: float) -> bool:
        """
        Args:
            value: Monitored value of the current epoch.

        Returns:
            True once the number of epochs without improvement reaches
            patience, otherwise False.

        """
        if self.improved(value):
            self.counter = 0
            self.value = value

            if self.verbose:
                logger.info(f'Early stopping value change ({value:.4f})')

            return False

        self.counter += 1

        if self.counter >= self.patience:
            if self.verbose:
                logger.info('Early stopping.')
            return True

        if self.verbose:
            logger.info('No change in early stopping value for '
                        f'{self.counter} epochs.')
        return False
