from .EarlyStopping import EarlyStopping
from .train_binary_model import TrainConfig, TrainResult, train
