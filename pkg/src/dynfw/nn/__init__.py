from .gradcheck import GradCheckReport, gradient_check, relative_error
from .io import load_params, save_params
from .layers import (LSTM, Conv1D, Dense, Layer, LSTMState, MeanPool, Parameter, ReLU,
                     Sequential, Sigmoid, conv1d_relu_forward, dense_forward, lstm_step,
                     sigmoid)
from .optim import (SGD, Adam, Optimizer, backward_and_step, bce_with_logits,
                    make_optimizer, weighted_half_mse)

__all__ = [
    "Adam", "Conv1D", "Dense", "GradCheckReport", "LSTM", "LSTMState", "Layer", "MeanPool",
    "Optimizer", "Parameter", "ReLU", "SGD", "Sequential", "Sigmoid", "backward_and_step",
    "bce_with_logits", "conv1d_relu_forward", "dense_forward", "gradient_check",
    "load_params", "lstm_step", "make_optimizer", "relative_error", "save_params", "sigmoid",
    "weighted_half_mse",
]
