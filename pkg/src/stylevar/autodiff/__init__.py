from . import tensor as ops
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check, grad_check_module
from .nn import (BiLSTM, BilinearAttention, Embedding, Linear, LSTMCell, MLP, Module,
                 cross_entropy, lstm_step, run_lstm)
from .optim import Adam, AdamState, adam_step, triangular_lr
from .tensor import Parameter, Tensor, apply, graph_nodes, no_grad

__all__ = [
    "Adam", "AdamState", "BiLSTM", "BilinearAttention", "Embedding", "Linear", "LSTMCell", "MLP",
    "Module", "Parameter", "Tensor", "adam_step", "apply", "cross_entropy", "grad_check",
    "grad_check_module", "graph_nodes", "load_checkpoint", "lstm_step", "no_grad", "ops",
    "run_lstm", "save_checkpoint", "triangular_lr",
]
