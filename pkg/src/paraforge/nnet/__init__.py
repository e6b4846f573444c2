"""Numpy neural-network engine: layers with analytic backward passes,
the residual embedding classifier, the BiLSTM regressor, losses,
optimizers and checkpoints."""

from .checkpoint import (ModelCheckpoint, build_model, extra_tensors, load_checkpoint,
                         make_checkpoint, save_checkpoint)
from .core import Module, Sequential, Tensor
from .layers import (BatchNorm2d, Conv2d, Dropout, Linear, ReLU, StatsPool, Tanh, gap, gsp,
                     log_softmax, softmax)
from .losses import cosine_distance_loss, cross_entropy_loss
from .lstm import BiLSTM, BiLstmConfig, BiLstmRegressor
from .optim import SGD, Adam, OptimizerConfig, PlateauScheduler, make_optimizer, plateau_scheduler
from .resnet import BasicBlock, ResNetEmbed, ResNetEmbedConfig
