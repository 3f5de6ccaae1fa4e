"""Quantization-aware training with knowledge distillation balanced by a Game of Regularizers."""

from .dynamics import LossScript, basin_scan, simulate
from .losses import KDConfig, LossBundle, StaticWeightConfig, ensemble_logits, ekd_loss, gor_joint, kd_loss, static_joint, task_loss
from .models import ModelParams, TeacherEnsemble, build_mlp, forward
from .quantizer import QuantPlan, QuantSpec, calibrate, fake_quant, quantize_model
from .regularizer import GoRState, SingleScalarState, equilibrium_residual, gor_step, single_scalar_step
from .tensor import Tensor, backward
from .trainer import TrainConfig, evaluate, static_sweep, train

__version__ = "0.1.0"
