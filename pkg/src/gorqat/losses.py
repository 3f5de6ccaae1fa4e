"""Task, distillation and combined objectives built on the tape."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .regularizer import GoRState, StateCorruptionError
from .tensor import ShapeError, Tensor

DISTANCES = ("kl", "mse")


@dataclass(frozen=True)
class KDConfig:
    temperature: float = 4.0
    distance: str = "kl"
    tau_correction: bool = True

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")


@dataclass(frozen=True)
class StaticWeightConfig:
    alpha: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"static alpha must be in [0, 1], got {self.alpha}")


@dataclass
class LossBundle:
    task: Tensor
    kd: Tensor
    total: Tensor
    w_task: float
    w_kd: float
    alpha_task: Tensor | None = None
    alpha_kd: Tensor | None = None


def task_loss(student_logits, targets) -> Tensor:
    return T.cross_entropy(student_logits, targets)


def kd_loss(student_logits, teacher_logits, cfg: KDConfig = KDConfig(), temperature: Tensor | None = None) -> Tensor:
    """Distance between student and (detached) teacher logits.

    ``kl`` is KL(softmax(z_T/tau) || softmax(z_S/tau)), scaled by tau**2 when
    ``cfg.tau_correction``; ``mse`` is the mean squared logit difference.
    Passing ``temperature`` as a tensor makes tau itself differentiable.
    """
    student_logits = T.as_tensor(student_logits)
    teacher = np.asarray(teacher_logits.data if isinstance(teacher_logits, Tensor) else teacher_logits, dtype=np.float64)
    if student_logits.shape != teacher.shape:
        raise ShapeError(f"kd_loss: student {student_logits.shape} vs teacher {teacher.shape}")
    if cfg.distance == "mse":
        return T.mse(student_logits, Tensor(teacher))
    if temperature is None:
        tau = cfg.temperature
        p_t = T.softmax(Tensor(teacher), tau).data
        loss = T.kl_div(p_t, T.softmax(student_logits, tau))
        return T.mul(loss, tau * tau) if cfg.tau_correction else loss
    # teacher probabilities depend on tau too, so KL is spelled out on the tape
    p_t = T.softmax(T.div(Tensor(teacher), temperature), 1.0)
    p_s = T.softmax(T.div(student_logits, temperature), 1.0)
    terms = T.mul(p_t, T.sub(T.log(p_t), T.log(p_s)))
    loss = T.div(T.sum(terms), float(student_logits.shape[0]))
    return T.mul(loss, T.mul(temperature, temperature)) if cfg.tau_correction else loss


def static_joint(l_task, l_kd, cfg: StaticWeightConfig) -> Tensor:
    """``(1 - alpha) * L_task + alpha * L_kd``."""
    if not 0.0 <= cfg.alpha <= 1.0:
        raise ValueError(f"static alpha must be in [0, 1], got {cfg.alpha}")
    return T.add(T.mul(l_task, 1.0 - cfg.alpha), T.mul(l_kd, cfg.alpha))


def gor_joint(l_task, l_kd, alpha_task, alpha_kd) -> Tensor:
    """``(a_task / a_kd) * L_task + (a_kd / a_task) * L_kd``.

    The scalars may be plain floats (treated as constants) or tensors, in
    which case ``backward`` also fills their gradients.
    """
    a_t, a_k = T.as_tensor(alpha_task), T.as_tensor(alpha_kd)
    for name, a in (("alpha_task", a_t), ("alpha_kd", a_k)):
        if not (np.all(np.isfinite(a.data)) and np.all(a.data > 0)):
            raise StateCorruptionError(f"{name} must be positive, got {a.data}")
    return T.add(T.mul(T.div(a_t, a_k), l_task), T.mul(T.div(a_k, a_t), l_kd))


def gor_bundle(l_task: Tensor, l_kd: Tensor, state: GoRState) -> LossBundle:
    """Build the GoR objective with the scalars as differentiable leaves."""
    a_t = T.parameter(state.alpha_task, "alpha_task")
    a_k = T.parameter(state.alpha_kd, "alpha_kd")
    total = gor_joint(l_task, l_kd, a_t, a_k)
    w_task, w_kd = state.weights
    return LossBundle(l_task, l_kd, total, w_task, w_kd, a_t, a_k)


def ensemble_logits(teacher_logits) -> np.ndarray:
    """Element-wise mean of the teachers' logits (detached)."""
    arrays = [np.asarray(z.data if isinstance(z, Tensor) else z, dtype=np.float64) for z in teacher_logits]
    if not arrays:
        raise ValueError("ensemble_logits needs at least one teacher")
    shape = arrays[0].shape
    for i, z in enumerate(arrays[1:], start=1):
        if z.shape != shape:
            raise ShapeError(f"teacher {i} logits have shape {z.shape}, teacher 0 has {shape}")
    if len(arrays) == 1:
        return arrays[0].copy()
    return np.sum(arrays, axis=0) / len(arrays)


def ekd_loss(student_logits, z_ens, cfg: KDConfig = KDConfig()) -> Tensor:
    return kd_loss(student_logits, z_ens, cfg)


def gor_ekd_joint(l_task, l_ekd, alpha_task, alpha_kd) -> Tensor:
    return gor_joint(l_task, l_ekd, alpha_task, alpha_kd)
