"""The two-scalar Game of Regularizers and its single-scalar ablation.

The objective ``(a_task / a_kd) * L_task + (a_kd / a_task) * L_kd`` has
partial derivatives

    d/da_task = L_task / a_kd - a_kd * L_kd / a_task**2
    d/da_kd   = L_kd / a_task - a_task * L_task / a_kd**2

which vanish together exactly when ``a_task**2 * L_task == a_kd**2 * L_kd``.
Both scalars take a plain gradient step from the same (pre-update) point and
are then clipped at the floor.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from typing import NamedTuple

CLIP_FLOOR = 1e-4
RESIDUAL_EPS = 1e-12


class DivergenceError(FloatingPointError):
    """A loss or scalar became non-finite; carries a diagnostic record."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class StateCorruptionError(ValueError):
    """A regularizer scalar is non-positive, which clipping should prevent."""


@dataclass(frozen=True)
class GoRState:
    alpha_task: float = 1.0
    alpha_kd: float = 1.0
    eta: float = 1e-3
    clip_floor: float = CLIP_FLOOR
    step_count: int = 0

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not self.clip_floor > 0:
            raise ValueError(f"clip_floor must be positive, got {self.clip_floor}")

    @property
    def weights(self) -> tuple[float, float]:
        """Effective loss weights ``(w_task, w_kd)``."""
        check_scalars(self.alpha_task, self.alpha_kd)
        return self.alpha_task / self.alpha_kd, self.alpha_kd / self.alpha_task


class GoRStep(NamedTuple):
    state: GoRState
    grad_task: float
    grad_kd: float
    clipped: bool


def check_scalars(alpha_task: float, alpha_kd: float) -> None:
    for name, value in (("alpha_task", alpha_task), ("alpha_kd", alpha_kd)):
        if not (math.isfinite(value) and value > 0):
            raise StateCorruptionError(f"{name} must be finite and positive, got {value}")


def _check_losses(l_task: float, l_kd: float, where: str) -> None:
    if not (math.isfinite(l_task) and math.isfinite(l_kd)):
        raise DivergenceError(
            f"{where}: non-finite loss (L_task={l_task}, L_kd={l_kd})",
            {"loss_task": l_task, "loss_kd": l_kd},
        )
    if l_task < 0 or l_kd < 0:
        raise ValueError(f"{where}: losses must be non-negative, got ({l_task}, {l_kd})")


def gor_gradients(alpha_task: float, alpha_kd: float, l_task: float, l_kd: float) -> tuple[float, float]:
    """Closed-form partial derivatives of the GoR objective w.r.t. both scalars.

    Written through ``r = a_kd / a_task`` and the shared numerator
    ``L_task - r**2 * L_kd`` so that both vanish exactly at equilibrium and
    are exact negatives of each other when the scalars are equal.
    """
    r = alpha_kd / alpha_task
    gap = l_task - r * r * l_kd
    return gap / alpha_kd, -gap / (r * alpha_kd)


def gor_update(state: GoRState, l_task: float, l_kd: float) -> GoRStep:
    """One simultaneous descent step on both scalars, then clip."""
    _check_losses(l_task, l_kd, "gor_step")
    check_scalars(state.alpha_task, state.alpha_kd)
    g_task, g_kd = gor_gradients(state.alpha_task, state.alpha_kd, l_task, l_kd)
    raw_task = state.alpha_task - state.eta * g_task
    raw_kd = state.alpha_kd - state.eta * g_kd
    if not (math.isfinite(raw_task) and math.isfinite(raw_kd)):
        raise DivergenceError(
            "gor_step: regularizer scalars became non-finite",
            {"alpha_task": state.alpha_task, "alpha_kd": state.alpha_kd, "grad_task": g_task, "grad_kd": g_kd},
        )
    new = dataclasses.replace(
        state,
        alpha_task=max(raw_task, state.clip_floor),
        alpha_kd=max(raw_kd, state.clip_floor),
        step_count=state.step_count + 1,
    )
    clipped = raw_task < state.clip_floor or raw_kd < state.clip_floor
    return GoRStep(new, g_task, g_kd, clipped)


def gor_step(state: GoRState, l_task: float, l_kd: float) -> GoRState:
    return gor_update(state, l_task, l_kd).state


def equilibrium_residual(state: GoRState, l_task: float, l_kd: float) -> float:
    """Relative gap ``|a_t^2 L_t - a_k^2 L_k| / max(a_t^2 L_t, a_k^2 L_k, eps)``; 0 at equilibrium."""
    lhs = state.alpha_task**2 * l_task
    rhs = state.alpha_kd**2 * l_kd
    return abs(lhs - rhs) / max(lhs, rhs, RESIDUAL_EPS)


@dataclass(frozen=True)
class SingleScalarState:
    """One weight ``beta`` in ``(1 - beta) * L_task + beta * L_kd``.

    Static states never move. The learnable variant descends
    ``dL/dbeta = L_kd - L_task`` and is clipped at the floor only, so under
    constant unequal losses it drifts without an interior stationary point.
    """

    beta: float = 0.5
    learnable: bool = True
    eta: float = 1e-3
    clip_floor: float = CLIP_FLOOR
    step_count: int = 0

    def __post_init__(self):
        if not self.learnable and not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"static beta must be in [0, 1], got {self.beta}")

    @property
    def weights(self) -> tuple[float, float]:
        return 1.0 - self.beta, self.beta


class SingleScalarStep(NamedTuple):
    state: SingleScalarState
    grad: float
    clipped: bool


def single_scalar_update(state: SingleScalarState, l_task: float, l_kd: float) -> SingleScalarStep:
    _check_losses(l_task, l_kd, "single_scalar_step")
    if not state.learnable:
        return SingleScalarStep(dataclasses.replace(state, step_count=state.step_count + 1), 0.0, False)
    grad = l_kd - l_task
    raw = state.beta - state.eta * grad
    if not math.isfinite(raw):
        raise DivergenceError("single_scalar_step: beta became non-finite", {"beta": state.beta, "grad": grad})
    new = dataclasses.replace(state, beta=max(raw, state.clip_floor), step_count=state.step_count + 1)
    return SingleScalarStep(new, grad, raw < state.clip_floor)


def single_scalar_step(state: SingleScalarState, l_task: float, l_kd: float) -> SingleScalarState:
    return single_scalar_update(state, l_task, l_kd).state
