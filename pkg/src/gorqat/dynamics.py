"""Network-free simulator of the two-scalar game.

Losses come from a :class:`LossScript` instead of a model, and every step
goes through the same update functions the trainer uses.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .regularizer import (
    GoRState,
    SingleScalarState,
    equilibrium_residual,
    gor_update,
    single_scalar_update,
)

VARIANTS = ("gor", "single_scalar")


@dataclass(frozen=True)
class LossScript:
    """Source of (L_task, L_kd) per step.

    ``constant``: ``values=(L_task, L_kd)``.
    ``piecewise``: ``segments=[(first_step, L_task, L_kd), ...]`` with strictly
    increasing first steps; the first segment must start at step 1.
    ``noisy``: ``values`` plus i.i.d. Gaussian noise of std ``sigma``,
    clamped at zero, drawn from ``seed``.
    """

    mode: str = "constant"
    values: tuple[float, float] = (1.0, 1.0)
    segments: tuple[tuple[int, float, float], ...] = ()
    sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("constant", "piecewise", "noisy"):
            raise ValueError(f"unknown loss script mode {self.mode!r}")
        if self.mode == "piecewise":
            if not self.segments or self.segments[0][0] != 1:
                raise ValueError("piecewise script needs segments starting at step 1")
            starts = [s[0] for s in self.segments]
            if any(b <= a for a, b in zip(starts, starts[1:])):
                raise ValueError(f"piecewise steps must strictly increase, got {starts}")
            if any(lt < 0 or lk < 0 for _, lt, lk in self.segments):
                raise ValueError("loss values must be non-negative")
        elif min(self.values) < 0:
            raise ValueError("loss values must be non-negative")
        if self.sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    @classmethod
    def constant(cls, l_task: float, l_kd: float) -> "LossScript":
        return cls("constant", (float(l_task), float(l_kd)))

    @classmethod
    def piecewise(cls, segments: Sequence[tuple[int, float, float]]) -> "LossScript":
        return cls("piecewise", segments=tuple((int(s), float(a), float(b)) for s, a, b in segments))

    @classmethod
    def noisy(cls, l_task: float, l_kd: float, sigma: float, seed: int = 0) -> "LossScript":
        return cls("noisy", (float(l_task), float(l_kd)), sigma=float(sigma), seed=seed)

    def losses(self, steps: int) -> np.ndarray:
        """``[steps, 2]`` array; row ``i`` feeds step ``i + 1``."""
        if self.mode == "constant":
            return np.tile(np.array(self.values, dtype=np.float64), (steps, 1))
        if self.mode == "noisy":
            rng = np.random.default_rng(self.seed)
            noise = self.sigma * rng.standard_normal((steps, 2))
            return np.maximum(np.array(self.values) + noise, 0.0)
        out = np.empty((steps, 2))
        starts = [s[0] for s in self.segments]
        for i in range(steps):
            seg = self.segments[np.searchsorted(starts, i + 1, side="right") - 1]
            out[i] = seg[1], seg[2]
        return out


TRAJECTORY_FIELDS = ("step", "loss_task", "loss_kd", "alpha_task", "alpha_kd", "grad_task", "grad_kd", "eq_residual", "clipped")


@dataclass
class StepRecord:
    """State after ``step`` updates; gradients are those applied at this step."""

    step: int
    loss_task: float
    loss_kd: float
    alpha_task: float
    alpha_kd: float | None
    grad_task: float
    grad_kd: float | None
    eq_residual: float | None
    clipped: bool


@dataclass
class Trajectory:
    variant: str
    initial: GoRState | SingleScalarState
    records: list[StepRecord] = field(default_factory=list)
    final: GoRState | SingleScalarState | None = None

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=np.float64)

    @property
    def ever_clipped(self) -> bool:
        return any(r.clipped for r in self.records)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(TRAJECTORY_FIELDS)
        for r in self.records:
            w.writerow([
                "" if v is None else (str(int(v)) if isinstance(v, bool) else repr(v))
                for v in (getattr(r, f) for f in TRAJECTORY_FIELDS)
            ])
        return buf.getvalue()


def simulate(
    initial: GoRState | SingleScalarState,
    script: LossScript,
    steps: int,
    variant: str = "gor",
) -> Trajectory:
    """Iterate the regularizer step function ``steps`` times under ``script``.

    ``variant="gor"`` expects a :class:`GoRState`; ``"single_scalar"`` a
    :class:`SingleScalarState` whose ``beta`` is reported as ``alpha_task``.
    """
    if steps < 1:
        raise ValueError(f"steps must be at least 1, got {steps}")
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    traj = Trajectory(variant, initial)
    state = initial
    for i, (lt, lk) in enumerate(script.losses(steps), start=1):
        lt, lk = float(lt), float(lk)
        if variant == "gor":
            state, g_t, g_k, clipped = gor_update(state, lt, lk)
            traj.records.append(StepRecord(
                i, lt, lk, state.alpha_task, state.alpha_kd, g_t, g_k,
                equilibrium_residual(state, lt, lk), clipped,
            ))
        else:
            state, g, clipped = single_scalar_update(state, lt, lk)
            traj.records.append(StepRecord(i, lt, lk, state.beta, None, g, None, None, clipped))
    traj.final = state
    return traj


SCAN_FIELDS = ("alpha_task0", "alpha_kd0", "alpha_task", "alpha_kd", "eq_residual", "ratio", "clipped")


@dataclass
class ScanCell:
    alpha_task0: float
    alpha_kd0: float
    alpha_task: float
    alpha_kd: float
    eq_residual: float
    ratio: float
    clipped: bool


def _scan_cell(args) -> ScanCell:
    a_t, a_k, script, steps, eta = args
    traj = simulate(GoRState(a_t, a_k, eta=eta), script, steps)
    last = traj.records[-1]
    return ScanCell(a_t, a_k, last.alpha_task, last.alpha_kd, last.eq_residual, last.alpha_kd / last.alpha_task, traj.ever_clipped)


def log_grid(lo: float, hi: float, n: int) -> np.ndarray:
    return np.geomspace(lo, hi, n)


def basin_scan(
    alpha_task_grid: Sequence[float],
    alpha_kd_grid: Sequence[float],
    script: LossScript,
    steps: int,
    eta: float = 1e-2,
    clip_floor: float | None = None,
    jobs: int = 1,
) -> list[ScanCell]:
    """Final equilibrium residual for every initial pair on the grid (row-major)."""
    floor = GoRState().clip_floor if clip_floor is None else clip_floor
    for v in list(alpha_task_grid) + list(alpha_kd_grid):
        if not v > floor:
            raise ValueError(f"grid values must exceed the clip floor {floor}, got {v}")
    args = [(float(a), float(b), script, steps, eta) for a in alpha_task_grid for b in alpha_kd_grid]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_scan_cell, args))
    return [_scan_cell(a) for a in args]


def residual_matrix(cells: Sequence[ScanCell], rows: int, cols: int) -> np.ndarray:
    return np.array([c.eq_residual for c in cells]).reshape(rows, cols)


def scan_csv(cells: Sequence[ScanCell]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SCAN_FIELDS)
    for c in cells:
        w.writerow([str(int(getattr(c, f))) if f == "clipped" else repr(getattr(c, f)) for f in SCAN_FIELDS])
    return buf.getvalue()


def plot_trajectory(traj: Trajectory, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 3.5))
    steps = traj.column("step")
    if traj.variant == "gor":
        ax.plot(steps, traj.column("alpha_task"), label="alpha_task")
        ax.plot(steps, traj.column("alpha_kd"), label="alpha_kd")
    else:
        ax.plot(steps, traj.column("alpha_task"), label="beta")
    ax.set_xlabel("step")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)


def plot_scan(cells: Sequence[ScanCell], task_grid, kd_grid, path) -> Path:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    mat = residual_matrix(cells, len(task_grid), len(kd_grid))
    fig, ax = plt.subplots(figsize=(4.5, 4))
    im = ax.imshow(mat, origin="lower", cmap="viridis")
    ax.set_xticks(range(len(kd_grid)), [f"{v:.2g}" for v in kd_grid])
    ax.set_yticks(range(len(task_grid)), [f"{v:.2g}" for v in task_grid])
    ax.set_xlabel("initial alpha_kd")
    ax.set_ylabel("initial alpha_task")
    fig.colorbar(im, ax=ax, label="final eq. residual")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return Path(path)
