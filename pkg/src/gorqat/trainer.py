"""Mini-batch QAT / KD / GoR training loop, evaluation and static-weight sweeps."""
from __future__ import annotations

import copy
import csv
import dataclasses
import io
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .losses import KDConfig, StaticWeightConfig, ensemble_logits, gor_bundle, kd_loss, static_joint, task_loss
from .models import ModelParams, TeacherEnsemble, build_mlp, forward
from .quantizer import QuantPlan, quantize_model
from .regularizer import CLIP_FLOOR, DivergenceError, GoRState, equilibrium_residual, gor_update
from .tensor import Tensor

MODES = ("fp", "ptq_eval", "qat_only", "qat_kd_static", "qat_kd_gor", "qat_ekd_gor")
KD_MODES = ("qat_kd_static", "qat_kd_gor", "qat_ekd_gor")
GOR_MODES = ("qat_kd_gor", "qat_ekd_gor")
QUANT_MODES = ("qat_only", "qat_kd_static", "qat_kd_gor", "qat_ekd_gor")


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    mode: str = "qat_kd_gor"
    student_widths: tuple[int, ...] = (2, 16, 2)
    eta_theta: float = 0.05
    momentum: float = 0.9
    eta_alpha: float = 1e-3
    tau: float = 4.0
    distance: str = "kl"
    tau_correction: bool = True
    learnable_tau: bool = False
    alpha: float = 0.5  # static weight, qat_kd_static only
    wbits: int = 4
    abits: int = 4
    warmup: int = 20
    act_momentum: float = 0.9
    ste: str = "clipped"
    exempt_first_last: bool = False
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        for name in ("eta_theta", "eta_alpha", "tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be at least 1")
        if self.mode == "qat_kd_static" and not 0 <= self.alpha <= 1:
            raise ConfigError(f"static alpha must be in [0, 1], got {self.alpha}")
        if len(self.student_widths) < 2:
            raise ConfigError(f"student_widths needs at least input and output, got {self.student_widths}")
        return self

    def kd_config(self) -> KDConfig:
        return KDConfig(self.tau, self.distance, self.tau_correction)


METRIC_FIELDS = (
    "step", "epoch", "loss_task", "loss_kd", "loss_total", "w_task", "w_kd",
    "alpha_task", "alpha_kd", "eq_residual", "train_acc", "test_acc",
)


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    loss_task: float
    loss_kd: float
    loss_total: float
    w_task: float
    w_kd: float
    alpha_task: float
    alpha_kd: float
    eq_residual: float
    train_acc: float | None = None  # filled on the last step of each epoch
    test_acc: float | None = None

    def row(self) -> list[str]:
        out = []
        for name in METRIC_FIELDS:
            value = getattr(self, name)
            out.append("" if value is None else repr(value))
        return out


@dataclass
class TrainResult:
    model: ModelParams
    state: GoRState
    plan: QuantPlan | None
    metrics: list[MetricsRecord]
    summary: dict = field(default_factory=dict)
    tau: float | None = None


def evaluate(model: ModelParams, x, y, quant: QuantPlan | None = None) -> float:
    """Top-1 accuracy; ties in the argmax go to the lowest class index."""
    y = np.asarray(y)
    if y.size == 0:
        raise ValueError("cannot evaluate on an empty split")
    logits = forward(model, x, quant, training=False).data
    return float(np.mean(np.argmax(logits, axis=1) == y))


class _MomentumSGD:
    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = p.data - self.lr * v


def _check_compat(cfg: TrainConfig, data: Dataset, teachers: TeacherEnsemble | None) -> None:
    widths = list(cfg.student_widths)
    if widths[0] != data.num_features:
        raise ConfigError(f"student input width {widths[0]} but data has {data.num_features} features")
    if widths[-1] != data.num_classes:
        raise ConfigError(f"student emits {widths[-1]} classes but data has {data.num_classes}")
    if cfg.mode in KD_MODES:
        if teachers is None:
            raise ConfigError(f"mode {cfg.mode} needs at least one teacher")
        if teachers.num_classes != data.num_classes:
            raise ConfigError(f"teachers emit {teachers.num_classes} classes, data has {data.num_classes}")
        if cfg.mode != "qat_ekd_gor" and len(teachers) != 1:
            raise ConfigError(f"mode {cfg.mode} takes exactly one teacher, got {len(teachers)}")


def train(
    cfg: TrainConfig,
    data: Dataset,
    teachers: TeacherEnsemble | None = None,
) -> TrainResult:
    """Run one training job; deterministic given ``cfg.seed``.

    Each mini-batch: fake-quantized student forward, task loss, (ensemble)
    KD loss against frozen teacher logits, the mode's objective, then one
    momentum-SGD step on the weights and a plain descent step on the GoR
    scalars, both computed from the same loss evaluation.
    """
    cfg = dataclasses.replace(cfg).validate()
    _check_compat(cfg, data, teachers)
    started = time.perf_counter()
    init_seed, shuffle_seed = np.random.SeedSequence(cfg.seed).spawn(2)
    student = build_mlp(cfg.student_widths, seed=int(init_seed.generate_state(1)[0]))
    rng = np.random.default_rng(shuffle_seed)
    plan = None
    if cfg.mode in QUANT_MODES:
        plan = quantize_model(
            student, cfg.wbits, cfg.abits, warmup=cfg.warmup, momentum=cfg.act_momentum,
            ste=cfg.ste, exempt_first_last=cfg.exempt_first_last,
        )
    state = GoRState(eta=cfg.eta_alpha)
    kd_cfg = cfg.kd_config()
    tau = T.parameter(cfg.tau, "tau") if cfg.learnable_tau and cfg.mode in GOR_MODES else None

    x_train, y_train = data.x_train, data.y_train
    z_teacher = None
    teacher_sums: list[str] = []
    if cfg.mode in KD_MODES:
        teacher_sums = teachers.checksums()
        z_teacher = ensemble_logits(teachers.logits(x_train))

    opt = _MomentumSGD(student.parameters(), cfg.eta_theta, cfg.momentum)
    metrics: list[MetricsRecord] = []
    step = 0
    n = len(y_train)
    zero = Tensor(0.0)
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            T.zero_grad(student.parameters())
            logits = forward(student, x_train[idx], plan, training=True)
            l_task = task_loss(logits, y_train[idx])
            l_kd = kd_loss(logits, z_teacher[idx], kd_cfg, tau) if z_teacher is not None else zero

            if cfg.mode in GOR_MODES:
                bundle = gor_bundle(l_task, l_kd, state)
                total, (w_task, w_kd) = bundle.total, (bundle.w_task, bundle.w_kd)
            elif cfg.mode == "qat_kd_static":
                total = static_joint(l_task, l_kd, StaticWeightConfig(cfg.alpha))
                w_task, w_kd = 1.0 - cfg.alpha, cfg.alpha
            else:
                total, w_task, w_kd = l_task, 1.0, 0.0

            lt, lk, ltot = l_task.item(), l_kd.item(), total.item()
            step += 1
            record = MetricsRecord(
                step, epoch, lt, lk, ltot, w_task, w_kd, state.alpha_task, state.alpha_kd,
                equilibrium_residual(state, lt, lk) if all(map(math.isfinite, (lt, lk))) else math.nan,
            )
            if not all(map(math.isfinite, (lt, lk, ltot))):
                err = DivergenceError(
                    f"non-finite loss at step {step} (epoch {epoch}): task={lt} kd={lk} total={ltot}",
                    dataclasses.asdict(record),
                )
                err.last_good = TrainResult(student.copy(), state, copy.deepcopy(plan), metrics, {"diverged_at": step})
                raise err

            T.backward(total)
            opt.step()
            if cfg.mode in GOR_MODES:
                state = gor_update(state, lt, lk).state
            if tau is not None and tau.grad is not None:
                tau.data = np.maximum(tau.data - cfg.eta_alpha * tau.grad, CLIP_FLOOR)
                tau.grad = None
            metrics.append(record)

        record = metrics[-1]
        record.train_acc = evaluate(student, x_train, y_train, plan)
        record.test_acc = evaluate(student, data.x_test, data.y_test, plan)

    summary = {"mode": cfg.mode, "steps": step}
    if cfg.mode == "ptq_eval":
        summary["fp_train_acc"] = metrics[-1].train_acc
        summary["fp_test_acc"] = metrics[-1].test_acc
        plan = post_training_quantize(student, cfg, x_train)
    summary["train_acc"] = evaluate(student, x_train, y_train, plan)
    summary["test_acc"] = evaluate(student, data.x_test, data.y_test, plan)
    summary["alpha_task"] = state.alpha_task
    summary["alpha_kd"] = state.alpha_kd
    if teacher_sums and teachers.checksums() != teacher_sums:
        raise RuntimeError("teacher parameters changed during training")
    summary["wall_time_s"] = time.perf_counter() - started
    return TrainResult(student, state, plan, metrics, summary, None if tau is None else float(tau.data))


def post_training_quantize(model: ModelParams, cfg: TrainConfig, x_calib) -> QuantPlan | None:
    """Attach quant sites to a trained model and calibrate activation ranges on ``x_calib``."""
    plan = quantize_model(
        model, cfg.wbits, cfg.abits, warmup=cfg.warmup, momentum=cfg.act_momentum,
        ste=cfg.ste, exempt_first_last=cfg.exempt_first_last,
    )
    if plan is None or not plan.activations:
        return plan
    for i, start in enumerate(range(0, len(x_calib), cfg.batch_size)):
        if i >= max(cfg.warmup, 1):
            break
        forward(model, x_calib[start:start + cfg.batch_size], plan, training=True)
    plan.update_ranges = False
    return plan


def train_teacher(
    widths: Sequence[int], data: Dataset, seed: int = 0, epochs: int = 30, batch_size: int = 32,
    eta_theta: float = 0.05, momentum: float = 0.9,
) -> ModelParams:
    """Full-precision task-loss-only training; returns a frozen teacher."""
    cfg = TrainConfig(
        mode="fp", student_widths=tuple(widths), epochs=epochs, batch_size=batch_size,
        eta_theta=eta_theta, momentum=momentum, seed=seed,
    )
    model = train(cfg, data).model
    model.role = "teacher"
    return model.freeze()


# ----------------------------------------------------------------------
# metrics output

def metrics_csv(records: Iterable[MetricsRecord]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(METRIC_FIELDS)
    for r in records:
        writer.writerow(r.row())
    return buf.getvalue()


def write_metrics_csv(records: Iterable[MetricsRecord], path) -> Path:
    path = Path(path)
    path.write_text(metrics_csv(records))
    return path


def moving_average(values: Sequence[float], window: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if len(values) < window:
        return np.array([])
    kernel = np.ones(window) / window
    return np.convolve(values, kernel, mode="valid")


# ----------------------------------------------------------------------
# static-weight baseline sweep

@dataclass
class SweepRow:
    method: str  # "static" or "gor"
    alpha: float | None
    seed: int
    test_acc: float
    train_acc: float


def _run_arm(args) -> SweepRow:
    cfg, data, teachers, method, alpha = args
    result = train(cfg, data, teachers)
    return SweepRow(method, alpha, cfg.seed, result.summary["test_acc"], result.summary["train_acc"])


def dedupe_grid(alphas: Iterable[float]) -> list[float]:
    out: list[float] = []
    for a in alphas:
        a = float(a)
        if not 0 <= a <= 1:
            raise ConfigError(f"static alpha must be in [0, 1], got {a}")
        if a in out:
            warnings.warn(f"duplicate alpha {a} in sweep grid dropped", stacklevel=3)
            continue
        out.append(a)
    return out


def static_sweep(
    cfg: TrainConfig,
    data: Dataset,
    teachers: TeacherEnsemble,
    alphas: Iterable[float] = (0.0, 0.25, 0.5, 0.75, 1.0),
    seeds: Sequence[int] | None = None,
    include_gor: bool = True,
    jobs: int = 1,
) -> list[SweepRow]:
    """One full training run per (alpha, seed), plus a GoR arm per seed.

    Rows come back in grid order regardless of ``jobs``.
    """
    grid = dedupe_grid(alphas)
    seeds = [cfg.seed] if seeds is None else list(seeds)
    arms = []
    for seed in seeds:
        for a in grid:
            arm_cfg = dataclasses.replace(cfg, mode="qat_kd_static", alpha=a, seed=seed)
            arms.append((arm_cfg, data, teachers, "static", a))
        if include_gor:
            arms.append((dataclasses.replace(cfg, mode="qat_kd_gor", seed=seed), data, teachers, "gor", None))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_run_arm, arms))
    return [_run_arm(a) for a in arms]


def sweep_table(rows: Sequence[SweepRow]) -> list[dict]:
    """Mean/min/max test accuracy per arm, static arms first in grid order."""
    groups: dict[tuple, list[SweepRow]] = {}
    for r in rows:
        groups.setdefault((r.method, r.alpha), []).append(r)
    table = []
    for (method, alpha), rs in groups.items():
        accs = [r.test_acc for r in rs]
        table.append({
            "method": method,
            "alpha": alpha,
            "seeds": len(rs),
            "mean_test_acc": float(np.mean(accs)),
            "min_test_acc": min(accs),
            "max_test_acc": max(accs),
        })
    return table


def render_table(table: Sequence[dict]) -> str:
    lines = [f"{'method':<8} {'alpha':>6} {'seeds':>5} {'mean_acc':>9} {'min':>7} {'max':>7}"]
    for t in table:
        alpha = "learn" if t["alpha"] is None else f"{t['alpha']:.2f}"
        lines.append(
            f"{t['method']:<8} {alpha:>6} {t['seeds']:>5} {100 * t['mean_test_acc']:>8.2f}% "
            f"{100 * t['min_test_acc']:>6.2f}% {100 * t['max_test_acc']:>6.2f}%"
        )
    return "\n".join(lines)
