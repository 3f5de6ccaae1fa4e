"""Acceptance gate: one test per criterion, each printed as PASS/FAIL in the terminal summary."""
import time

import numpy as np
import pytest

from gorqat import tensor as T
from gorqat.cli import main
from gorqat.dynamics import LossScript, simulate
from gorqat.losses import KDConfig, gor_joint, kd_loss, task_loss
from gorqat.models import TeacherEnsemble, build_mlp, forward
from gorqat.quantizer import QuantSpec, fake_quant, quantize_model
from gorqat.regularizer import CLIP_FLOOR, DivergenceError, GoRState, SingleScalarState, gor_step
from gorqat.trainer import TrainConfig, evaluate, metrics_csv, static_sweep, sweep_table, train, train_teacher

from helpers import rel_err


@pytest.fixture
def gate(record_property):
    def start(number: int, title: str):
        record_property("criterion", number)
        record_property("title", title)
        return lambda text: record_property("detail", text)

    return start


# ----------------------------------------------------------------------
# independent numpy reference for the quantized [2, 8, 2] student


def _ref_fake_quant(x, lo, hi, bits):
    levels = 2**bits - 1
    if not hi > lo:
        return np.full_like(x, lo)
    s = (hi - lo) / levels
    return lo + s * np.rint(np.clip((x - lo) / s, 0, levels))


def _ref_log_softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class _Surrogate:
    """Student loss with quantization offsets and STE masks frozen at a base point.

    Inside the clip range a fake-quantized value is ``x + (fq(x0) - x0)``;
    outside it is the constant ``fq(x0)``. Its exact gradient is what the
    straight-through estimator claims, and it is smooth enough for finite
    differences.
    """

    def __init__(self, params, x, y, z_t, tau, a_t, a_k, wbits, abits, act_range, ste):
        self.x, self.y, self.z_t, self.tau, self.a_t, self.a_k = x, y, z_t, tau, a_t, a_k
        w0, b0, w1, b1 = params
        self.w_frozen = []
        for w in (w0, w1):
            q = _ref_fake_quant(w, w.min(), w.max(), wbits)
            self.w_frozen.append((q - w, np.ones_like(w, dtype=bool), q))
        h0 = np.maximum(x @ self.w_frozen[0][2] + b0, 0.0)
        lo, hi = act_range
        hq = _ref_fake_quant(h0, lo, hi, abits)
        mask = (h0 >= lo) & (h0 <= hi) if ste == "clipped" else np.ones_like(h0, dtype=bool)
        self.h_frozen = (hq - h0, mask, hq)

    @staticmethod
    def _apply(v, frozen):
        off, mask, const = frozen
        return np.where(mask, v + off, const)

    def loss(self, params):
        w0, b0, w1, b1 = params
        h = np.maximum(self.x @ self._apply(w0, self.w_frozen[0]) + b0, 0.0)
        z = self._apply(h, self.h_frozen) @ self._apply(w1, self.w_frozen[1]) + b1
        rows = np.arange(len(self.y))
        ce = -_ref_log_softmax(z)[rows, self.y].mean()
        log_pt = _ref_log_softmax(self.z_t / self.tau)
        log_ps = _ref_log_softmax(z / self.tau)
        kl = self.tau**2 * np.sum(np.exp(log_pt) * (log_pt - log_ps)) / len(self.y)
        return self.a_t / self.a_k * ce + self.a_k / self.a_t * kl


def _central(f, params, h=1e-5):
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            up = f(params)
            p[i] = old - h
            down = f(params)
            p[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def test_c1_gradient_fidelity(gate):
    detail = gate(1, "gradient fidelity: alpha closed forms <= 1e-10, theta vs central FD <= 1e-5 on [2,8,2], 100 configs")
    started = time.perf_counter()
    worst_alpha = worst_theta = 0.0
    for cfg in range(100):
        rng = np.random.default_rng(1000 + cfg)
        wbits, abits = (int(b) for b in rng.choice([2, 3, 4, 8], size=2))
        ste = "clipped" if cfg % 4 else "identity"
        tau = float(rng.uniform(1.0, 8.0))
        a_t, a_k = (float(v) for v in 10 ** rng.uniform(-1, 1, size=2))
        model = build_mlp([2, 8, 2], seed=cfg)
        plan = quantize_model(model, wbits, abits, warmup=0, ste=ste)
        forward(model, rng.normal(size=(32, 2)), plan, training=True)
        plan.update_ranges = False
        x = rng.normal(scale=1.5, size=(16, 2))
        y = rng.integers(0, 2, size=16)
        z_t = rng.normal(scale=3.0, size=(16, 2))

        alpha_t, alpha_k = T.parameter(a_t), T.parameter(a_k)
        logits = forward(model, x, plan)
        l_task, l_kd = task_loss(logits, y), kd_loss(logits, z_t, KDConfig(tau))
        total = gor_joint(l_task, l_kd, alpha_t, alpha_k)
        T.backward(total)

        lt, lk = l_task.item(), l_kd.item()
        closed_t = lt / a_k - a_k * lk / a_t**2
        closed_k = lk / a_t - a_t * lt / a_k**2
        worst_alpha = max(worst_alpha, rel_err(alpha_t.grad, closed_t, 1e-300), rel_err(alpha_k.grad, closed_k, 1e-300))

        params = [p.data.copy() for p in model.parameters()]
        spec = plan.activations["fc1.in"]
        oracle = _Surrogate(params, x, y, z_t, tau, a_t, a_k, wbits, abits, (spec.x_min, spec.x_max), ste)
        assert oracle.loss(params) == pytest.approx(total.item(), rel=1e-10)
        fd = _central(oracle.loss, params)
        for p, g in zip(model.parameters(), fd):
            worst_theta = max(worst_theta, rel_err(p.grad, g))
    elapsed = time.perf_counter() - started
    detail(f"max alpha rel err {worst_alpha:.2e}, max theta rel err {worst_theta:.2e}, {elapsed:.1f}s")
    assert worst_alpha <= 1e-10
    assert worst_theta <= 1e-5
    assert elapsed <= 30


def test_c2_equilibrium_law(gate):
    detail = gate(2, "equilibrium: constant (4,1), init (1,1), eta 1e-2 -> residual <= 0.01 and ratio 2 +- 1% within 1e4 steps")
    started = time.perf_counter()
    traj = simulate(GoRState(1.0, 1.0, eta=1e-2), LossScript.constant(4.0, 1.0), 10_000)
    elapsed = time.perf_counter() - started
    ratio = traj.column("alpha_kd") / traj.column("alpha_task")
    ok = (traj.column("eq_residual") <= 0.01) & (np.abs(ratio / 2.0 - 1.0) <= 0.01)
    first = int(np.argmax(ok)) + 1 if ok.any() else None
    last = traj.records[-1]
    detail(f"first satisfied at step {first}, final residual {last.eq_residual:.1e}, ratio {ratio[-1]:.6f}, {elapsed:.2f}s")
    assert last.eq_residual <= 0.01
    assert ratio[-1] == pytest.approx(2.0, rel=0.01)
    assert elapsed <= 5


def test_c3_single_scalar_instability(gate):
    detail = gate(3, "single learnable scalar drifts monotonically under (4,1) while GoR converges")
    started = time.perf_counter()
    script = LossScript.constant(4.0, 1.0)
    single = simulate(SingleScalarState(0.5, eta=1e-2), script, 10_000, "single_scalar")
    gor = simulate(GoRState(eta=1e-2), script, 10_000)
    elapsed = time.perf_counter() - started
    beta = np.concatenate([[0.5], single.column("alpha_task")])
    grads = single.column("grad_task")
    increasing = bool(np.all(np.diff(beta) > 0))
    stationary = bool(np.any(grads == 0.0))
    detail(f"beta 0.5 -> {beta[-1]:.4g}, strictly increasing={increasing}, clipped={single.ever_clipped}, "
           f"GoR residual {gor.records[-1].eq_residual:.1e}, {elapsed:.2f}s")
    assert single.ever_clipped or increasing
    assert not stationary
    assert gor.records[-1].eq_residual <= 0.01
    assert elapsed <= 5


def test_c4_static_vs_gor_sweep(gate, blob_data, teacher, single_teacher):
    detail = gate(4, "4-bit [2,16,2] qat_kd_gor mean over 5 seeds >= best static arm - 0.5 pp")
    teacher_acc = evaluate(teacher, blob_data.x_test, blob_data.y_test)
    started = time.perf_counter()
    rows = static_sweep(TrainConfig(mode="qat_kd_gor", wbits=4, abits=4), blob_data, single_teacher, seeds=range(5))
    elapsed = time.perf_counter() - started
    table = sweep_table(rows)
    static = {t["alpha"]: t["mean_test_acc"] for t in table if t["method"] == "static"}
    gor = next(t["mean_test_acc"] for t in table if t["method"] == "gor")
    best_alpha = max(static, key=static.get)
    detail(f"teacher {100 * teacher_acc:.2f}%, GoR {100 * gor:.2f}%, best static alpha={best_alpha} "
           f"{100 * static[best_alpha]:.2f}%, {elapsed:.0f}s")
    assert teacher_acc >= 0.97
    assert gor >= static[best_alpha] - 0.005
    assert elapsed <= 300


def test_c5_ekd_reduction(gate, blob_data, single_teacher):
    detail = gate(5, "qat_ekd_gor with one teacher reproduces the qat_kd_gor metrics stream bit for bit")
    started = time.perf_counter()
    kd = metrics_csv(train(TrainConfig(mode="qat_kd_gor", seed=3), blob_data, single_teacher).metrics)
    ekd = metrics_csv(train(TrainConfig(mode="qat_ekd_gor", seed=3), blob_data, single_teacher).metrics)
    elapsed = time.perf_counter() - started
    detail(f"{kd.count(chr(10)) - 1} rows, identical={kd == ekd}, {elapsed:.1f}s")
    assert kd.encode() == ekd.encode()
    assert elapsed <= 60


def test_c6_ensemble_sanity(gate, blob_data):
    detail = gate(6, "3-teacher EKD-GoR mean over 5 seeds >= best single-teacher KD-GoR - 0.5 pp")
    started = time.perf_counter()
    teachers = [train_teacher([2, w, w, 2], blob_data, seed=i, epochs=20) for i, w in enumerate((32, 64, 128))]
    seeds = range(5)

    def mean_acc(mode, ens):
        return float(np.mean([train(TrainConfig(mode=mode, seed=s), blob_data, ens).summary["test_acc"] for s in seeds]))

    singles = [mean_acc("qat_kd_gor", TeacherEnsemble([t])) for t in teachers]
    ekd = mean_acc("qat_ekd_gor", TeacherEnsemble(teachers))
    elapsed = time.perf_counter() - started
    detail(f"single-teacher means {[round(100 * a, 2) for a in singles]}%, EKD {100 * ekd:.2f}%, {elapsed:.0f}s")
    assert ekd >= max(singles) - 0.005
    assert elapsed <= 600


def test_c7_quantizer_contract(gate):
    detail = gate(7, "fake quant: |x - fq(x)| <= s/2 on 1e6 points per n in {2,4,8}, idempotent, monotone, STE mask via autodiff")
    started = time.perf_counter()
    rng = np.random.default_rng(7)
    worst = 0.0
    for bits in (2, 4, 8):
        for _ in range(10):
            lo = rng.uniform(-50, 50)
            spec = QuantSpec(bits, x_min=lo, x_max=lo + 10 ** rng.uniform(-4, 2))
            x = rng.uniform(spec.x_min, spec.x_max, size=100_000)
            q = fake_quant(x, spec).data
            err = np.abs(x - q)
            worst = max(worst, float(np.max(err / (spec.scale / 2))))
            assert np.all(err <= spec.scale / 2)
            np.testing.assert_array_equal(fake_quant(q, spec).data, q)
            wide = np.sort(rng.uniform(spec.x_min - 1, spec.x_max + 1, size=100_000))
            assert np.all(np.diff(fake_quant(wide, spec).data) >= 0)
        spec = QuantSpec(bits, x_min=-1.0, x_max=1.0)
        pts = T.parameter(rng.uniform(-2, 2, size=10_000))
        T.backward(T.sum(fake_quant(pts, spec)))
        inside = (pts.data >= -1.0) & (pts.data <= 1.0)
        np.testing.assert_array_equal(pts.grad, inside.astype(float))
    elapsed = time.perf_counter() - started
    detail(f"worst error / (s/2) = {worst:.9f}, {elapsed:.1f}s")
    assert elapsed <= 30


def test_c8_clipping_invariant(gate):
    detail = gate(8, "1e5 fuzzed gor_step calls never leave a scalar below 1e-4")
    started = time.perf_counter()
    rng = np.random.default_rng(8)
    state, lowest, diverged = GoRState(), np.inf, 0
    for i in range(100_000):
        if rng.random() < 0.01:
            state = GoRState(*(float(v) for v in 10 ** rng.uniform(-4, 4, size=2)))
        l_t, l_k = (0.0 if rng.random() < 0.1 else float(10 ** rng.uniform(-12, 12)) for _ in range(2))
        state = GoRState(state.alpha_task, state.alpha_kd, eta=float(10 ** rng.uniform(-6, 1)))
        try:
            state = gor_step(state, l_t, l_k)
        except DivergenceError:
            diverged += 1
            state = GoRState()
        lowest = min(lowest, state.alpha_task, state.alpha_kd)
    elapsed = time.perf_counter() - started
    detail(f"lowest scalar {lowest:.3e}, divergence aborts {diverged}, {elapsed:.1f}s")
    assert lowest >= CLIP_FLOOR
    assert elapsed <= 10


def test_c9_determinism(gate, tmp_path):
    detail = gate(9, "train / sweep / dynamics repeated with the same seed give byte-identical CSVs")
    cfg = tmp_path / "run.toml"
    cfg.write_text('mode = "qat_kd_gor"\nepochs = 3\nteacher_widths = [[2, 16, 2]]\nteacher_epochs = 5\n[data]\nn = 600\n')
    dyn = tmp_path / "dyn.toml"
    dyn.write_text('script = "noisy"\nsigma = 0.5\nsteps = 3000\nscan = true\nscan_n = 3\n')
    commands = {
        "train": ["train", "--config", str(cfg), "--seed", "5"],
        "sweep": ["sweep", "--config", str(cfg), "--grid", "0,0.5,1", "--seed", "5"],
        "dynamics": ["dynamics", "--config", str(dyn), "--seed", "5"],
    }
    identical = {}
    for name, argv in commands.items():
        outputs = []
        for rep in range(2):
            out = tmp_path / f"{name}-{rep}"
            assert main(argv + ["--out", str(out)]) == 0
            outputs.append({p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))})
        assert outputs[0], f"{name} wrote no CSV"
        identical[name] = outputs[0] == outputs[1]
    detail(", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}" for k, v in identical.items()))
    assert all(identical.values())

