"""Fused co-training loop.

Each batch is partitioned once: the larger share anchors the velocity field
with plain flow matching, the smaller share gets the one-step consistency
target from the EMA teacher plus the decoupled branch losses and the L1
kinematic regularizers. One optimizer step covers both shares; the teacher
then takes its EMA step and the spectral mask its running update.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, fields as dc_fields

import numpy as np

from . import gradcore as gc
from .backbone import Conditioning, KoopmanFlowModel, VelocityFields
from .errors import ConfigError, ContractError, DimensionError, NumericError
from .gradcore import DiffTensor, Tape


@dataclass
class TrainConfig:
    r_ct: float = 0.2          # consistency share of each batch
    lambda_dec: float = 0.5    # weight of the decoupled branch losses
    lambda_temporal: float = 0.1
    lambda_spatial: float = 0.1
    ema_decay: float = 0.999
    lr: float = 1e-3
    batch: int = 32
    steps: int = 2000
    dt_min: float = 0.01
    dt_max: float = 0.2
    seed: int = 0
    ct_weight: float = 1.0     # 0 disables the consistency partition entirely
    grad_clip: float = 10.0    # global gradient norm bound, 0 disables
    ckpt_every: int = 0        # 0 = only at the end

    def __post_init__(self):
        if not 0.0 < self.r_ct < 1.0:
            raise ConfigError(f"r_ct must be in (0, 1), got {self.r_ct}")
        if not 0.0 < self.dt_min <= self.dt_max < 1.0:
            raise ConfigError("need 0 < dt_min <= dt_max < 1")


@dataclass
class LossBreakdown:
    fm: float = 0.0
    ct: float = 0.0
    ct_inv: float = 0.0
    inv_cross: float = 0.0
    var_flow: float = 0.0
    reg_temp: float = 0.0
    reg_rate: float = 0.0
    reg_spatial: float = 0.0
    total: float = 0.0

    def recompose(self, lambda_dec: float) -> float:
        return (
            (self.fm + self.ct)
            + lambda_dec * ((self.ct_inv + self.inv_cross) + self.var_flow)
            + ((self.reg_temp + self.reg_rate) + self.reg_spatial)
        )

    @classmethod
    def csv_header(cls) -> list[str]:
        return [f.name for f in dc_fields(cls)]

    def csv_row(self) -> list[float]:
        return [getattr(self, f.name) for f in dc_fields(self)]


# ---------------------------------------------------------------------------
# objective pieces


def ot_interpolate(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """x_t = t*x1 + (1-t)*x0 with per-sample t."""
    x0 = np.asarray(x0, dtype=np.float64)
    x1 = np.asarray(x1, dtype=np.float64)
    if x0.shape != x1.shape:
        raise DimensionError(f"shape mismatch: {x0.shape} vs {x1.shape}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0.0) or np.any(t > 1.0):
        raise ContractError("interpolation time t must lie in [0, 1]")
    while t.ndim < x0.ndim:
        t = t[..., None]
    return t * x1 + (1.0 - t) * x0


def mse_to(pred: DiffTensor, target: np.ndarray) -> DiffTensor:
    return gc.mean_all(gc.square(gc.sub(pred, DiffTensor(np.asarray(target, dtype=np.float64)))))


def fm_loss(v_pred: DiffTensor, x0: np.ndarray, x1: np.ndarray) -> DiffTensor:
    return mse_to(v_pred, np.asarray(x1) - np.asarray(x0))


def ct_target(x_t: np.ndarray, x_next: np.ndarray, t, dt,
              v_teacher_next: np.ndarray) -> np.ndarray:
    """Consistency flow target from the teacher's step-ahead prediction.

    x_t and x_next must come from the same (x0, x1) pair; the identity
    target = (x_next + (1 - t - dt) v_teacher(x_next) - x_t) / (1 - t)
    then reproduces the exact conditional field when the teacher does.
    """
    t = np.asarray(t, dtype=np.float64)
    dt = np.asarray(dt, dtype=np.float64)
    if np.any(t + dt > 1.0 + 1e-12):
        raise ContractError("need t + dt <= 1")
    if np.any(t >= 1.0):
        raise ContractError("ct_target undefined at t = 1")
    expand = (...,) + (None,) * (np.ndim(x_t) - t.ndim)
    tail = (1.0 - t - dt)[expand]
    return (x_next + tail * v_teacher_next - x_t) / (1.0 - t)[expand]


def ct_loss(v_pred: DiffTensor, target: np.ndarray) -> DiffTensor:
    return mse_to(v_pred, target)


def decoupled_losses(student: VelocityFields, teacher_same: VelocityFields,
                     teacher_next: VelocityFields):
    """(ct_inv, inv_cross, var_flow): branch-wise anchoring to the teacher."""
    ct_inv = mse_to(student.v_inv, teacher_same.v_inv.data)
    inv_cross = mse_to(student.v_inv, teacher_next.v_inv.data)
    var_flow = mse_to(student.v_var, teacher_same.v_var.data)
    return ct_inv, inv_cross, var_flow


def reg_loss(v_inv_pred: DiffTensor, v_inv_next: np.ndarray,
             lambda_temporal: float, lambda_spatial: float,
             batch_mean: DiffTensor | None = None):
    """L1 kinematic penalties on the invariant branch.

    temp: distance to the teacher's step-ahead invariant prediction;
    rate: distance between their first differences along physical steps;
    spatial: distance to the batch mean of the prediction.
    """
    if v_inv_pred.ndim != 3:
        raise DimensionError(f"expected [B, T, D], got {v_inv_pred.shape}")
    B, T, D = v_inv_pred.shape
    if T < 2:
        raise DimensionError("change-rate penalty needs T >= 2")
    next_const = np.asarray(v_inv_next, dtype=np.float64)
    temp = gc.scale(gc.mean_all(gc.abs_(gc.sub(v_inv_pred, DiffTensor(next_const)))),
                    lambda_temporal)
    d_pred = gc.sub(gc.narrow(v_inv_pred, 1, 1, T - 1), gc.narrow(v_inv_pred, 1, 0, T - 1))
    d_next = next_const[:, 1:] - next_const[:, :-1]
    rate = gc.scale(gc.mean_all(gc.abs_(gc.sub(d_pred, DiffTensor(d_next)))),
                    lambda_temporal)
    if batch_mean is None:
        batch_mean = gc.mean_axis(v_inv_pred, 0)
    spread = gc.sub(v_inv_pred, gc.expand(batch_mean, (B, T, D)))
    spatial = gc.scale(gc.mean_all(gc.abs_(spread)), lambda_spatial)
    return temp, rate, spatial


def partition_batch(B: int, r_ct: float, rng: np.random.Generator):
    """Disjoint exhaustive (consistency, flow-matching) index split."""
    if not 0.0 < r_ct < 1.0:
        raise ConfigError(f"r_ct must be in (0, 1), got {r_ct}")
    n_ct = int(round(B * r_ct))
    if n_ct in (0, B):
        raise ConfigError(f"degenerate partition: round({B} * {r_ct}) = {n_ct}")
    perm = rng.permutation(B)
    return perm[:n_ct].copy(), perm[n_ct:].copy()


# ---------------------------------------------------------------------------
# teacher and optimizer


class EmaTeacher:
    """Shadow copy of the trainable parameters, updated geometrically."""

    def __init__(self, model: KoopmanFlowModel, decay: float):
        self.model = model
        self.decay = float(decay)
        self.shadow = model.parameters()

    def update(self, student_params: dict[str, DiffTensor]) -> None:
        for name, p in self.shadow.items():
            src = student_params[name]
            if src.data.shape != p.data.shape:
                raise ContractError(f"teacher shape drift for {name}")
            p.data *= self.decay
            p.data += (1.0 - self.decay) * src.data


def ema_update(teacher: EmaTeacher, student_params: dict[str, DiffTensor]) -> None:
    teacher.update(student_params)


def clip_gradients(params: dict[str, DiffTensor], max_norm: float) -> float:
    """Scale all gradients so their global norm stays under ``max_norm``."""
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float((p.grad * p.grad).sum())
    norm = np.sqrt(total)
    if norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p.grad is not None:
                p.grad *= factor
    return norm


class Adam:
    """Adam with decoupled weight decay fixed at zero."""

    def __init__(self, params: dict[str, DiffTensor], lr: float,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.b1 * self.m[name] + (1.0 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1.0 - self.b2) * g * g
            p.data -= self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


# ---------------------------------------------------------------------------


class Trainer:
    """Owns the student, the EMA teacher, the optimizer and the batch RNG.

    Per-step draws (t, noise, partition, dt) happen in a fixed order and do
    not depend on the loss configuration, so runs with different loss
    weights but the same seed see identical data.
    """

    def __init__(self, model: KoopmanFlowModel, cfg: TrainConfig):
        self.model = model
        self.cfg = cfg
        self.teacher = EmaTeacher(model.clone(), cfg.ema_decay)
        self.opt = Adam(model.parameters(), lr=cfg.lr)
        self.rng = np.random.default_rng(cfg.seed)
        self._epoch_perm: np.ndarray | None = None
        self._cursor = 0
        self.step_count = 0

    # -- data ----------------------------------------------------------
    def _next_batch_idx(self, n: int) -> np.ndarray:
        if self.cfg.batch > n:
            raise ConfigError(f"batch {self.cfg.batch} larger than dataset {n}")
        if self._epoch_perm is None or self._cursor + self.cfg.batch > n:
            self._epoch_perm = self.rng.permutation(n)
            self._cursor = 0
        idx = self._epoch_perm[self._cursor : self._cursor + self.cfg.batch]
        self._cursor += self.cfg.batch
        return idx

    # -- one optimizer step ---------------------------------------------
    def train_step(self, actions: np.ndarray, events: np.ndarray,
                   context: np.ndarray) -> LossBreakdown:
        cfg = self.cfg
        B, T, D = actions.shape
        t_all = self.rng.uniform(0.0, 1.0, B)
        x0 = self.rng.standard_normal((B, T, D))
        ct_idx, fm_idx = partition_batch(B, cfg.r_ct, self.rng)
        u_dt = self.rng.uniform(0.0, 1.0, B)

        # keep the consistency samples away from t = 1 so t + dt stays valid
        t_all[ct_idx] *= 1.0 - cfg.dt_min
        dt_hi = np.minimum(cfg.dt_max, 1.0 - t_all)
        dt_all = cfg.dt_min + u_dt * np.maximum(dt_hi - cfg.dt_min, 0.0)

        x_t = ot_interpolate(x0, actions, t_all)
        cond = Conditioning(events=events, context=context)

        use_ct = cfg.ct_weight != 0.0
        if use_ct:
            t_ct = t_all[ct_idx]
            dt_ct = dt_all[ct_idx]
            x_t_ct = x_t[ct_idx]
            x_next_ct = ot_interpolate(x0[ct_idx], actions[ct_idx], t_ct + dt_ct)
            cond_ct = Conditioning(events=events[ct_idx], context=context[ct_idx])
            teacher_same, _ = self.teacher.model.forward(
                x_t_ct, cond_ct, t_ct, training=False, fast_local=False
            )
            teacher_next, _ = self.teacher.model.forward(
                x_next_ct, cond_ct, t_ct + dt_ct, training=False, fast_local=False
            )
            target_ct = ct_target(x_t_ct, x_next_ct, t_ct, dt_ct,
                                  teacher_next.v_total.data)

        out = LossBreakdown()
        with Tape() as tape:
            fields, spectrum = self.model.forward(x_t, cond, t_all, training=True)
            fm = fm_loss(gc.index_select(fields.v_total, fm_idx),
                         x0[fm_idx], actions[fm_idx])
            total = fm
            if use_ct:
                student_ct = VelocityFields(
                    v_inv=gc.index_select(fields.v_inv, ct_idx),
                    v_var=gc.index_select(fields.v_var, ct_idx),
                    v_total=gc.index_select(fields.v_total, ct_idx),
                )
                ct = gc.scale(ct_loss(student_ct.v_total, target_ct), cfg.ct_weight)
                d_inv, d_cross, d_var = decoupled_losses(student_ct, teacher_same,
                                                         teacher_next)
                d_inv = gc.scale(d_inv, cfg.ct_weight)
                d_cross = gc.scale(d_cross, cfg.ct_weight)
                d_var = gc.scale(d_var, cfg.ct_weight)
                r_temp, r_rate, r_spatial = reg_loss(
                    student_ct.v_inv, teacher_next.v_inv.data,
                    cfg.lambda_temporal, cfg.lambda_spatial,
                )
                r_temp = gc.scale(r_temp, cfg.ct_weight)
                r_rate = gc.scale(r_rate, cfg.ct_weight)
                r_spatial = gc.scale(r_spatial, cfg.ct_weight)
                dec = gc.scale(gc.add(gc.add(d_inv, d_cross), d_var), cfg.lambda_dec)
                regs = gc.add(gc.add(r_temp, r_rate), r_spatial)
                total = gc.add(gc.add(gc.add(total, ct), dec), regs)
                out.ct = ct.item()
                out.ct_inv = d_inv.item()
                out.inv_cross = d_cross.item()
                out.var_flow = d_var.item()
                out.reg_temp = r_temp.item()
                out.reg_rate = r_rate.item()
                out.reg_spatial = r_spatial.item()
            out.fm = fm.item()
            out.total = total.item()
            if not np.isfinite(out.total):
                raise NumericError(f"non-finite training loss: {out}")
            tape.backward(total)

        if self.cfg.grad_clip > 0:
            clip_gradients(self.model.parameters(), self.cfg.grad_clip)
        self.opt.step()
        self.opt.zero_grad()
        self.teacher.update(self.model.parameters())
        self.model.spectral.observe(spectrum)
        self.step_count += 1
        return out

    # -- full run --------------------------------------------------------
    def fit(self, actions: np.ndarray, events: np.ndarray, context: np.ndarray,
            log_path=None, ckpt_path=None, progress_every: int = 0):
        history: list[LossBreakdown] = []
        writer = None
        log_file = None
        if log_path is not None:
            log_file = open(log_path, "w", newline="")
            writer = csv.writer(log_file)
            writer.writerow(["step"] + LossBreakdown.csv_header() + ["k_inv_radius"])
        started = time.perf_counter()
        try:
            for step in range(self.cfg.steps):
                idx = self._next_batch_idx(actions.shape[0])
                breakdown = self.train_step(actions[idx], events[idx], context[idx])
                history.append(breakdown)
                if writer is not None:
                    writer.writerow([step] + breakdown.csv_row()
                                    + [self.model.inv_op.spectral_radius()])
                if ckpt_path is not None and self.cfg.ckpt_every > 0 \
                        and (step + 1) % self.cfg.ckpt_every == 0:
                    self.model.save(ckpt_path)
                if progress_every and (step + 1) % progress_every == 0:
                    rate = (step + 1) / (time.perf_counter() - started)
                    print(f"step {step + 1}/{self.cfg.steps} "
                          f"total={breakdown.total:.4f} ({rate:.1f} it/s)")
        finally:
            if log_file is not None:
                log_file.close()
        if ckpt_path is not None:
            self.model.save(ckpt_path)
        return history


def heldout_fm_loss(model: KoopmanFlowModel, actions: np.ndarray,
                    events: np.ndarray, context: np.ndarray,
                    seed: int = 1234, chunk: int = 64) -> float:
    """Flow-matching loss on held-out data with draws fixed by ``seed``."""
    rng = np.random.default_rng(seed)
    n = actions.shape[0]
    t = rng.uniform(0.0, 1.0, n)
    x0 = rng.standard_normal(actions.shape)
    sq_sum = 0.0
    for lo in range(0, n, chunk):
        hi = min(lo + chunk, n)
        x_t = ot_interpolate(x0[lo:hi], actions[lo:hi], t[lo:hi])
        cond = Conditioning(events=events[lo:hi], context=context[lo:hi])
        fields, _ = model.forward(x_t, cond, t[lo:hi])
        diff = fields.v_total.data - (actions[lo:hi] - x0[lo:hi])
        sq_sum += float((diff * diff).sum())
    return sq_sum / actions.size
