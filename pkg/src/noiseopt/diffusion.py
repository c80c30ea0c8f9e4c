"""Noise schedule, forward diffusion, training, deterministic sampling and
inversion.

The sampler is the deterministic update rewritten for a clean-motion
predictor: from a noisy x_t, predict x0, recover the implied noise, and
re-noise to the next (lower) time. Because every step is expressed in
tensorgrad primitives, a criterion evaluated on the final output can be
differentiated with respect to the starting noise through all steps.

Inversion runs the same recurrence in ascending time under the smoothness
assumption that the prediction changes little between adjacent grid times.
At the very first step (leaving t=0, where the update is degenerate) the
clean input itself serves as the prediction and the implied noise is zero.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensorgrad as tg
from .denoiser import (DenoiserParams, DenoiserSpec, forward, forward_flat,
                       init_params, param_tensors, time_embed_table)
from .motiondata import Motion, DatasetStats, fit_stats, normalize

log = logging.getLogger(__name__)

ALPHA_FLOOR = 1e-8


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class NoiseSchedule:
    t_max: int
    alpha_bar: np.ndarray  # (t_max + 1,), signal retention per time

    def __post_init__(self):
        ab = self.alpha_bar
        if ab[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must be exactly 1")
        if not np.all(np.diff(ab) < 0):
            raise ScheduleError("alpha_bar must be strictly decreasing")
        if ab[-1] >= 1e-3:
            raise ScheduleError("alpha_bar at the final time must be < 1e-3")
        if np.any(ab <= 0) or np.any(ab > 1):
            raise ScheduleError("alpha_bar values must lie in (0, 1]")


def make_schedule(t_max: int) -> NoiseSchedule:
    """Cosine-shaped signal retention, floored to keep every value positive."""
    if t_max < 2:
        raise ScheduleError("schedule needs at least 2 steps")
    s = 0.008
    t = np.arange(t_max + 1) / t_max
    f = np.cos(((t + s) / (1.0 + s)) * np.pi / 2.0) ** 2
    alpha_bar = np.maximum(f / f[0], ALPHA_FLOOR)
    alpha_bar[0] = 1.0
    return NoiseSchedule(t_max, alpha_bar)


def q_sample(x0: np.ndarray, t: int, eps: np.ndarray,
             schedule: NoiseSchedule) -> np.ndarray:
    """Forward diffusion marginal: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    if not 0 <= t <= schedule.t_max:
        raise ScheduleError(f"time {t} outside schedule range")
    if np.shape(eps) != np.shape(x0):
        raise ScheduleError("noise shape must match the input")
    ab = schedule.alpha_bar[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# --- deterministic sampler ----------------------------------------------------

DenoiseFn = Callable[[tg.Tensor, int], tg.Tensor]


def denoise_fn(params: DenoiserParams) -> DenoiseFn:
    """Standard closure evaluating the network with constant weights."""
    pt = param_tensors(params)
    spec = params.spec
    return lambda x_t, t: forward(x_t, t, pt, spec)


def solve_times(t_max: int, steps: int) -> list[int]:
    """Descending integer grid {T, T(K-1)/K, ..., 0} with both endpoints."""
    if steps < 1:
        raise ScheduleError("need at least one solver step")
    times = [round(t_max * i / steps) for i in range(steps, -1, -1)]
    if any(a <= b for a, b in zip(times, times[1:])):
        raise ScheduleError(f"{steps} steps do not embed into {t_max} times")
    return times


def ddim_step(x_t: tg.Tensor, t: int, t_next: int, fn: DenoiseFn,
              schedule: NoiseSchedule) -> tg.Tensor:
    """One deterministic update from time t down to t_next."""
    if t <= t_next:
        raise ScheduleError(f"step must go backward in time, got {t}->{t_next}")
    if t == 0:
        raise ScheduleError("cannot step from t=0 (no noise to remove)")
    ab_t = float(schedule.alpha_bar[t])
    ab_n = float(schedule.alpha_bar[t_next])
    x0_hat = fn(x_t, t)
    eps_hat = tg.smul(tg.sub(x_t, tg.smul(x0_hat, np.sqrt(ab_t))),
                      1.0 / np.sqrt(1.0 - ab_t))
    return tg.add(tg.smul(x0_hat, np.sqrt(ab_n)),
                  tg.smul(eps_hat, np.sqrt(1.0 - ab_n)))


def ddim_solve(x_start: tg.Tensor, steps: int, fn: DenoiseFn,
               schedule: NoiseSchedule, checkpoint: bool = False) -> tg.Tensor:
    """Decode a latent to a clean sample; differentiable w.r.t. the latent.

    With ``checkpoint`` enabled each solver step becomes a re-executed
    segment, so the retained graph grows with the number of steps rather
    than with steps times per-step work.
    """
    times = solve_times(schedule.t_max, steps)
    x = x_start
    for t, t_next in zip(times, times[1:]):
        if checkpoint and x.graph is not None:
            def segment(inp, t=t, t_next=t_next):
                return ddim_step(inp, t, t_next, fn, schedule)

            x = x.graph.checkpoint(segment, x)
        else:
            x = ddim_step(x, t, t_next, fn, schedule)
    return x


def ddim_invert(x0: np.ndarray, steps: int, fn: DenoiseFn,
                schedule: NoiseSchedule) -> np.ndarray:
    """Recover the latent noise whose decoding approximates x0.

    Runs the solver recurrence in ascending time. Leaving t=0 the update is
    degenerate (no noise component exists yet), so the first step uses the
    clean input as the prediction with zero implied noise.
    """
    times = list(reversed(solve_times(schedule.t_max, steps)))
    x = np.asarray(x0, dtype=np.float64)
    for t_prev, t in zip(times, times[1:]):
        ab_t = schedule.alpha_bar[t]
        if t_prev == 0:
            x = np.sqrt(ab_t) * x0
            continue
        ab_p = schedule.alpha_bar[t_prev]
        x0_hat = fn(tg.Tensor(x), t_prev).data
        eps_hat = (x - np.sqrt(ab_p) * x0_hat) / np.sqrt(1.0 - ab_p)
        x = np.sqrt(ab_t) * x0_hat + np.sqrt(1.0 - ab_t) * eps_hat
    return x


# --- training --------------------------------------------------------------------


@dataclass
class TrainConfig:
    epochs: int = 120
    batch_size: int = 64
    lr: float = 1e-4
    ema_decay: float = 0.999
    seed: int = 0
    val_fraction: float = 0.05
    width: int = 512
    blocks: int = 3
    t_max: int = 1000


@dataclass
class TrainResult:
    params: DenoiserParams          # EMA weights
    raw_params: DenoiserParams
    stats: DatasetStats
    train_curve: list[float] = field(default_factory=list)  # per-step loss
    val_curve: list[float] = field(default_factory=list)    # per-epoch loss


def mse_loss(pred: tg.Tensor, target: tg.Tensor) -> tg.Tensor:
    return tg.tmean(tg.square(tg.sub(pred, target)))


class _Adam:
    """Plain adaptive-moment update over a dict of arrays."""

    def __init__(self, shapes: dict[str, tuple], lr: float,
                 betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.betas, self.eps = lr, betas, eps
        self.step_count = 0
        self.m = {k: np.zeros(s) for k, s in shapes.items()}
        self.v = {k: np.zeros(s) for k, s in shapes.items()}

    def step(self, tensors: dict[str, np.ndarray],
             grads: dict[str, np.ndarray]) -> None:
        b1, b2 = self.betas
        self.step_count += 1
        c1 = 1.0 - b1 ** self.step_count
        c2 = 1.0 - b2 ** self.step_count
        for k, g in grads.items():
            self.m[k] = b1 * self.m[k] + (1.0 - b1) * g
            self.v[k] = b2 * self.v[k] + (1.0 - b2) * g * g
            tensors[k] -= self.lr * (self.m[k] / c1) / (
                np.sqrt(self.v[k] / c2) + self.eps)


def _batch_loss_graph(params: DenoiserParams, x0_flat: np.ndarray,
                      t_batch: np.ndarray, eps_flat: np.ndarray,
                      schedule: NoiseSchedule, table: np.ndarray):
    """Recorded MSE of the prediction against clean data for one batch."""
    ab = schedule.alpha_bar[t_batch][:, None]
    x_t = np.sqrt(ab) * x0_flat + np.sqrt(1.0 - ab) * eps_flat
    graph = tg.Graph()
    pt = param_tensors(params, graph)
    pred = forward_flat(tg.Tensor(x_t), tg.Tensor(table[t_batch]), pt,
                        params.spec)
    loss = mse_loss(pred, tg.Tensor(x0_flat))
    return loss, graph, pt


def training_loss(params: DenoiserParams, x0_batch: list[Motion] | np.ndarray,
                  rng: np.random.Generator,
                  schedule: NoiseSchedule) -> float:
    """Diffusion MSE on one batch at random times (no parameter update)."""
    flat = _flatten_batch(x0_batch, params.spec)
    t_batch = rng.integers(1, schedule.t_max + 1, size=flat.shape[0])
    eps = rng.standard_normal(flat.shape)
    table = time_embed_table(schedule.t_max)
    loss, _, _ = _batch_loss_graph(params, flat, t_batch, eps, schedule, table)
    return float(loss.item())


def _flatten_batch(batch, spec: DenoiserSpec) -> np.ndarray:
    if isinstance(batch, np.ndarray):
        return batch.reshape(batch.shape[0], spec.flat)
    return np.stack([m.data.reshape(spec.flat) for m in batch])


def train(dataset: list[Motion], config: TrainConfig) -> TrainResult:
    """Train the clean-motion predictor on normalized data.

    Returns exponentially averaged weights as the usable model, with the raw
    weights and loss curves alongside.
    """
    if not dataset:
        raise ValueError("train: empty dataset")
    stats = fit_stats(dataset)
    normalized = [normalize(m, stats) for m in dataset]
    spec = DenoiserSpec(d=dataset[0].data.shape[0], frames=dataset[0].frames,
                        width=config.width, blocks=config.blocks,
                        t_max=config.t_max)
    schedule = make_schedule(config.t_max)
    table = time_embed_table(config.t_max)

    rng = np.random.default_rng([config.seed, 0x7121])
    n_val = max(1, int(len(normalized) * config.val_fraction))
    order = rng.permutation(len(normalized))
    val_flat = _flatten_batch([normalized[i] for i in order[:n_val]], spec)
    train_set = [normalized[i] for i in order[n_val:]]
    train_flat = _flatten_batch(train_set, spec)

    params = init_params(spec, seed=config.seed, stats=stats)
    ema = params.copy()
    adam = _Adam({k: v.shape for k, v in params.tensors.items()}, config.lr)

    def val_loss(p: DenoiserParams) -> float:
        vr = np.random.default_rng([config.seed, 0x7A1])
        t_batch = vr.integers(1, config.t_max + 1, size=val_flat.shape[0])
        eps = vr.standard_normal(val_flat.shape)
        loss, _, _ = _batch_loss_graph(p, val_flat, t_batch, eps, schedule,
                                       table)
        return float(loss.item())

    result = TrainResult(ema, params, stats)
    result.val_curve.append(val_loss(params))
    steps_per_epoch = max(1, len(train_set) // config.batch_size)
    decay = config.ema_decay
    for epoch in range(config.epochs):
        perm = rng.permutation(len(train_set))
        for step in range(steps_per_epoch):
            idx = perm[step * config.batch_size:(step + 1) * config.batch_size]
            if idx.size == 0:
                continue
            batch = train_flat[idx]
            t_batch = rng.integers(1, config.t_max + 1, size=idx.size)
            eps = rng.standard_normal(batch.shape)
            loss, graph, pt = _batch_loss_graph(params, batch, t_batch, eps,
                                                schedule, table)
            grads = graph.backward(loss)
            adam.step(params.tensors,
                      {k: grads.wrt(v) for k, v in pt.items()})
            for k in ema.tensors:
                ema.tensors[k] *= decay
                ema.tensors[k] += (1.0 - decay) * params.tensors[k]
            result.train_curve.append(loss.item())
        result.val_curve.append(val_loss(params))
        log.info("epoch %d/%d train=%.4f val=%.4f", epoch + 1, config.epochs,
                 result.train_curve[-1], result.val_curve[-1])
    return result
