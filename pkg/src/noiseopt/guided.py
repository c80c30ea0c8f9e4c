"""Loss-guided deterministic sampling baseline.

Instead of optimizing the initial noise against a criterion on the final
decoded motion, this sampler nudges each intermediate state using the
gradient of the criterion evaluated on the current single-step prediction
of the clean motion. Gradients flow through one network evaluation only and
never across solver steps, which is precisely the approximation the latent
optimizer avoids. At guidance scale zero the sampler reduces exactly to the
plain deterministic solver.
"""

from __future__ import annotations

import numpy as np

from . import tensorgrad as tg
from .denoiser import DenoiserParams
from .diffusion import NoiseSchedule, ddim_step, denoise_fn, make_schedule, \
    solve_times
from .motiondata import Motion
from .objectives import CriterionSpec, loss_obs, loss_pose


class GuidedError(RuntimeError):
    pass


def prediction_criterion(spec: CriterionSpec):
    """Pose/obstacle criterion on a predicted clean motion (meters).

    Latent-space terms (content, decorrelation) have no analog here: the
    guidance signal sees only the per-step prediction.
    """

    def criterion(x_meters: tg.Tensor) -> tg.Tensor:
        total = tg.tensor(0.0)
        if spec.observed is not None and len(spec.observed):
            total = tg.add(total, loss_pose(x_meters, spec.observed))
        if spec.scene is not None:
            total = tg.add(total, tg.smul(loss_obs(x_meters, spec.scene),
                                          spec.weights.obs))
        return total

    return criterion


def guided_sample(params: DenoiserParams, init: np.ndarray, steps: int,
                  spec: CriterionSpec, scale: float,
                  schedule: NoiseSchedule | None = None) -> Motion:
    """Decode a latent while steering each step by the criterion gradient."""
    if scale < 0:
        raise GuidedError("guidance scale must be non-negative")
    if params.stats is None:
        raise GuidedError("model carries no dataset stats")
    schedule = schedule or make_schedule(params.spec.t_max)
    fn = denoise_fn(params)
    criterion = prediction_criterion(spec)
    frames = params.spec.frames
    mean_tile = np.tile(params.stats.mean[:, None], (1, frames))
    std_tile = np.tile(params.stats.std[:, None], (1, frames))

    x = np.array(init, dtype=np.float64)
    times = solve_times(schedule.t_max, steps)
    for t, t_next in zip(times, times[1:]):
        if scale > 0:
            graph = tg.Graph()
            x_t = graph.leaf(x)
            pred = fn(x_t, t)
            meters = tg.add(tg.mul(pred, tg.Tensor(std_tile)),
                            tg.Tensor(mean_tile))
            loss = criterion(meters)
            grad = graph.backward(loss).wrt(x_t)
            if not np.all(np.isfinite(grad)):
                raise GuidedError(f"non-finite guidance gradient at time {t}")
            x = x - scale * (1.0 - schedule.alpha_bar[t]) * grad
        x = ddim_step(tg.Tensor(x), t, t_next, fn, schedule).data
    return Motion(x * params.stats.std[:, None] + params.stats.mean[:, None],
                  fps=20)
