"""Latent-noise optimization through the deterministic sampler.

Each iteration decodes the current noise latent to a motion, evaluates a
task criterion on the decoded motion (in meters) and on the latent itself,
back-propagates through the full sampler chain, and feeds the unit-normalized
gradient into an adaptive-moment update with a warmup + cosine learning-rate
schedule. Optionally a small scheduled Gaussian perturbation is added to
encourage exploration.

Batch semantics: candidates are fully independent optimizations (they may
carry distinct criteria) and can run on worker processes; per-candidate
seeding keeps results identical regardless of scheduling.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensorgrad as tg
from .denoiser import DenoiserParams
from .diffusion import NoiseSchedule, ddim_invert, ddim_solve, denoise_fn, \
    make_schedule
from .motiondata import Motion, save_mbin
from .objectives import CriterionSpec, LossWeights, build_criterion

WORKERS_ENV = "NOISEOPT_WORKERS"


class OptimError(RuntimeError):
    pass


@dataclass
class OptimConfig:
    lr: float = 0.05
    warmup_steps: int = 50
    steps: int = 300            # editing default; 500 refine, 1000 blending
    perturb: float = 0.0
    solver_steps: int = 10      # decode steps per iteration
    batch: int = 16
    weights: LossWeights = field(default_factory=LossWeights)
    grad_floor: float = 1e-12
    decorr_squared: bool = True
    checkpoint: bool = False
    normalize_grad: bool = True  # ablation switch; raw gradients otherwise

    def __post_init__(self):
        if self.lr <= 0:
            raise OptimError("learning rate must be positive")
        if not 0 <= self.warmup_steps < self.steps:
            raise OptimError("warmup must be shorter than the run")
        if self.solver_steps < 1 or self.batch < 1:
            raise OptimError("solver steps and batch must be at least 1")

    def to_json(self) -> dict:
        out = asdict(self)
        out["weights"] = {"obs": self.weights.obs, "cont": self.weights.cont,
                          "decorr": self.weights.decorr}
        return out


def lr_at(step: int, config: OptimConfig) -> float:
    """Linear warmup to the base rate, then cosine decay to zero."""
    if step >= config.steps:
        raise OptimError(f"step {step} outside the {config.steps}-step run")
    if step < config.warmup_steps:
        return config.lr * (step + 1) / config.warmup_steps
    span = config.steps - config.warmup_steps
    return config.lr * 0.5 * (1.0 + np.cos(np.pi * (step - config.warmup_steps)
                                           / span))


@dataclass
class _AdamState:
    m: np.ndarray
    v: np.ndarray
    count: int = 0


def step_latent(latent: np.ndarray, grad: np.ndarray, state: _AdamState,
                step: int, config: OptimConfig,
                rng: np.random.Generator) -> tuple[np.ndarray, bool, float]:
    """One update of the latent; returns (new latent, skipped, grad norm).

    The raw gradient is normalized to unit length before entering the
    adaptive-moment accumulator. Gradients below the floor skip the step
    entirely (no state change, no perturbation).
    """
    if not np.all(np.isfinite(grad)):
        raise OptimError("non-finite gradient")
    norm = float(np.linalg.norm(grad))
    if norm < config.grad_floor:
        return latent, True, norm
    g_hat = grad / norm if config.normalize_grad else grad
    state.count += 1
    b1, b2, eps = 0.9, 0.999, 1e-8
    state.m = b1 * state.m + (1.0 - b1) * g_hat
    state.v = b2 * state.v + (1.0 - b2) * g_hat * g_hat
    m_hat = state.m / (1.0 - b1 ** state.count)
    v_hat = state.v / (1.0 - b2 ** state.count)
    lr = lr_at(step, config)
    latent = latent - lr * m_hat / (np.sqrt(v_hat) + eps)
    if config.perturb > 0:
        latent = latent + (config.perturb * lr / config.lr) * \
            rng.standard_normal(latent.shape)
    return latent, False, norm


@dataclass
class Trace:
    total: list[float] = field(default_factory=list)
    components: list[dict[str, float]] = field(default_factory=list)
    grad_norm: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    skipped: list[bool] = field(default_factory=list)

    def __len__(self):
        return len(self.total)


@dataclass
class OptimResult:
    index: int
    latent: np.ndarray
    motion: Motion | None
    final_loss: float
    final_components: dict[str, float]
    trace: Trace
    wall_time: float
    aborted: bool = False
    abort_reason: str = ""


def init_latent(mode: str, batch: int, shape: tuple[int, int], seed,
                reference: Motion | None = None,
                params: DenoiserParams | None = None,
                invert_steps: int = 100,
                schedule: NoiseSchedule | None = None) -> np.ndarray:
    """Starting latents: i.i.d. noise per candidate, or a shared inversion
    of a reference motion."""
    key = [int(s) for s in np.atleast_1d(seed)]
    if mode == "random":
        return np.stack([
            np.random.default_rng(key + [i]).standard_normal(shape)
            for i in range(batch)])
    if mode == "inversion":
        if reference is None or params is None:
            raise OptimError("inversion init needs a reference motion and model")
        if params.stats is None:
            raise OptimError("model carries no dataset stats")
        schedule = schedule or make_schedule(params.spec.t_max)
        normalized = (reference.data - params.stats.mean[:, None]) \
            / params.stats.std[:, None]
        latent = ddim_invert(normalized, invert_steps, denoise_fn(params),
                             schedule)
        return np.tile(latent[None], (batch, 1, 1))
    raise OptimError(f"unknown init mode {mode!r}")


# worker-process state, populated once per pool via the initializer
_WORKER: dict = {}


def _init_worker(params: DenoiserParams, config: OptimConfig) -> None:
    _WORKER["params"] = params
    _WORKER["config"] = config


def _worker_entry(args):
    index, latent, spec, seed = args
    return run_candidate(_WORKER["params"], _WORKER["config"], index, latent,
                         spec, seed)


def run_candidate(params: DenoiserParams, config: OptimConfig, index: int,
                  init: np.ndarray, spec: CriterionSpec,
                  seed: int) -> OptimResult:
    """Optimize one latent to convergence of its criterion."""
    if params.stats is None:
        raise OptimError("model carries no dataset stats")
    started = time.perf_counter()
    schedule = make_schedule(params.spec.t_max)
    fn = denoise_fn(params)
    criterion = build_criterion(spec)
    frames = params.spec.frames
    mean_tile = tg.tensor(np.tile(params.stats.mean[:, None], (1, frames)))
    std_tile = tg.tensor(np.tile(params.stats.std[:, None], (1, frames)))

    def to_meters(x_norm: tg.Tensor) -> tg.Tensor:
        return tg.add(tg.mul(x_norm, std_tile), mean_tile)

    latent = np.array(init, dtype=np.float64)
    rng = np.random.default_rng([seed, index, 0x9E])
    state = _AdamState(np.zeros_like(latent), np.zeros_like(latent))
    trace = Trace()

    def finish(aborted=False, reason=""):
        if aborted:
            return OptimResult(index, latent, None, np.inf, {}, trace,
                               time.perf_counter() - started, True, reason)
        final_norm = ddim_solve(tg.Tensor(latent), config.solver_steps, fn,
                                schedule)
        motion = Motion(to_meters(final_norm).data, fps=20)
        loss, comps = criterion(tg.Tensor(motion.data), tg.Tensor(latent))
        return OptimResult(index, latent, motion, float(loss.item()), comps,
                           trace, time.perf_counter() - started)

    for step in range(config.steps):
        graph = tg.Graph()
        x_latent = graph.leaf(latent)
        decoded = ddim_solve(x_latent, config.solver_steps, fn, schedule,
                             checkpoint=config.checkpoint)
        loss, comps = criterion(to_meters(decoded), x_latent)
        total = loss.item()
        if not np.isfinite(total):
            return finish(aborted=True,
                          reason=f"non-finite criterion at step {step}")
        grad = graph.backward(loss).wrt(x_latent)
        try:
            latent, skipped, norm = step_latent(latent, grad, state, step,
                                                config, rng)
        except OptimError as err:
            return finish(aborted=True, reason=f"{err} at step {step}")
        trace.total.append(total)
        trace.components.append(comps)
        trace.grad_norm.append(norm)
        trace.lr.append(lr_at(step, config))
        trace.skipped.append(skipped)
    return finish()


def _resolve_workers(requested: int | None, jobs: int) -> int:
    if requested is None:
        env = os.environ.get(WORKERS_ENV)
        requested = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(requested, jobs))


def run(params: DenoiserParams, config: OptimConfig, inits: np.ndarray,
        criteria: CriterionSpec | list[CriterionSpec], seed: int,
        workers: int | None = None) -> list[OptimResult]:
    """Optimize a batch of candidates; results sorted by final criterion.

    ``inits`` is (batch, D, M). ``criteria`` is shared or per-candidate.
    Candidates run independently (optionally on worker processes) and the
    outcome does not depend on scheduling.
    """
    inits = np.asarray(inits, dtype=np.float64)
    if inits.ndim != 3:
        raise OptimError("inits must be (batch, D, M)")
    batch = inits.shape[0]
    if isinstance(criteria, CriterionSpec):
        criteria = [criteria] * batch
    if len(criteria) != batch:
        raise OptimError("one criterion spec per candidate required")

    jobs = [(i, inits[i], criteria[i], seed) for i in range(batch)]
    n_workers = _resolve_workers(workers, batch)
    if n_workers <= 1:
        results = [run_candidate(params, config, *job) for job in jobs]
    else:
        with ProcessPoolExecutor(max_workers=n_workers,
                                 initializer=_init_worker,
                                 initargs=(params, config)) as pool:
            results = list(pool.map(_worker_entry, jobs))
    return sorted(results, key=lambda r: (r.final_loss, r.index))


def best(results: list[OptimResult]) -> OptimResult:
    return results[0]


# --- result persistence ---------------------------------------------------------


def save_results(out_dir, results: list[OptimResult], config: OptimConfig,
                 run_config: dict | None = None) -> None:
    """Write result.mbin, trace.csv and config.json into a run directory."""
    from pathlib import Path
    import json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    finished = [r for r in results if not r.aborted]
    if finished:
        save_mbin(out / "result.mbin", [r.motion for r in finished],
                  metadata={"kind": "optimized",
                            "indices": [r.index for r in finished],
                            "final_loss": [r.final_loss for r in finished]})

    comp_names = sorted({name for r in results for c in r.trace.components
                         for name in c})
    lines = ["candidate,step,total," + ",".join(comp_names)
             + ",grad_norm,lr,skipped"]
    for r in results:
        for s in range(len(r.trace)):
            comps = r.trace.components[s]
            row = [str(r.index), str(s), f"{r.trace.total[s]:.10g}"]
            row += [f"{comps[n]:.10g}" if n in comps else "" for n in comp_names]
            row += [f"{r.trace.grad_norm[s]:.10g}", f"{r.trace.lr[s]:.10g}",
                    "1" if r.trace.skipped[s] else "0"]
            lines.append(",".join(row))
    (out / "trace.csv").write_text("\n".join(lines) + "\n")

    payload = {"optimizer": config.to_json()}
    if run_config:
        payload.update(run_config)
    aborted = [{"index": r.index, "reason": r.abort_reason}
               for r in results if r.aborted]
    if aborted:
        payload["aborted"] = aborted
    (out / "config.json").write_text(json.dumps(payload, indent=2,
                                                sort_keys=True) + "\n")
