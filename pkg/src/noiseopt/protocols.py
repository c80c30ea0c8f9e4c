"""Experiment protocols built on the latent optimizer.

These routines implement the editing / refinement / completion / blending /
in-betweening recipes and the ablation sweep, shared by the command-line
tools, the runnable scripts and the acceptance suite.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics as mx
from .denoiser import DenoiserParams
from .diffusion import make_schedule
from .guided import guided_sample
from .latentopt import OptimConfig, OptimResult, init_latent, run
from .motiondata import D, JOINT_NAMES, Motion
from .objectives import CriterionSpec, LossWeights, ObservedSet, Target

EDIT_KEYFRAMES = (40, 56)   # inclusive range for random edit keyframes
EDIT_OFFSET = 1.0           # +- range (m) of random pelvis-x offsets


class ProtocolError(ValueError):
    pass


def parse_observe_tokens(tokens: str) -> list[tuple[int, bool, bool]]:
    """Parse "pelvis:xy,lfoot:x" into (joint, use_x, use_y) triples."""
    out = []
    for token in tokens.split(","):
        token = token.strip()
        if not token:
            continue
        name, _, axes = token.partition(":")
        if name not in JOINT_NAMES:
            raise ProtocolError(f"unknown joint {name!r} in observe spec")
        axes = axes or "xy"
        if not set(axes) <= {"x", "y"}:
            raise ProtocolError(f"bad axes {axes!r} in observe spec")
        out.append((JOINT_NAMES.index(name), "x" in axes, "y" in axes))
    if not out:
        raise ProtocolError("observe spec selects nothing")
    return out


def observed_from_motion(motion: Motion, selection, frames=None) -> ObservedSet:
    """Targets taken from a motion's own values for selected joints/axes."""
    if isinstance(selection, str):
        selection = parse_observe_tokens(selection)
    frame_iter = range(motion.frames) if frames is None else frames
    targets = []
    for k in frame_iter:
        for joint, use_x, use_y in selection:
            targets.append(Target(
                joint, int(k),
                x=float(motion.data[2 * joint, k]) if use_x else None,
                y=float(motion.data[2 * joint + 1, k]) if use_y else None))
    return ObservedSet(tuple(targets))


# --- editing ------------------------------------------------------------------------


@dataclass
class EditTask:
    """One input motion with per-candidate pelvis-x targets."""
    motion: Motion
    latent_ref: np.ndarray
    specs: list[CriterionSpec]


@dataclass
class EditOutcome:
    task: EditTask
    results: list[OptimResult]
    objective_errors: list[float]
    content: list[float]
    jitter_ratio: list[float]


def make_edit_tasks(params: DenoiserParams, inputs: list[Motion], batch: int,
                    seed: int, weights: LossWeights | None = None,
                    invert_steps: int = 100) -> list[EditTask]:
    """Editing protocol tasks: each candidate edits the pelvis x-position at
    a random keyframe by a random offset, starting from the inversion of the
    input."""
    weights = weights or LossWeights()
    tasks = []
    for i, motion in enumerate(inputs):
        latent = init_latent("inversion", 1, motion.data.shape, seed=seed,
                             reference=motion, params=params,
                             invert_steps=invert_steps)[0]
        specs = []
        for c in range(batch):
            rng = np.random.default_rng([seed, i, c, 0xED])
            k = int(rng.integers(EDIT_KEYFRAMES[0], EDIT_KEYFRAMES[1] + 1))
            target_x = float(motion.data[0, k]
                             + rng.uniform(-EDIT_OFFSET, EDIT_OFFSET))
            observed = ObservedSet((Target(0, k, x=target_x),))
            specs.append(CriterionSpec(observed=observed, weights=weights,
                                       latent_ref=latent))
        tasks.append(EditTask(motion, latent, specs))
    return tasks


def edit_protocol(params: DenoiserParams, tasks: list[EditTask],
                  config: OptimConfig, seed: int,
                  workers: int | None = None) -> list[EditOutcome]:
    outcomes = []
    for i, task in enumerate(tasks):
        inits = np.tile(task.latent_ref[None], (len(task.specs), 1, 1))
        results = run(params, config, inits, task.specs, seed=seed + i,
                      workers=workers)
        outcome = EditOutcome(task, results, [], [], [])
        input_jitter = mx.jitter(task.motion)
        for r in results:
            if r.aborted:
                continue
            spec = task.specs[r.index]
            outcome.objective_errors.append(
                mx.objective_error(r.motion, spec.observed))
            outcome.content.append(
                mx.content_preservation(task.motion, r.motion))
            outcome.jitter_ratio.append(
                mx.jitter(r.motion) / max(input_jitter, 1e-9))
        outcomes.append(outcome)
    return outcomes


# guided comparison at a matched denoiser-evaluation budget: one optimizer
# candidate spends steps * solver_steps evaluations, a guided run spends
# roughly 2 * sample_steps (one criterion gradient plus one step update per
# time), so the baseline gets the ratio in independent restarts

_GUIDED_WORKER: dict = {}


def _guided_init(params, sample_steps, scale):
    _GUIDED_WORKER.update(params=params, steps=sample_steps, scale=scale)


def _guided_entry(args):
    latent, spec = args
    motion = guided_sample(_GUIDED_WORKER["params"], latent,
                           _GUIDED_WORKER["steps"], spec,
                           _GUIDED_WORKER["scale"])
    return motion.data


def guided_edit_protocol(params: DenoiserParams, tasks: list[EditTask],
                         config: OptimConfig, scale: float, seed: int,
                         sample_steps: int = 50,
                         workers: int | None = None) -> list[EditOutcome]:
    """Solve the same editing tasks with loss-guided sampling.

    Each target gets best-of-R restarts with R chosen so the total number of
    denoiser evaluations matches one optimizer candidate.
    """
    budget = config.steps * config.solver_steps
    restarts = max(1, budget // (2 * sample_steps))
    shape = tasks[0].motion.data.shape
    outcomes = []
    for i, task in enumerate(tasks):
        jobs = []
        for c, spec in enumerate(task.specs):
            for r in range(restarts):
                rng = np.random.default_rng([seed, i, c, r, 0x6D])
                latent = task.latent_ref if r == 0 \
                    else rng.standard_normal(shape)
                jobs.append((latent, spec))
        n_workers = _resolve_workers(workers, len(jobs))
        if n_workers <= 1:
            _guided_init(params, sample_steps, scale)
            datas = [_guided_entry(job) for job in jobs]
        else:
            with ProcessPoolExecutor(max_workers=n_workers,
                                     initializer=_guided_init,
                                     initargs=(params, sample_steps,
                                               scale)) as pool:
                datas = list(pool.map(_guided_entry, jobs))
        outcome = EditOutcome(task, [], [], [], [])
        input_jitter = mx.jitter(task.motion)
        for c, spec in enumerate(task.specs):
            candidates = [Motion(datas[c * restarts + r], task.motion.fps)
                          for r in range(restarts)]
            errors = [mx.objective_error(m, spec.observed)
                      for m in candidates]
            best = candidates[int(np.argmin(errors))]
            outcome.objective_errors.append(float(np.min(errors)))
            outcome.content.append(
                mx.content_preservation(task.motion, best))
            outcome.jitter_ratio.append(
                mx.jitter(best) / max(input_jitter, 1e-9))
        outcomes.append(outcome)
    return outcomes


def _resolve_workers(requested, jobs):
    if requested is None:
        env = os.environ.get("NOISEOPT_WORKERS")
        requested = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(requested, jobs))


# --- refinement / completion -----------------------------------------------------


@dataclass
class RefineRecord:
    clean: Motion
    noisy: Motion
    result: OptimResult


def corrupt(motion: Motion, noise_std: float, seed) -> Motion:
    rng = np.random.default_rng(seed)
    return Motion(motion.data + rng.normal(0.0, noise_std, motion.data.shape),
                  motion.fps)


def refine_protocol(params: DenoiserParams, clean: list[Motion],
                    noise_std: float, config: OptimConfig, seed: int,
                    observe: str = "pelvis:xy,lfoot:xy,rfoot:xy",
                    decorr: bool = True, exclude_frames=None,
                    workers: int | None = None) -> list[RefineRecord]:
    """Reconstruct noisy/partial motions from randomly initialized latents.

    The observed set pins selected joints/axes of the (noisy) input at every
    frame outside ``exclude_frames``; the decorrelation term regularizes the
    latent. One record per input motion, holding the best candidate.
    """
    selection = parse_observe_tokens(observe)
    records = []
    for i, clean_motion in enumerate(clean):
        noisy = corrupt(clean_motion, noise_std, [seed, i, 0x5E]) \
            if noise_std > 0 else clean_motion
        frames = None
        if exclude_frames is not None:
            frames = [k for k in range(noisy.frames) if k not in exclude_frames]
        spec = CriterionSpec(
            observed=observed_from_motion(noisy, selection, frames),
            weights=config.weights, decorr=decorr,
            decorr_squared=config.decorr_squared)
        inits = init_latent("random", config.batch, noisy.data.shape,
                            seed=[seed, i])
        results = run(params, config, inits, spec, seed=seed + 31 * i,
                      workers=workers)
        records.append(RefineRecord(clean_motion, noisy, results[0]))
    return records


def blend_pair(a: Motion, b: Motion) -> tuple[Motion, int]:
    """Fixed-length blend input: first half of a, second half of b, with b
    shifted horizontally to continue a's pelvis path. Returns the composite
    and the seam frame."""
    if a.data.shape != b.data.shape:
        raise ProtocolError("blend inputs must share shape")
    frames = a.frames
    seam = frames // 2
    step = np.median(np.abs(np.diff(a.data[0]))) or 0.0
    offset = a.data[0, seam - 1] + step - b.data[0, seam]
    shifted = b.data.copy()
    shifted[0::2] += offset
    data = np.concatenate([a.data[:, :seam], shifted[:, seam:]], axis=1)
    return Motion(data, a.fps), seam


def blend_protocol(params: DenoiserParams, a: Motion, b: Motion,
                   config: OptimConfig, seed: int, window: int = 10,
                   workers: int | None = None):
    """Blend two motions: pin everything except a window around the seam."""
    composite, seam = blend_pair(a, b)
    lo, hi = seam - window // 2, seam + window // 2
    exclude = set(range(lo, hi))
    frames = [k for k in range(composite.frames) if k not in exclude]
    spec = CriterionSpec(
        observed=observed_from_motion(composite, "pelvis:xy,lfoot:xy,rfoot:xy",
                                      frames),
        weights=replace(config.weights, cont=0.0), decorr=True,
        decorr_squared=config.decorr_squared)
    inits = init_latent("random", config.batch, composite.data.shape,
                        seed=[seed, 0xB1])
    results = run(params, config, inits, spec, seed=seed, workers=workers)
    return composite, exclude, results


def inbetween_protocol(params: DenoiserParams, start: Motion, end: Motion,
                       config: OptimConfig, seed: int,
                       workers: int | None = None):
    """Generate motion between two full poses (first frame of ``start`` and
    last frame of ``end``)."""
    frames = start.frames
    targets = []
    for joint in range(D // 2):
        targets.append(Target(joint, 0,
                              x=float(start.data[2 * joint, 0]),
                              y=float(start.data[2 * joint + 1, 0])))
        targets.append(Target(joint, frames - 1,
                              x=float(end.data[2 * joint, frames - 1]),
                              y=float(end.data[2 * joint + 1, frames - 1])))
    spec = CriterionSpec(observed=ObservedSet(tuple(targets)),
                         weights=replace(config.weights, cont=0.0),
                         decorr=True, decorr_squared=config.decorr_squared)
    inits = init_latent("random", config.batch, start.data.shape,
                        seed=[seed, 0x1B])
    return run(params, config, inits, spec, seed=seed, workers=workers)


# --- ablation sweep ----------------------------------------------------------------

ABLATION_GAMMAS = (0.0, 2e-4, 5e-4, 1e-3)
ABLATION_STEPS = (300, 500, 700)
ABLATION_SOLVER_STEPS = (5, 10, 20)


@dataclass
class AblationRow:
    factor: str
    variant: str
    metric: str
    value: float


def _refine_variant_metrics(params, motions, noise_std, config, seed,
                            decorr, fmd_reference, workers) -> dict:
    records = refine_protocol(params, motions, noise_std, config, seed,
                              decorr=decorr, workers=workers)
    ok = [r for r in records if not r.result.aborted]
    outs = [r.result.motion for r in ok]
    values = {
        "pose_loss": float(np.mean([r.result.final_components.get("pose", np.nan)
                                    for r in ok])),
        "mpjpe": float(np.mean([mx.mpjpe(o, r.clean)
                                for o, r in zip(outs, ok)])),
        "jitter": float(np.mean([mx.jitter(o) for o in outs])),
        "foot_skate": float(np.mean([mx.foot_skate_ratio(o) for o in outs])),
    }
    if fmd_reference is not None and len(outs) >= 32:
        values["fmd"] = mx.fmd(outs, fmd_reference)
    return values


def ablation_protocol(params: DenoiserParams, motions: list[Motion],
                      seed: int, base: OptimConfig | None = None,
                      noise_std: float = 0.01,
                      fmd_reference: list[Motion] | None = None,
                      gamma_motions: list[Motion] | None = None,
                      gammas=ABLATION_GAMMAS, steps_grid=ABLATION_STEPS,
                      solver_grid=ABLATION_SOLVER_STEPS,
                      workers: int | None = None) -> list[AblationRow]:
    """Factor sweep on the small-noise refinement surrogate task.

    Factors: gradient normalization on/off, decorrelation on/off,
    perturbation level, optimization length, solver steps. The perturbation
    factor (the only one scored by set-level distance) may use its own,
    larger motion pool.
    """
    base = base or OptimConfig(steps=500, batch=1)
    gamma_motions = gamma_motions or motions
    rows: list[AblationRow] = []

    def record(factor, variant, values):
        for metric, value in values.items():
            rows.append(AblationRow(factor, variant, metric, value))

    cache: dict = {}

    def score(factor, variant, config, decorr=True, pool=None):
        pool = motions if pool is None else pool
        key = (config.steps, config.solver_steps, config.perturb,
               config.normalize_grad, decorr, id(pool))
        if key not in cache:
            cache[key] = _refine_variant_metrics(
                params, pool, noise_std, config, seed, decorr,
                fmd_reference, workers)
        record(factor, variant, cache[key])

    score("normalization", "on", base)
    score("normalization", "off", replace(base, normalize_grad=False))
    score("decorrelation", "on", base)
    score("decorrelation", "off", base, decorr=False)
    for gamma in gammas:
        score("perturbation", f"gamma={gamma:g}", replace(base, perturb=gamma),
              pool=gamma_motions)
    for steps in steps_grid:
        warmup = min(base.warmup_steps, max(1, steps // 6))
        score("steps", str(steps), replace(base, steps=steps,
                                           warmup_steps=warmup))
    for k in solver_grid:
        score("solver_steps", str(k), replace(base, solver_steps=k))
    return rows
