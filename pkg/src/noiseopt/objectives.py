"""Task criteria evaluated on decoded motions and on the latent noise.

Pose targets and obstacle penalties act on the decoded motion in meters;
the content and decorrelation terms act directly on the latent being
optimized. Every loss is expressed in tensorgrad primitives and is pure, so
criteria compose freely and back-propagate through the whole sampler chain.
"""

from __future__ import annotations

import json
from bisect import bisect_right
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorgrad as tg
from .motiondata import D, JOINT_NAMES

NO_OBSTACLE_DISTANCE = 1e6
N_JOINTS = D // 2


class TaskError(ValueError):
    """Invalid target/scene specification or task file."""


@dataclass(frozen=True)
class Target:
    joint: int           # joint index into JOINT_NAMES
    frame: int
    x: float | None = None  # None = axis not constrained
    y: float | None = None

    def __post_init__(self):
        if not 0 <= self.joint < N_JOINTS:
            raise TaskError(f"joint index {self.joint} out of range")
        if self.x is None and self.y is None:
            raise TaskError("target constrains no axis")


@dataclass(frozen=True)
class ObservedSet:
    entries: tuple[Target, ...]

    def __post_init__(self):
        seen = set()
        for t in self.entries:
            key = (t.joint, t.frame)
            if key in seen:
                raise TaskError(f"duplicate target for joint {t.joint} "
                                f"frame {t.frame}")
            seen.add(key)

    def __len__(self):
        return len(self.entries)

    def validate_frames(self, frames: int) -> "ObservedSet":
        for t in self.entries:
            if not 0 <= t.frame < frames:
                raise TaskError(f"target frame {t.frame} outside [0, {frames})")
        return self


@dataclass(frozen=True)
class Obstacle:
    x: float
    y: float
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise TaskError("obstacle radius must be positive")


@dataclass(frozen=True)
class SdfScene:
    """Per-keyframe circular obstacles; frames without an entry inherit the
    nearest earlier keyframe."""

    entries: dict[int, tuple[Obstacle, ...]] = field(default_factory=dict)
    tau: float = 0.1  # safe distance (m)

    def __post_init__(self):
        if self.tau <= 0:
            raise TaskError("safe distance must be positive")

    @property
    def keyframes(self) -> list[int]:
        return sorted(self.entries)

    def obstacles_at(self, frame: int) -> tuple[Obstacle, ...]:
        keys = self.keyframes
        pos = bisect_right(keys, frame)
        if pos == 0:
            return ()
        return self.entries[keys[pos - 1]]


@dataclass(frozen=True)
class LossWeights:
    obs: float = 1.0
    cont: float = 0.01
    decorr: float = 1e3

    def __post_init__(self):
        if min(self.obs, self.cont, self.decorr) < 0:
            raise TaskError("loss weights must be non-negative")


# --- individual losses -----------------------------------------------------------


def _gather_targets(observed: ObservedSet, frames: int):
    """Flat indices into a (D, M) motion plus matching target values."""
    idx, values = [], []
    for t in observed.entries:
        if not 0 <= t.frame < frames:
            raise TaskError(f"target frame {t.frame} outside [0, {frames})")
        if t.x is not None:
            idx.append(2 * t.joint * frames + t.frame)
            values.append(t.x)
        if t.y is not None:
            idx.append((2 * t.joint + 1) * frames + t.frame)
            values.append(t.y)
    return np.asarray(idx, dtype=np.intp), np.asarray(values)


def loss_pose(x: tg.Tensor, observed: ObservedSet) -> tg.Tensor:
    """Mean L1 distance between targeted joint locations and their targets."""
    if len(observed) == 0:
        raise TaskError("pose loss needs a non-empty observed set")
    idx, values = _gather_targets(observed, x.shape[1])
    picked = tg.gather(x, idx)
    residual = tg.absolute(tg.sub(picked, tg.Tensor(values)))
    return tg.smul(tg.tsum(residual), 1.0 / len(observed))


def sdf_eval(scene: SdfScene, point, frame: int) -> float:
    """Signed distance from a point to the scene at one frame (plain value)."""
    obstacles = scene.obstacles_at(frame)
    if not obstacles:
        return NO_OBSTACLE_DISTANCE
    px, py = float(point[0]), float(point[1])
    return min(np.hypot(px - ob.x, py - ob.y) - ob.radius for ob in obstacles)


def _pairwise_min(a: tg.Tensor, b: tg.Tensor) -> tg.Tensor:
    # min(a, b) = (a + b - |a - b|) / 2
    return tg.smul(tg.sub(tg.add(a, b), tg.absolute(tg.sub(a, b))), 0.5)


def _scene_frame_groups(scene: SdfScene, frames: int):
    """Runs of consecutive frames sharing the same active obstacle set."""
    groups = []
    start = 0
    current = scene.obstacles_at(0)
    for k in range(1, frames):
        obs = scene.obstacles_at(k)
        if obs != current:
            groups.append((range(start, k), current))
            start, current = k, obs
    groups.append((range(start, frames), current))
    return groups


def loss_obs(x: tg.Tensor, scene: SdfScene) -> tg.Tensor:
    """Sum over joints and frames of -min(SDF, tau).

    Joint-frames farther than tau from every obstacle sit on the constant
    branch of the clamp, so their gradient is exactly zero; frames with no
    active obstacles contribute the constant -tau each.
    """
    frames = x.shape[1]
    total = tg.tensor(0.0)
    for frame_range, obstacles in _scene_frame_groups(scene, frames):
        count = len(frame_range) * N_JOINTS
        if not obstacles:
            total = tg.add(total, tg.tensor(-scene.tau * count))
            continue
        xs_idx, ys_idx = [], []
        for j in range(N_JOINTS):
            xs_idx.extend(2 * j * frames + k for k in frame_range)
            ys_idx.extend((2 * j + 1) * frames + k for k in frame_range)
        px = tg.gather(x, np.asarray(xs_idx, dtype=np.intp))
        py = tg.gather(x, np.asarray(ys_idx, dtype=np.intp))
        sdf = None
        for ob in obstacles:
            dx = tg.sub(px, tg.Tensor(np.full(count, ob.x)))
            dy = tg.sub(py, tg.Tensor(np.full(count, ob.y)))
            dist = tg.sqrt(tg.add(tg.square(dx), tg.square(dy)))
            sd = tg.sub(dist, tg.Tensor(np.full(count, ob.radius)))
            sdf = sd if sdf is None else _pairwise_min(sdf, sd)
        clamped = tg.min_const(sdf, scene.tau)
        total = tg.sub(total, tg.tsum(clamped))
    return total


def loss_content(x_latent: tg.Tensor, reference: np.ndarray) -> tg.Tensor:
    """Euclidean distance of the latent from its reference value."""
    ref = np.asarray(reference, dtype=np.float64)
    if ref.shape != x_latent.shape:
        raise tg.ShapeError(f"content loss: latent {x_latent.shape} vs "
                            f"reference {ref.shape}")
    diff = tg.sub(tg.Tensor(ref), x_latent)
    return tg.sqrt(tg.tsum(tg.square(diff)))


def _adjacent_indices(d: int, m: int):
    rows = np.arange(d)[:, None] * m
    left = (rows + np.arange(m - 1)[None, :]).ravel()
    return left, left + 1


def decorr_terms(x_latent: tg.Tensor) -> list[tuple[int, tg.Tensor]]:
    """Per-scale mean adjacent-column inner products of the latent."""
    d, m = x_latent.shape
    if m < 2 or m & (m - 1):
        raise tg.ShapeError(f"decorrelation needs a power-of-two frame count, "
                            f"got {m}")
    terms = []
    current = x_latent
    while True:
        left_idx, right_idx = _adjacent_indices(d, m)
        left = tg.gather(current, left_idx)
        right = tg.gather(current, right_idx)
        rho = tg.smul(tg.tsum(tg.mul(left, right)), 1.0 / (m * d))
        terms.append((m, rho))
        if m == 2:
            return terms
        current = tg.avg_pool_pairs(current)
        m //= 2


def loss_decorr(x_latent: tg.Tensor, squared: bool = True) -> tg.Tensor:
    """Multi-scale latent decorrelation.

    The squared variant (default) penalizes correlation of either sign; the
    literal variant sums the raw per-scale terms and is kept selectable.
    """
    total = tg.tensor(0.0)
    for _, rho in decorr_terms(x_latent):
        total = tg.add(total, tg.square(rho) if squared else rho)
    return total


# --- compositions ------------------------------------------------------------------


def compose_edit(x: tg.Tensor, x_latent: tg.Tensor, observed: ObservedSet,
                 scene: SdfScene | None, latent_ref: np.ndarray,
                 weights: LossWeights) -> tg.Tensor:
    """Editing criterion: pose + weighted obstacles + latent content term."""
    total = loss_pose(x, observed)
    if scene is not None:
        total = tg.add(total, tg.smul(loss_obs(x, scene), weights.obs))
    total = tg.add(total, tg.smul(loss_content(x_latent, latent_ref),
                                  weights.cont))
    return total


def compose_refine(x: tg.Tensor, x_latent: tg.Tensor, observed: ObservedSet,
                   weights: LossWeights, squared: bool = True) -> tg.Tensor:
    """Refinement criterion: pose + weighted latent decorrelation."""
    return tg.add(loss_pose(x, observed),
                  tg.smul(loss_decorr(x_latent, squared), weights.decorr))


# --- declarative criterion (picklable, used by the optimizer) -----------------------


@dataclass
class CriterionSpec:
    """Everything needed to build a criterion closure inside a worker."""

    observed: ObservedSet | None = None
    scene: SdfScene | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    latent_ref: np.ndarray | None = None  # enables the content term
    decorr: bool = False
    decorr_squared: bool = True


def build_criterion(spec: CriterionSpec):
    """Closure (motion tensor, latent tensor) -> (loss, raw components)."""

    def criterion(x: tg.Tensor, x_latent: tg.Tensor):
        comps: dict[str, float] = {}
        total = tg.tensor(0.0)
        if spec.observed is not None and len(spec.observed):
            pose = loss_pose(x, spec.observed)
            comps["pose"] = pose.item()
            total = tg.add(total, pose)
        if spec.scene is not None:
            obs = loss_obs(x, spec.scene)
            comps["obs"] = obs.item()
            total = tg.add(total, tg.smul(obs, spec.weights.obs))
        if spec.latent_ref is not None:
            cont = loss_content(x_latent, spec.latent_ref)
            comps["content"] = cont.item()
            total = tg.add(total, tg.smul(cont, spec.weights.cont))
        if spec.decorr:
            dec = loss_decorr(x_latent, spec.decorr_squared)
            comps["decorr"] = dec.item()
            total = tg.add(total, tg.smul(dec, spec.weights.decorr))
        return total, comps

    return criterion


# --- task files ----------------------------------------------------------------------

_TASK_KEYS = {"targets", "obstacles", "tau", "weights"}
_TARGET_KEYS = {"joint", "frame", "x", "y"}
_OBSTACLE_KEYS = {"frame", "x", "y", "radius"}
_WEIGHT_KEYS = {"obs", "cont", "decorr"}


def _reject_unknown(obj: dict, allowed: set, context: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise TaskError(f"unknown {context} keys: {sorted(unknown)}")


def load_task(path, frames: int) -> tuple[ObservedSet, SdfScene, LossWeights]:
    """Parse a JSON task file (strict: unknown keys are errors)."""
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as err:
        raise TaskError(f"{path}: malformed task file: {err}") from err
    if not isinstance(obj, dict):
        raise TaskError(f"{path}: task file must hold an object")
    _reject_unknown(obj, _TASK_KEYS, "task")

    targets = []
    for entry in obj.get("targets", []):
        _reject_unknown(entry, _TARGET_KEYS, "target")
        name = entry.get("joint")
        if name not in JOINT_NAMES:
            raise TaskError(f"unknown joint {name!r}; expected one of "
                            f"{JOINT_NAMES}")
        targets.append(Target(joint=JOINT_NAMES.index(name),
                              frame=int(entry["frame"]),
                              x=entry.get("x"), y=entry.get("y")))
    observed = ObservedSet(tuple(targets)).validate_frames(frames)

    entries: dict[int, tuple[Obstacle, ...]] = {}
    for entry in obj.get("obstacles", []):
        _reject_unknown(entry, _OBSTACLE_KEYS, "obstacle")
        frame = int(entry.get("frame", 0))
        if not 0 <= frame < frames:
            raise TaskError(f"obstacle keyframe {frame} outside [0, {frames})")
        ob = Obstacle(float(entry["x"]), float(entry["y"]),
                      float(entry["radius"]))
        entries[frame] = entries.get(frame, ()) + (ob,)
    scene = SdfScene(entries, tau=float(obj.get("tau", 0.1)))

    weights_obj = obj.get("weights", {})
    _reject_unknown(weights_obj, _WEIGHT_KEYS, "weights")
    weights = LossWeights(
        obs=float(weights_obj.get("obs", LossWeights.obs)),
        cont=float(weights_obj.get("cont", LossWeights.cont)),
        decorr=float(weights_obj.get("decorr", LossWeights.decorr)),
    )
    return observed, scene, weights
