"""Quantitative evaluation of 2-D motions.

Includes smoothness (jitter), contact coherence (foot skating), pose error,
task objective error, per-frame content preservation, and a Fréchet distance
between hand-crafted motion feature distributions ("FMD") standing in for
encoder-based set distances at this scale.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .motiondata import (D, JUMP_HEIGHT, LFOOT, Motion, PELVIS, RFOOT,
                         label_frames)

SKATE_DISTANCE = 0.025  # m of horizontal travel that counts as skating


class MetricError(ValueError):
    pass


@dataclass
class MetricsReport:
    jitter: float | None = None                # 10^2 m/s^3
    foot_skate_ratio: float | None = None      # in [0, 1]
    mpjpe: float | None = None                 # cm
    objective_error: float | None = None       # m
    content_preservation: float | None = None  # in [0, 1]
    fmd: float | None = None

    def to_json(self) -> dict:
        return asdict(self)


def _joints(motion: Motion) -> np.ndarray:
    """(3, 2, M) view: joint, coordinate, frame."""
    return motion.data.reshape(3, 2, motion.frames)


def jitter(motion: Motion) -> float:
    """Mean jerk magnitude over joints and frames, in 10^2 m/s^3.

    Acceleration uses the central second difference, jerk the forward first
    difference of acceleration.
    """
    if motion.frames < 4:
        raise MetricError("jitter needs at least 4 frames")
    p = _joints(motion)
    fps = float(motion.fps)
    acc = (p[:, :, 2:] - 2.0 * p[:, :, 1:-1] + p[:, :, :-2]) * fps * fps
    jerk = (acc[:, :, 1:] - acc[:, :, :-1]) * fps
    mag = np.sqrt((jerk ** 2).sum(axis=1))
    return float(mag.mean() / 100.0)


def foot_skate_ratio(motion: Motion) -> float:
    """Fraction of frame transitions where a grounded foot travels too far."""
    skate = np.zeros(motion.frames - 1, dtype=bool)
    for j in (LFOOT, RFOOT):
        x = motion.data[2 * j]
        y = motion.data[2 * j + 1]
        grounded = y[:-1] < JUMP_HEIGHT
        moved = np.abs(np.diff(x)) > SKATE_DISTANCE
        skate |= grounded & moved
    return float(skate.mean())


def mpjpe(a: Motion, b: Motion, joints=None) -> float:
    """Mean per-joint position error in cm."""
    if a.data.shape != b.data.shape:
        raise MetricError(f"mpjpe: shape mismatch {a.data.shape} vs {b.data.shape}")
    pa, pb = _joints(a), _joints(b)
    if joints is not None:
        pa, pb = pa[list(joints)], pb[list(joints)]
    dist = np.sqrt(((pa - pb) ** 2).sum(axis=1))
    return float(dist.mean() * 100.0)


def objective_error(motion: Motion, observed) -> float:
    """Mean distance (m) between targets and the realized joint locations,
    measured over each target's unmasked axes."""
    entries = list(getattr(observed, "entries", observed))
    if not entries:
        raise MetricError("objective_error: empty observed set")
    total = 0.0
    for target in entries:
        sq = 0.0
        if target.x is not None:
            sq += (motion.data[2 * target.joint, target.frame] - target.x) ** 2
        if target.y is not None:
            sq += (motion.data[2 * target.joint + 1, target.frame] - target.y) ** 2
        total += np.sqrt(sq)
    return float(total / len(entries))


def content_preservation(before: Motion, after: Motion) -> float:
    """Ratio of frames on which the per-frame action label agrees."""
    la, lb = label_frames(before), label_frames(after)
    if la.shape != lb.shape:
        raise MetricError("content_preservation: frame count mismatch")
    return float((la == lb).mean())


# --- Fréchet motion distance ----------------------------------------------------


def motion_features(motion: Motion) -> np.ndarray:
    """14-dim hand-crafted feature vector summarizing one motion."""
    p = _joints(motion)
    fps = float(motion.fps)
    vel = np.diff(p, axis=2) * fps
    speed = np.sqrt((vel ** 2).sum(axis=1))  # (3, M-1)
    feats = [speed.mean(axis=1), speed.std(axis=1)]  # 6
    pelvis_y = motion.data[2 * PELVIS + 1]
    feats.append([pelvis_y.mean(), pelvis_y.std()])  # 2
    ly = motion.data[2 * LFOOT + 1]
    ry = motion.data[2 * RFOOT + 1]
    feats.append([ly.mean(), ry.mean()])  # 2
    feats.append([(ly < JUMP_HEIGHT).mean(), (ry < JUMP_HEIGHT).mean()])  # 2
    width = np.abs(motion.data[2 * LFOOT] - motion.data[2 * RFOOT])
    feats.append([width.mean(), width.std()])  # 2
    return np.concatenate([np.atleast_1d(f) for f in feats]).astype(np.float64)


def frechet_gaussian(mu_a, cov_a, mu_b, cov_b) -> float:
    """Fréchet distance between two Gaussians.

    The cross term Tr((Σa Σb)^1/2) is computed through the symmetric product
    Σa^1/2 Σb Σa^1/2 so only eigendecompositions of symmetric matrices are
    needed.
    """
    mu_a, mu_b = np.asarray(mu_a, float), np.asarray(mu_b, float)
    cov_a = np.atleast_2d(np.asarray(cov_a, float))
    cov_b = np.atleast_2d(np.asarray(cov_b, float))
    wa, va = np.linalg.eigh(cov_a)
    root_a = (va * np.sqrt(np.clip(wa, 0.0, None))) @ va.T
    inner = root_a @ cov_b @ root_a
    wm = np.linalg.eigvalsh(inner)
    tr_sqrt = np.sqrt(np.clip(wm, 0.0, None)).sum()
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)
    return max(value, 0.0)


def fmd(set_a: list[Motion], set_b: list[Motion]) -> float:
    """Fréchet distance between the feature distributions of two motion sets."""
    if len(set_a) < 32 or len(set_b) < 32:
        raise MetricError("fmd needs at least 32 motions per set")
    fa = np.stack([motion_features(m) for m in set_a])
    fb = np.stack([motion_features(m) for m in set_b])
    reg = 1e-6 * np.eye(fa.shape[1])
    return frechet_gaussian(fa.mean(axis=0), np.cov(fa, rowvar=False) + reg,
                            fb.mean(axis=0), np.cov(fb, rowvar=False) + reg)
