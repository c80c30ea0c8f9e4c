"""Toy 2-D motion representation and procedural gait data.

A motion is a D=6 by M matrix of side-view joint coordinates in meters:
rows are [pelvis_x, pelvis_y, lfoot_x, lfoot_y, rfoot_x, rfoot_y], ground at
y = 0, sampled at a fixed frame rate (default 20 Hz, 64 frames).

The generator synthesizes walks with alternating stance/swing feet, optional
jump windows where both feet follow a parabolic arc, and a small controlled
amount of touchdown slide so that contact statistics resemble captured data
instead of being surgically perfect.

This module also owns the motion file formats (MBIN, CSV) and the SVG plot
emitter.
"""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from xml.etree import ElementTree as ET

import numpy as np

log = logging.getLogger(__name__)

D = 6
DEFAULT_FRAMES = 64
DEFAULT_FPS = 20

PELVIS, LFOOT, RFOOT = 0, 1, 2
JOINT_NAMES = ("pelvis", "lfoot", "rfoot")

#: feet strictly above this height (m) on both sides marks a jump frame;
#: the same threshold defines ground contact for the skating metric
JUMP_HEIGHT = 0.05

# gait shape constants (tuned so clean walks keep jitter well below 1.0
# while foot contact stays coherent at 20 fps)
_SWING_FRACTION = 0.55        # fraction of a cycle each foot is airborne
_MOVE_WINDOW = (0.12, 0.88)   # swing sub-interval in which the foot travels
_STAND_SEP = 0.08             # foot separation when standing still (m)
_SLIDE_LEN = 0.03             # touchdown overshoot (m), settles in one frame
_SLIDES_PER_SEQUENCE = 2
_FREQ_RANGE = (0.6, 0.8)      # sampled stride frequency bounds (Hz)
_MAX_STRIDE = 2.0             # cap on speed/freq (m per cycle)
_STEP_HEIGHT_RANGE = (0.15, 0.17)


class MotionError(ValueError):
    """Invalid motion data or parameters."""


@dataclass
class Motion:
    """D x M joint coordinate matrix in meters."""

    data: np.ndarray
    fps: int = DEFAULT_FPS

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != D:
            raise MotionError(f"motion data must be {D} x M, got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise MotionError("motion data contains non-finite values")
        if self.fps <= 0:
            raise MotionError("fps must be positive")

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    def joint(self, j: int) -> np.ndarray:
        """(2, M) view of joint j as [x; y] rows."""
        return self.data[2 * j: 2 * j + 2]

    def copy(self) -> "Motion":
        return Motion(self.data.copy(), self.fps)


@dataclass(frozen=True)
class GaitParams:
    speed: float = 1.0               # m/s
    stride_freq: float = 0.95        # gait cycles per second
    pelvis_height: float = 0.9       # m
    bob_amp: float = 0.015           # m
    step_height: float = 0.17        # m
    jumps: tuple[tuple[int, int, float], ...] = ()  # (start, duration, apex)
    frames: int = DEFAULT_FRAMES
    fps: int = DEFAULT_FPS


# step height above 0.175 would let both feet clear 5 cm simultaneously
# during the double-float phase and corrupt the jump labels
_CLAMPS = {
    "speed": (0.0, 1.8),
    "stride_freq": (0.5, 1.1),
    "pelvis_height": (0.6, 1.1),
    "bob_amp": (0.0, 0.025),
    "step_height": (0.12, 0.175),
}


def clamp_gait_params(params: GaitParams) -> tuple[GaitParams, list[str]]:
    """Force parameters into generator-safe ranges; report what changed."""
    notes: list[str] = []
    updates = {}
    for name, (lo, hi) in _CLAMPS.items():
        value = float(getattr(params, name))
        clamped = min(max(value, lo), hi)
        if clamped != value:
            notes.append(f"{name} clamped from {value:g} to {clamped:g}")
            updates[name] = clamped
        else:
            updates[name] = value
    # zero speed means standing: clamp to exact zero below a tiny cutoff
    if 0 < updates["speed"] < 1e-6:
        updates["speed"] = 0.0
        notes.append("speed below 1e-6 treated as standing")

    jumps = []
    for start, dur, apex in params.jumps:
        start, dur, apex = int(start), int(dur), float(apex)
        c_start = min(max(start, 0), params.frames - 1)
        c_dur = min(max(dur, 2), params.frames - c_start)
        c_apex = min(max(apex, 0.1), 0.5)
        if (c_start, c_dur, c_apex) != (start, dur, apex):
            notes.append(f"jump ({start},{dur},{apex:g}) clamped to "
                         f"({c_start},{c_dur},{c_apex:g})")
        jumps.append((c_start, c_dur, c_apex))
    return replace(params, jumps=tuple(jumps), **updates), notes


def _ease(z: np.ndarray) -> np.ndarray:
    """Cosine ease normalized to [0, 1] over the swing move window."""
    w0, w1 = _MOVE_WINDOW
    z = np.clip((z - w0) / (w1 - w0), 0.0, 1.0)
    return 0.5 * (1.0 - np.cos(np.pi * z))


def _foot_phases(t, phase, freq):
    """(cycle index, within-cycle position, swing flag) per frame."""
    psi = phase + freq * t
    cycle = np.floor(psi)
    u = psi - cycle
    return cycle, u, u >= (1.0 - _SWING_FRACTION)


def _touchdown_cycles(cycle, in_swing) -> np.ndarray:
    """Cycle indices whose first stance frame lies inside the sequence."""
    first_stance = ~in_swing & np.roll(in_swing, 1)
    first_stance[0] = False
    return np.unique(cycle[first_stance]).astype(int)


def _foot_track(t, phase, params: GaitParams, x0, slide_cycles):
    """x/y tracks for one foot given its gait phase offset."""
    v, f = params.speed, params.stride_freq
    beta = _SWING_FRACTION
    cycle, u, in_swing = _foot_phases(t, phase, f)
    stance_len = 1.0 - beta
    w = np.clip((u - stance_len) / beta, 0.0, 1.0)

    def plant(n):
        return x0 + v * (n + stance_len / 2.0 - phase) / f

    over = np.isin(cycle + 1, slide_cycles) * _SLIDE_LEN
    x_swing = plant(cycle) + (plant(cycle + 1) + over - plant(cycle)) * _ease(w)
    x_stance = plant(cycle)
    x = np.where(in_swing, x_swing, x_stance)
    y = np.where(in_swing, params.step_height * np.sin(np.pi * w), 0.0)

    # the touchdown overshoot is held for exactly the first stance frame
    first_stance = ~in_swing & np.roll(in_swing, 1)
    first_stance[0] = False
    bump = first_stance & np.isin(cycle, slide_cycles)
    x = x + bump * _SLIDE_LEN
    return x, y


def generate_sequence(params: GaitParams, seed: int) -> Motion:
    """Deterministic synthetic gait for (params, seed)."""
    params, notes = clamp_gait_params(params)
    for note in notes:
        log.warning("generate_sequence: %s", note)

    rng = np.random.default_rng([int(seed), 0x6A17])
    phase0 = float(rng.uniform(0.0, 1.0))
    x_start = float(rng.uniform(-0.5, 0.5))

    m, fps = params.frames, params.fps
    t = np.arange(m) / fps
    v = params.speed

    pelvis_x = x_start + v * t
    pelvis_y = params.pelvis_height + params.bob_amp * np.sin(
        4.0 * np.pi * (phase0 + params.stride_freq * t))

    if v > 0:
        # pick touchdowns that actually occur in-sequence for landing slides
        candidates = []
        for foot, offset in ((0, phase0), (1, phase0 + 0.5)):
            cycle, _, in_swing = _foot_phases(t, offset, params.stride_freq)
            candidates.extend((foot, n) for n in _touchdown_cycles(cycle, in_swing))
        slides = ([], [])
        if candidates:
            k = min(_SLIDES_PER_SEQUENCE, len(candidates))
            for c in rng.choice(len(candidates), size=k, replace=False):
                foot, n = candidates[int(c)]
                slides[foot].append(n)
        lx, ly = _foot_track(t, phase0, params, x_start, np.asarray(slides[0]))
        rx, ry = _foot_track(t, phase0 + 0.5, params, x_start, np.asarray(slides[1]))
    else:
        # standing: feet stay planted, no stepping cycle
        lx = np.full(m, x_start - _STAND_SEP)
        rx = np.full(m, x_start + _STAND_SEP)
        ly = np.zeros(m)
        ry = np.zeros(m)

    for start, dur, apex in params.jumps:
        stop = min(start + dur, m)
        idx = np.arange(start, stop)
        z = (idx - start) / max(stop - 1 - start, 1)
        arc = apex * np.sin(np.pi * z) ** 2
        ly[idx] = np.maximum(ly[idx], arc)
        ry[idx] = np.maximum(ry[idx], arc)
        pelvis_y[idx] = pelvis_y[idx] + arc

    data = np.stack([pelvis_x, pelvis_y, lx, ly, rx, ry])
    return Motion(data, fps)


def label_frames(motion: Motion) -> np.ndarray:
    """Boolean per-frame action flags: True = jump (both feet above 5 cm)."""
    ly = motion.data[2 * LFOOT + 1]
    ry = motion.data[2 * RFOOT + 1]
    return (ly > JUMP_HEIGHT) & (ry > JUMP_HEIGHT)


# --- dataset sampling ---------------------------------------------------------


def sample_gait_params(rng: np.random.Generator, with_jumps: bool,
                       frames: int = DEFAULT_FRAMES,
                       fps: int = DEFAULT_FPS) -> GaitParams:
    """Random gait parameters matching the default dataset composition."""
    speed = float(rng.uniform(0.5, 1.5))
    f_lo, f_hi = _FREQ_RANGE
    freq = float(rng.uniform(max(f_lo, speed / _MAX_STRIDE), f_hi))
    jumps: list[tuple[int, int, float]] = []
    if with_jumps:
        count = int(rng.integers(1, 3))
        if count == 1:
            dur = int(rng.integers(10, 17))
            start = int(rng.integers(8, frames - dur - 4))
            jumps.append((start, dur, float(rng.uniform(0.12, 0.22))))
        else:
            d1 = int(rng.integers(9, 13))
            d2 = int(rng.integers(9, 13))
            s1 = int(rng.integers(4, 16))
            s2 = int(rng.integers(s1 + d1 + 5, frames - d2 - 2))
            jumps.append((s1, d1, float(rng.uniform(0.12, 0.22))))
            jumps.append((s2, d2, float(rng.uniform(0.12, 0.22))))
    return GaitParams(
        speed=speed,
        stride_freq=freq,
        pelvis_height=float(rng.uniform(0.85, 0.95)),
        bob_amp=float(rng.uniform(0.01, 0.02)),
        step_height=float(rng.uniform(*_STEP_HEIGHT_RANGE)),
        jumps=tuple(jumps),
        frames=frames,
        fps=fps,
    )


def make_dataset(count: int, seed: int, jump_fraction: float = 0.3,
                 frames: int = DEFAULT_FRAMES, fps: int = DEFAULT_FPS
                 ) -> list[Motion]:
    """Default dataset: 70% plain walks, 30% walks with jump windows."""
    motions = []
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        with_jumps = rng.uniform() < jump_fraction
        params = sample_gait_params(rng, with_jumps, frames=frames, fps=fps)
        motions.append(generate_sequence(params, seed=int(rng.integers(2**31))))
    return motions


# --- normalization --------------------------------------------------------------


@dataclass
class DatasetStats:
    mean: np.ndarray  # (D,)
    std: np.ndarray   # (D,), floored at 1e-6

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetStats":
        return cls(np.asarray(obj["mean"], dtype=np.float64),
                   np.asarray(obj["std"], dtype=np.float64))


def fit_stats(dataset: list[Motion]) -> DatasetStats:
    if not dataset:
        raise MotionError("fit_stats: empty dataset")
    stacked = np.concatenate([m.data for m in dataset], axis=1)
    mean = stacked.mean(axis=1)
    std = np.maximum(stacked.std(axis=1), 1e-6)
    return DatasetStats(mean, std)


def normalize(motion: Motion, stats: DatasetStats) -> Motion:
    return Motion((motion.data - stats.mean[:, None]) / stats.std[:, None],
                  motion.fps)


def denormalize(motion: Motion, stats: DatasetStats) -> Motion:
    return Motion(motion.data * stats.std[:, None] + stats.mean[:, None],
                  motion.fps)


# --- MBIN file format -------------------------------------------------------------
#
# little-endian: magic "MBIN", u32 version=1, u32 D, u32 M, u32 count, u32 fps,
# count * D * M float32 values (row-major per motion), u32 metadata length,
# UTF-8 JSON metadata.

MBIN_MAGIC = b"MBIN"
MBIN_VERSION = 1


class MbinError(Exception):
    """Base failure for the MBIN format."""


class MbinBadMagic(MbinError):
    pass


class MbinBadVersion(MbinError):
    pass


class MbinTruncated(MbinError):
    pass


def _atomic_write_bytes(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def save_mbin(path, motions: list[Motion], metadata: dict | None = None) -> None:
    if not motions:
        raise MbinError("save_mbin: nothing to save")
    m0 = motions[0]
    for m in motions:
        if m.data.shape != m0.data.shape or m.fps != m0.fps:
            raise MbinError("save_mbin: motions must share shape and fps")
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    header = MBIN_MAGIC + struct.pack(
        "<IIIII", MBIN_VERSION, m0.data.shape[0], m0.data.shape[1],
        len(motions), m0.fps)
    body = b"".join(np.ascontiguousarray(m.data, dtype=np.float32).tobytes()
                    for m in motions)
    payload = header + body + struct.pack("<I", len(meta)) + meta
    _atomic_write_bytes(Path(path), payload)


def load_mbin(path) -> tuple[list[Motion], dict]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MBIN_MAGIC:
        raise MbinBadMagic(f"{path}: not an MBIN file")
    if len(raw) < 24:
        raise MbinTruncated(f"{path}: header truncated")
    version, d, m, count, fps = struct.unpack("<IIIII", raw[4:24])
    if version != MBIN_VERSION:
        raise MbinBadVersion(f"{path}: unsupported MBIN version {version}")
    body_len = count * d * m * 4
    if len(raw) < 24 + body_len + 4:
        raise MbinTruncated(f"{path}: payload truncated")
    values = np.frombuffer(raw[24:24 + body_len], dtype="<f4").astype(np.float64)
    offset = 24 + body_len
    (meta_len,) = struct.unpack("<I", raw[offset:offset + 4])
    if len(raw) < offset + 4 + meta_len:
        raise MbinTruncated(f"{path}: metadata truncated")
    meta = json.loads(raw[offset + 4: offset + 4 + meta_len].decode("utf-8")) \
        if meta_len else {}
    motions = [Motion(values[i * d * m:(i + 1) * d * m].reshape(d, m), fps)
               for i in range(count)]
    return motions, meta


# --- plot / table emission ----------------------------------------------------------


def export_plots(motion: Motion, scene=None, targets=None, out_base=None):
    """Write <base>.csv and <base>.svg for a motion.

    ``scene`` may be any object with an ``entries`` mapping of keyframe ->
    iterable of obstacles carrying x, y, radius. ``targets`` is an iterable
    of objects carrying joint, frame and optional x/y target coordinates.
    """
    if out_base is None:
        raise MotionError("export_plots: out_base is required")
    base = Path(out_base)
    base.parent.mkdir(parents=True, exist_ok=True)

    labels = label_frames(motion)
    lines = ["frame,pelvis_x,pelvis_y,lfoot_x,lfoot_y,rfoot_x,rfoot_y,label"]
    for k in range(motion.frames):
        feats = ",".join(f"{motion.data[i, k]:.6f}" for i in range(D))
        lines.append(f"{k},{feats},{'jump' if labels[k] else 'ground'}")
    csv_path = base.with_suffix(".csv")
    _atomic_write_bytes(csv_path, ("\n".join(lines) + "\n").encode("utf-8"))

    svg_path = base.with_suffix(".svg")
    _atomic_write_bytes(svg_path, _render_svg(motion, scene, targets))
    return csv_path, svg_path


def _render_svg(motion: Motion, scene, targets) -> bytes:
    xs = [motion.data[0], motion.data[2], motion.data[4]]
    ys = [motion.data[1], motion.data[3], motion.data[5]]
    x_lo = min(float(x.min()) for x in xs)
    x_hi = max(float(x.max()) for x in xs)
    y_hi = max(float(y.max()) for y in ys)
    if scene is not None:
        for obstacles in scene.entries.values():
            for ob in obstacles:
                x_lo = min(x_lo, ob.x - ob.radius)
                x_hi = max(x_hi, ob.x + ob.radius)
                y_hi = max(y_hi, ob.y + ob.radius)
    x_lo, x_hi = x_lo - 0.3, x_hi + 0.3
    y_lo, y_hi = -0.15, y_hi + 0.2

    width = 800.0
    scale = width / (x_hi - x_lo)
    height = (y_hi - y_lo) * scale

    def px(x):
        return (x - x_lo) * scale

    def py(y):
        return height - (y - y_lo) * scale

    root = ET.Element("svg", xmlns="http://www.w3.org/2000/svg",
                      width=f"{width:.0f}", height=f"{height:.0f}",
                      viewBox=f"0 0 {width:.0f} {height:.0f}")
    ET.SubElement(root, "rect", x="0", y="0", width=f"{width:.0f}",
                  height=f"{height:.0f}", fill="white")
    ET.SubElement(root, "line", x1="0", y1=f"{py(0.0):.2f}",
                  x2=f"{width:.0f}", y2=f"{py(0.0):.2f}",
                  stroke="#444", attrib={"stroke-width": "1.5"})

    colors = ("#1f4e9c", "#2a8f4e", "#c96a1f")
    for j, color in enumerate(colors):
        pts = " ".join(
            f"{px(motion.data[2 * j, k]):.2f},{py(motion.data[2 * j + 1, k]):.2f}"
            for k in range(motion.frames))
        ET.SubElement(root, "polyline", points=pts, fill="none", stroke=color,
                      attrib={"stroke-width": "1.8", "class": JOINT_NAMES[j]})

    if scene is not None:
        for frame in sorted(scene.entries):
            for ob in scene.entries[frame]:
                ET.SubElement(root, "circle", cx=f"{px(ob.x):.2f}",
                              cy=f"{py(ob.y):.2f}", r=f"{ob.radius * scale:.2f}",
                              fill="#d23", attrib={"fill-opacity": "0.25",
                                                   "class": "obstacle",
                                                   "stroke": "#d23"})

    for target in (targets or ()):
        j = target.joint
        tx = target.x if target.x is not None else motion.data[2 * j, target.frame]
        ty = target.y if target.y is not None else motion.data[2 * j + 1, target.frame]
        cx, cy, r = px(tx), py(ty), 6.0
        for dx1, dy1, dx2, dy2 in ((-r, -r, r, r), (-r, r, r, -r)):
            ET.SubElement(root, "line", x1=f"{cx + dx1:.2f}", y1=f"{cy + dy1:.2f}",
                          x2=f"{cx + dx2:.2f}", y2=f"{cy + dy2:.2f}",
                          stroke="#a0a", attrib={"stroke-width": "2",
                                                 "class": "target"})

    return ET.tostring(root, encoding="utf-8", xml_declaration=True)
