"""Clean-motion predictor d(x_t, t).

A residual MLP over the flattened motion matrix: input projection, three
residual blocks (each adds a projected time embedding, then a two-layer silu
bottleneck), output projection. The network predicts the clean motion
directly and is unconditional: there is no class or text input anywhere.

Everything is expressed in tensorgrad primitives so gradients can flow
through arbitrarily many stacked evaluations.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorgrad as tg
from .motiondata import DatasetStats

TIME_DIM = 64
_BASE_PERIOD = 10_000.0


class TimeRangeError(ValueError):
    pass


@dataclass(frozen=True)
class DenoiserSpec:
    d: int = 6
    frames: int = 64
    width: int = 512
    blocks: int = 3
    t_max: int = 1000

    @property
    def flat(self) -> int:
        return self.d * self.frames

    def to_json(self) -> dict:
        return {"d": self.d, "frames": self.frames, "width": self.width,
                "blocks": self.blocks, "t_max": self.t_max,
                "time_dim": TIME_DIM}

    @classmethod
    def from_json(cls, obj: dict) -> "DenoiserSpec":
        return cls(d=obj["d"], frames=obj["frames"], width=obj["width"],
                   blocks=obj["blocks"], t_max=obj["t_max"])


def time_embed(t: int, t_max: int) -> np.ndarray:
    """Interleaved sin/cos embedding of an integer diffusion time."""
    if not 0 <= t <= t_max:
        raise TimeRangeError(f"time {t} outside [0, {t_max}]")
    half = TIME_DIM // 2
    freqs = _BASE_PERIOD ** (-np.arange(half) / half)
    angles = t * freqs
    emb = np.empty(TIME_DIM)
    emb[0::2] = np.sin(angles)
    emb[1::2] = np.cos(angles)
    return emb


def time_embed_table(t_max: int) -> np.ndarray:
    """(t_max + 1, TIME_DIM) lookup table."""
    return np.stack([time_embed(t, t_max) for t in range(t_max + 1)])


def _param_shapes(spec: DenoiserSpec) -> list[tuple[str, tuple[int, int]]]:
    shapes = [("in.w", (spec.flat, spec.width)), ("in.b", (1, spec.width))]
    for i in range(spec.blocks):
        shapes += [
            (f"block{i}.time.w", (TIME_DIM, spec.width)),
            (f"block{i}.fc1.w", (spec.width, spec.width)),
            (f"block{i}.fc1.b", (1, spec.width)),
            (f"block{i}.fc2.w", (spec.width, spec.width)),
            (f"block{i}.fc2.b", (1, spec.width)),
        ]
    shapes += [("out.w", (spec.width, spec.flat)), ("out.b", (1, spec.flat))]
    return shapes


@dataclass
class DenoiserParams:
    spec: DenoiserSpec
    tensors: dict[str, np.ndarray]
    stats: DatasetStats | None = None

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.spec,
                              {k: v.copy() for k, v in self.tensors.items()},
                              self.stats)

    def parameter_count(self) -> int:
        return sum(v.size for v in self.tensors.values())


def init_params(spec: DenoiserSpec, seed: int,
                stats: DatasetStats | None = None) -> DenoiserParams:
    """Uniform +-1/sqrt(fan_in) init; the output projection starts at zero so
    the untrained network predicts the (normalized) dataset mean."""
    rng = np.random.default_rng([seed, 0xD0])
    tensors: dict[str, np.ndarray] = {}
    for name, shape in _param_shapes(spec):
        if name.startswith("out."):
            tensors[name] = np.zeros(shape)
        elif name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(shape[0])
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return DenoiserParams(spec, tensors, stats)


def param_tensors(params: DenoiserParams,
                  graph: tg.Graph | None = None) -> dict[str, tg.Tensor]:
    """Wrap weights as graph leaves (trainable) or plain constants."""
    if graph is None:
        return {k: tg.Tensor(v) for k, v in params.tensors.items()}
    return {k: graph.leaf(v) for k, v in params.tensors.items()}


def _affine(x: tg.Tensor, w: tg.Tensor, b: tg.Tensor,
            ones: tg.Tensor) -> tg.Tensor:
    # bias is a (1, width) row replicated across the batch via an outer
    # product, which keeps every primitive shape-strict
    return tg.add(tg.matmul(x, w), tg.matmul(ones, b))


def forward_flat(x: tg.Tensor, temb: tg.Tensor,
                 pt: dict[str, tg.Tensor], spec: DenoiserSpec) -> tg.Tensor:
    """Batched core: x is (B, D*M), temb is (B, TIME_DIM)."""
    batch = x.shape[0]
    ones = tg.Tensor(np.ones((batch, 1)))
    h = _affine(x, pt["in.w"], pt["in.b"], ones)
    for i in range(spec.blocks):
        h = tg.add(h, tg.matmul(temb, pt[f"block{i}.time.w"]))
        r = _affine(h, pt[f"block{i}.fc1.w"], pt[f"block{i}.fc1.b"], ones)
        r = tg.silu(r)
        r = _affine(r, pt[f"block{i}.fc2.w"], pt[f"block{i}.fc2.b"], ones)
        h = tg.add(h, r)
    return _affine(h, pt["out.w"], pt["out.b"], ones)


def forward(x_t: tg.Tensor, t: int, params_or_tensors,
            spec: DenoiserSpec | None = None) -> tg.Tensor:
    """Predict the clean motion from a (D, M) tensor at integer time t."""
    if isinstance(params_or_tensors, DenoiserParams):
        spec = params_or_tensors.spec
        pt = param_tensors(params_or_tensors)
    else:
        if spec is None:
            raise ValueError("spec is required with raw parameter tensors")
        pt = params_or_tensors
    if x_t.shape != (spec.d, spec.frames):
        raise tg.ShapeError(
            f"denoiser expects ({spec.d}, {spec.frames}), got {x_t.shape}")
    temb = tg.Tensor(time_embed(t, spec.t_max).reshape(1, TIME_DIM))
    flat = tg.reshape(x_t, (1, spec.flat))
    out = forward_flat(flat, temb, pt, spec)
    return tg.reshape(out, (spec.d, spec.frames))


# --- weight file ("denoiser weights" format) ------------------------------------
#
# little-endian: magic "DNOW", u32 version=1, u32 manifest length, UTF-8 JSON
# manifest (architecture dims, diffusion horizon, dataset stats, parameter
# order), float64 weights in manifest order.

DNOW_MAGIC = b"DNOW"
DNOW_VERSION = 1


class DnowError(Exception):
    pass


class DnowBadMagic(DnowError):
    pass


class DnowBadVersion(DnowError):
    pass


class DnowManifestMismatch(DnowError):
    pass


class DnowTruncated(DnowError):
    pass


def save_params(path, params: DenoiserParams) -> None:
    manifest = {
        "spec": params.spec.to_json(),
        "stats": params.stats.to_json() if params.stats is not None else None,
        "params": [{"name": name, "shape": list(arr.shape)}
                   for name, arr in params.tensors.items()],
    }
    blob = json.dumps(manifest, sort_keys=True).encode("utf-8")
    payload = bytearray()
    payload += DNOW_MAGIC
    payload += struct.pack("<II", DNOW_VERSION, len(blob))
    payload += blob
    for arr in params.tensors.values():
        payload += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(bytes(payload))
    os.replace(tmp, path)


def load_params(path, expected: DenoiserSpec | None = None) -> DenoiserParams:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != DNOW_MAGIC:
        raise DnowBadMagic(f"{path}: not a denoiser weight file")
    if len(raw) < 12:
        raise DnowTruncated(f"{path}: header truncated")
    version, manifest_len = struct.unpack("<II", raw[4:12])
    if version != DNOW_VERSION:
        raise DnowBadVersion(f"{path}: unsupported version {version}")
    if len(raw) < 12 + manifest_len:
        raise DnowTruncated(f"{path}: manifest truncated")
    manifest = json.loads(raw[12:12 + manifest_len].decode("utf-8"))
    spec = DenoiserSpec.from_json(manifest["spec"])
    if expected is not None and spec != expected:
        raise DnowManifestMismatch(
            f"{path}: file declares {spec}, expected {expected}")
    declared = {(p["name"], tuple(p["shape"])) for p in manifest["params"]}
    required = set((n, s) for n, s in _param_shapes(spec))
    if declared != required:
        raise DnowManifestMismatch(f"{path}: parameter manifest does not "
                                   f"match the declared architecture")
    offset = 12 + manifest_len
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8
        if len(raw) < offset + nbytes:
            raise DnowTruncated(f"{path}: weight payload truncated")
        tensors[entry["name"]] = np.frombuffer(
            raw[offset:offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
    stats = (DatasetStats.from_json(manifest["stats"])
             if manifest.get("stats") else None)
    return DenoiserParams(spec, tensors, stats)
