import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noiseopt import metrics as mx
from noiseopt import motiondata as md


def walk_params(**kw):
    return md.GaitParams(**kw)


# --- generator -----------------------------------------------------------------


def test_generator_deterministic():
    p = walk_params(speed=1.1, jumps=((20, 10, 0.15),))
    a = md.generate_sequence(p, seed=42)
    b = md.generate_sequence(p, seed=42)
    assert np.array_equal(a.data, b.data)
    c = md.generate_sequence(p, seed=43)
    assert not np.array_equal(a.data, c.data)


def test_pelvis_displacement_matches_speed():
    m = md.generate_sequence(walk_params(speed=1.0), seed=5)
    displacement = m.data[0, -1] - m.data[0, 0]
    expected = 1.0 * (m.frames - 1) / m.fps
    assert displacement == pytest.approx(expected, rel=0.05)


def test_static_params_give_identical_frames():
    m = md.generate_sequence(walk_params(speed=0.0, bob_amp=0.0), seed=9)
    assert np.all(m.data == m.data[:, :1])
    assert mx.jitter(m) == 0.0


def test_jump_window_produces_jump_frames():
    for seed in range(5):
        m = md.generate_sequence(walk_params(jumps=((20, 8, 0.15),)), seed=seed)
        assert md.label_frames(m).sum() >= 4


def test_stance_feet_hold_their_plant_points():
    # after the one-frame touchdown transient, a grounded foot must not move
    m = md.generate_sequence(walk_params(speed=1.2), seed=31)
    for j in (md.LFOOT, md.RFOOT):
        x, y = m.data[2 * j], m.data[2 * j + 1]
        grounded = y == 0.0
        runs = np.flatnonzero(np.diff(grounded.astype(int)) == 1) + 1
        starts = [0] if grounded[0] else []
        starts += runs.tolist()
        for s in starts:
            e = s
            while e < m.frames and grounded[e]:
                e += 1
            settled = x[s + 1:e]  # skip the landing transient frame
            if settled.size:
                assert np.max(np.abs(settled - settled[-1])) <= 0.01


def test_param_clamping_reports_changes():
    wild = md.GaitParams(speed=9.0, stride_freq=0.1, step_height=0.5,
                         jumps=((-5, 200, 3.0),))
    clamped, notes = md.clamp_gait_params(wild)
    assert clamped.speed == 1.8
    assert clamped.stride_freq == 0.5
    assert clamped.step_height == 0.175
    assert clamped.jumps[0][0] == 0
    assert clamped.jumps[0][2] == 0.5 or clamped.jumps[0][2] <= 0.5
    assert len(notes) >= 4


def test_generator_logs_clamp_warnings(caplog):
    with caplog.at_level(logging.WARNING):
        md.generate_sequence(md.GaitParams(speed=99.0), seed=1)
    assert any("clamped" in r.message for r in caplog.records)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_generated_walks_are_physically_plausible(seed):
    rng = np.random.default_rng([seed, 17])
    params = md.sample_gait_params(rng, with_jumps=False)
    m = md.generate_sequence(params, seed=seed)
    assert mx.foot_skate_ratio(m) < 0.05
    assert mx.jitter(m) < 1.0
    assert not md.label_frames(m).any()


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_jump_sequences_sane(seed):
    rng = np.random.default_rng([seed, 29])
    params = md.sample_gait_params(rng, with_jumps=True)
    m = md.generate_sequence(params, seed=seed)
    assert md.label_frames(m).any()
    assert mx.foot_skate_ratio(m) < 0.05


# --- labels ---------------------------------------------------------------------


def _motion_with_feet(ly, ry):
    data = np.zeros((md.D, len(ly)))
    data[1] = 0.9
    data[3] = ly
    data[5] = ry
    return md.Motion(data)


def test_labels_threshold_rules():
    m = _motion_with_feet([0.10] * 8, [0.10] * 8)
    assert md.label_frames(m).all()
    m = _motion_with_feet([0.10] * 8, [0.0] * 8)
    assert not md.label_frames(m).any()
    m = _motion_with_feet([0.05] * 8, [0.05] * 8)
    assert not md.label_frames(m).any()  # strict inequality at 5 cm


def test_labels_pure_and_idempotent():
    m = md.generate_sequence(walk_params(jumps=((10, 10, 0.2),)), seed=3)
    before = m.data.copy()
    l1 = md.label_frames(m)
    l2 = md.label_frames(m)
    assert np.array_equal(l1, l2)
    assert np.array_equal(m.data, before)


# --- stats and normalization -------------------------------------------------------


def test_fit_stats_requires_data():
    with pytest.raises(md.MotionError):
        md.fit_stats([])


def test_constant_motion_std_floor():
    m = md.Motion(np.full((md.D, 16), 2.0))
    stats = md.fit_stats([m])
    assert np.all(stats.std == 1e-6)
    normed = md.normalize(m, stats)
    assert np.allclose(normed.data, 0.0)


def test_two_motion_mean():
    a = md.Motion(np.zeros((md.D, 8)))
    b = md.Motion(np.full((md.D, 8), 2.0))
    stats = md.fit_stats([a, b])
    assert np.allclose(stats.mean, 1.0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_normalize_round_trip(seed):
    rng = np.random.default_rng(seed)
    motions = [md.Motion(rng.normal(0, 1.5, size=(md.D, 32))) for _ in range(3)]
    stats = md.fit_stats(motions)
    m = motions[0]
    back = md.denormalize(md.normalize(m, stats), stats)
    assert np.max(np.abs(back.data - m.data)) < 1e-9


# --- MBIN -----------------------------------------------------------------------


def test_mbin_round_trip_bit_exact(tmp_path):
    motions = md.make_dataset(3, seed=8)
    p1 = tmp_path / "a.mbin"
    p2 = tmp_path / "b.mbin"
    md.save_mbin(p1, motions, metadata={"kind": "test", "n": 3})
    loaded, meta = md.load_mbin(p1)
    assert meta == {"kind": "test", "n": 3}
    md.save_mbin(p2, loaded, metadata=meta)
    assert p1.read_bytes() == p2.read_bytes()
    reloaded, _ = md.load_mbin(p2)
    for a, b in zip(loaded, reloaded):
        assert np.array_equal(a.data, b.data)


def test_mbin_values_survive_float32_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    m = md.Motion(rng.normal(size=(md.D, 16)).astype(np.float32).astype(np.float64))
    md.save_mbin(tmp_path / "m.mbin", [m])
    (loaded,), _ = md.load_mbin(tmp_path / "m.mbin")
    assert np.array_equal(loaded.data, m.data)


def test_mbin_bad_magic(tmp_path):
    p = tmp_path / "bad.mbin"
    p.write_bytes(b"XXXX" + b"\x00" * 64)
    with pytest.raises(md.MbinBadMagic):
        md.load_mbin(p)


def test_mbin_bad_version(tmp_path):
    p = tmp_path / "v.mbin"
    md.save_mbin(p, [md.Motion(np.zeros((md.D, 4)))])
    raw = bytearray(p.read_bytes())
    raw[4] = 9
    p.write_bytes(bytes(raw))
    with pytest.raises(md.MbinBadVersion):
        md.load_mbin(p)


def test_mbin_truncated(tmp_path):
    p = tmp_path / "t.mbin"
    md.save_mbin(p, [md.Motion(np.ones((md.D, 8)))])
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(md.MbinTruncated):
        md.load_mbin(p)


def test_mbin_rejects_mixed_shapes(tmp_path):
    a = md.Motion(np.zeros((md.D, 8)))
    b = md.Motion(np.zeros((md.D, 16)))
    with pytest.raises(md.MbinError):
        md.save_mbin(tmp_path / "x.mbin", [a, b])


# --- plots ----------------------------------------------------------------------


class _Obstacle:
    def __init__(self, x, y, radius):
        self.x, self.y, self.radius = x, y, radius


class _Scene:
    def __init__(self, entries):
        self.entries = entries


class _Target:
    def __init__(self, joint, frame, x=None, y=None):
        self.joint, self.frame, self.x, self.y = joint, frame, x, y


def test_export_plots_csv_shape(tmp_path):
    m = md.generate_sequence(walk_params(), seed=2)
    csv_path, svg_path = md.export_plots(m, out_base=tmp_path / "walk")
    lines = csv_path.read_text().strip().split("\n")
    assert len(lines) == m.frames + 1
    assert all(len(line.split(",")) == 8 for line in lines)


def test_export_plots_svg_wellformed_with_circles(tmp_path):
    from xml.etree import ElementTree as ET

    m = md.generate_sequence(walk_params(), seed=2)
    scene = _Scene({0: [_Obstacle(1.0, 0.5, 0.3)], 30: [_Obstacle(2.0, 0.4, 0.2),
                                                        _Obstacle(2.5, 0.6, 0.2)]})
    targets = [_Target(md.PELVIS, 40, x=2.0)]
    _, svg_path = md.export_plots(m, scene=scene, targets=targets,
                                  out_base=tmp_path / "scene")
    root = ET.parse(svg_path).getroot()
    ns = "{http://www.w3.org/2000/svg}"
    circles = root.findall(f"{ns}circle")
    assert len(circles) == 3  # one per obstacle per keyframe group
    assert len(root.findall(f"{ns}polyline")) == 3
