import numpy as np
import pytest

from noiseopt import denoiser as dn
from noiseopt import tensorgrad as tg
from noiseopt.motiondata import DatasetStats

TINY = dn.DenoiserSpec(d=6, frames=16, width=32, blocks=3, t_max=50)


def tiny_params(seed=0):
    return dn.init_params(TINY, seed=seed)


# --- time embedding -----------------------------------------------------------


def test_time_embed_at_zero():
    emb = dn.time_embed(0, 1000)
    assert np.all(emb[0::2] == 0.0)
    assert np.all(emb[1::2] == 1.0)


def test_time_embed_bounded():
    for t in (0, 1, 17, 500, 1000):
        emb = dn.time_embed(t, 1000)
        assert emb.shape == (dn.TIME_DIM,)
        assert np.all(np.abs(emb) <= 1.0)


def test_time_embed_distinguishes_endpoints():
    a = dn.time_embed(0, 1000)
    b = dn.time_embed(1000, 1000)
    assert np.linalg.norm(a - b) > 0.1


def test_time_embed_range_check():
    with pytest.raises(dn.TimeRangeError):
        dn.time_embed(-1, 1000)
    with pytest.raises(dn.TimeRangeError):
        dn.time_embed(1001, 1000)


def test_time_embed_table_matches_pointwise():
    table = dn.time_embed_table(20)
    assert table.shape == (21, dn.TIME_DIM)
    assert np.array_equal(table[7], dn.time_embed(7, 20))


# --- forward -------------------------------------------------------------------


def test_forward_shape_and_determinism():
    params = tiny_params()
    rng = np.random.default_rng(1)
    x = tg.tensor(rng.normal(size=(6, 16)))
    a = dn.forward(x, 5, params)
    b = dn.forward(x, 5, params)
    assert a.shape == (6, 16)
    assert np.array_equal(a.data, b.data)


def test_forward_shape_mismatch():
    params = tiny_params()
    with pytest.raises(tg.ShapeError, match="denoiser expects"):
        dn.forward(tg.tensor(np.zeros((6, 8))), 5, params)


def test_zero_initialized_output_projection():
    params = tiny_params()
    x = tg.tensor(np.random.default_rng(2).normal(size=(6, 16)))
    out = dn.forward(x, 3, params)
    assert np.all(out.data == 0.0)


def test_forward_gradient_wrt_input():
    params = tiny_params(seed=3)
    # break the zero output projection so gradients are non-trivial
    rng = np.random.default_rng(4)
    params.tensors["out.w"] = rng.normal(0, 0.05, params.tensors["out.w"].shape)
    x0 = tg.tensor(rng.normal(size=(6, 16)))

    err = tg.grad_check(lambda x: tg.tmean(dn.forward(x, 7, params)), x0,
                        step=1e-5)
    assert err < 1e-4


def test_forward_gradient_wrt_weights():
    params = tiny_params(seed=5)
    rng = np.random.default_rng(6)
    params.tensors["out.w"] = rng.normal(0, 0.05, params.tensors["out.w"].shape)
    x = np.asarray(rng.normal(size=(6, 16)))
    name = "block1.fc1.w"

    def loss_of_weight(w):
        pt = {k: (w if k == name else tg.Tensor(v))
              for k, v in params.tensors.items()}
        return tg.tmean(tg.square(dn.forward(tg.Tensor(x), 9, pt, TINY)))

    err = tg.grad_check(loss_of_weight,
                        tg.tensor(params.tensors[name]), step=1e-5)
    assert err < 1e-4


def test_batched_forward_matches_single():
    params = tiny_params(seed=7)
    rng = np.random.default_rng(8)
    params.tensors["out.w"] = rng.normal(0, 0.05, params.tensors["out.w"].shape)
    xs = rng.normal(size=(3, TINY.flat))
    temb = np.stack([dn.time_embed(t, TINY.t_max) for t in (1, 5, 9)])
    pt = dn.param_tensors(params)
    batched = dn.forward_flat(tg.tensor(xs), tg.tensor(temb), pt, TINY).data
    for row, t in zip(range(3), (1, 5, 9)):
        single = dn.forward(tg.tensor(xs[row].reshape(6, 16)), t, params).data
        assert np.allclose(batched[row].reshape(6, 16), single, atol=1e-12)


# --- persistence ---------------------------------------------------------------


def test_save_load_round_trip(tmp_path):
    stats = DatasetStats(np.arange(6.0), np.arange(1.0, 7.0))
    params = dn.init_params(TINY, seed=11, stats=stats)
    path = tmp_path / "weights.dnow"
    dn.save_params(path, params)
    loaded = dn.load_params(path)
    assert loaded.spec == TINY
    for name in params.tensors:
        assert np.array_equal(loaded.tensors[name], params.tensors[name])
    assert np.array_equal(loaded.stats.mean, stats.mean)
    # bit-exact file round trip
    path2 = tmp_path / "again.dnow"
    dn.save_params(path2, loaded)
    assert path.read_bytes() == path2.read_bytes()


def test_load_rejects_wrong_width(tmp_path):
    params = tiny_params()
    path = tmp_path / "w.dnow"
    dn.save_params(path, params)
    expectation = dn.DenoiserSpec(d=6, frames=16, width=64, blocks=3, t_max=50)
    with pytest.raises(dn.DnowManifestMismatch):
        dn.load_params(path, expected=expectation)


def test_load_rejects_bad_magic(tmp_path):
    p = tmp_path / "x.dnow"
    p.write_bytes(b"NOPE" + b"\x00" * 32)
    with pytest.raises(dn.DnowBadMagic):
        dn.load_params(p)


def test_load_rejects_truncated(tmp_path):
    params = tiny_params()
    p = tmp_path / "t.dnow"
    dn.save_params(p, params)
    raw = p.read_bytes()
    p.write_bytes(raw[:-100])
    with pytest.raises(dn.DnowTruncated):
        dn.load_params(p)


def test_parameter_count_formula():
    params = tiny_params()
    f, w, b = TINY.flat, TINY.width, TINY.blocks
    expected = (f * w + w) + b * (dn.TIME_DIM * w + 2 * (w * w + w)) + (w * f + f)
    assert params.parameter_count() == expected
