import numpy as np
import pytest

from noiseopt import denoiser as dn
from noiseopt import latentopt as lo
from noiseopt import objectives as ob
from noiseopt.motiondata import DatasetStats, Motion, PELVIS

TINY = dn.DenoiserSpec(d=6, frames=16, width=32, blocks=3, t_max=50)


def tiny_model(seed=0):
    stats = DatasetStats(np.zeros(6), np.ones(6))
    params = dn.init_params(TINY, seed=seed, stats=stats)
    rng = np.random.default_rng([seed, 5])
    params.tensors["out.w"] = rng.normal(0, 0.06,
                                         params.tensors["out.w"].shape)
    return params


def small_config(**kw):
    base = dict(lr=0.05, warmup_steps=3, steps=12, solver_steps=2, batch=2)
    base.update(kw)
    return lo.OptimConfig(**base)


def pose_spec(value=0.4, frame=8):
    observed = ob.ObservedSet((ob.Target(PELVIS, frame, x=value),))
    return ob.CriterionSpec(observed=observed)


# --- learning-rate schedule -----------------------------------------------------


def test_lr_schedule_shape():
    config = lo.OptimConfig(lr=0.05, warmup_steps=50, steps=300)
    assert lo.lr_at(50, config) == pytest.approx(0.05)
    assert lo.lr_at(0, config) == pytest.approx(0.05 / 50)
    assert lo.lr_at(50 + 125, config) == pytest.approx(0.025)
    assert lo.lr_at(299, config) == pytest.approx(0.0, abs=1e-5)
    with pytest.raises(lo.OptimError):
        lo.lr_at(300, config)


def test_config_validation():
    with pytest.raises(lo.OptimError):
        lo.OptimConfig(lr=0.0)
    with pytest.raises(lo.OptimError):
        lo.OptimConfig(warmup_steps=10, steps=10)
    with pytest.raises(lo.OptimError):
        lo.OptimConfig(solver_steps=0)


# --- single update ---------------------------------------------------------------


def test_zero_gradient_skips_update():
    config = small_config()
    latent = np.ones((6, 16))
    state = lo._AdamState(np.zeros_like(latent), np.zeros_like(latent))
    rng = np.random.default_rng(0)
    out, skipped, norm = lo.step_latent(latent, np.zeros_like(latent), state,
                                        0, config, rng)
    assert skipped and norm == 0.0
    assert np.array_equal(out, latent)
    assert state.count == 0


def test_first_step_moves_by_learning_rate():
    config = small_config(warmup_steps=1, steps=10, lr=0.05)
    latent = np.zeros((6, 16))
    grad = np.zeros_like(latent)
    grad[0, 3] = 7.5  # any magnitude: normalization makes it a unit vector
    state = lo._AdamState(np.zeros_like(latent), np.zeros_like(latent))
    out, skipped, _ = lo.step_latent(latent, grad, state, 0, config,
                                     np.random.default_rng(0))
    assert not skipped
    assert out[0, 3] == pytest.approx(-lo.lr_at(0, config), rel=1e-6)
    assert np.all(out[np.abs(out) < 1e-12] == 0.0)


def test_step_rejects_non_finite_gradient():
    config = small_config()
    latent = np.zeros((6, 16))
    grad = np.full_like(latent, np.nan)
    state = lo._AdamState(np.zeros_like(latent), np.zeros_like(latent))
    with pytest.raises(lo.OptimError, match="non-finite"):
        lo.step_latent(latent, grad, state, 0, config,
                       np.random.default_rng(0))


def test_step_deterministic_without_perturbation():
    config = small_config()
    rng = np.random.default_rng(1)
    latent = rng.normal(size=(6, 16))
    grad = rng.normal(size=(6, 16))
    outs = []
    for _ in range(2):
        state = lo._AdamState(np.zeros_like(latent), np.zeros_like(latent))
        out, _, _ = lo.step_latent(latent.copy(), grad, state, 2, config,
                                   np.random.default_rng(99))
        outs.append(out)
    assert np.array_equal(outs[0], outs[1])


# --- init ------------------------------------------------------------------------


def test_random_init_statistics():
    latents = lo.init_latent("random", 16, (6, 64), seed=3)
    assert latents.shape == (16, 6, 64)
    for row in latents:
        assert abs(row.mean()) < 0.2
        assert 0.8 < row.var() < 1.2
    again = lo.init_latent("random", 16, (6, 64), seed=3)
    assert np.array_equal(latents, again)


def test_inversion_init_shares_one_latent():
    params = tiny_model()
    reference = Motion(np.random.default_rng(4).normal(size=(6, 16)))
    latents = lo.init_latent("inversion", 4, (6, 16), seed=0,
                             reference=reference, params=params,
                             invert_steps=10)
    assert latents.shape == (4, 6, 16)
    for row in latents[1:]:
        assert np.array_equal(row, latents[0])


def test_inversion_init_requires_reference():
    with pytest.raises(lo.OptimError):
        lo.init_latent("inversion", 4, (6, 16), seed=0)


# --- candidate runs ---------------------------------------------------------------


def test_content_criterion_is_stationary():
    params = tiny_model()
    config = small_config(batch=1, steps=6)
    init = lo.init_latent("random", 1, (6, 16), seed=7)
    spec = ob.CriterionSpec(latent_ref=init[0].copy())
    (result,) = lo.run(params, config, init, spec, seed=7)
    assert not result.aborted
    assert np.array_equal(result.latent, init[0])
    assert all(result.trace.skipped)
    assert all(v == 0.0 for v in result.trace.total)


def test_trace_contract():
    params = tiny_model()
    config = small_config(batch=1, steps=9)
    init = lo.init_latent("random", 1, (6, 16), seed=8)
    (result,) = lo.run(params, config, init, pose_spec(), seed=8)
    assert len(result.trace) == config.steps
    expected_lr = [lo.lr_at(s, config) for s in range(config.steps)]
    assert result.trace.lr == pytest.approx(expected_lr)
    assert all(n >= 0 for n in result.trace.grad_norm)
    assert result.motion is not None
    assert result.motion.data.shape == (6, 16)


def test_criterion_decreases_on_average():
    params = tiny_model(seed=2)
    config = small_config(batch=1, steps=40, warmup_steps=5)
    init = lo.init_latent("random", 1, (6, 16), seed=9)
    (result,) = lo.run(params, config, init, pose_spec(value=0.8), seed=9)
    head = np.mean(result.trace.total[:5])
    tail = np.mean(result.trace.total[-5:])
    assert tail < head


def test_run_deterministic_and_matches_single_candidates():
    params = tiny_model()
    config = small_config(batch=3, steps=8)
    inits = lo.init_latent("random", 3, (6, 16), seed=11)
    specs = [pose_spec(value=0.2 * (i + 1)) for i in range(3)]
    batch_results = lo.run(params, config, inits, specs, seed=11)
    again = lo.run(params, config, inits, specs, seed=11)
    for a, b in zip(batch_results, again):
        assert np.array_equal(a.latent, b.latent)
        assert a.final_loss == b.final_loss

    by_index = {r.index: r for r in batch_results}
    for i in range(3):
        solo = lo.run_candidate(params, config, i, inits[i], specs[i], seed=11)
        assert np.array_equal(solo.latent, by_index[i].latent)
        assert solo.final_loss == by_index[i].final_loss


def test_run_parallel_matches_serial():
    params = tiny_model()
    config = small_config(batch=2, steps=6)
    inits = lo.init_latent("random", 2, (6, 16), seed=12)
    serial = lo.run(params, config, inits, pose_spec(), seed=12, workers=1)
    parallel = lo.run(params, config, inits, pose_spec(), seed=12, workers=2)
    for a, b in zip(serial, parallel):
        assert a.index == b.index
        assert np.array_equal(a.latent, b.latent)


def test_perturbation_changes_path_but_stays_deterministic():
    params = tiny_model()
    config = small_config(batch=1, steps=8, perturb=5e-4)
    init = lo.init_latent("random", 1, (6, 16), seed=13)
    a = lo.run(params, config, init, pose_spec(), seed=13)[0]
    b = lo.run(params, config, init, pose_spec(), seed=13)[0]
    assert np.array_equal(a.latent, b.latent)
    quiet = lo.run(params, small_config(batch=1, steps=8), init, pose_spec(),
                   seed=13)[0]
    assert not np.array_equal(a.latent, quiet.latent)


def test_aborted_candidate_is_flagged_and_others_continue():
    params = tiny_model()
    config = small_config(batch=2, steps=6)
    inits = lo.init_latent("random", 2, (6, 16), seed=14)
    poisoned = ob.CriterionSpec(latent_ref=np.full((6, 16), np.nan))
    results = lo.run(params, config, inits, [pose_spec(), poisoned], seed=14)
    flags = {r.index: r.aborted for r in results}
    assert flags == {0: False, 1: True}
    bad = [r for r in results if r.aborted][0]
    assert bad.final_loss == np.inf
    assert "non-finite" in bad.abort_reason
    assert results[0].index == 0  # sorted: finished candidate first


def test_results_sorted_by_final_loss_with_stable_indices():
    params = tiny_model()
    config = small_config(batch=3, steps=6)
    inits = lo.init_latent("random", 3, (6, 16), seed=15)
    results = lo.run(params, config, inits, pose_spec(), seed=15)
    losses = [r.final_loss for r in results]
    assert losses == sorted(losses)
    assert sorted(r.index for r in results) == [0, 1, 2]
    assert lo.best(results) is results[0]


def test_checkpointed_run_matches_plain():
    params = tiny_model()
    init = lo.init_latent("random", 1, (6, 16), seed=16)
    plain = lo.run(params, small_config(batch=1, steps=5), init, pose_spec(),
                   seed=16)[0]
    ckpt = lo.run(params, small_config(batch=1, steps=5, checkpoint=True),
                  init, pose_spec(), seed=16)[0]
    assert np.allclose(plain.latent, ckpt.latent, atol=1e-9)
    assert plain.trace.total == pytest.approx(ckpt.trace.total, abs=1e-9)


# --- persistence -------------------------------------------------------------------


def test_save_results_layout(tmp_path):
    params = tiny_model()
    config = small_config(batch=2, steps=5)
    inits = lo.init_latent("random", 2, (6, 16), seed=17)
    results = lo.run(params, config, inits, pose_spec(), seed=17)
    lo.save_results(tmp_path / "run", results, config,
                    run_config={"seed": 17, "task": "unit"})

    assert (tmp_path / "run" / "result.mbin").exists()
    trace = (tmp_path / "run" / "trace.csv").read_text().strip().split("\n")
    assert trace[0].startswith("candidate,step,total")
    assert len(trace) == 1 + 2 * config.steps

    import json
    payload = json.loads((tmp_path / "run" / "config.json").read_text())
    assert payload["seed"] == 17
    assert payload["optimizer"]["steps"] == config.steps

    from noiseopt.motiondata import load_mbin
    motions, meta = load_mbin(tmp_path / "run" / "result.mbin")
    assert len(motions) == 2
    assert meta["kind"] == "optimized"
