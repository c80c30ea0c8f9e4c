"""Command-line surface.

Subcommands cover the whole pipeline: synthetic data generation, denoiser
training, sampling, inversion, the optimization-based motion tasks (edit,
refine, complete, blend, inbetween), evaluation, gradient oracles and the
ablation sweep.

Exit codes: 0 success, 2 usage, 3 I/O or file-format failure, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import metrics as mx
from . import motiondata as md
from . import oracles
from . import protocols
from . import tensorgrad as tg
from .denoiser import DnowError, load_params, save_params
from .diffusion import (ScheduleError, TrainConfig, ddim_invert, ddim_solve,
                        denoise_fn, make_schedule, train)
from .guided import GuidedError, guided_sample, prediction_criterion
from .latentopt import (OptimConfig, OptimError, init_latent, run,
                        save_results)
from .motiondata import (MbinError, Motion, MotionError, load_mbin, save_mbin)
from .objectives import CriterionSpec, LossWeights, TaskError, load_task

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4

_IO_FAILURES = (FileNotFoundError, IsADirectoryError, NotADirectoryError,
                PermissionError, MbinError, DnowError, TaskError, MotionError,
                protocols.ProtocolError)
_NUMERIC_FAILURES = (OptimError, GuidedError, ScheduleError, mx.MetricError,
                     tg.GraphError, tg.ShapeError, FloatingPointError)


def _write_json(path: Path, payload) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def _start_run(args, extra: dict | None = None) -> Path:
    """Create the output dir and serialize the resolved configuration before
    any computation happens."""
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"command": args.command,
               "argv": getattr(args, "_argv", None),
               "args": {k: _jsonable(v) for k, v in vars(args).items()
                        if not k.startswith("_") and k not in ("func",)}}
    if extra:
        payload.update(extra)
    _write_json(out / "config.json", payload)
    return out


def _load_motions(path, indices=None) -> list[Motion]:
    motions, _ = load_mbin(path)
    if indices is not None:
        motions = [motions[i] for i in indices]
    return motions


def _parse_indices(text):
    if text is None:
        return None
    return [int(tok) for tok in text.split(",") if tok.strip() != ""]


def _weights_from(args, base: LossWeights | None = None) -> LossWeights:
    base = base or LossWeights()
    return LossWeights(
        obs=args.lambda_obs if args.lambda_obs is not None else base.obs,
        cont=args.lambda_cont if args.lambda_cont is not None else base.cont,
        decorr=(args.lambda_decorr if args.lambda_decorr is not None
                else base.decorr))


def _optim_config(args, weights: LossWeights) -> OptimConfig:
    return OptimConfig(lr=args.lr, warmup_steps=args.warmup, steps=args.steps,
                       perturb=args.perturb, solver_steps=args.solver_steps,
                       batch=args.batch, weights=weights,
                       checkpoint=args.checkpoint,
                       decorr_squared=not args.decorr_literal)


def _export_motion_plots(out: Path, motions, scene=None, targets=None,
                         limit=2, prefix="motion"):
    plots = out / "plots"
    for i, motion in enumerate(motions[:limit]):
        md.export_plots(motion, scene=scene, targets=targets,
                        out_base=plots / f"{prefix}_{i:03d}")


# --- subcommands ---------------------------------------------------------------


def cmd_gen_data(args) -> int:
    out = _start_run(args)
    motions = md.make_dataset(args.count, seed=args.seed,
                              jump_fraction=args.jump_fraction,
                              frames=args.frames, fps=args.fps)
    save_mbin(out / "dataset.mbin", motions,
              metadata={"kind": "dataset", "seed": args.seed,
                        "count": args.count,
                        "jump_fraction": args.jump_fraction})
    stats = md.fit_stats(motions)
    _write_json(out / "stats.json", stats.to_json())
    print(f"wrote {args.count} motions to {out / 'dataset.mbin'}")
    return EXIT_OK


def cmd_train(args) -> int:
    motions = _load_motions(args.data)
    config = TrainConfig(epochs=args.epochs, batch_size=args.batch_size,
                         lr=args.lr, ema_decay=args.ema_decay, seed=args.seed,
                         width=args.width, blocks=args.blocks,
                         t_max=args.t_max)
    result = train(motions, config)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_params(out_path, result.params)
    curve_path = out_path.with_suffix(out_path.suffix + ".curve.csv")
    lines = ["kind,index,loss"]
    lines += [f"step,{i},{v:.8g}" for i, v in enumerate(result.train_curve)]
    lines += [f"epoch,{i},{v:.8g}" for i, v in enumerate(result.val_curve)]
    curve_path.write_text("\n".join(lines) + "\n")
    print(f"trained {result.params.parameter_count()} parameters; "
          f"val loss {result.val_curve[0]:.4f} -> {result.val_curve[-1]:.4f}")
    return EXIT_OK


def cmd_sample(args) -> int:
    params = load_params(args.model)
    out = _start_run(args)
    schedule = make_schedule(params.spec.t_max)
    fn = denoise_fn(params)
    stats = params.stats
    motions = []
    shape = (params.spec.d, params.spec.frames)
    for i in range(args.count):
        latent = np.random.default_rng([args.seed, i]).standard_normal(shape)
        decoded = ddim_solve(tg.Tensor(latent), args.solver_steps, fn,
                             schedule).data
        motions.append(Motion(decoded * stats.std[:, None]
                              + stats.mean[:, None]))
    save_mbin(out / "result.mbin", motions,
              metadata={"kind": "samples", "seed": args.seed,
                        "solver_steps": args.solver_steps})
    _export_motion_plots(out, motions, limit=args.plots)
    print(f"wrote {args.count} samples to {out / 'result.mbin'}")
    return EXIT_OK


def cmd_invert(args) -> int:
    params = load_params(args.model)
    motions = _load_motions(args.input, _parse_indices(args.indices))
    out = _start_run(args)
    schedule = make_schedule(params.spec.t_max)
    fn = denoise_fn(params)
    stats = params.stats
    latents, recon_err = [], []
    for motion in motions:
        normalized = (motion.data - stats.mean[:, None]) / stats.std[:, None]
        latent = ddim_invert(normalized, args.steps, fn, schedule)
        latents.append(Motion(latent))
        decoded = ddim_solve(tg.Tensor(latent), args.steps, fn, schedule).data
        recon = Motion(decoded * stats.std[:, None] + stats.mean[:, None])
        recon_err.append(mx.mpjpe(motion, recon))
    save_mbin(out / "latents.mbin", latents,
              metadata={"kind": "latents", "steps": args.steps})
    _write_json(out / "metrics.json", {"reconstruction_mpjpe": recon_err})
    print(f"inverted {len(latents)} motions; "
          f"mean reconstruction error {np.mean(recon_err):.2f} cm")
    return EXIT_OK


def _guided_edit(params, motion, observed, scene, weights, args, out):
    spec = CriterionSpec(observed=observed if len(observed) else None,
                         scene=scene if scene.entries else None,
                         weights=weights)
    shape = motion.data.shape
    inv = init_latent("inversion", 1, shape, seed=args.seed,
                      reference=motion, params=params,
                      invert_steps=args.invert_steps)[0]
    outputs = []
    for c in range(args.batch):
        latent = inv if c == 0 else np.random.default_rng(
            [args.seed, c]).standard_normal(shape)
        outputs.append(guided_sample(params, latent, args.solver_steps, spec,
                                     args.guidance_scale))
    criterion = prediction_criterion(spec)
    scores = [criterion(tg.Tensor(m.data)).item() for m in outputs]
    order = np.argsort(scores)
    motions = [outputs[i] for i in order]
    save_mbin(out / "result.mbin", motions,
              metadata={"kind": "guided", "scores": [scores[i] for i in order],
                        "scale": args.guidance_scale})
    _export_motion_plots(out, motions, scene=scene,
                         targets=observed.entries, limit=args.plots)
    print(f"guided edit: best criterion {min(scores):.4f}")
    return EXIT_OK


def cmd_edit(args) -> int:
    params = load_params(args.model)
    motions = _load_motions(args.input)
    motion = motions[args.index]
    observed, scene, task_weights = load_task(args.task, motion.frames)
    weights = _weights_from(args, task_weights)
    out = _start_run(args)
    if args.engine == "guided":
        return _guided_edit(params, motion, observed, scene, weights, args,
                            out)
    config = _optim_config(args, weights)
    latent = init_latent("inversion", config.batch, motion.data.shape,
                         seed=args.seed, reference=motion, params=params,
                         invert_steps=args.invert_steps)
    spec = CriterionSpec(observed=observed if len(observed) else None,
                         scene=scene if scene.entries else None,
                         weights=weights, latent_ref=latent[0].copy())
    results = run(params, config, latent, spec, seed=args.seed,
                  workers=args.workers)
    save_results(out, results, config, run_config={"command": "edit",
                                                   "seed": args.seed})
    finished = [r for r in results if not r.aborted]
    _export_motion_plots(out, [r.motion for r in finished], scene=scene,
                         targets=observed.entries, limit=args.plots)
    if not finished:
        print("all candidates aborted", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"edit: best criterion {finished[0].final_loss:.4f}")
    return EXIT_OK


def _reconstruct(args, observe_tokens, decorr, noise_std) -> int:
    params = load_params(args.model)
    indices = _parse_indices(args.indices)
    motions = _load_motions(args.input, indices)
    out = _start_run(args)
    weights = _weights_from(args)
    config = _optim_config(args, weights)
    records = protocols.refine_protocol(
        params, motions, noise_std, config, seed=args.seed,
        observe=observe_tokens, decorr=decorr, workers=args.workers)
    save_mbin(out / "input.mbin", [r.noisy for r in records],
              metadata={"kind": "inputs", "noise_std": noise_std})
    finished = [r for r in records if not r.result.aborted]
    if finished:
        save_mbin(out / "result.mbin",
                  [r.result.motion for r in finished],
                  metadata={"kind": "optimized",
                            "final_loss": [r.result.final_loss
                                           for r in finished]})
        _export_motion_plots(out, [r.result.motion for r in finished],
                             limit=args.plots)
    trace_rows = ["motion,step,total,grad_norm,lr"]
    for i, record in enumerate(records):
        tr = record.result.trace
        for s in range(len(tr)):
            trace_rows.append(f"{i},{s},{tr.total[s]:.10g},"
                              f"{tr.grad_norm[s]:.10g},{tr.lr[s]:.10g}")
    (out / "trace.csv").write_text("\n".join(trace_rows) + "\n")
    if not finished:
        print("all candidates aborted", file=sys.stderr)
        return EXIT_NUMERIC
    mean_loss = float(np.mean([r.result.final_loss for r in finished]))
    print(f"{args.command}: {len(finished)} motions, "
          f"mean final criterion {mean_loss:.4f}")
    return EXIT_OK


def cmd_refine(args) -> int:
    return _reconstruct(args, args.observe, decorr=not args.no_decorr,
                        noise_std=args.noise_std)


def cmd_complete(args) -> int:
    return _reconstruct(args, args.observe, decorr=not args.no_decorr,
                        noise_std=args.noise_std)


def cmd_blend(args) -> int:
    params = load_params(args.model)
    a = _load_motions(args.input_a)[args.index_a]
    b = _load_motions(args.input_b)[args.index_b]
    out = _start_run(args)
    weights = _weights_from(args)
    config = _optim_config(args, weights)
    composite, excluded, results = protocols.blend_protocol(
        params, a, b, config, seed=args.seed, window=args.window,
        workers=args.workers)
    save_mbin(out / "input.mbin", [composite],
              metadata={"kind": "blend-input",
                        "excluded_frames": sorted(excluded)})
    save_results(out, results, config, run_config={"command": "blend",
                                                   "seed": args.seed})
    finished = [r for r in results if not r.aborted]
    if not finished:
        print("all candidates aborted", file=sys.stderr)
        return EXIT_NUMERIC
    _export_motion_plots(out, [r.motion for r in finished], limit=args.plots)
    print(f"blend: best criterion {finished[0].final_loss:.4f}")
    return EXIT_OK


def cmd_inbetween(args) -> int:
    params = load_params(args.model)
    start = _load_motions(args.input)[args.index]
    end = start if args.end_input is None else \
        _load_motions(args.end_input)[args.end_index]
    out = _start_run(args)
    weights = _weights_from(args)
    config = _optim_config(args, weights)
    results = protocols.inbetween_protocol(params, start, end, config,
                                           seed=args.seed,
                                           workers=args.workers)
    save_results(out, results, config, run_config={"command": "inbetween",
                                                   "seed": args.seed})
    finished = [r for r in results if not r.aborted]
    if not finished:
        print("all candidates aborted", file=sys.stderr)
        return EXIT_NUMERIC
    _export_motion_plots(out, [r.motion for r in finished], limit=args.plots)
    print(f"inbetween: best criterion {finished[0].final_loss:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    result_path = Path(args.result)
    motions_path = result_path / "result.mbin" if result_path.is_dir() \
        else result_path
    outputs = _load_motions(motions_path)
    report = mx.MetricsReport(
        jitter=float(np.mean([mx.jitter(m) for m in outputs])),
        foot_skate_ratio=float(np.mean([mx.foot_skate_ratio(m)
                                        for m in outputs])))
    if args.reference:
        refs = _load_motions(args.reference)
        if len(refs) == 1:
            refs = refs * len(outputs)
        if len(refs) != len(outputs):
            raise mx.MetricError("reference count must be 1 or match results")
        report.mpjpe = float(np.mean([mx.mpjpe(o, r)
                                      for o, r in zip(outputs, refs)]))
        report.content_preservation = float(np.mean(
            [mx.content_preservation(r, o) for o, r in zip(outputs, refs)]))
    if args.task:
        observed, _, _ = load_task(args.task, outputs[0].frames)
        report.objective_error = float(np.mean(
            [mx.objective_error(m, observed) for m in outputs]))
    if args.fmd_against:
        against = _load_motions(args.fmd_against)
        report.fmd = mx.fmd(outputs, against)
    metrics_path = Path(args.out) if args.out else (
        result_path / "metrics.json" if result_path.is_dir()
        else result_path.with_suffix(".metrics.json"))
    _write_json(metrics_path, report.to_json())
    if args.table:
        table = Path(args.table)
        fields = ["result", "jitter", "foot_skate_ratio", "mpjpe",
                  "objective_error", "content_preservation", "fmd"]
        row = report.to_json()
        line = ",".join([str(args.result)] + [
            "" if row[f] is None else f"{row[f]:.6g}" for f in fields[1:]])
        if not table.exists():
            table.write_text(",".join(fields) + "\n" + line + "\n")
        else:
            with open(table, "a") as fh:
                fh.write(line + "\n")
    print(json.dumps(report.to_json(), indent=2, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    report = oracles.run_suite(instances=args.instances, seed=args.seed)
    failed = False
    for name in sorted(report):
        err = report[name]
        ok = err < args.tolerance
        failed |= not ok
        print(f"{name:35s} max rel err {err:.3e}  "
              f"{'PASS' if ok else 'FAIL'}")
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ablate(args) -> int:
    params = load_params(args.model)
    motions = _load_motions(args.data)
    if len(motions) < 64 + max(args.count, 32):
        raise protocols.ProtocolError(
            "ablation needs at least 64 reference + pool motions")
    fmd_reference = motions[:64]
    pool = motions[64:]
    subset = pool[:args.count]
    gamma_subset = pool[:max(args.count, 32)]
    out = _start_run(args)
    base = OptimConfig(steps=args.steps, batch=1, solver_steps=10,
                       warmup_steps=min(50, max(1, args.steps // 6)))
    rows = protocols.ablation_protocol(
        params, subset, seed=args.seed, base=base, noise_std=args.noise_std,
        fmd_reference=fmd_reference, gamma_motions=gamma_subset,
        workers=args.workers)
    lines = ["factor,variant,metric,value"]
    lines += [f"{r.factor},{r.variant},{r.metric},{r.value:.8g}" for r in rows]
    (out / "ablation.csv").write_text("\n".join(lines) + "\n")
    print(f"wrote {len(rows)} ablation rows to {out / 'ablation.csv'}")
    return EXIT_OK


# --- parser -------------------------------------------------------------------


def _add_model(p):
    p.add_argument("--model", required=True, help="denoiser weight file")


def _add_common_run(p, steps, batch):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps", type=int, default=steps,
                   help="optimization steps")
    p.add_argument("--batch", type=int, default=batch,
                   help="independent candidates")
    p.add_argument("--solver-steps", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--warmup", type=int, default=50)
    p.add_argument("--perturb", type=float, default=0.0)
    p.add_argument("--checkpoint", action="store_true",
                   help="re-execute solver steps during backprop to save memory")
    p.add_argument("--decorr-literal", action="store_true",
                   help="use the unsquared decorrelation variant")
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--plots", type=int, default=2)
    p.add_argument("--lambda-obs", type=float, default=None)
    p.add_argument("--lambda-cont", type=float, default=None)
    p.add_argument("--lambda-decorr", type=float, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="noiseopt",
        description="Toy 2-D motion diffusion with latent-noise optimization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic gait dataset")
    p.add_argument("--count", type=int, default=2048)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--fps", type=int, default=20)
    p.add_argument("--jump-fraction", type=float, default=0.3)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train the denoiser")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=120)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--ema-decay", type=float, default=0.999)
    p.add_argument("--width", type=int, default=512)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--t-max", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="decode random latents")
    _add_model(p)
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--solver-steps", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--plots", type=int, default=2)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("invert", help="recover latents for given motions")
    _add_model(p)
    p.add_argument("--input", required=True)
    p.add_argument("--indices", default=None,
                   help="comma-separated motion indices")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_invert)

    p = sub.add_parser("edit", help="edit a motion toward task targets")
    _add_model(p)
    p.add_argument("--input", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--task", required=True, help="JSON task file")
    p.add_argument("--invert-steps", type=int, default=100)
    p.add_argument("--engine", choices=("latent", "guided"), default="latent")
    p.add_argument("--guidance-scale", type=float, default=2.0)
    _add_common_run(p, steps=300, batch=1)
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("refine", help="reconstruct a noisy motion")
    _add_model(p)
    p.add_argument("--input", required=True)
    p.add_argument("--indices", default=None)
    p.add_argument("--noise-std", type=float, default=0.0,
                   help="corrupt the input with this noise first")
    p.add_argument("--observe", default="pelvis:xy,lfoot:xy,rfoot:xy")
    p.add_argument("--no-decorr", action="store_true")
    _add_common_run(p, steps=500, batch=1)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("complete", help="fill in unobserved joints/axes")
    _add_model(p)
    p.add_argument("--input", required=True)
    p.add_argument("--indices", default=None)
    p.add_argument("--observe", required=True,
                   help="joints/axes present in the input, e.g. "
                        "'pelvis:x,lfoot:x,rfoot:x'")
    p.add_argument("--noise-std", type=float, default=0.0)
    p.add_argument("--no-decorr", action="store_true")
    _add_common_run(p, steps=500, batch=1)
    p.set_defaults(func=cmd_complete)

    p = sub.add_parser("blend", help="blend two motions across a seam")
    _add_model(p)
    p.add_argument("--input-a", required=True)
    p.add_argument("--input-b", required=True)
    p.add_argument("--index-a", type=int, default=0)
    p.add_argument("--index-b", type=int, default=0)
    p.add_argument("--window", type=int, default=10)
    _add_common_run(p, steps=1000, batch=1)
    p.set_defaults(func=cmd_blend)

    p = sub.add_parser("inbetween",
                       help="generate motion between two endpoint poses")
    _add_model(p)
    p.add_argument("--input", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--end-input", default=None)
    p.add_argument("--end-index", type=int, default=0)
    _add_common_run(p, steps=1000, batch=1)
    p.set_defaults(func=cmd_inbetween)

    p = sub.add_parser("eval", help="score a result directory")
    p.add_argument("--result", required=True,
                   help="run directory or .mbin file")
    p.add_argument("--reference", default=None)
    p.add_argument("--task", default=None)
    p.add_argument("--fmd-against", default=None)
    p.add_argument("--table", default=None, help="CSV table to append to")
    p.add_argument("--out", default=None, help="metrics JSON path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient oracles")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="factor sweep on the refinement task")
    _add_model(p)
    p.add_argument("--data", required=True, help="dataset MBIN for inputs")
    p.add_argument("--count", type=int, default=8,
                   help="motions per variant (the perturbation factor uses "
                        "at least 32 for its set-level distance)")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--noise-std", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:]) if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    args._argv = argv
    try:
        return args.func(args)
    except _IO_FAILURES as err:
        print(f"noiseopt: {err}", file=sys.stderr)
        return EXIT_IO
    except _NUMERIC_FAILURES as err:
        print(f"noiseopt: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
