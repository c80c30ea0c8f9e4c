#!/usr/bin/env python3
"""Refinement and completion experiments.

Refinement: corrupt held-out motions with Gaussian noise and reconstruct
them from random latents with the pose + decorrelation criterion.
Completion: hide all heights and reconstruct from x-coordinates only.

Example:
    python3 scripts/run_refinement.py --model model.dnow --out refine_out
"""

import argparse
import json
from pathlib import Path

import numpy as np

from noiseopt import metrics as mx
from noiseopt import protocols
from noiseopt.denoiser import load_params
from noiseopt.latentopt import OptimConfig
from noiseopt.motiondata import generate_sequence, sample_gait_params, \
    save_mbin


def held_out(count, seed, jumpy_every=3):
    motions = []
    for i in range(count):
        rng = np.random.default_rng([seed, i, 0x5EED])
        motions.append(generate_sequence(
            sample_gait_params(rng, i % jumpy_every == 0),
            seed=600_000 + i))
    return motions


def refinement_report(records):
    ok = [r for r in records if not r.result.aborted]
    outs = [r.result.motion for r in ok]
    report = {
        "count": len(ok),
        "input_mpjpe": float(np.mean([mx.mpjpe(r.noisy, r.clean) for r in ok])),
        "output_mpjpe": float(np.mean([mx.mpjpe(o, r.clean)
                                       for o, r in zip(outs, ok)])),
        "input_jitter": float(np.mean([mx.jitter(r.noisy) for r in ok])),
        "output_jitter": float(np.mean([mx.jitter(o) for o in outs])),
        "output_skate": float(np.mean([mx.foot_skate_ratio(o) for o in outs])),
    }
    if len(ok) >= 32:
        clean = [r.clean for r in ok]
        report["fmd_noisy"] = mx.fmd([r.noisy for r in ok], clean)
        report["fmd_output"] = mx.fmd(outs, clean)
    return report


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--model", required=True)
    ap.add_argument("--out", required=True)
    ap.add_argument("--count", type=int, default=50)
    ap.add_argument("--noise-std", type=float, default=0.05)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workers", type=int, default=None)
    ap.add_argument("--completion-count", type=int, default=16)
    args = ap.parse_args()

    params = load_params(args.model)
    config = OptimConfig(steps=args.steps, batch=1)
    motions = held_out(args.count, args.seed)

    records = protocols.refine_protocol(params, motions, args.noise_std,
                                        config, seed=args.seed,
                                        workers=args.workers)
    refine = refinement_report(records)
    print("refinement:", json.dumps(refine, indent=2))

    completion_inputs = motions[:args.completion_count]
    completed = protocols.refine_protocol(
        params, completion_inputs, 0.0, config, seed=args.seed + 1,
        observe="pelvis:x,lfoot:x,rfoot:x", workers=args.workers)
    ok = [r for r in completed if not r.result.aborted]
    completion = {
        "count": len(ok),
        "observed_mpjpe_cm": float(np.mean(
            [100 * r.result.final_components.get("pose", np.nan)
             for r in ok])),
        "output_skate": float(np.mean(
            [mx.foot_skate_ratio(r.result.motion) for r in ok])),
        "output_jitter": float(np.mean(
            [mx.jitter(r.result.motion) for r in ok])),
    }
    print("completion:", json.dumps(completion, indent=2))

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(
        {"refinement": refine, "completion": completion}, indent=2) + "\n")
    save_mbin(out / "refined.mbin",
              [r.result.motion for r in records if not r.result.aborted])
    print(f"report written to {out / 'report.json'}")


if __name__ == "__main__":
    main()
