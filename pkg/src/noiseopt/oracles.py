"""Finite-difference gradient oracles.

One scalar-valued harness per primitive (kinked primitives are sampled away
from their kinks so central differences are valid), plus whole-network and
full sampler-chain checks. Used by the gradcheck command and the test suite.
"""

from __future__ import annotations

import numpy as np

from . import tensorgrad as tg
from .denoiser import DenoiserSpec, init_params
from .diffusion import ddim_solve, denoise_fn, make_schedule


def _sample(rng, shape, low=-2.0, high=2.0):
    return rng.uniform(low, high, size=shape)


def _case_add(rng):
    b = tg.tensor(_sample(rng, (3, 4)))
    return (3, 4), lambda x: tg.tsum(tg.add(x, b))


def _case_sub(rng):
    b = tg.tensor(_sample(rng, (3, 4)))
    return (3, 4), lambda x: tg.tsum(tg.sub(x, b))


def _case_mul(rng):
    b = tg.tensor(_sample(rng, (3, 4)))
    return (3, 4), lambda x: tg.tsum(tg.mul(x, b))


def _case_smul(rng):
    c = float(rng.uniform(-3, 3))
    return (2, 5), lambda x: tg.tsum(tg.smul(x, c))


def _case_matmul_lhs(rng):
    b = tg.tensor(_sample(rng, (4, 3)))
    return (2, 4), lambda x: tg.tsum(tg.matmul(x, b))


def _case_matmul_rhs(rng):
    a = tg.tensor(_sample(rng, (3, 4)))
    return (4, 2), lambda x: tg.tsum(tg.matmul(a, x))


def _case_silu(rng):
    return (3, 3), lambda x: tg.tsum(tg.silu(x))


def _case_concat(rng):
    b = tg.tensor(_sample(rng, (2, 3)))
    return (2, 4), lambda x: tg.tsum(tg.square(tg.concat_last(x, b)))


def _case_reshape(rng):
    return (2, 6), lambda x: tg.tsum(tg.square(tg.reshape(x, (3, 4))))


def _case_sum(rng):
    return (4, 2), lambda x: tg.tsum(x)


def _case_mean(rng):
    return (4, 2), lambda x: tg.tmean(tg.square(x))


def _case_gather(rng):
    idx = rng.integers(0, 12, size=7)
    return (3, 4), lambda x: tg.tsum(tg.square(tg.gather(x, idx)))


def _case_pool(rng):
    return (3, 8), lambda x: tg.tsum(tg.square(tg.avg_pool_pairs(x)))


def _case_abs(rng):
    def fixup(arr):
        return np.where(np.abs(arr) < 0.1, arr + 0.5, arr)

    return (3, 4), lambda x: tg.tsum(tg.absolute(x)), fixup


def _case_square(rng):
    return (3, 4), lambda x: tg.tsum(tg.square(x))


def _case_min_const(rng):
    c = 0.25

    def fixup(arr):
        return np.where(np.abs(arr - c) < 0.1, arr + 0.3, arr)

    return (3, 4), lambda x: tg.tsum(tg.min_const(x, c)), fixup


def _case_sqrt(rng):
    return (3, 4), lambda x: tg.tsum(tg.sqrt(x)), None, (0.2, 3.0)


PRIMITIVE_CASES = {
    "add": _case_add,
    "subtract": _case_sub,
    "elementwise-multiply": _case_mul,
    "scalar-multiply": _case_smul,
    "matrix-multiply-lhs": _case_matmul_lhs,
    "matrix-multiply-rhs": _case_matmul_rhs,
    "silu": _case_silu,
    "concat-last-axis": _case_concat,
    "reshape": _case_reshape,
    "sum": _case_sum,
    "mean": _case_mean,
    "index-gather": _case_gather,
    "average-pool-2-frames": _case_pool,
    "absolute-value": _case_abs,
    "square": _case_square,
    "minimum-with-constant": _case_min_const,
    "sqrt": _case_sqrt,
}


def check_primitive(name: str, instances: int, seed0: int = 0,
                    step: float = 1e-5) -> float:
    """Max grad_check error over seeded random instances of one primitive."""
    worst = 0.0
    for k in range(instances):
        rng = np.random.default_rng([seed0, 1000 * k, hash(name) % 99991])
        case = PRIMITIVE_CASES[name](rng)
        shape, fn = case[0], case[1]
        fixup = case[2] if len(case) > 2 else None
        bounds = case[3] if len(case) > 3 else (-2.0, 2.0)
        arr = _sample(rng, shape, *bounds)
        if fixup is not None:
            arr = fixup(arr)
        worst = max(worst, tg.grad_check(fn, tg.tensor(arr), step=step))
    return worst


def _tiny_model(seed: int):
    spec = DenoiserSpec(d=6, frames=16, width=32, blocks=3, t_max=50)
    params = init_params(spec, seed=seed)
    rng = np.random.default_rng([seed, 77])
    params.tensors["out.w"] = rng.normal(0, 0.06,
                                         params.tensors["out.w"].shape)
    return params


def check_denoiser(instances: int, seed0: int = 0, step: float = 1e-5) -> float:
    """Gradient of a scalar of the network output w.r.t. its input."""
    from .denoiser import forward

    worst = 0.0
    for k in range(instances):
        params = _tiny_model(seed0 + k)
        rng = np.random.default_rng([seed0, k, 3])
        t = int(rng.integers(1, params.spec.t_max + 1))
        point = tg.tensor(rng.standard_normal((6, 16)))
        err = tg.grad_check(
            lambda x: tg.tmean(tg.square(forward(x, t, params))), point,
            step=step)
        worst = max(worst, err)
    return worst


def check_solver_chain(solver_steps: int, instances: int, seed0: int = 0,
                       step: float = 1e-4) -> float:
    """Gradient through the full sampler chain w.r.t. the initial noise."""
    worst = 0.0
    for k in range(instances):
        params = _tiny_model(seed0 + 7 * k)
        schedule = make_schedule(params.spec.t_max)
        fn = denoise_fn(params)

        def objective(latent):
            return tg.tmean(tg.square(ddim_solve(latent, solver_steps, fn,
                                                 schedule)))

        point = tg.tensor(
            np.random.default_rng([seed0, k, 9]).standard_normal((6, 16)))
        worst = max(worst, tg.grad_check(objective, point, step=step))
    return worst


def run_suite(instances: int = 20, seed: int = 0,
              chain_steps=(2, 5, 10)) -> dict[str, float]:
    """All oracle checks; mapping from check name to max relative error."""
    report = {}
    for name in PRIMITIVE_CASES:
        report[f"primitive/{name}"] = check_primitive(name, instances, seed)
    report["denoiser/forward"] = check_denoiser(instances, seed)
    for k in chain_steps:
        report[f"solver/chain-{k}"] = check_solver_chain(
            k, max(4, instances // 4), seed)
    return report
