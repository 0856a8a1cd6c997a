"""Whole-cube denoising: split, per-block solve, reassemble.

A ModelBundle packages everything inference needs (dictionary, learned
parameters, engine choice, block size, solver budgets) and round-trips
through the DQC1 checkpoint container.  Blocks are independent, so the
solve step can fan out across threads without changing the result.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .anderson import AndersonConfig
from .checkpoint import load_checkpoint, pack_str, save_checkpoint, unpack_str
from .cubes import BlockSet, HyperCube, block_from_patch, reassemble, \
    split_blocks
from .denoiser import DenoiserParams, ModelParams, ScalarParams
from .deq import deq_forward
from .dictionary import Dictionary
from .solver import make_fast_context, make_full_context, reconstruct, \
    select_support
from .unroll import UnrollConfig, du_forward


@dataclass
class ModelBundle:
    dictionary: Dictionary
    params: ModelParams
    engine: str = "deq"  # "deq" or "du"
    variant: str = "fast"  # "full" or "fast"
    n: int = 60
    anderson: AndersonConfig = field(default_factory=AndersonConfig)
    K: int = 10
    support_size: int = 10
    support_eps: float = 1e-10
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.engine not in ("deq", "du"):
            raise ValueError(f"unknown engine {self.engine!r}")
        if self.variant not in ("full", "fast"):
            raise ValueError(f"unknown variant {self.variant!r}")


def _block_context(bundle: ModelBundle, Y: np.ndarray):
    if bundle.variant == "fast":
        support = select_support(Y, bundle.dictionary, bundle.support_size,
                                 bundle.support_eps)
        return make_fast_context(bundle.dictionary, support, bundle.params, Y)
    return make_full_context(bundle.dictionary, bundle.params, Y)


def denoise_block(bundle: ModelBundle, Y: np.ndarray,
                  iters_override: int | None = None) -> np.ndarray:
    """Solve one block and return the reconstructed d x N estimate."""
    ctx = _block_context(bundle, Y)
    if bundle.engine == "du":
        K = iters_override or bundle.K
        G, _ = du_forward(ctx, Y, bundle.params,
                          UnrollConfig(K=K, variant=bundle.variant))
    else:
        cfg = bundle.anderson
        if iters_override is not None:
            cfg = replace(cfg, max_iters=iters_override, tol=0.0)
        G = deq_forward(ctx, Y, bundle.params, cfg).solution
    return reconstruct(ctx, G)


def denoise_block_staged(bundle: ModelBundle, Y: np.ndarray,
                         budgets) -> dict:
    """Reconstructions at several iteration budgets from a single solve."""
    budgets = sorted(budgets)
    ctx = _block_context(bundle, Y)
    staged = {}
    if bundle.engine == "du":
        _, trace = du_forward(ctx, Y, bundle.params,
                              UnrollConfig(K=budgets[-1],
                                           variant=bundle.variant))
        for k in budgets:
            staged[k] = reconstruct(ctx, trace[k])
    else:
        cfg = replace(bundle.anderson, max_iters=budgets[-1], tol=0.0)
        want = set(budgets)

        def hook(k, g):
            if k in want:
                staged[k] = reconstruct(ctx, g)

        deq_forward(ctx, Y, bundle.params, cfg, callback=hook)
    return staged


def denoise_cube(bundle: ModelBundle, cube: HyperCube,
                 threads: int | None = None,
                 iters_override: int | None = None) -> HyperCube:
    """Full pipeline; the uncovered border keeps the input values.

    A cube smaller than one block comes back unchanged (zero tiles).
    """
    n = bundle.n
    if n > min(cube.height, cube.width):
        return HyperCube(cube.data.copy())
    blocks = split_blocks(cube, n)

    def solve(blk):
        est = denoise_block(bundle, blk.matrix, iters_override)
        return block_from_patch(est.reshape(blk.d, blk.n, blk.n), blk.origin)

    if threads and threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            solved = list(pool.map(solve, blocks.blocks))
    else:
        solved = [solve(blk) for blk in blocks.blocks]
    return reassemble(BlockSet(solved, blocks.cube_shape, n), base=cube)


def denoise_cube_traced(bundle: ModelBundle, cube: HyperCube,
                        budgets) -> dict:
    """denoise_cube at several iteration budgets sharing one solve."""
    n = bundle.n
    if n > min(cube.height, cube.width):
        return {int(k): HyperCube(cube.data.copy()) for k in budgets}
    blocks = split_blocks(cube, n)
    staged_blocks = {int(k): [] for k in budgets}
    for blk in blocks.blocks:
        staged = denoise_block_staged(bundle, blk.matrix, budgets)
        for k, est in staged.items():
            staged_blocks[k].append(
                block_from_patch(est.reshape(blk.d, blk.n, blk.n), blk.origin))
    return {k: reassemble(BlockSet(v, blocks.cube_shape, n), base=cube)
            for k, v in staged_blocks.items()}


# ---------------------------------------------------------------------------
# checkpoint round trip


def bundle_entries(bundle: ModelBundle, optimizer_entries=None,
                   extra_meta=None) -> dict:
    entries = {"dictionary.atoms": bundle.dictionary.atoms}
    den = bundle.params.denoiser
    for i in range(4):
        entries[f"denoiser.layer{i + 1}.weight"] = den.weights[i]
        entries[f"denoiser.layer{i + 1}.bias"] = den.biases[i]
        entries[f"denoiser.layer{i + 1}.u"] = den.u[i]
        entries[f"denoiser.layer{i + 1}.v"] = den.v[i]
    entries["scalars.raw_b"] = np.asarray(bundle.params.scalars.raw_b)
    entries["scalars.raw_mu"] = np.asarray(bundle.params.scalars.raw_mu)
    meta = {"engine": bundle.engine, "variant": bundle.variant,
            "n": bundle.n, "K": bundle.K,
            "support_size": bundle.support_size,
            "support_eps": bundle.support_eps,
            "anderson": {"m": bundle.anderson.m, "beta": bundle.anderson.beta,
                         "max_iters": bundle.anderson.max_iters,
                         "tol": bundle.anderson.tol,
                         "ridge": bundle.anderson.ridge}}
    meta.update(bundle.meta)
    if extra_meta:
        meta.update(extra_meta)
    entries["meta.json"] = pack_str(json.dumps(meta, sort_keys=True))
    if optimizer_entries:
        entries.update(optimizer_entries)
    return entries


def save_model_bundle(path, bundle: ModelBundle, optimizer_entries=None,
                      extra_meta=None) -> None:
    save_checkpoint(path, bundle_entries(bundle, optimizer_entries,
                                         extra_meta))


def load_model_bundle(path):
    """Returns (ModelBundle, optimizer entries dict)."""
    entries = load_checkpoint(path)
    meta = json.loads(unpack_str(entries["meta.json"]))
    weights, biases, us, vs = [], [], [], []
    for i in range(4):
        weights.append(entries[f"denoiser.layer{i + 1}.weight"])
        biases.append(entries[f"denoiser.layer{i + 1}.bias"])
        us.append(entries[f"denoiser.layer{i + 1}.u"])
        vs.append(entries[f"denoiser.layer{i + 1}.v"])
    params = ModelParams(
        DenoiserParams(weights, biases, us, vs),
        ScalarParams(entries["scalars.raw_b"].reshape(()),
                     entries["scalars.raw_mu"].reshape(())))
    a = meta.get("anderson", {})
    bundle = ModelBundle(
        dictionary=Dictionary(entries["dictionary.atoms"]),
        params=params,
        engine=meta.get("engine", "deq"),
        variant=meta.get("variant", "fast"),
        n=int(meta.get("n", 60)),
        anderson=AndersonConfig(m=int(a.get("m", 5)),
                                beta=float(a.get("beta", 1.0)),
                                max_iters=int(a.get("max_iters", 20)),
                                tol=float(a.get("tol", 1e-4)),
                                ridge=float(a.get("ridge", 1e-10))),
        K=int(meta.get("K", 10)),
        support_size=int(meta.get("support_size", 10)),
        support_eps=float(meta.get("support_eps", 1e-10)),
        meta={k: v for k, v in meta.items()
              if k not in ("engine", "variant", "n", "K", "support_size",
                           "support_eps", "anderson")})
    optimizer = {k: v for k, v in entries.items()
                 if k.startswith("optimizer.")}
    return bundle, optimizer
