"""Equilibrium engine: Anderson forward solve, implicit adjoint backward.

The forward pass finds g* = f(g*, Y) for the HQS iteration map.  The
backward pass never unrolls the forward trajectory: it seeds the adjoint
with D^T (D g* - x), solves the fixed point

    gamma = (df/dg)^T gamma + seed

with the same Anderson machinery (the transposed-Jacobian product is one
map VJP), and contracts gamma* against the parameter VJP.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anderson import AndersonConfig, DivergenceError, FixedPointReport, \
    anderson_solve
from .denoiser import ModelParams
from .dictionary import Dictionary
from .solver import (SolverContext, initial_codes, iteration_map,
                     make_fast_context, make_full_context, map_vjp,
                     reconstruct, select_support)
from .training import Adam, AdamConfig, EndToEndConfig, end_to_end_train


def deq_forward(ctx: SolverContext, Y: np.ndarray, params: ModelParams,
                cfg: AndersonConfig, callback=None) -> FixedPointReport:
    """Solve the code fixed point from g0 = 0."""
    g0 = initial_codes(ctx, Y)
    return anderson_solve(lambda g: iteration_map(ctx, g, Y, params),
                          g0, cfg, callback=callback)


def deq_backward(ctx: SolverContext, g_star: np.ndarray, Y: np.ndarray,
                 X: np.ndarray, params: ModelParams, cfg: AndersonConfig):
    """Implicit gradients of 0.5 ||D g* - x||^2 w.r.t. theta and (raw_b, raw_mu).

    Returns (grads dict, adjoint FixedPointReport).
    """
    seed = ctx.D.T @ (ctx.D @ g_star - X)

    def adjoint_map(gamma):
        cot_g, _ = map_vjp(ctx, g_star, Y, params, gamma)
        return cot_g + seed

    try:
        report = anderson_solve(adjoint_map, np.zeros_like(g_star), cfg)
    except DivergenceError as exc:
        raise DivergenceError(
            f"adjoint solve diverged at iteration {exc.iteration}; "
            "try a smaller beta or a larger ridge",
            iteration=exc.iteration) from exc
    _, grads = map_vjp(ctx, g_star, Y, params, report.solution)
    return grads, report


def deq_loss(ctx: SolverContext, g_star: np.ndarray, X: np.ndarray) -> float:
    resid = reconstruct(ctx, g_star) - X
    return 0.5 * float((resid * resid).sum())


@dataclass
class DeqTrainConfig:
    variant: str = "full"  # or "fast"
    anderson: AndersonConfig = field(default_factory=AndersonConfig)
    support_size: int = 10
    support_eps: float = 1e-10
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    val_fraction: float = 0.1
    log_path: str | None = None

    def __post_init__(self):
        if self.variant not in ("full", "fast"):
            raise ValueError(f"unknown variant {self.variant!r}")


def _context_for(D: Dictionary, Y: np.ndarray, params: ModelParams,
                 cfg) -> SolverContext:
    if cfg.variant == "fast":
        support = select_support(Y, D, cfg.support_size, cfg.support_eps)
        return make_fast_context(D, support, params, Y)
    return make_full_context(D, params, Y)


def deq_train(pairs, D: Dictionary, params0: ModelParams, cfg: DeqTrainConfig,
              adam: Adam | None = None, start_epoch: int = 0):
    """End-to-end training of the equilibrium model (full or fast variant).

    Returns (best params, history, optimizer) so training can resume.
    """

    def block_grad(noisy, clean, params):
        ctx = _context_for(D, noisy, params, cfg)
        fwd = deq_forward(ctx, noisy, params, cfg.anderson)
        grads, bwd = deq_backward(ctx, fwd.solution, noisy, clean, params,
                                  cfg.anderson)
        info = {"fwd_iters": fwd.iterations, "bwd_iters": bwd.iterations,
                "fwd_converged": fwd.converged}
        return deq_loss(ctx, fwd.solution, clean), grads, info

    def infer(noisy, params):
        ctx = _context_for(D, noisy, params, cfg)
        fwd = deq_forward(ctx, noisy, params, cfg.anderson)
        return reconstruct(ctx, fwd.solution)

    loop_cfg = EndToEndConfig(epochs=cfg.epochs, lr=cfg.lr,
                              batch_size=cfg.batch_size, seed=cfg.seed,
                              val_fraction=cfg.val_fraction,
                              log_path=cfg.log_path)
    return end_to_end_train(pairs, params0, loop_cfg, block_grad, infer,
                            engine=f"deq-{cfg.variant}", adam=adam,
                            start_epoch=start_epoch)
