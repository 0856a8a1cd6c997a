"""Half-quadratic-splitting iteration maps over signal blocks.

The full scheme alternates a linear solve for the code matrix G, a
soft-threshold for the sparsity split V, and a denoiser call for the
structure split Z.  Substituting V and Z into the G-update collapses the
sweep into a single map

    G+ = ((1+b) D^T D + I)^-1 (D^T Y + b soft(G, mu/b) + b D^T N(D G))

whose fixed point the equilibrium engine solves.  The fast variant
restricts D to a shared support chosen by OMP on the block centroid and
drops the soft-threshold branch:

    Gs+ = ((1+b) Ds^T Ds + eps I)^-1 (Ds^T Y + b Ds^T N(Ds Gs))

(the eps ridge guards the identity-free matrix of the restricted scheme).
Both maps expose VJPs w.r.t. the input codes and all learnable
parameters, which the unrolled and implicit backward passes chain.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .denoiser import ModelParams, denoise, denoise_vjp
from .dictionary import Dictionary, SupportSet, omp
from .tensor import chol_factor, soft_threshold, soft_threshold_vjp
from scipy.linalg import cho_solve

FAST_RIDGE = 1e-8


class StaleContextError(RuntimeError):
    """The context factorization no longer matches the realized b."""


@dataclass
class HqsState:
    G: np.ndarray  # (M, N) codes
    V: np.ndarray  # (M, N) sparsity split
    Z: np.ndarray  # (d, N) denoiser split


@dataclass
class SolverContext:
    """Immutable per-(D, b) solve context with a cached factorization.

    ``mode`` is "full", "fast", or "l1" (denoiser branch disabled; used
    by the convex-oracle checks).  The D^T Y product is cached for the Y
    the context was built with.
    """

    D: np.ndarray
    b: float
    mu: float
    factor: tuple
    mode: str
    support: SupportSet | None = None
    _y_ref: np.ndarray | None = None
    _dty: np.ndarray | None = None

    @property
    def code_rows(self) -> int:
        return self.D.shape[1]

    def dty(self, Y: np.ndarray) -> np.ndarray:
        if self._y_ref is Y and self._dty is not None:
            return self._dty
        return self.D.T @ Y

    def check(self, params: ModelParams) -> None:
        if params.scalars.b != self.b:
            raise StaleContextError(
                f"context was factorized for b={self.b}, params have "
                f"b={params.scalars.b}; rebuild the context")


def _atoms(D) -> np.ndarray:
    return D.atoms if isinstance(D, Dictionary) else np.asarray(D, float)


def make_full_context(D, params: ModelParams,
                      Y: np.ndarray | None = None) -> SolverContext:
    atoms = _atoms(D)
    b = params.scalars.b
    A = (1.0 + b) * (atoms.T @ atoms) + np.eye(atoms.shape[1])
    ctx = SolverContext(atoms, b, params.scalars.mu, chol_factor(A), "full")
    if Y is not None:
        ctx._y_ref = Y
        ctx._dty = atoms.T @ Y
    return ctx


def make_fast_context(D, support: SupportSet, params: ModelParams,
                      Y: np.ndarray | None = None,
                      ridge: float = FAST_RIDGE) -> SolverContext:
    atoms = _atoms(D)
    if support.size > atoms.shape[0]:
        raise ValueError(
            f"fast solver needs |S| <= d, got {support.size} > {atoms.shape[0]}")
    sub = atoms[:, support.indices]
    b = params.scalars.b
    A = (1.0 + b) * (sub.T @ sub) + ridge * np.eye(support.size)
    ctx = SolverContext(sub, b, params.scalars.mu, chol_factor(A), "fast",
                        support=support)
    if Y is not None:
        ctx._y_ref = Y
        ctx._dty = sub.T @ Y
    return ctx


def make_l1_context(D, b: float, mu: float,
                    Y: np.ndarray | None = None) -> SolverContext:
    """Denoiser branch disabled: G+ = (D^T D + b I)^-1 (D^T Y + b soft(G, mu/b))."""
    atoms = _atoms(D)
    A = atoms.T @ atoms + b * np.eye(atoms.shape[1])
    ctx = SolverContext(atoms, b, mu, chol_factor(A), "l1")
    if Y is not None:
        ctx._y_ref = Y
        ctx._dty = atoms.T @ Y
    return ctx


# ---------------------------------------------------------------------------
# forward maps


def hqs_step_full(ctx: SolverContext, state: HqsState, Y: np.ndarray,
                  params: ModelParams) -> HqsState:
    """One full splitting sweep: G linear solve, V shrinkage, Z denoise."""
    ctx.check(params)
    b, mu = ctx.b, params.scalars.mu
    rhs = ctx.dty(Y) + b * state.V + b * (ctx.D.T @ state.Z)
    G = cho_solve(ctx.factor, rhs)
    V = soft_threshold(G, mu / b)
    Z = denoise(params.denoiser, ctx.D @ G)
    return HqsState(G, V, Z)


def iteration_map_full(ctx: SolverContext, G: np.ndarray, Y: np.ndarray,
                       params: ModelParams) -> np.ndarray:
    """Collapsed full map; exactly one denoiser call per application."""
    ctx.check(params)
    b, mu = ctx.b, params.scalars.mu
    nout = denoise(params.denoiser, ctx.D @ G)
    rhs = ctx.dty(Y) + b * soft_threshold(G, mu / b) + b * (ctx.D.T @ nout)
    return cho_solve(ctx.factor, rhs)


def iteration_map_fast(ctx: SolverContext, G: np.ndarray, Y: np.ndarray,
                       params: ModelParams) -> np.ndarray:
    """Support-restricted map; sparsity is structural, no shrinkage branch."""
    ctx.check(params)
    b = ctx.b
    nout = denoise(params.denoiser, ctx.D @ G)
    rhs = ctx.dty(Y) + b * (ctx.D.T @ nout)
    return cho_solve(ctx.factor, rhs)


def iteration_map_l1(ctx: SolverContext, G: np.ndarray,
                     Y: np.ndarray) -> np.ndarray:
    """Denoiser-disabled map used by the convex-oracle equivalence checks."""
    rhs = ctx.dty(Y) + ctx.b * soft_threshold(G, ctx.mu / ctx.b)
    return cho_solve(ctx.factor, rhs)


def iteration_map(ctx: SolverContext, G, Y, params) -> np.ndarray:
    if ctx.mode == "full":
        return iteration_map_full(ctx, G, Y, params)
    if ctx.mode == "fast":
        return iteration_map_fast(ctx, G, Y, params)
    raise ValueError(f"no learnable map for mode {ctx.mode!r}")


def map_vjp(ctx: SolverContext, G, Y, params, cot):
    if ctx.mode == "full":
        return map_vjp_full(ctx, G, Y, params, cot)
    if ctx.mode == "fast":
        return map_vjp_fast(ctx, G, Y, params, cot)
    raise ValueError(f"no VJP for mode {ctx.mode!r}")


# ---------------------------------------------------------------------------
# map VJPs


def map_vjp_full(ctx: SolverContext, G: np.ndarray, Y: np.ndarray,
                 params: ModelParams, cot: np.ndarray):
    """Cotangents of one full-map application.

    Returns (cot_G, grads) where grads carries the denoiser entries plus
    scalars.raw_b / scalars.raw_mu, chained through softplus.
    """
    ctx.check(params)
    b, mu = ctx.b, params.scalars.mu
    tau = mu / b
    T = ctx.D @ G
    nout = denoise(params.denoiser, T)
    S = soft_threshold(G, tau)
    rhs = ctx.dty(Y) + b * S + b * (ctx.D.T @ nout)
    G_next = cho_solve(ctx.factor, rhs)

    W = cho_solve(ctx.factor, cot)  # A is symmetric
    DW = ctx.D @ W

    # d(rhs)/d(G) through the shrinkage and denoiser branches
    cot_S_x, cot_tau = soft_threshold_vjp(G, tau, S, b * W)
    cot_T, grads = denoise_vjp(params.denoiser, T, b * DW)
    cot_G = cot_S_x + ctx.D.T @ cot_T

    # scalar b enters the matrix (1+b) D^T D + I and three rhs factors
    gram_Gnext = ctx.D.T @ (ctx.D @ G_next)
    cot_b = -float((W * gram_Gnext).sum())
    cot_b += float((W * S).sum()) + float((DW * nout).sum())
    cot_b += cot_tau * (-mu / (b * b))
    cot_mu = cot_tau / b

    chain_b, chain_mu = params.scalars.grad_chain()
    grads["scalars.raw_b"] = np.float64(cot_b * chain_b)
    grads["scalars.raw_mu"] = np.float64(cot_mu * chain_mu)
    return cot_G, grads


def map_vjp_fast(ctx: SolverContext, G: np.ndarray, Y: np.ndarray,
                 params: ModelParams, cot: np.ndarray):
    """Cotangents of one fast-map application (no mu dependence)."""
    ctx.check(params)
    b = ctx.b
    T = ctx.D @ G
    nout = denoise(params.denoiser, T)
    rhs = ctx.dty(Y) + b * (ctx.D.T @ nout)
    G_next = cho_solve(ctx.factor, rhs)

    W = cho_solve(ctx.factor, cot)
    DW = ctx.D @ W

    cot_T, grads = denoise_vjp(params.denoiser, T, b * DW)
    cot_G = ctx.D.T @ cot_T

    gram_Gnext = ctx.D.T @ (ctx.D @ G_next)
    cot_b = -float((W * gram_Gnext).sum()) + float((DW * nout).sum())

    chain_b, _ = params.scalars.grad_chain()
    grads["scalars.raw_b"] = np.float64(cot_b * chain_b)
    grads["scalars.raw_mu"] = np.float64(0.0)
    return cot_G, grads


# ---------------------------------------------------------------------------
# support selection and reconstruction


def select_support(Y, D: Dictionary, s: int, eps: float = 1e-10) -> SupportSet:
    """OMP support of the block centroid (column mean) spectrum."""
    mat = Y.matrix if hasattr(Y, "matrix") else np.asarray(Y, float)
    centroid = mat.mean(axis=1)
    support, _ = omp(centroid, D, s, eps)
    return support


def reconstruct(ctx: SolverContext, G: np.ndarray) -> np.ndarray:
    """Estimated clean block D G (or D_S G_S on the fast path)."""
    return ctx.D @ G


def initial_state(ctx: SolverContext, Y: np.ndarray) -> HqsState:
    """G = 0, V = 0, Z = Y: the denoiser sees the raw block first."""
    return HqsState(np.zeros((ctx.code_rows, Y.shape[1])),
                    np.zeros((ctx.code_rows, Y.shape[1])),
                    Y.copy())


def initial_codes(ctx: SolverContext, Y: np.ndarray) -> np.ndarray:
    return np.zeros((ctx.code_rows, Y.shape[1]))


def contraction_estimate(ctx: SolverContext, Y: np.ndarray,
                         params: ModelParams, pairs: int = 10,
                         seed: int = 0, scale: float = 1.0) -> float:
    """Empirical Lipschitz ratio of the map over random code pairs."""
    rng = np.random.default_rng(seed)
    shape = (ctx.code_rows, Y.shape[1])
    worst = 0.0
    for _ in range(pairs):
        G1 = scale * rng.normal(size=shape)
        G2 = scale * rng.normal(size=shape)
        num = np.linalg.norm(iteration_map(ctx, G1, Y, params)
                             - iteration_map(ctx, G2, Y, params))
        den = np.linalg.norm(G1 - G2)
        worst = max(worst, num / max(den, 1e-30))
    return worst
