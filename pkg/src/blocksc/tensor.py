"""Dense float64 tensor ops with hand-written vector-Jacobian products.

Tensors are plain C-contiguous float64 numpy arrays.  Every forward op
here has a companion ``*_vjp`` that maps (inputs, output, cotangent) to
one cotangent per input, so a single application of the sparse-coding
iteration map can be differentiated w.r.t. its code matrix and the
network parameters without a general autograd graph.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import linalg as _sla


class DimensionError(ValueError):
    """Operand shapes are incompatible with the requested op."""


class UnsupportedKernelError(ValueError):
    """conv2d only supports 3x3 kernels."""


class FactorizationError(RuntimeError):
    """Cholesky failed; ``pivot`` is the 1-based failing leading minor."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


def as_tensor(x) -> np.ndarray:
    """Coerce to a C-contiguous float64 array and reject non-finite entries."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite entries")
    return arr


# ---------------------------------------------------------------------------
# matmul


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product a @ b for 2-d operands."""
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(
            f"matmul: cannot multiply {a.shape} by {b.shape}")
    return a @ b


def matmul_vjp(a, b, out, cot):
    """Cotangents (cot @ b.T, a.T @ cot)."""
    return cot @ b.T, a.T @ cot


# ---------------------------------------------------------------------------
# conv2d: 3x3 kernels, stride 1, zero padding 1, "same" output size


def _im2col3(x: np.ndarray) -> np.ndarray:
    """(c, h, w) -> (c*9, h*w) patch matrix for a 3x3/pad-1 window."""
    c, h, w = x.shape
    xp = np.zeros((c, h + 2, w + 2), dtype=x.dtype)
    xp[:, 1:-1, 1:-1] = x
    cols = np.empty((c, 9, h, w), dtype=x.dtype)
    k = 0
    for ki in range(3):
        for kj in range(3):
            cols[:, k] = xp[:, ki:ki + h, kj:kj + w]
            k += 1
    return cols.reshape(c * 9, h * w)


def _col2im3(cols: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    """Adjoint of _im2col3: scatter-add patch columns back to an image."""
    xp = np.zeros((c, h + 2, w + 2), dtype=cols.dtype)
    cols = cols.reshape(c, 9, h, w)
    k = 0
    for ki in range(3):
        for kj in range(3):
            xp[:, ki:ki + h, kj:kj + w] += cols[:, k]
            k += 1
    return xp[:, 1:-1, 1:-1]


def conv2d(x: np.ndarray, weight: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Cross-correlate (c_in,h,w) with (c_out,c_in,3,3) weights, zero pad 1.

    Output spatial size equals input size, so the denoiser stays an
    endomorphism of d x N blocks.
    """
    if weight.ndim != 4 or weight.shape[2:] != (3, 3):
        raise UnsupportedKernelError(
            f"conv2d: kernel must be 3x3, got {weight.shape}")
    if x.ndim != 3 or x.shape[0] != weight.shape[1]:
        raise DimensionError(
            f"conv2d: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise DimensionError(
            f"conv2d: bias {bias.shape} incompatible with weight {weight.shape}")
    c_out = weight.shape[0]
    _, h, w = x.shape
    cols = _im2col3(x)
    out = weight.reshape(c_out, -1) @ cols + bias[:, None]
    return out.reshape(c_out, h, w)


def conv2d_vjp(x, weight, bias, out, cot):
    """Cotangents w.r.t. (x, weight, bias)."""
    c_out, c_in = weight.shape[:2]
    _, h, w = x.shape
    cot_mat = cot.reshape(c_out, h * w)
    cols = _im2col3(x)
    cot_weight = (cot_mat @ cols.T).reshape(c_out, c_in, 3, 3)
    cot_bias = cot_mat.sum(axis=1)
    cot_cols = weight.reshape(c_out, -1).T @ cot_mat
    cot_x = _col2im3(cot_cols, c_in, h, w)
    return cot_x, cot_weight, cot_bias


# ---------------------------------------------------------------------------
# elementwise


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_vjp(x, out, cot):
    # subgradient 0 at the kink
    return (cot * (x > 0.0),)


def soft_threshold(x: np.ndarray, tau: float) -> np.ndarray:
    """Elementwise shrinkage sign(x) * max(|x| - tau, 0)."""
    if tau <= 0:
        raise ValueError(f"soft_threshold: tau must be positive, got {tau}")
    return np.sign(x) * np.maximum(np.abs(x) - tau, 0.0)


def soft_threshold_vjp(x, tau, out, cot):
    """Cotangents w.r.t. (x, tau); subgradient 0 on the |x| = tau boundary."""
    mask = np.abs(x) > tau
    cot_x = cot * mask
    cot_tau = float(-(np.sign(x) * mask * cot).sum())
    return cot_x, cot_tau


# ---------------------------------------------------------------------------
# SPD solve


def chol_factor(a: np.ndarray, sym_tol: float = 1e-10):
    """Cholesky-factor a symmetric positive definite matrix.

    The returned handle is reusable across chol_solve calls, so callers
    that solve against the same matrix repeatedly factor once.
    """
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"chol_factor: matrix must be square, got {a.shape}")
    if not np.allclose(a, a.T, atol=sym_tol * max(1.0, np.abs(a).max())):
        raise FactorizationError("matrix is not symmetric")
    try:
        return _sla.cho_factor(a, lower=True)
    except _sla.LinAlgError as exc:  # extract the failing leading minor
        m = re.search(r"(\d+)-th leading minor", str(exc))
        pivot = int(m.group(1)) if m else None
        raise FactorizationError(str(exc), pivot=pivot) from exc


def chol_solve(a, b, factor=None) -> np.ndarray:
    """Solve A X = B for SPD A via Cholesky; pass ``factor`` to reuse one."""
    if factor is None:
        factor = chol_factor(a)
    if b.shape[0] != a.shape[0]:
        raise DimensionError(
            f"chol_solve: rhs {b.shape} incompatible with matrix {a.shape}")
    return _sla.cho_solve(factor, b)


def chol_solve_vjp(a, b, out, cot, factor=None):
    """Cotangents w.r.t. (A, B): (sym(-A^-1 cot X^T), A^-1 cot)."""
    cot_b = chol_solve(a, cot, factor=factor)
    g = -cot_b @ out.T
    cot_a = 0.5 * (g + g.T)
    return cot_a, cot_b


# ---------------------------------------------------------------------------
# DiffOp registry and a thin chain tape


@dataclass(frozen=True)
class DiffOp:
    """A pure forward function paired with its hand-written VJP.

    ``vjp(*inputs, out, cot)`` returns one cotangent per input and is
    linear in ``cot``.
    """

    name: str
    forward: Callable
    vjp: Callable


OPS = {
    op.name: op
    for op in (
        DiffOp("matmul", matmul, matmul_vjp),
        DiffOp("conv2d", conv2d, conv2d_vjp),
        DiffOp("relu", relu, relu_vjp),
        DiffOp("soft_threshold", soft_threshold, soft_threshold_vjp),
        DiffOp("chol_solve", chol_solve, chol_solve_vjp),
    )
}


@dataclass
class Tape:
    """Records a chain of DiffOp applications for reverse sweeps.

    Each recorded op consumes the previous op's output as its first
    argument; remaining arguments are leaves.  ``backward`` returns the
    cotangent of the chain's first input plus per-record leaf cotangents,
    which is all the fixed 4-layer denoiser needs.
    """

    records: list = field(default_factory=list)

    def apply(self, op: DiffOp, *inputs) -> np.ndarray:
        out = op.forward(*inputs)
        self.records.append((op, inputs, out))
        return out

    def backward(self, cot: np.ndarray):
        leaf_cots = []
        for op, inputs, out in reversed(self.records):
            cots = op.vjp(*inputs, out, cot)
            cot = cots[0]
            leaf_cots.append(cots[1:])
        leaf_cots.reverse()
        return cot, leaf_cots
