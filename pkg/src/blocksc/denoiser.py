"""Learnable convolutional regularizer with spectral normalization.

A 4-layer CNN (channel plan d -> hidden -> hidden -> hidden -> d, 3x3
kernels, ReLU after the first three layers, linear output) that maps a
d x N signal block, viewed as an n x n image with d channels, back to a
d x N block.  Spectral normalization keeps every layer 1-Lipschitz so the
whole network is non-expansive, which is what the fixed-point solvers
lean on.  The positive penalty scalars of the splitting scheme live here
too, realized through softplus so they stay positive during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .tensor import OPS, Tape, conv2d, relu

_CONV = OPS["conv2d"]
_RELU = OPS["relu"]


def softplus(x):
    return float(np.logaddexp(0.0, x))


def inv_softplus(y: float) -> float:
    if y <= 0:
        raise ValueError("softplus output is strictly positive")
    return y + math.log1p(-math.exp(-y))


@dataclass
class ScalarParams:
    """Unconstrained penalty parameters; realized values are softplus(raw)."""

    raw_b: np.ndarray
    raw_mu: np.ndarray

    def __post_init__(self):
        self.raw_b = np.asarray(self.raw_b, dtype=np.float64).reshape(())
        self.raw_mu = np.asarray(self.raw_mu, dtype=np.float64).reshape(())

    @classmethod
    def from_values(cls, b: float, mu: float) -> "ScalarParams":
        return cls(np.float64(inv_softplus(b)), np.float64(inv_softplus(mu)))

    @property
    def b(self) -> float:
        return softplus(self.raw_b)

    @property
    def mu(self) -> float:
        return softplus(self.raw_mu)

    def grad_chain(self):
        """d(realized)/d(raw) factors for (b, mu)."""
        return float(expit(self.raw_b)), float(expit(self.raw_mu))


@dataclass
class DenoiserParams:
    weights: list  # 4 arrays (c_out, c_in, 3, 3)
    biases: list   # 4 arrays (c_out,)
    u: list        # power-iteration left vectors, one per layer
    v: list        # power-iteration right vectors, one per layer

    @property
    def d(self) -> int:
        return self.weights[0].shape[1]

    @property
    def hidden(self) -> int:
        return self.weights[0].shape[0]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams([w.copy() for w in self.weights],
                              [b.copy() for b in self.biases],
                              [u.copy() for u in self.u],
                              [v.copy() for v in self.v])


@dataclass
class ModelParams:
    """Everything the iteration map learns: CNN weights plus (b, mu)."""

    denoiser: DenoiserParams
    scalars: ScalarParams

    def as_dict(self) -> dict:
        """Live name -> array views, matching the checkpoint entry names."""
        out = {}
        for i, (w, b) in enumerate(zip(self.denoiser.weights,
                                       self.denoiser.biases), start=1):
            out[f"denoiser.layer{i}.weight"] = w
            out[f"denoiser.layer{i}.bias"] = b
        out["scalars.raw_b"] = self.scalars.raw_b
        out["scalars.raw_mu"] = self.scalars.raw_mu
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.denoiser.copy(),
                           ScalarParams(self.scalars.raw_b.copy(),
                                        self.scalars.raw_mu.copy()))


def channel_plan(d: int, hidden: int = 64):
    return [(hidden, d), (hidden, hidden), (hidden, hidden), (d, hidden)]


def init_denoiser(d: int, hidden: int = 64, seed: int = 0) -> DenoiserParams:
    """Fan-in-scaled uniform weights, zero biases, random power vectors."""
    rng = np.random.default_rng(seed)
    weights, biases, us, vs = [], [], [], []
    for c_out, c_in in channel_plan(d, hidden):
        bound = math.sqrt(6.0 / (c_in * 9))
        weights.append(rng.uniform(-bound, bound, size=(c_out, c_in, 3, 3)))
        biases.append(np.zeros(c_out))
        u = rng.normal(size=c_out)
        us.append(u / np.linalg.norm(u))
        v = rng.normal(size=c_in * 9)
        vs.append(v / np.linalg.norm(v))
    return DenoiserParams(weights, biases, us, vs)


def param_count(d: int, hidden: int = 64):
    """(weight count, bias count) for the 4-layer plan."""
    weights = sum(9 * c_out * c_in for c_out, c_in in channel_plan(d, hidden))
    biases = sum(c_out for c_out, _ in channel_plan(d, hidden))
    return weights, biases


def _patch_side(N: int) -> int:
    n = math.isqrt(N)
    if n * n != N:
        raise ValueError(f"block has N={N} columns, not a perfect square")
    return n


def denoise(params: DenoiserParams, block: np.ndarray,
            n: int | None = None) -> np.ndarray:
    """Apply the regularizer network to a d x N block."""
    d, N = block.shape
    n = _patch_side(N) if n is None else n
    if n * n != N:
        raise ValueError(f"N={N} does not match patch side n={n}")
    h = block.reshape(d, n, n)
    for i in range(3):
        h = relu(conv2d(h, params.weights[i], params.biases[i]))
    out = conv2d(h, params.weights[3], params.biases[3])
    return out.reshape(d, N)


def denoise_vjp(params: DenoiserParams, block: np.ndarray, cot: np.ndarray,
                n: int | None = None):
    """Reverse-mode of ``denoise``: returns (cot_block, grads dict).

    The spectral-normalization constant is treated as a constant here;
    gradients are w.r.t. the stored (already normalized) weights.
    """
    d, N = block.shape
    n = _patch_side(N) if n is None else n
    tape = Tape()
    h = block.reshape(d, n, n)
    for i in range(3):
        h = tape.apply(_CONV, h, params.weights[i], params.biases[i])
        h = tape.apply(_RELU, h)
    tape.apply(_CONV, h, params.weights[3], params.biases[3])
    cot_x, leaves = tape.backward(cot.reshape(d, n, n))
    grads = {}
    conv_leaves = [lv for lv in leaves if lv]  # relu records carry no leaves
    for i, (cw, cb) in enumerate(conv_leaves, start=1):
        grads[f"denoiser.layer{i}.weight"] = cw
        grads[f"denoiser.layer{i}.bias"] = cb
    return cot_x.reshape(d, N), grads


def estimated_spectral_norms(params: DenoiserParams) -> list:
    """Per-layer sigma estimates from the persisted power vectors."""
    out = []
    for w, u, v in zip(params.weights, params.u, params.v):
        wm = w.reshape(w.shape[0], -1)
        out.append(float(u @ (wm @ v)))
    return out


def spectral_normalize(params: DenoiserParams, iters: int = 1) -> DenoiserParams:
    """One power-iteration step per layer, then divide by max(1, sigma).

    Mutates the weights and the persisted (u, v) vectors in place and
    returns the same object.  Layers already inside the unit ball are
    left untouched.
    """
    for w, u, v in zip(params.weights, params.u, params.v):
        wm = w.reshape(w.shape[0], -1)
        for _ in range(iters):
            v_new = wm.T @ u
            nrm = np.linalg.norm(v_new)
            if nrm == 0.0:
                break
            v[:] = v_new / nrm
            u_new = wm @ v
            nrm = np.linalg.norm(u_new)
            if nrm == 0.0:
                break
            u[:] = u_new / nrm
        sigma = float(u @ (wm @ v))
        if sigma > 1.0:
            w /= sigma
    return params
