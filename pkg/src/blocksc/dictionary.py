"""Fixed overcomplete dictionaries and classic sparse-coding baselines.

Provides greedy OMP (single and Gram-precomputed batch form), a FISTA
solver for the columnwise Lasso, and KSVD dictionary learning.  Besides
serving as comparison methods, OMP picks the shared support for the fast
solver path and FISTA is the convex oracle for the HQS equivalence checks.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as _sla

from .tensor import soft_threshold


class RankError(RuntimeError):
    """Selected Gram submatrix became singular at ``step``."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


@dataclass
class Dictionary:
    atoms: np.ndarray  # (d, M), unit-norm columns

    def __post_init__(self):
        self.atoms = np.ascontiguousarray(self.atoms, dtype=np.float64)
        if self.atoms.ndim != 2:
            raise ValueError("atoms must be a d x M matrix")
        norms = np.linalg.norm(self.atoms, axis=0)
        if np.abs(norms - 1.0).max() > 1e-12:
            raise ValueError("dictionary columns must have unit norm")
        if self.d > self.M:
            warnings.warn(f"dictionary is undercomplete (d={self.d} > M={self.M})")

    @property
    def d(self) -> int:
        return self.atoms.shape[0]

    @property
    def M(self) -> int:
        return self.atoms.shape[1]

    def restrict(self, support: "SupportSet") -> np.ndarray:
        return self.atoms[:, support.indices]


@dataclass
class SupportSet:
    indices: np.ndarray  # strictly increasing atom indices

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.intp)
        if idx.ndim != 1 or (len(idx) > 1 and np.any(np.diff(idx) <= 0)):
            raise ValueError("support indices must be strictly increasing")
        self.indices = idx

    @property
    def size(self) -> int:
        return len(self.indices)


def normalize_atoms(atoms: np.ndarray) -> np.ndarray:
    return atoms / np.maximum(np.linalg.norm(atoms, axis=0), 1e-300)


def mutual_coherence(atoms: np.ndarray) -> float:
    gram = np.abs(atoms.T @ atoms)
    np.fill_diagonal(gram, 0.0)
    return float(gram.max())


def decorrelate_atoms(atoms: np.ndarray, target: float = 0.3,
                      iters: int = 60) -> np.ndarray:
    """Push mutual coherence towards ``target`` by alternating projections.

    Clips Gram off-diagonals to the target band, projects back to rank d,
    and renormalizes; useful for generating incoherent test dictionaries.
    """
    d, M = atoms.shape
    A = normalize_atoms(np.asarray(atoms, dtype=np.float64))
    for _ in range(iters):
        gram = A.T @ A
        off = gram - np.diag(np.diag(gram))
        gram = np.clip(off, -target, target) + np.eye(M)
        w, V = np.linalg.eigh(gram)
        w = np.clip(w, 0.0, None)
        keep = np.argsort(w)[-d:]
        A = normalize_atoms((V[:, keep] * np.sqrt(w[keep])).T)
    return A


def omp(y: np.ndarray, D: Dictionary, s: int, eps: float = 1e-10):
    """Greedy orthogonal matching pursuit on a single signal.

    Picks argmax |<residual, atom>| (lowest index on ties), refits by
    least squares on the current support, and stops at s atoms or when
    the residual norm drops to eps.  Returns (SupportSet, coeffs) with
    coefficients aligned to the sorted support.
    """
    y = np.asarray(y, dtype=np.float64).ravel()
    if not (1 <= s <= D.d):
        raise ValueError(f"sparsity s must satisfy 1 <= s <= d, got {s}")
    residual = y.copy()
    selected: list[int] = []
    coeffs = np.zeros(0)
    for step in range(s):
        if np.linalg.norm(residual) <= eps:
            break
        corr = np.abs(D.atoms.T @ residual)
        corr[selected] = -np.inf
        selected.append(int(np.argmax(corr)))
        sub = D.atoms[:, selected]
        coeffs, _, rank, _ = np.linalg.lstsq(sub, y, rcond=None)
        if rank < len(selected):
            raise RankError(f"rank-deficient support at step {step}", step=step)
        residual = y - sub @ coeffs
    order = np.argsort(selected)
    support = SupportSet(np.asarray(selected, dtype=np.intp)[order])
    return support, coeffs[order] if len(selected) else coeffs


def _omp_gram_single(gram, dty, yty, s, eps, col=None):
    """Batch-OMP inner loop on precomputed Gram products for one column."""
    alpha0 = dty
    alpha = alpha0.copy()
    err2 = float(yty)
    selected: list[int] = []
    g = np.zeros(0)
    eps2 = eps * eps
    for step in range(s):
        if err2 <= eps2:
            break
        a = np.abs(alpha)
        a[selected] = -np.inf
        selected.append(int(np.argmax(a)))
        sub = gram[np.ix_(selected, selected)]
        try:
            factor = _sla.cho_factor(sub, lower=True)
        except _sla.LinAlgError as exc:
            raise RankError(
                f"singular Gram submatrix at step {step}"
                + (f" (column {col})" if col is not None else ""),
                step=step) from exc
        g = _sla.cho_solve(factor, alpha0[selected])
        alpha = alpha0 - gram[:, selected] @ g
        err2 = float(yty - alpha0[selected] @ g)
    order = np.argsort(selected)
    idx = np.asarray(selected, dtype=np.intp)[order]
    return idx, (g[order] if len(selected) else g)


def batch_omp(Y: np.ndarray, D: Dictionary, s: int, eps: float = 1e-10):
    """Columnwise OMP sharing precomputed D^T D and D^T Y.

    Matches the looped ``omp`` output to well below 1e-10 on generic data.
    """
    Y = np.asarray(Y, dtype=np.float64)
    if not (1 <= s <= D.d):
        raise ValueError(f"sparsity s must satisfy 1 <= s <= d, got {s}")
    gram = D.atoms.T @ D.atoms
    dty = D.atoms.T @ Y
    yty = (Y * Y).sum(axis=0)
    results = []
    for j in range(Y.shape[1]):
        idx, g = _omp_gram_single(gram, dty[:, j], yty[j], s, eps, col=j)
        results.append((SupportSet(idx), g))
    return results


def fista_lasso(Y: np.ndarray, D: Dictionary, mu: float, iters: int = 2000,
                tol: float = 1e-10) -> np.ndarray:
    """Minimize 0.5 ||Y - D G||_F^2 + mu ||G||_1 columnwise with FISTA.

    Step size 1/L with L the top eigenvalue of D^T D (power iteration);
    stops when the relative objective change drops below tol.
    """
    if mu <= 0:
        raise ValueError("mu must be positive")
    Y = np.asarray(Y, dtype=np.float64)
    if Y.ndim == 1:
        Y = Y[:, None]
    gram = D.atoms.T @ D.atoms
    dty = D.atoms.T @ Y
    L = _power_iteration_norm(gram)
    G = np.zeros((D.M, Y.shape[1]))
    Z = G.copy()
    t = 1.0
    prev_obj = _lasso_objective(Y, D.atoms, G, mu)
    for _ in range(iters):
        grad = gram @ Z - dty
        G_next = soft_threshold(Z - grad / L, mu / L)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        Z = G_next + ((t - 1.0) / t_next) * (G_next - G)
        G, t = G_next, t_next
        obj = _lasso_objective(Y, D.atoms, G, mu)
        if abs(prev_obj - obj) <= tol * max(abs(prev_obj), 1e-30):
            break
        prev_obj = obj
    return G


def _lasso_objective(Y, atoms, G, mu):
    r = Y - atoms @ G
    return 0.5 * float((r * r).sum()) + mu * float(np.abs(G).sum())


def _power_iteration_norm(gram, iters=100, tol=1e-12, seed=0):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=gram.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = gram @ v
        nrm = np.linalg.norm(w)
        if nrm == 0:
            return 1.0
        v = w / nrm
        lam_new = float(v @ (gram @ v))
        if abs(lam_new - lam) < tol * max(1.0, lam_new):
            lam = lam_new
            break
        lam = lam_new
    return max(lam * (1.0 + 1e-10), 1e-12)


def coding_error(X, atoms, codes) -> float:
    """Mean residual norm of the given coding."""
    resid = X - atoms @ codes
    return float(np.mean(np.linalg.norm(resid, axis=0)))


def ksvd(training: np.ndarray, M: int, s: int, sweeps: int,
         eps: float = 1e-10, seed: int = 0, mutual_thresh: float = 0.99,
         stop_error: float = 0.0):
    """KSVD dictionary learning on column-stacked training vectors.

    Alternates batch-OMP coding with per-atom rank-1 SVD updates.  Atoms
    that go unused, and near-duplicates of earlier atoms (|cos| above
    ``mutual_thresh``), are replaced by the worst-represented training
    vector.  Stops early once the mean residual drops below
    ``stop_error``.  Returns (Dictionary, per-sweep mean residual history).
    """
    X = np.asarray(training, dtype=np.float64)
    if X.ndim != 2:
        X = np.stack([np.asarray(v, dtype=np.float64) for v in training], axis=1)
    d, count = X.shape
    if count < M:
        raise ValueError(f"need at least M={M} training vectors, got {count}")
    rng = np.random.default_rng(seed)
    init_idx = rng.choice(count, size=M, replace=False)
    atoms = normalize_atoms(X[:, init_idx].copy())
    history = []
    for _ in range(sweeps):
        dico = Dictionary(atoms)
        codes = np.zeros((M, count))
        for j, (sup, g) in enumerate(batch_omp(X, dico, s, eps)):
            codes[sup.indices, j] = g
        for k in range(M):
            users = np.nonzero(codes[k] != 0.0)[0]
            if len(users) == 0:
                atoms[:, k] = _worst_represented(X, atoms, codes)
                continue
            # residual with atom k removed, restricted to its users
            E = X[:, users] - atoms @ codes[:, users] \
                + np.outer(atoms[:, k], codes[k, users])
            u, sv, vt = np.linalg.svd(E, full_matrices=False)
            atoms[:, k] = u[:, 0]
            codes[k, users] = sv[0] * vt[0]
        # clear near-duplicate atoms, as in reference KSVD implementations
        for k in range(M):
            overlap = np.abs(atoms[:, :k].T @ atoms[:, k])
            if overlap.size and overlap.max() > mutual_thresh:
                atoms[:, k] = _worst_represented(X, atoms, codes)
                codes[k, :] = 0.0
        atoms = normalize_atoms(atoms)
        history.append(coding_error(X, atoms, codes))
        if history[-1] < stop_error:
            break
    return Dictionary(normalize_atoms(atoms)), history


def _worst_represented(X, atoms, codes):
    resid = X - atoms @ codes
    worst = int(np.argmax((resid * resid).sum(axis=0)))
    v = X[:, worst]
    return v / max(np.linalg.norm(v), 1e-300)
