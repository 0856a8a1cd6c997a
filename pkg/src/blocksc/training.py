"""Adam optimizer, denoiser pretraining, and the shared end-to-end loop.

Training is deterministic given the master seed: batch order is derived
from (seed, epoch), gradients are accumulated in a fixed order, and
spectral normalization runs once after every optimizer step.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .denoiser import (DenoiserParams, ModelParams, ScalarParams, denoise,
                       denoise_vjp, init_denoiser, spectral_normalize)


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


class Adam:
    """Standard Adam over a dict of named parameter arrays (updated in place)."""

    def __init__(self, cfg: AdamConfig):
        self.cfg = cfg
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        cfg = self.cfg
        self.t += 1
        b1t = 1.0 - cfg.beta1 ** self.t
        b2t = 1.0 - cfg.beta2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m += (1.0 - cfg.beta1) * (g - m)
            v += (1.0 - cfg.beta2) * (g * g - v)
            p[...] -= cfg.lr * (m / b1t) / (np.sqrt(v / b2t) + cfg.eps)

    def state_entries(self) -> dict:
        out = {"optimizer.t": np.float64(self.t)}
        for name, m in self.m.items():
            out[f"optimizer.m.{name}"] = m
        for name, v in self.v.items():
            out[f"optimizer.v.{name}"] = v
        return out

    def load_state_entries(self, entries: dict) -> None:
        self.t = int(entries.get("optimizer.t", 0))
        for key, arr in entries.items():
            if key.startswith("optimizer.m."):
                self.m[key[len("optimizer.m."):]] = np.array(arr)
            elif key.startswith("optimizer.v."):
                self.v[key[len("optimizer.v."):]] = np.array(arr)


class JsonlLogger:
    def __init__(self, path=None):
        self._fh = open(path, "a", encoding="utf-8") if path else None

    def write(self, record: dict) -> None:
        if self._fh is not None:
            self._fh.write(json.dumps(record, sort_keys=True) + "\n")
            self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()


def _block_matrix(block) -> np.ndarray:
    return block.matrix if hasattr(block, "matrix") else np.asarray(block)


def _epoch_order(count, seed, epoch):
    rng = np.random.default_rng((seed, 0xE90C, epoch))
    return rng.permutation(count)


def split_validation(pairs, val_fraction, seed):
    """Deterministic train/validation split; validation may be empty."""
    rng = np.random.default_rng((seed, 0x5917))
    order = rng.permutation(len(pairs))
    n_val = int(len(pairs) * val_fraction)
    val_idx = set(order[:n_val].tolist())
    train = [p for i, p in enumerate(pairs) if i not in val_idx]
    val = [p for i, p in enumerate(pairs) if i in val_idx]
    return train, val


@dataclass
class PretrainConfig:
    epochs: int = 150
    lr: float = 1e-3
    batch_size: int = 16
    hidden: int = 64
    seed: int = 0
    val_fraction: float = 0.1
    log_path: str | None = None


def pretrain(pairs, cfg: PretrainConfig,
             params0: DenoiserParams | None = None):
    """Train the denoiser alone on (noisy, clean) block pairs with Adam.

    Minimizes the batch-mean squared Frobenius error of the denoised
    block, applies spectral normalization after every step, and returns
    (best-validation params, per-epoch history).
    """
    if not pairs:
        raise ValueError("pretrain needs at least one (noisy, clean) pair")
    data = [(_block_matrix(a), _block_matrix(b)) for a, b in pairs]
    d = data[0][0].shape[0]
    params = params0.copy() if params0 is not None else init_denoiser(
        d, hidden=cfg.hidden, seed=cfg.seed)
    spectral_normalize(params)
    pdict = {f"denoiser.layer{i}.weight": w
             for i, w in enumerate(params.weights, start=1)}
    pdict.update({f"denoiser.layer{i}.bias": b
                  for i, b in enumerate(params.biases, start=1)})
    adam = Adam(AdamConfig(lr=cfg.lr))
    train, val = split_validation(data, cfg.val_fraction, cfg.seed)
    logger = JsonlLogger(cfg.log_path)

    def batch_loss_grads(batch):
        loss = 0.0
        grads = None
        for noisy, clean in batch:
            out = denoise(params, noisy)
            resid = out - clean
            loss += float((resid * resid).sum())
            _, g = denoise_vjp(params, noisy, 2.0 * resid / len(batch))
            if grads is None:
                grads = g
            else:
                for k in g:
                    grads[k] += g[k]
        return loss / len(batch), grads

    def eval_loss(blocks):
        total = 0.0
        for noisy, clean in blocks:
            resid = denoise(params, noisy) - clean
            total += float((resid * resid).sum())
        return total / len(blocks)

    best = params.copy()
    best_val = np.inf
    history = []
    for epoch in range(cfg.epochs):
        order = _epoch_order(len(train), cfg.seed, epoch)
        epoch_loss = 0.0
        steps = 0
        for start in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            t0 = time.perf_counter()
            loss, grads = batch_loss_grads(batch)
            adam.step(pdict, grads)
            spectral_normalize(params)
            epoch_loss += loss
            steps += 1
            logger.write({"engine": "pretrain", "epoch": epoch,
                          "step": adam.t, "loss": loss,
                          "wall_ms": 1e3 * (time.perf_counter() - t0)})
        val_loss = eval_loss(val) if val else epoch_loss / max(steps, 1)
        history.append({"epoch": epoch, "loss": epoch_loss / max(steps, 1),
                        "val_loss": val_loss})
        if val_loss < best_val:
            best_val = val_loss
            best = params.copy()
    logger.close()
    return best, history


@dataclass
class EndToEndConfig:
    epochs: int = 100
    lr: float = 1e-4
    batch_size: int = 16
    seed: int = 0
    val_fraction: float = 0.1
    log_path: str | None = None


def end_to_end_train(pairs, params0: ModelParams, cfg: EndToEndConfig,
                     block_grad_fn, infer_fn, engine: str,
                     adam: Adam | None = None, start_epoch: int = 0):
    """Shared minibatch loop for the unrolled and equilibrium engines.

    ``block_grad_fn(noisy, clean, params)`` returns (loss, grads dict,
    info dict); ``infer_fn(noisy, params)`` returns a reconstructed block
    for validation PSNR.  Divergent blocks (NaN/Inf gradients) are
    skipped and counted.  Returns (best params, history).
    """
    data = [(_block_matrix(a), _block_matrix(b)) for a, b in pairs]
    params = params0.copy()
    pdict = params.as_dict()
    adam = adam or Adam(AdamConfig(lr=cfg.lr))
    adam.cfg.lr = cfg.lr
    train, val = split_validation(data, cfg.val_fraction, cfg.seed)
    logger = JsonlLogger(cfg.log_path)

    def val_psnr():
        if not val:
            return None
        vals = []
        for noisy, clean in val:
            recon = infer_fn(noisy, params)
            mse = float(((recon - clean) ** 2).mean())
            vals.append(100.0 if mse == 0 else min(100.0, -10.0 * np.log10(mse)))
        return float(np.mean(vals))

    best = params.copy()
    best_psnr = -np.inf
    history = []
    skipped = 0
    for epoch in range(start_epoch, start_epoch + cfg.epochs):
        order = _epoch_order(len(train), cfg.seed, epoch)
        epoch_loss = 0.0
        steps = 0
        for start in range(0, len(train), cfg.batch_size):
            batch = [train[i] for i in order[start:start + cfg.batch_size]]
            t0 = time.perf_counter()
            loss = 0.0
            grads = None
            fwd_iters = bwd_iters = 0
            for noisy, clean in batch:
                try:
                    blk_loss, g, info = block_grad_fn(noisy, clean, params)
                except FloatingPointError:
                    skipped += 1
                    continue
                if not np.isfinite(blk_loss) or any(
                        not np.all(np.isfinite(v)) for v in g.values()):
                    skipped += 1
                    continue
                loss += blk_loss
                fwd_iters += info.get("fwd_iters", 0)
                bwd_iters += info.get("bwd_iters", 0)
                if grads is None:
                    grads = {k: v / len(batch) for k, v in g.items()}
                else:
                    for k in g:
                        grads[k] += g[k] / len(batch)
            if grads is None:
                continue
            adam.step(pdict, grads)
            spectral_normalize(params.denoiser)
            gnorm = float(np.sqrt(sum(float((g * g).sum())
                                      for g in grads.values())))
            loss /= max(len(batch), 1)
            epoch_loss += loss
            steps += 1
            logger.write({"engine": engine, "epoch": epoch, "step": adam.t,
                          "loss": loss, "fwd_iters": fwd_iters,
                          "bwd_iters": bwd_iters, "grad_norm": gnorm,
                          "wall_ms": 1e3 * (time.perf_counter() - t0)})
        psnr = val_psnr()
        history.append({"epoch": epoch, "loss": epoch_loss / max(steps, 1),
                        "val_psnr": psnr, "skipped": skipped})
        if psnr is None:
            best = params.copy()
        elif psnr > best_psnr:
            best_psnr = psnr
            best = params.copy()
    logger.close()
    return best, history, adam
