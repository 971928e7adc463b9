"""Contrastive training for the dual encoder: temperature-scaled InfoNCE
with a learnable logit scale, Adam updates, cosine learning-rate decay, and a
central-difference gradient checker used by the verification suite.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from .autodiff import (
    ContractError,
    ParameterError,
    ShapeError,
    Tape,
    Tensor,
    add,
    exp,
    log,
    matmul,
    mean,
    mul,
    scale,
    slice_,
    sub,
    sum_,
    swap_last,
)
from .encoders import DualEncoder, TokenSequence

SYMMETRIC = "symmetric_infonce"
PAPER_LITERAL = "paper_literal"


@dataclass
class TrainConfig:
    batch_size: int = 16
    epochs: int = 30
    base_lr: float = 1e-3
    seed: int = 0
    loss_mode: str = SYMMETRIC

    def __post_init__(self):
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.base_lr >= 0:
            raise ParameterError(f"base_lr must be >= 0, got {self.base_lr}")
        if self.loss_mode not in (SYMMETRIC, PAPER_LITERAL):
            raise ParameterError(f"unknown loss mode {self.loss_mode!r}")


def similarity_matrix(V, T) -> Tensor:
    """S[i][j] = dot(v_i, t_j) for two stacks of unit vectors."""
    V = V if isinstance(V, Tensor) else Tensor(V)
    T = T if isinstance(T, Tensor) else Tensor(T)
    if V.data.shape[0] != T.data.shape[0]:
        raise ShapeError(
            f"similarity_matrix: {V.data.shape[0]} image vs "
            f"{T.data.shape[0]} text vectors"
        )
    return matmul(V, swap_last(T))


def _log_sum_exp_rows(z: Tensor) -> Tensor:
    """Row-wise logsumexp with a constant max shift (differentiable)."""
    m = z.data.max(axis=-1, keepdims=True)
    shifted = sub(z, m)
    lse = log(sum_(exp(shifted), axis=-1, keepdims=True))
    return add(lse, m)


def contrastive_loss(S, tau, mode: str = SYMMETRIC) -> Tensor:
    """Image-text contrastive objective over an n x n similarity matrix.

    symmetric_infonce: matched pairs on the diagonal, both softmax directions
    averaged. paper_literal: -log softmax summed over every (i, j) cell, kept
    for fidelity comparisons.
    """
    S = S if isinstance(S, Tensor) else Tensor(S)
    n, m = S.data.shape
    if n != m:
        raise ShapeError(f"contrastive loss needs a square matrix, got {S.data.shape}")
    if isinstance(tau, Tensor):
        if not float(tau.data) > 0:
            raise ParameterError(f"temperature must be positive, got {float(tau.data)}")
        z = mul(S, _reciprocal(tau))
    else:
        if not tau > 0:
            raise ParameterError(f"temperature must be positive, got {tau}")
        z = scale(S, 1.0 / tau)
    if mode == PAPER_LITERAL:
        lse = _log_sum_exp_rows(z)  # (n, 1)
        return sub(scale(sum_(lse), float(n)), sum_(z))
    if mode != SYMMETRIC:
        raise ParameterError(f"unknown loss mode {mode!r}")
    diag = slice_(z, (np.arange(n), np.arange(n)))
    row = sub(mean(_log_sum_exp_rows(z)), mean(diag))
    col = sub(mean(_log_sum_exp_rows(swap_last(z))), mean(diag))
    return scale(add(row, col), 0.5)


def _reciprocal(t: Tensor) -> Tensor:
    from .autodiff import div

    return div(Tensor(np.ones(())), t)


def scaled_logits(S: Tensor, logit_scale: Tensor) -> Tensor:
    """S / tau with tau = 1/exp(s); differentiable in the scale parameter."""
    return mul(S, exp(logit_scale))


@dataclass
class OptimizerState:
    """Adam accumulators, one pair of moment arrays per parameter."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params: dict[str, Tensor], lr: float):
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1**t)
            vhat = self.v[name] / (1 - b2**t)
            # keep 0-d params as ndarrays; plain subtraction would decay
            # them to numpy scalars
            p.data = np.asarray(p.data - lr * mhat / (np.sqrt(vhat) + self.eps))

    def zero_grads(self, params: dict[str, Tensor]):
        for p in params.values():
            p.grad = None


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """lr(0) = base_lr, lr(total) = 0, half-cosine in between."""
    if total_steps <= 0:
        return base_lr
    frac = min(max(step / total_steps, 0.0), 1.0)
    return base_lr * 0.5 * (1.0 + np.cos(np.pi * frac))


def warmup_cosine_lr(step: int, total_steps: int, base_lr: float,
                     warmup_frac: float = 0.1) -> float:
    """Linear warmup over the first warmup_frac of steps, then the cosine
    decay. Jumping straight to base_lr right after init regularly strands
    small contrastive models near the uniform-softmax saddle."""
    warm = max(1, int(total_steps * warmup_frac))
    if step < warm:
        return base_lr * (step + 1) / warm
    return cosine_lr(step - warm, total_steps - warm, base_lr)


def batch_loss(dual: DualEncoder, seqs, tiles, mode: str = SYMMETRIC) -> Tensor:
    """Forward both encoders on a paired batch and return the scalar loss."""
    T, _ = dual.encode_text(seqs)
    V, _ = dual.encode_image(tiles)
    S = similarity_matrix(V, T)
    z = scaled_logits(S, dual.logit_scale)
    return contrastive_loss(z, 1.0, mode)


def make_batches(items, batch_size: int, rng, key=None):
    """Seeded shuffle into batches, skipping in-batch duplicate keys."""
    order = list(rng.permutation(len(items)))
    batches, cur, keys = [], [], set()
    deferred = []
    for i in order:
        k = key(items[i]) if key else i
        if k in keys:
            deferred.append(i)
            continue
        cur.append(i)
        keys.add(k)
        if len(cur) == batch_size:
            batches.append([items[j] for j in cur])
            cur, keys = [], set()
    for i in deferred:
        cur.append(i)
        if len(cur) == batch_size:
            batches.append([items[j] for j in cur])
            cur = []
    if cur:
        batches.append([items[j] for j in cur])
    return batches


def train_epoch(batches, dual: DualEncoder, opt: OptimizerState, config: TrainConfig,
                total_steps: int, mode: str | None = None) -> dict:
    """One pass over prepared (seqs, tiles) batches; returns epoch metrics."""
    if not batches:
        raise ContractError("empty corpus: no batches to train on")
    mode = mode or config.loss_mode
    params = dual.parameters()
    losses = []
    lr = config.base_lr
    for seqs, tiles in batches:
        lr = warmup_cosine_lr(opt.step_count, total_steps, config.base_lr)
        opt.zero_grads(params)
        with Tape() as tape:
            loss = batch_loss(dual, seqs, tiles, mode)
            tape.backward(loss)
        if lr > 0:
            opt.step(params, lr)
        else:
            opt.step_count += 1
        dual.clamp_logit_scale()
        losses.append(loss.item())
    return {"mean_loss": float(np.mean(losses)), "lr": float(lr)}


def train(records, dual: DualEncoder, vocab, config: TrainConfig, modality: str,
          log_file=None) -> list[dict]:
    """Full training loop over SceneRecord-like items carrying .text and a
    tile raster per modality; returns the per-epoch metric dicts."""
    from .encoders import tokenize

    if not records:
        raise ContractError("empty corpus")
    owns_log = isinstance(log_file, (str, os.PathLike))
    if owns_log:
        log_file = open(log_file, "w")
    if log_file is not None:
        log_file.write("epoch\tmean_loss\tlr\twallclock_s\n")
    rng = np.random.default_rng(config.seed)
    seq_cache = [tokenize(r.text, vocab, dual.config) for r in records]
    tile_cache = [r.tile(modality) for r in records]
    items = list(range(len(records)))
    steps_per_epoch = int(np.ceil(len(items) / config.batch_size))
    total_steps = steps_per_epoch * config.epochs
    opt = OptimizerState()
    history = []
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        idx_batches = make_batches(
            items, config.batch_size, rng, key=lambda i: (records[i].lat, records[i].lon)
        )
        batches = [
            ([seq_cache[i] for i in b], np.stack([tile_cache[i] for i in b]))
            for b in idx_batches
        ]
        metrics = train_epoch(batches, dual, opt, config, total_steps)
        wall = time.perf_counter() - t0
        row = {"epoch": epoch, **metrics, "wallclock_s": wall}
        history.append(row)
        if log_file is not None:
            log_file.write(
                f"{epoch}\t{metrics['mean_loss']:.6f}\t{metrics['lr']:.8f}\t{wall:.2f}\n"
            )
            log_file.flush()
    if owns_log:
        log_file.close()
    return history


def gradient_check(dual: DualEncoder, seqs, tiles, h: float = 1e-5,
                   rtol: float = 1e-4, samples_per_tensor: int = 25,
                   mode: str = SYMMETRIC, seed: int = 0) -> dict:
    """Compare tape gradients of the batch loss with central finite
    differences on sampled entries of every trainable tensor."""
    params = dual.parameters()
    for p in params.values():
        p.grad = None
    with Tape() as tape:
        loss = batch_loss(dual, seqs, tiles, mode)
        tape.backward(loss)
    analytic = {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for k, p in params.items()}

    def eval_loss():
        return batch_loss(dual, seqs, tiles, mode).item()

    rng = np.random.default_rng(seed)
    report = {}
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if n <= samples_per_tensor else rng.choice(
            n, samples_per_tensor, replace=False
        )
        max_err = 0.0
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            up = eval_loss()
            flat[i] = orig - h
            down = eval_loss()
            flat[i] = orig
            fd = (up - down) / (2 * h)
            an = analytic[name].reshape(-1)[i]
            denom = max(abs(fd), abs(an), 1e-6)
            max_err = max(max_err, abs(fd - an) / denom)
        report[name] = {"max_rel_err": max_err, "ok": max_err < rtol}
        worst = max(worst, max_err)
    return {"groups": report, "max_rel_err": worst, "ok": worst < rtol,
            "rtol": rtol, "h": h}
