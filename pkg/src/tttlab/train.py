"""Outer-loop optimization: AdamW with warmup+cosine over the meta objective.

Training optimizes every parameter — including the fast-weight
initialization — either through the static next-token loss or through the
fully unrolled inner loop (gradients of gradients).  Runs are deterministic
given the seed.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from . import ttt as ttt_mod
from .model import ModelSpec, ParamSet, build_model
from .tensor import Tensor, UnreachableParameterWarning


class DivergenceError(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step}: loss {loss}")
        self.step = step
        self.loss = loss


@dataclass
class TrainRecipe:
    peak_lr: float = 5e-3
    warmup_fraction: float = 0.10
    min_lr: float = 1e-5
    batch_tokens: int = 1024
    total_tokens: int = 102400
    seed: int = 0
    objective: str = "naive"  # naive | e2e
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 0.1
    clip_norm: float = 1.0

    @property
    def steps(self):
        if self.total_tokens % self.batch_tokens != 0:
            raise ValueError(
                f"total_tokens {self.total_tokens} not divisible by batch_tokens {self.batch_tokens}"
            )
        return self.total_tokens // self.batch_tokens

    def validate(self):
        if self.objective not in ("naive", "e2e"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.peak_lr <= 0 or self.batch_tokens < 1:
            raise ValueError("peak_lr must be positive, batch_tokens >= 1")
        _ = self.steps
        return self


def lr_at(step, recipe: TrainRecipe):
    """Linear 0→peak over the first warmup fraction, then cosine to min_lr."""
    steps = recipe.steps
    if not 0 <= step < steps:
        raise ValueError(f"step {step} outside [0, {steps})")
    warm = recipe.warmup_fraction * steps
    if step < warm:
        return recipe.peak_lr * step / warm
    progress = (step - warm) / (steps - warm)
    return recipe.min_lr + (recipe.peak_lr - recipe.min_lr) * (1 + np.cos(np.pi * progress)) / 2


class AdamW:
    """Decoupled weight decay; moments in float64; fixed update order."""

    def __init__(self, names, params, beta1=0.9, beta2=0.95, weight_decay=0.1,
                 clip_norm=1.0, eps=1e-8):
        self.names = list(names)
        self.params = params  # dict name -> Tensor, updated in place
        self.beta1, self.beta2 = beta1, beta2
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.eps = eps
        self.t = 0
        self.m = {n: np.zeros(params[n].shape) for n in self.names}
        self.v = {n: np.zeros(params[n].shape) for n in self.names}

    def step(self, grads, lr):
        gs = {n: np.asarray(g) for n, g in zip(self.names, grads)}
        if self.clip_norm:
            gn = np.sqrt(sum(float((g * g).sum()) for g in gs.values()))
            if gn > self.clip_norm:
                scale = self.clip_norm / gn
                gs = {n: g * scale for n, g in gs.items()}
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for n in self.names:
            g = gs[n]
            self.m[n] = self.beta1 * self.m[n] + (1 - self.beta1) * g
            self.v[n] = self.beta2 * self.v[n] + (1 - self.beta2) * g * g
            mhat = self.m[n] / c1
            vhat = self.v[n] / c2
            w = self.params[n]
            w.data[...] = w.data - lr * (mhat / (np.sqrt(vhat) + self.eps)
                                         + self.weight_decay * w.data)


def _objective(params, batch, spec, cfg, objective):
    if objective == "e2e":
        return ttt_mod.loss_e2e(params, batch, spec, cfg)
    return ttt_mod.loss_naive(params, batch, spec)


def _optimize(params, spec, cfg, recipe, corpus, curve):
    recipe.validate()
    corpus = np.asarray(corpus)
    if corpus.ndim != 2:
        raise ValueError("corpus must be a (n_sequences, T+1) token array")
    seq_tokens = corpus.shape[1] - 1
    per_step = max(1, recipe.batch_tokens // seq_tokens)
    rng = np.random.default_rng(recipe.seed)
    names = sorted(params.entries)
    opt = AdamW(names, params.entries, recipe.adam_beta1, recipe.adam_beta2,
                recipe.weight_decay, recipe.clip_norm)
    for step in range(recipe.steps):
        lr = lr_at(step, recipe)
        idx = rng.integers(0, corpus.shape[0], size=per_step)
        batch = corpus[idx]
        loss = _objective(params, batch, spec, cfg, recipe.objective)
        val = loss.item()
        if not np.isfinite(val) or val > 20.0:
            raise DivergenceError(step, val)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UnreachableParameterWarning)
            grads = T.grad(loss, [params.entries[n] for n in names])
        opt.step([g.data for g in grads], lr)
        curve.append((step, (step + 1) * recipe.batch_tokens, lr, val))
    return params


def train_run(spec: ModelSpec, cfg, recipe: TrainRecipe, corpus):
    """Train from scratch; returns (ParamSet, loss curve rows)."""
    params = build_model(spec, seed=recipe.seed)
    curve = []
    _optimize(params, spec, cfg, recipe, corpus, curve)
    return params, curve


def finetune_run(params: ParamSet, spec, cfg, recipe: TrainRecipe, corpus):
    """Continue training (e.g. at a longer context) with a restarted schedule.

    The default fine-tuning token budget is 5% of the pre-training budget;
    callers encode that in recipe.total_tokens.  Zero steps returns an
    unchanged copy.
    """
    out = params.copy()
    curve = []
    if recipe.total_tokens == 0:
        return out, curve
    _optimize(out, spec, cfg, recipe, corpus, curve)
    return out, curve


def curve_to_csv(curve, path):
    with open(path, "w") as fh:
        fh.write("step,tokens,lr,loss\n")
        for step, tokens, lr, loss in curve:
            fh.write(f"{step},{tokens},{lr!r},{loss!r}\n")
