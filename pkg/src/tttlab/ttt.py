"""Inner-loop test-time training and the naive / end-to-end objectives.

The sequence is consumed in mini-batches of `batch_b` target positions.
Every loss l_t inside batch i is computed with the fast weights W_{i-1}
held fixed (a pure function of the prefix), then one SGD step on the mean
gradient over the batch produces W_i.  The end-to-end loss sums l_t(W_{i-1})
over the whole sequence and stays differentiable through every inner step,
so outer optimization sees gradients of gradients.

Forward passes for a batch only cover the receptive field of its targets
(window size times depth for sliding attention), which keeps prefill cost
linear in sequence length for windowed models.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kvb as kvb_mod
from . import tensor as T
from .model import ModelSpec, ParamSet, forward_slice
from .tensor import Tensor


class TTTError(ValueError):
    pass


@dataclass
class TTTConfig:
    """Inner-loop hyper-parameters.

    eta: inner learning rate; batch_b: target tokens per inner step;
    truncate_below_fast: skip backward traversal below the lowest fast
    block when computing inner gradients (the gradient values are identical
    either way because fast weights only live in the trailing blocks; the
    flag controls traversal cost); reset_per_sequence: fast weights restart
    from the slow-side initialization for every sequence;
    checkpoint_steps: drop per-step activations and recompute them on the
    backward pass of the outer loss.
    """

    eta: float = 0.0
    batch_b: int = 1
    truncate_below_fast: bool = True
    reset_per_sequence: bool = True
    checkpoint_steps: bool = True

    def validate(self, spec: ModelSpec):
        if self.eta < 0:
            raise TTTError("eta must be >= 0")
        if self.batch_b < 1:
            raise TTTError("batch_b must be >= 1")
        if spec.attention == "sliding" and spec.window_k < self.batch_b:
            raise TTTError(
                f"window k={spec.window_k} must be >= ttt batch b={self.batch_b}"
            )
        return self


@dataclass
class InnerTrajectory:
    """Fast-weight snapshots W_0..W_n and the per-token losses l_t."""

    states: list
    per_token_losses: np.ndarray  # (B, T)

    def mean_loss(self):
        return float(self.per_token_losses.mean())


def inner_step(fast, grad_batch, eta):
    """W_i = W_{i-1} - eta * mean-gradient, leaving slow parameters alone."""
    if set(fast) != set(grad_batch):
        raise TTTError(f"fast/gradient name mismatch: {sorted(set(fast) ^ set(grad_batch))}")
    out = {}
    for name, w in fast.items():
        g = grad_batch[name]
        if g.shape != w.shape:
            raise TTTError(f"shape mismatch for {name}: {w.shape} vs {g.shape}")
        out[name] = w - eta * g
    return out


def _validate_tokens(tokens, spec):
    tokens = np.atleast_2d(np.asarray(tokens))
    if tokens.shape[1] < 2:
        raise TTTError("need BOS plus at least one target token")
    if not np.all(tokens[:, 0] == spec.bos_id):
        raise TTTError(f"sequences must start with BOS id {spec.bos_id}")
    return tokens


def _chunk_bounds(n_targets, b):
    """Target index ranges [s, e) over 1..n_targets, stepped by b."""
    bounds = []
    s = 1
    while s <= n_targets:
        e = min(s + b, n_targets + 1)
        bounds.append((s, e))
        s = e
    return bounds


def _chunk_losses(entries, spec, tokens, fast, s, e, ttt_hook=None):
    """Per-token CE for targets [s, e) using the current fast weights.

    Runs the forward only over the receptive field of the targets; position
    offsets keep RoPE phases absolute.
    """
    ctx = spec.receptive_context()
    in_start = 0 if ctx is None else max(0, (s - 1) - ctx)
    inputs = tokens[:, in_start : e - 1]
    logits = forward_slice(
        entries, spec, inputs, pos_offset=in_start, overrides=fast, ttt_hook=ttt_hook
    )
    need = e - s
    tail = T.narrow(logits, 1, logits.shape[1] - need, need)
    return T.cross_entropy(tail, tokens[:, s:e])


def _run_chunk(params, spec, cfg, tokens, fast, s, e, create_graph, do_step):
    """One mini-batch: losses with W_{i-1}, then the inner step to W_i."""
    needs_inner_graph = cfg.eta > 0.0 and do_step and fast
    if needs_inner_graph and not T.is_recording():
        # inner gradients need the forward graph even inside no_grad regions
        with T.forced_recording():
            losses, new_fast = _run_chunk(
                params, spec, cfg, tokens, fast, s, e, create_graph, do_step
            )
        return losses.detach(), {k: v.detach() for k, v in new_fast.items()}
    entries = params.entries
    kvb_like = spec.ttt_variant in ("kvb", "kvb_simplified")
    if kvb_like:
        collector = {}
        hook = kvb_mod.make_update_hook(
            spec, cfg, fast, n_chunk=e - s, collector=collector,
            create_graph=create_graph, do_step=do_step,
        )
        losses = _chunk_losses(entries, spec, tokens, fast, s, e, ttt_hook=hook)
        new_fast = dict(fast)
        new_fast.update(collector)
        return losses, new_fast
    losses = _chunk_losses(entries, spec, tokens, fast, s, e)
    if not do_step or cfg.eta == 0.0 or not fast:
        return losses, fast
    total = losses.sum()
    grads = T.grad(total, list(fast.values()), create_graph=create_graph)
    scale = 1.0 / (e - s)
    mean_grads = {name: g * scale for name, g in zip(fast, grads)}
    return losses, inner_step(fast, mean_grads, cfg.eta)


def _scan(params, tokens, spec, cfg, create_graph, record_states, static_chunk=None):
    """Shared chunked driver for prefill_with_ttt and loss_e2e."""
    cfg.validate(spec)
    tokens = _validate_tokens(tokens, spec)
    batch = tokens.shape[0]
    n_targets = tokens.shape[1] - 1
    fast0 = params.fast()
    static = cfg.eta == 0.0 or not fast0
    if static:
        fast = dict(fast0)  # states never diverge across sequences
        # no inner step will ever fire, so the chunking is free to follow
        # the cheapest evaluation schedule instead of the TTT batch size
        # (one whole-sequence forward unless the caller streams windows)
        cfg = TTTConfig(eta=0.0, batch_b=static_chunk or n_targets,
                        truncate_below_fast=cfg.truncate_below_fast,
                        reset_per_sequence=cfg.reset_per_sequence,
                        checkpoint_steps=cfg.checkpoint_steps)
    else:
        fast = {k: T.broadcast_to(v, (batch,) + v.shape) for k, v in fast0.items()}

    states = [_snapshot(fast)] if record_states else None
    loss_chunks = []
    fast_order = sorted(fast)
    # overridden fast entries never appear in the segment forward, and the
    # simplified output rule never touches the query projection
    skip = set(fast_order)
    if spec.ttt_variant == "kvb_simplified":
        skip |= {n for n in params.entries if n.endswith(".ttt.theta_q")}
    slow_order = sorted(set(params.entries) - skip)
    for s, e in _chunk_bounds(n_targets, cfg.batch_b):
        do_step = (e - s) == cfg.batch_b  # a partial final batch takes no step
        use_segments = create_graph and cfg.eta > 0.0 and fast0
        if use_segments:
            losses, fast = _checkpointed_chunk(
                params, spec, cfg, tokens, fast, s, e, do_step, slow_order, fast_order,
                retain=not cfg.checkpoint_steps,
            )
        else:
            losses, fast = _run_chunk(
                params, spec, cfg, tokens, fast, s, e, create_graph, do_step
            )
        if not create_graph:
            losses = losses.detach()
            fast = {k: v.detach() for k, v in fast.items()}
        loss_chunks.append(losses)
        if record_states and do_step and not static:
            states.append(_snapshot(fast))
    all_losses = T.concat(loss_chunks, axis=1) if len(loss_chunks) > 1 else loss_chunks[0]
    return all_losses, fast, states, tokens


def _snapshot(fast):
    return {k: v.data.copy() for k, v in fast.items()}


def _checkpointed_chunk(
    params, spec, cfg, tokens, fast, s, e, do_step, slow_order, fast_order, retain=False
):
    """Wrap one inner step in a recompute-on-backward segment."""
    slow_tensors = [params.entries[k] for k in slow_order]
    fast_tensors = [fast[k] for k in fast_order]
    n_slow = len(slow_tensors)
    meta_holder = []

    def segment(inputs):
        entries = dict(zip(slow_order, inputs[:n_slow]))
        f = dict(zip(fast_order, inputs[n_slow:]))
        seg_params = ParamSet(entries, set(entries), set())
        losses, new_fast = _run_chunk(
            seg_params, spec, cfg, tokens, f, s, e, create_graph=True, do_step=do_step
        )
        packed, meta = T.pack_tensors([losses] + [new_fast[k] for k in fast_order])
        meta_holder.append(meta)
        return packed

    packed = T.checkpoint(segment, slow_tensors + fast_tensors, retain=retain)
    unpacked = T.unpack_tensor(packed, meta_holder[0])
    losses = unpacked[0]
    new_fast = dict(zip(fast_order, unpacked[1:]))
    return losses, new_fast


# ---------------------------------------------------------------------------
# public objectives


def loss_naive(params: ParamSet, tokens, spec: ModelSpec):
    """Static next-token loss: mean of l_t(W_0) with no inner updates."""
    tokens = _validate_tokens(tokens, spec)
    logits = forward_slice(params.entries, spec, tokens[:, :-1])
    losses = T.cross_entropy(logits, tokens[:, 1:])
    return losses.mean()


def loss_e2e(params: ParamSet, tokens, spec: ModelSpec, cfg: TTTConfig):
    """Mean of l_t(W_{i-1}), differentiable through every inner step."""
    losses, _, _, _ = _scan(params, tokens, spec, cfg, create_graph=True, record_states=False)
    return losses.mean()


def per_token_losses(params, tokens, spec, cfg):
    """(B, T) array of l_t values under mini-batch TTT, without outer graph."""
    losses, _, _, _ = _scan(params, tokens, spec, cfg, create_graph=False, record_states=False)
    return losses.data


def prefill_with_ttt(params: ParamSet, tokens, spec: ModelSpec, cfg: TTTConfig):
    """Consume the context with mini-batch TTT.

    Returns (InnerTrajectory, final_logits) where final_logits is the
    distribution over the token after the sequence, produced with the final
    fast weights.
    """
    stream = spec.window_k if spec.attention == "sliding" else None
    losses, fast, states, tokens = _scan(
        params, tokens, spec, cfg, create_graph=False, record_states=True,
        static_chunk=stream,
    )
    trajectory = InnerTrajectory(states=states, per_token_losses=losses.data)
    with T.no_grad():
        final_logits = _last_logits(params, spec, tokens, fast)
    return trajectory, final_logits.data, fast


def _last_logits(params, spec, tokens, fast):
    ctx = spec.receptive_context()
    n = tokens.shape[1]
    in_start = 0 if ctx is None else max(0, n - 1 - ctx)
    logits = forward_slice(
        params.entries, spec, tokens[:, in_start:], pos_offset=in_start, overrides=fast
    )
    return T.narrow(logits, 1, logits.shape[1] - 1, 1)


def decode_with_ttt(params, spec, cfg, tokens, n_new, sampler, fast=None, rng=None):
    """Generate n_new tokens, taking one inner step per completed mini-batch.

    `tokens` is the prefilled context (with BOS); `fast` the fast weights
    after prefill (defaults to the slow-side initialization).  The number of
    inner steps is floor(n_new / batch_b).  `sampler(logits, history, rng)`
    maps a logit vector to the next token id.
    """
    cfg.validate(spec)
    tokens = _validate_tokens(tokens, spec)
    if tokens.shape[0] != 1:
        raise TTTError("decoding operates on a single sequence")
    if fast is None:
        fast = dict(params.fast())
    rng = rng if rng is not None else np.random.default_rng(0)
    seq = tokens.copy()
    generated = []
    pending_start = seq.shape[1]  # first position of the unconsumed batch
    for _ in range(n_new):
        with T.no_grad():
            logits = _last_logits(params, spec, seq, fast)
        vec = logits.data[0, 0]
        nxt = int(sampler(vec, seq[0, 1:].tolist(), rng))
        generated.append(nxt)
        seq = np.concatenate([seq, [[nxt]]], axis=1)
        if seq.shape[1] - pending_start == cfg.batch_b and cfg.eta > 0.0 and fast:
            s, e = pending_start, seq.shape[1]
            _, fast = _run_chunk(params, spec, cfg, seq, fast, s, e, False, True)
            fast = {k: v.detach() for k, v in fast.items()}
            pending_start = e
    return np.array(generated, dtype=np.int64)


def greedy_sampler(logits, history, rng):
    return int(np.argmax(logits))


def losses_to_csv(trajectory: InnerTrajectory, path, sequence_ids=None):
    """Export per-token losses as CSV rows (sequence_id, t, loss)."""
    arr = trajectory.per_token_losses
    ids = sequence_ids if sequence_ids is not None else list(range(arr.shape[0]))
    with open(path, "w") as fh:
        fh.write("sequence_id,t,loss\n")
        for sid, row in zip(ids, arr):
            for t, val in enumerate(row, start=1):
                fh.write(f"{sid},{t},{float(val)!r}\n")
