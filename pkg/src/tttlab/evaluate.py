"""Loss breakdowns, sampling, retrieval scoring, and FLOP/latency benchmarks.

Per-token losses always come from weights that never saw the token being
scored: under test-time training, position t is evaluated with the fast
weights from before its mini-batch was consumed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import data as data_mod
from . import tensor as T
from . import ttt as ttt_mod
from .model import ModelSpec


@dataclass
class EvalReport:
    per_index_loss: np.ndarray  # mean loss at each token index
    aggregate: float
    flops_prefill: int = 0
    flops_per_decoded_token: int = 0
    niah_accuracy: dict = field(default_factory=dict)


def loss_breakdown(params, spec, cfg, sequences, group=64):
    """Mean per-index loss over equal-length sequences; aggregate is its mean."""
    sequences = [np.asarray(s) for s in sequences]
    lengths = {len(s) for s in sequences}
    if len(lengths) != 1:
        raise ValueError(f"sequences must share one length, got {sorted(lengths)}")
    arr = np.stack(sequences)
    chunks = []
    for start in range(0, arr.shape[0], group):
        chunks.append(ttt_mod.per_token_losses(params, arr[start : start + group], spec, cfg))
    losses = np.concatenate(chunks, axis=0)
    per_index = losses.mean(axis=0)
    return EvalReport(per_index_loss=per_index, aggregate=float(per_index.mean()))


def loss_delta(report_method: EvalReport, report_reference: EvalReport):
    """Aggregate-loss difference (method minus reference) on matched data."""
    if report_method.per_index_loss.shape != report_reference.per_index_loss.shape:
        raise ValueError("reports come from mismatched evaluation sets")
    return report_method.aggregate - report_reference.aggregate


# ---------------------------------------------------------------------------
# sampling


def sample_next(logits, temperature, top_p, repetition_penalty, history, rng):
    """Nucleus sampling with repetition penalty.

    History tokens have positive logits divided by the penalty and negative
    logits multiplied by it.  The nucleus is the smallest prefix of the
    probability-sorted vocabulary with mass >= top_p; probability ties are
    broken by ascending token id.
    """
    if not 0 < top_p <= 1:
        raise ValueError(f"top_p must be in (0, 1], got {top_p}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if repetition_penalty < 1:
        raise ValueError("repetition_penalty must be >= 1")
    logits = np.array(logits, dtype=np.float64)
    if np.all(np.isneginf(logits)):
        raise ValueError("all logits are -inf")
    seen = np.unique([t for t in history if 0 <= t < logits.shape[0]]).astype(np.int64)
    if seen.size:
        vals = logits[seen]
        logits[seen] = np.where(vals > 0, vals / repetition_penalty, vals * repetition_penalty)
    logits = logits / temperature
    logits -= logits.max()
    probs = np.exp(logits)
    probs /= probs.sum()
    ids = np.arange(probs.shape[0])
    order = np.lexsort((ids, -probs))  # probability descending, id ascending on ties
    cum = np.cumsum(probs[order])
    cut = int(np.searchsorted(cum, min(top_p, cum[-1])))
    nucleus = order[: cut + 1]
    p = probs[nucleus]
    p /= p.sum()
    return int(rng.choice(nucleus, p=p))


def make_sampler(temperature=1.0, top_p=0.95, repetition_penalty=1.1):
    """Adapter for decode_with_ttt's sampler interface."""

    def sampler(logits, history, rng):
        return sample_next(logits, temperature, top_p, repetition_penalty, history, rng)

    return sampler


# ---------------------------------------------------------------------------
# needle-in-a-haystack scoring


def recall_oracle(instance):
    """Perfect-recall reference: substring search for the needle key."""
    hay = instance.haystack
    i = hay.find(instance.needle_key)
    if i < 0:
        return ""
    rest = hay[i + len(instance.needle_key) :].lstrip()
    end = rest.find(".")
    return rest[: end if end >= 0 else None].strip()


def model_decoder(params, spec, cfg):
    """Greedy byte-level answer decoder over prompt text."""

    def decode(prompt, n_chars):
        toks = data_mod.encode_bytes(prompt, bos=True)[None, :]
        out = ttt_mod.decode_with_ttt(
            params, spec, cfg, toks, n_chars, ttt_mod.greedy_sampler
        )
        return data_mod.decode_bytes(out)

    return decode


def niah_eval(instances, decode_fn):
    """Exact-match accuracy per task kind.

    decode_fn(prompt_text, n_chars) -> generated text; an instance scores 1
    when the generation starts with the exact answer string.
    """
    hits, counts = {}, {}
    for inst in instances:
        prompt = f"{inst.haystack}\n{inst.query}"
        got = decode_fn(prompt, len(inst.answer) + 1).strip()
        ok = got.startswith(inst.answer)
        hits[inst.kind] = hits.get(inst.kind, 0) + int(ok)
        counts[inst.kind] = counts.get(inst.kind, 0) + 1
    return {k: hits[k] / counts[k] for k in counts}


def oracle_decoder(instances):
    """decode_fn backed by the substring oracle, for plumbing checks."""
    by_prompt = {f"{i.haystack}\n{i.query}": i for i in instances}

    def decode(prompt, n_chars):
        return recall_oracle(by_prompt[prompt])

    return decode


# ---------------------------------------------------------------------------
# FLOP / latency benchmarks


def bench(params_builder, spec, cfg, T_values, wall_repeats=5, seed=0):
    """Prefill FLOPs and wall-clock per context length; decode cost per token.

    params_builder(spec) -> ParamSet lets callers reuse weights across grid
    points.  Decode cost is one windowed forward step plus the amortized
    share of an inner TTT step (total step FLOPs divided by batch_b).
    Returns a list of row dicts.
    """
    if not T_values:
        raise ValueError("empty context-length grid")
    if sorted(T_values) != list(T_values):
        raise ValueError("T_values must be sorted ascending")
    rows = []
    rng = np.random.default_rng(seed)
    params = params_builder(spec)
    for T_len in T_values:
        toks = np.concatenate(
            [[spec.bos_id], rng.integers(0, spec.vocab_size - 1, T_len)]
        )[None, :]
        T.flops.reset()
        with T.no_grad():
            ttt_mod.prefill_with_ttt(params, toks, spec, cfg)
        prefill_flops = T.flops.total
        attn_flops = T.flops.scoped.get("attention", 0)
        walls = []
        for _ in range(wall_repeats):
            t0 = time.perf_counter()
            with T.no_grad():
                ttt_mod.prefill_with_ttt(params, toks, spec, cfg)
            walls.append(time.perf_counter() - t0)
        decode_flops = _decode_step_flops(params, spec, cfg, toks)
        rows.append({
            "T": T_len,
            "prefill_flops": prefill_flops,
            "attention_flops": attn_flops,
            "prefill_flops_per_token": prefill_flops / T_len,
            "prefill_wall_s": float(np.median(walls)),
            "decode_flops_per_token": decode_flops,
        })
    return rows


def _decode_step_flops(params, spec, cfg, toks):
    """One-token forward plus amortized inner-step cost."""
    fast = params.fast()
    T.flops.reset()
    with T.no_grad():
        ttt_mod._last_logits(params, spec, toks, dict(fast))
    step_cost = T.flops.total
    if cfg.eta > 0.0 and fast:
        b = cfg.batch_b
        T.flops.reset()
        fast_b = {k: T.broadcast_to(v, (1,) + v.shape) for k, v in fast.items()}
        s = toks.shape[1] - b
        if s >= 1:
            ttt_mod._run_chunk(params, spec, cfg, toks, fast_b, s, toks.shape[1], False, True)
            step_cost += T.flops.total / b
    return step_cost


def bench_to_csv(rows, path):
    cols = list(rows[0])
    with open(path, "w") as fh:
        fh.write(",".join(cols) + "\n")
        for r in rows:
            fh.write(",".join(repr(r[c]) for c in cols) + "\n")
    return path


def report_to_csv(report: EvalReport, path):
    with open(path, "w") as fh:
        fh.write("t,loss\n")
        for t, v in enumerate(report.per_index_loss, start=1):
            fh.write(f"{t},{float(v)!r}\n")
    return path
