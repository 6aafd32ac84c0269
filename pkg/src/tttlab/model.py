"""Transformer family used throughout the lab.

Covers the attention-free toy model (bigram behaviour), sliding-window and
full attention variants, RoPE, optional QK norm, dual-MLP blocks, the
fast/slow parameter partition for test-time training, and serialization of
specs and parameters.

Block layout is pre-norm with RMS normalization: norm -> attention ->
residual, norm -> (ttt sublayer ->) MLP -> residual.  MLPs are gated SiLU.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import tensor as T
from .tensor import Tensor

ATTENTION_KINDS = ("none", "full", "sliding")
TTT_VARIANTS = ("off", "e2e", "naive", "e2e_all_layers_mh", "kvb", "kvb_simplified")
FAST_FRACTIONS = (1, 0.5, 0.25, 0.125, "final")

BOS_OFFSET = 1  # BOS is the last id of the vocabulary


class SpecError(ValueError):
    """A ModelSpec invariant is violated; the message names the constraint."""


@dataclass
class ModelSpec:
    n_blocks: int = 2
    embed_dim: int = 384
    n_heads: int = 6
    vocab_size: int = 257
    attention: str = "none"
    window_k: int = 0
    ttt_variant: str = "off"
    fast_fraction: object = 1
    dual_mlp: bool = False
    mlp_hidden_dim: int = 0  # 0 means 4 * embed_dim
    qk_norm: bool = False
    rope_theta: float = 500_000.0
    g_hidden_mult: int = 2  # hidden width of the multi-head fast MLP, per head dim
    dtype: str = "float64"

    def __post_init__(self):
        if self.mlp_hidden_dim == 0:
            self.mlp_hidden_dim = 4 * self.embed_dim

    def validate(self):
        if self.attention not in ATTENTION_KINDS:
            raise SpecError(f"unknown attention kind {self.attention!r}")
        if self.ttt_variant not in TTT_VARIANTS:
            raise SpecError(f"unknown ttt variant {self.ttt_variant!r}")
        if self.embed_dim % self.n_heads:
            raise SpecError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.fast_fraction not in FAST_FRACTIONS:
            raise SpecError(
                f"fast_fraction {self.fast_fraction!r} not in {FAST_FRACTIONS}"
            )
        if self.attention == "sliding" and self.window_k < 1:
            raise SpecError("sliding attention needs window_k >= 1")
        if self.attention != "none" and (self.embed_dim // self.n_heads) % 2:
            raise SpecError("head dimension must be even for RoPE")
        return self

    @property
    def head_dim(self):
        return self.embed_dim // self.n_heads

    @property
    def bos_id(self):
        return self.vocab_size - BOS_OFFSET

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def n_fast_blocks(self):
        if self.ttt_variant in ("kvb", "kvb_simplified", "e2e_all_layers_mh"):
            return self.n_blocks
        if self.fast_fraction == "final":
            return 1
        return max(1, int(self.n_blocks * self.fast_fraction))

    def fast_block_ids(self):
        n = self.n_fast_blocks()
        return list(range(self.n_blocks - n, self.n_blocks))

    def receptive_context(self):
        """Tokens of left context needed for exact logits at a slice start.

        None means the full prefix is required (full attention).
        """
        if self.attention == "none":
            return 0
        if self.attention == "full":
            return None
        return self.n_blocks * (self.window_k - 1)

    # flat key-value serialization ----------------------------------------
    def to_text(self):
        lines = []
        for f in fields(self):
            lines.append(f"{f.name}={getattr(self, f.name)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        kwargs = {}
        casts = {f.name: f for f in fields(cls)}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in casts:
                raise SpecError(f"unknown spec key {key!r}")
            kwargs[key] = _cast_field(key, value.strip())
        return cls(**kwargs)


def _cast_field(name, value):
    if name in ("dual_mlp", "qk_norm"):
        return value in ("True", "true", "1")
    if name in ("rope_theta",):
        return float(value)
    if name == "fast_fraction":
        return "final" if value == "final" else (int(value) if value == "1" else float(value))
    if name in ("attention", "ttt_variant", "dtype"):
        return value
    return int(value)


@dataclass
class ParamSet:
    """Named parameters partitioned into slow (outer) and fast (inner) sets."""

    entries: dict
    slow_names: set
    fast_names: set

    def __post_init__(self):
        overlap = self.slow_names & self.fast_names
        if overlap:
            raise SpecError(f"slow/fast overlap: {sorted(overlap)}")
        missing = set(self.entries) - self.slow_names - self.fast_names
        if missing:
            raise SpecError(f"unpartitioned parameters: {sorted(missing)}")

    def fast(self):
        return {k: self.entries[k] for k in sorted(self.fast_names)}

    def n_params(self):
        return sum(t.size for t in self.entries.values())

    def fast_state_size(self):
        return sum(self.entries[k].size for k in self.fast_names)

    def copy(self):
        return ParamSet(
            {k: Tensor(v.data.copy()) for k, v in self.entries.items()},
            set(self.slow_names),
            set(self.fast_names),
        )


# ---------------------------------------------------------------------------
# initialization


def build_model(spec: ModelSpec, seed: int) -> ParamSet:
    """Deterministically initialize parameters for `spec` from `seed`."""
    spec.validate()
    rng = np.random.default_rng(seed)
    dt = spec.np_dtype
    d = spec.embed_dim
    kvb_like = spec.ttt_variant in ("kvb", "kvb_simplified", "e2e_all_layers_mh")
    fast_ids = set(spec.fast_block_ids())
    hidden = _mlp_hidden(spec)
    resid_scale = 1.0 / np.sqrt(2 * spec.n_blocks)

    def normal(shape, std=0.02):
        return Tensor((rng.standard_normal(shape) * std).astype(dt))

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dt))

    entries = {}
    fast_names = set()
    entries["embed.table"] = normal((spec.vocab_size, d))
    for i in range(spec.n_blocks):
        pre = f"blocks.{i}"
        if spec.attention != "none":
            entries[f"{pre}.attn_norm.gain"] = ones((d,))
            entries[f"{pre}.attn.wq"] = normal((d, d))
            entries[f"{pre}.attn.wk"] = normal((d, d))
            entries[f"{pre}.attn.wv"] = normal((d, d))
            entries[f"{pre}.attn.wo"] = normal((d, d), 0.02 * resid_scale)
            if spec.qk_norm:
                entries[f"{pre}.attn.q_gain"] = ones((spec.head_dim,))
                entries[f"{pre}.attn.k_gain"] = ones((spec.head_dim,))
        if kvb_like:
            dh = spec.head_dim
            gh = spec.g_hidden_mult * dh
            entries[f"{pre}.ttt_norm.gain"] = ones((d,))
            if spec.ttt_variant != "e2e_all_layers_mh":
                theta_k = normal((d, d))
                entries[f"{pre}.ttt.theta_k"] = theta_k
                entries[f"{pre}.ttt.theta_v"] = normal((d, d))
                # shared K/Q init keeps the two output rules comparable at start
                entries[f"{pre}.ttt.theta_q"] = Tensor(theta_k.data.copy())
            entries[f"{pre}.ttt.g_w1"] = normal((spec.n_heads, dh, gh))
            entries[f"{pre}.ttt.g_w2"] = normal((spec.n_heads, gh, dh), 0.02 * resid_scale)
            fast_names |= {f"{pre}.ttt.g_w1", f"{pre}.ttt.g_w2"}
        entries[f"{pre}.mlp_norm.gain"] = ones((d,))
        entries[f"{pre}.mlp.w_gate"] = normal((d, hidden))
        entries[f"{pre}.mlp.w_up"] = normal((d, hidden))
        entries[f"{pre}.mlp.w_down"] = normal((hidden, d), 0.02 * resid_scale)
        if not kvb_like and spec.ttt_variant != "off" and i in fast_ids:
            fast_names |= {f"{pre}.mlp.w_gate", f"{pre}.mlp.w_up", f"{pre}.mlp.w_down"}
            if spec.dual_mlp:
                entries[f"{pre}.mlp_static.w_gate"] = normal((d, hidden))
                entries[f"{pre}.mlp_static.w_up"] = normal((d, hidden))
                entries[f"{pre}.mlp_static.w_down"] = normal((hidden, d), 0.02 * resid_scale)
    entries["final_norm.gain"] = ones((d,))
    entries["out_proj"] = normal((d, spec.vocab_size))

    slow_names = set(entries) - fast_names
    return ParamSet(entries, slow_names, fast_names)


def _mlp_hidden(spec):
    """Hidden width, shrunk when dual MLPs are on so parameter counts match."""
    if not spec.dual_mlp:
        return spec.mlp_hidden_dim
    n_fast = spec.n_fast_blocks()
    scale = spec.n_blocks / (spec.n_blocks + n_fast)
    return max(1, round(spec.mlp_hidden_dim * scale))


# ---------------------------------------------------------------------------
# building blocks


def sliding_window_mask(length, k):
    """Boolean (t, s) matrix: attend iff s <= t and t - s < k."""
    if length < 1 or k < 1:
        raise ValueError("length and k must be >= 1")
    t = np.arange(length)[:, None]
    s = np.arange(length)[None, :]
    return (s <= t) & (t - s < k)


def causal_mask(length):
    return sliding_window_mask(length, length)


def _additive_mask(mask, dtype):
    out = np.zeros(mask.shape, dtype=dtype)
    out[~mask] = -1e30
    return out


def apply_rope(x, positions, theta):
    """Rotary position embedding on the last axis (pairs of planes).

    x: (..., S, dh) with dh even; positions: absolute indices of the S axis.
    """
    dh = x.shape[-1]
    if dh % 2:
        raise ValueError(f"RoPE needs an even head dimension, got {dh}")
    half = dh // 2
    inv_freq = theta ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.asarray(positions, dtype=np.float64)[:, None] * inv_freq[None, :]
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    x1 = T.narrow(x, -1, 0, half)
    x2 = T.narrow(x, -1, half, half)
    return T.concat([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def qk_normalize(q, k, q_gain, k_gain, eps=1e-6):
    """Rescale per-head query/key vectors to unit RMS with learned gains."""
    qn = q / T.sqrt(T.mean(q * q, axis=-1, keepdims=True) + eps) * q_gain
    kn = k / T.sqrt(T.mean(k * k, axis=-1, keepdims=True) + eps) * k_gain
    return qn, kn


def _split_heads(x, n_heads):
    b, s, d = x.shape
    return T.swapaxes(T.reshape(x, (b, s, n_heads, d // n_heads)), 1, 2)


def _merge_heads(x):
    b, h, s, dh = x.shape
    return T.reshape(T.swapaxes(x, 1, 2), (b, s, h * dh))


def _attention(x, p, pre, spec, pos_offset):
    s_len = x.shape[1]
    x_n = T.rms_norm(x, p(f"{pre}.attn_norm.gain"))
    q = _split_heads(T.matmul(x_n, p(f"{pre}.attn.wq")), spec.n_heads)
    k = _split_heads(T.matmul(x_n, p(f"{pre}.attn.wk")), spec.n_heads)
    v = _split_heads(T.matmul(x_n, p(f"{pre}.attn.wv")), spec.n_heads)
    positions = pos_offset + np.arange(s_len)
    q = apply_rope(q, positions, spec.rope_theta)
    k = apply_rope(k, positions, spec.rope_theta)
    if spec.qk_norm:
        q, k = qk_normalize(q, k, p(f"{pre}.attn.q_gain"), p(f"{pre}.attn.k_gain"))
    if spec.attention == "sliding":
        mask = sliding_window_mask(s_len, spec.window_k)
    else:
        mask = causal_mask(s_len)
    add_mask = _additive_mask(mask, x.dtype)
    with T.flop_scope("attention"):
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(spec.head_dim))
        probs = T.softmax(scores + add_mask, axis=-1)
        out = T.matmul(probs, v)
    return T.matmul(_merge_heads(out), p(f"{pre}.attn.wo"))


def _gated_mlp(x_n, w_gate, w_up, w_down):
    return T.matmul(T.silu(T.matmul(x_n, w_gate)) * T.matmul(x_n, w_up), w_down)


def multihead_mlp(x_n, g_w1, g_w2, n_heads):
    """Two-layer per-head MLP applied to head-split input; output re-merged.

    x_n: (B, S, D); g_w1: (H, dh, gh) or (B, H, dh, gh) for per-sequence
    fast weights; g_w2 symmetric.
    """
    b, s, d = x_n.shape
    xh = _split_heads(x_n, n_heads)  # (B, H, S, dh)
    h = T.silu(T.matmul(xh, g_w1))
    out = T.matmul(h, g_w2)
    return _merge_heads(out)


def forward_slice(entries, spec, tokens, pos_offset=0, overrides=None, ttt_hook=None):
    """Logits for a contiguous token slice at absolute offset `pos_offset`.

    entries: parameter dict; `overrides` substitutes fast weights (possibly
    with a leading batch dimension); `ttt_hook(block_idx, x_normed, p)`
    supplies the TTT-sublayer output for kvb-style variants and defaults to
    the static rule.  tokens: integer array (B, S).
    """
    overrides = overrides or {}

    def p(name):
        t = overrides.get(name)
        return t if t is not None else entries[name]

    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.shape[1] < 1:
        raise ValueError("empty sequence")
    kvb_like = spec.ttt_variant in ("kvb", "kvb_simplified", "e2e_all_layers_mh")
    x = T.embedding(p("embed.table"), tokens)
    for i in range(spec.n_blocks):
        pre = f"blocks.{i}"
        if spec.attention != "none":
            x = x + _attention(x, p, pre, spec, pos_offset)
        if kvb_like:
            x_n = T.rms_norm(x, p(f"{pre}.ttt_norm.gain"))
            if ttt_hook is not None:
                z = ttt_hook(i, x_n, p)
            else:
                z = _static_ttt_sublayer(i, x_n, p, spec)
            x = x + z
        x_n = T.rms_norm(x, p(f"{pre}.mlp_norm.gain"))
        out = _gated_mlp(x_n, p(f"{pre}.mlp.w_gate"), p(f"{pre}.mlp.w_up"), p(f"{pre}.mlp.w_down"))
        if spec.dual_mlp and f"{pre}.mlp_static.w_gate" in entries:
            out = out + _gated_mlp(
                x_n,
                p(f"{pre}.mlp_static.w_gate"),
                p(f"{pre}.mlp_static.w_up"),
                p(f"{pre}.mlp_static.w_down"),
            )
        x = x + out
    x = T.rms_norm(x, p("final_norm.gain"))
    return T.matmul(x, p("out_proj"))


def _static_ttt_sublayer(i, x_n, p, spec):
    pre = f"blocks.{i}"
    if spec.ttt_variant == "e2e_all_layers_mh":
        u = x_n
    elif spec.ttt_variant == "kvb":
        u = T.matmul(x_n, p(f"{pre}.ttt.theta_q"))
    else:  # kvb_simplified
        u = T.matmul(x_n, p(f"{pre}.ttt.theta_k"))
    return multihead_mlp(u, p(f"{pre}.ttt.g_w1"), p(f"{pre}.ttt.g_w2"), spec.n_heads)


def forward(params: ParamSet, tokens, spec: ModelSpec):
    """Whole-sequence causal logits with static (initial) weights."""
    return forward_slice(params.entries, spec, tokens)


# ---------------------------------------------------------------------------
# parameter serialization

_MAGIC = b"TTLB"
_VERSION = 1
_DTYPE_CODES = {"float64": 0, "float32": 1}
_DTYPE_NAMES = {v: k for k, v in _DTYPE_CODES.items()}


def save_params(params: ParamSet, path):
    """Single binary blob: magic, version, name-indexed header, raw data."""
    buf = io.BytesIO()
    names = sorted(params.entries)
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(names)))
    for name in names:
        t = params.entries[name]
        nb = name.encode()
        kind = 1 if name in params.fast_names else 0
        buf.write(struct.pack("<HBBB", len(nb), _DTYPE_CODES[t.dtype.name], t.ndim, kind))
        buf.write(nb)
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
    for name in names:
        arr = np.ascontiguousarray(params.entries[name].data)
        buf.write(arr.astype(f"<{arr.dtype.str[1:]}").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_params(path) -> ParamSet:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != _MAGIC:
        raise ValueError("not a tttlab parameter file")
    version, n = struct.unpack_from("<II", raw, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported parameter file version {version}")
    off = 12
    headers = []
    for _ in range(n):
        name_len, dcode, ndim, kind = struct.unpack_from("<HBBB", raw, off)
        off += 5
        name = raw[off : off + name_len].decode()
        off += name_len
        shape = struct.unpack_from(f"<{ndim}I", raw, off)
        off += 4 * ndim
        headers.append((name, _DTYPE_NAMES[dcode], shape, kind))
    entries, fast_names = {}, set()
    for name, dtype, shape, kind in headers:
        count = int(np.prod(shape, dtype=np.int64)) if shape else 1
        arr = np.frombuffer(raw, dtype=f"<{np.dtype(dtype).str[1:]}", count=count, offset=off)
        off += arr.nbytes
        entries[name] = Tensor(arr.reshape(shape).astype(dtype))
        if kind:
            fast_names.add(name)
    return ParamSet(entries, set(entries) - fast_names, fast_names)
