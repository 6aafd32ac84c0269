"""Key-value-binding TTT layers and the variant ladder.

A KVB layer learns, at test time, to reconstruct a value projection from a
key projection of the block input: the fast weights W of a per-head MLP g
take gradient steps on ||g(theta_K x; W) - theta_V x||^2.  The original
output rule re-applies g to a query projection with the updated weights;
the simplified rule reuses the reconstruction prediction itself.  The
ladder continues with a next-token-loss variant (multi-head fast MLPs in
every block, no theta projections) and ends at regular fast MLPs in the
trailing quarter of blocks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import _merge_heads, _split_heads, multihead_mlp
from .tensor import Tensor


@dataclass
class KVBLayerParams:
    """Slow projections of one KVB layer; fast MLP weights travel separately.

    g weights are a list of per-head stacked matrices [(H, d_in, d_out), ...]
    applied with silu between layers (a single matrix means linear g).
    """

    theta_K: Tensor
    theta_V: Tensor
    theta_Q: Tensor
    head_count: int


def g_apply(x, g_weights, n_heads):
    """Per-head MLP g on (..., D) input, heads re-merged on output."""
    if x.ndim == 1:
        out = g_apply(T.reshape(x, (1, 1) + x.shape), g_weights, n_heads)
        return T.reshape(out, (out.shape[-1],))
    h = _split_heads(x, n_heads)
    for j, w in enumerate(g_weights):
        if j > 0:
            h = T.silu(h)
        h = T.matmul(h, w)
    return _merge_heads(h)


def kvb_prediction(layer: KVBLayerParams, x_t, fast):
    """g(theta_K x; W) — shared by the loss and the simplified output."""
    keys = _project(layer.theta_K, x_t)
    return g_apply(keys, fast, layer.head_count)


def kvb_loss(layer: KVBLayerParams, x_t, fast):
    """Squared reconstruction error ||g(theta_K x; W) - theta_V x||^2."""
    pred = kvb_prediction(layer, x_t, fast)
    diff = pred - _project(layer.theta_V, x_t)
    return (diff * diff).sum()


def kvb_output(layer: KVBLayerParams, x_t, fast_updated):
    """Original rule: z = g(theta_Q x; W) with already-updated weights."""
    queries = _project(layer.theta_Q, x_t)
    return g_apply(queries, fast_updated, layer.head_count)


def kvb_output_simplified(layer: KVBLayerParams, x_t, fast_previous):
    """Simplified rule: reuse the reconstruction prediction as the output."""
    return kvb_prediction(layer, x_t, fast_previous)


def _project(theta, x_t):
    if x_t.ndim == 1:
        return T.reshape(T.matmul(T.reshape(x_t, (1,) + x_t.shape), theta), theta.shape[-1:])
    return T.matmul(x_t, theta)


# ---------------------------------------------------------------------------
# variant ladder


VARIANT_DELTAS = {
    "kvb": {"ttt_variant": "kvb", "fast_fraction": 1},
    "kvb_simplified": {"ttt_variant": "kvb_simplified", "fast_fraction": 1},
    "e2e_all_layers_mh": {"ttt_variant": "e2e_all_layers_mh", "fast_fraction": 1},
    "e2e": {"ttt_variant": "e2e", "fast_fraction": 0.25, "dual_mlp": True},
}


def build_variant(name):
    """ModelSpec field deltas for one rung of the variant ladder."""
    if name not in VARIANT_DELTAS:
        raise ValueError(f"unknown variant {name!r}; choose from {sorted(VARIANT_DELTAS)}")
    return dict(VARIANT_DELTAS[name])


# ---------------------------------------------------------------------------
# in-forward update hook used by the chunked TTT driver


def make_update_hook(spec, cfg, fast, n_chunk, collector, create_graph, do_step):
    """Per-layer reconstruction step inside one mini-batch forward.

    The hook receives the normalized block input x_n for the whole receptive
    slice, steps the layer's fast MLP on the mean reconstruction loss over
    the final n_chunk positions, and emits the layer output: the updated
    weights on the query projection for the original rule, or the
    pre-update prediction itself for the simplified rule.  Updated weights
    are placed in `collector` for the next mini-batch.  Each layer's update
    touches only that layer's fast weights.
    """

    def hook(i, x_n, p):
        pre = f"blocks.{i}.ttt"
        w1, w2 = p(f"{pre}.g_w1"), p(f"{pre}.g_w2")
        keys = T.matmul(x_n, p(f"{pre}.theta_k"))
        pred = multihead_mlp(keys, w1, w2, spec.n_heads)
        if cfg.eta > 0.0 and do_step:
            vals = T.matmul(x_n, p(f"{pre}.theta_v"))
            diff = T.narrow(pred - vals, 1, x_n.shape[1] - n_chunk, n_chunk)
            recon = (diff * diff).sum() * (1.0 / n_chunk)
            g1, g2 = T.grad(recon, [w1, w2], create_graph=create_graph)
            nw1 = w1 - cfg.eta * g1
            nw2 = w2 - cfg.eta * g2
        else:
            nw1, nw2 = w1, w2
        collector[f"{pre}.g_w1"] = nw1
        collector[f"{pre}.g_w2"] = nw2
        if spec.ttt_variant == "kvb":
            queries = T.matmul(x_n, p(f"{pre}.theta_q"))
            return multihead_mlp(queries, nw1, nw2, spec.n_heads)
        return pred

    return hook
