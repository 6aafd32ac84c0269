"""Key-value-binding layers: worked scalars, output rules, variant ladder."""

import numpy as np
import pytest

import tttlab.tensor as T
from tttlab.kvb import (
    KVBLayerParams,
    VARIANT_DELTAS,
    build_variant,
    g_apply,
    kvb_loss,
    kvb_output,
    kvb_output_simplified,
    kvb_prediction,
)
from tttlab.model import ModelSpec, build_model
from tttlab.tensor import Tensor
from tttlab.ttt import TTTConfig, loss_e2e, loss_naive, per_token_losses


def scalar_layer(tk, tv, tq):
    return KVBLayerParams(
        theta_K=Tensor(np.array([[float(tk)]])),
        theta_V=Tensor(np.array([[float(tv)]])),
        theta_Q=Tensor(np.array([[float(tq)]])),
        head_count=1,
    )


def linear_g(w):
    # one per-head matrix => linear g
    return [Tensor(np.array([[[float(w)]]]))]


class TestWorkedScalars:
    # x=2, theta_K=1, theta_V=3, theta_Q=2, W=0.5:
    #   key = 2, prediction = 1, value = 6
    #   loss = (1-6)^2 = 25, dloss/dW = 2*(1-6)*2 = -20
    def test_prediction(self):
        layer = scalar_layer(1, 3, 2)
        x = Tensor(np.array([2.0]))
        assert float(kvb_prediction(layer, x, linear_g(0.5)).data[0]) == 1.0

    def test_loss(self):
        layer = scalar_layer(1, 3, 2)
        x = Tensor(np.array([2.0]))
        assert float(kvb_loss(layer, x, linear_g(0.5)).data) == 25.0

    def test_loss_gradient(self):
        layer = scalar_layer(1, 3, 2)
        x = Tensor(np.array([2.0]))
        w = linear_g(0.5)
        g = T.grad(kvb_loss(layer, x, w), w)[0]
        assert float(g.data.ravel()[0]) == -20.0

    def test_original_output_uses_query_and_updated_weights(self):
        # after one step with eta=0.1: W' = 0.5 - 0.1*(-20) = 2.5
        # z = g(theta_Q x; W') = 2.5 * (2*2) = 10
        layer = scalar_layer(1, 3, 2)
        x = Tensor(np.array([2.0]))
        w = linear_g(0.5)
        g = T.grad(kvb_loss(layer, x, w), w)[0]
        updated = [w[0] - 0.1 * g]
        z = kvb_output(layer, x, updated)
        assert float(z.data[0]) == 10.0

    def test_simplified_output_is_the_prediction(self):
        layer = scalar_layer(1, 3, 2)
        x = Tensor(np.array([2.0]))
        w = linear_g(0.5)
        z = kvb_output_simplified(layer, x, w)
        p = kvb_prediction(layer, x, w)
        assert np.array_equal(z.data, p.data)
        assert float(z.data[0]) == 1.0

    def test_matched_projections_identity_g_zero_loss(self):
        # theta_K = theta_V and g = identity reconstructs exactly
        layer = scalar_layer(2, 2, 1)
        x = Tensor(np.array([3.0]))
        assert float(kvb_loss(layer, x, linear_g(1.0)).data) == 0.0


class TestGApply:
    def test_heads_are_isolated(self):
        # zeroing head 1's weights zeroes exactly that half of the output
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(1, 3, 4)))
        w = rng.normal(size=(2, 2, 2))
        w_cut = w.copy()
        w_cut[1] = 0.0
        out = g_apply(x, [Tensor(w_cut)], 2).data
        full = g_apply(x, [Tensor(w)], 2).data
        assert np.array_equal(out[..., :2], full[..., :2])
        assert np.all(out[..., 2:] == 0.0)

    def test_two_layer_g_uses_silu(self):
        # g(x) = w2 @ silu(w1 @ x) on a scalar head
        x = Tensor(np.array([[[2.0]]]))
        w1 = Tensor(np.array([[[3.0]]]))
        w2 = Tensor(np.array([[[0.5]]]))
        out = float(g_apply(x, [w1, w2], 1).data.ravel()[0])
        h = 6.0 / (1.0 + np.exp(-6.0))
        assert abs(out - 0.5 * h) < 1e-12

    def test_rank1_input_round_trip(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=4)
        w = [Tensor(rng.normal(size=(2, 2, 2)))]
        flat = g_apply(Tensor(x), w, 2).data
        batched = g_apply(Tensor(x.reshape(1, 1, 4)), w, 2).data
        assert np.array_equal(flat, batched[0, 0])


class TestVariantLadder:
    def test_known_rungs(self):
        assert set(VARIANT_DELTAS) == {"kvb", "kvb_simplified", "e2e_all_layers_mh", "e2e"}
        assert build_variant("e2e") == {
            "ttt_variant": "e2e",
            "fast_fraction": 0.25,
            "dual_mlp": True,
        }
        assert build_variant("kvb")["fast_fraction"] == 1

    def test_unknown_rung(self):
        with pytest.raises(ValueError, match="unknown variant"):
            build_variant("lora")

    def test_deltas_are_copies(self):
        d = build_variant("kvb")
        d["ttt_variant"] = "mutated"
        assert build_variant("kvb")["ttt_variant"] == "kvb"

    def test_fast_state_sizes_shrink_down_the_ladder(self):
        # every-block multi-head fast MLPs carry more test-time state than
        # regular fast MLPs confined to the trailing quarter of blocks
        sizes = {}
        for name in VARIANT_DELTAS:
            spec = ModelSpec(
                n_blocks=4,
                embed_dim=16,
                n_heads=2,
                vocab_size=17,
                attention="none",
                mlp_hidden_dim=32,
                **build_variant(name),
            ).validate()
            sizes[name] = build_model(spec, 0).fast_state_size()
        assert sizes["kvb"] == sizes["kvb_simplified"] == sizes["e2e_all_layers_mh"]
        assert sizes["e2e"] != sizes["kvb"]


def kvb_spec(variant, **kw):
    base = dict(
        n_blocks=2,
        embed_dim=8,
        n_heads=2,
        vocab_size=17,
        attention="none",
        mlp_hidden_dim=12,
    )
    base.update(build_variant(variant))
    base.update(kw)
    return ModelSpec(**base).validate()


def tokens_for(spec, batch, n_targets, seed=0):
    rng = np.random.default_rng(seed)
    body = rng.integers(0, spec.vocab_size - 1, size=(batch, n_targets))
    bos = np.full((batch, 1), spec.bos_id)
    return np.concatenate([bos, body], axis=1)


class TestInModelBehaviour:
    def test_eta_zero_reduces_to_static_forward(self):
        for variant in ("kvb", "kvb_simplified"):
            spec = kvb_spec(variant)
            params = build_model(spec, 5)
            toks = tokens_for(spec, 2, 10)
            cfg = TTTConfig(eta=0.0, batch_b=4)
            assert float(loss_e2e(params, toks, spec, cfg).data) == float(
                loss_naive(params, toks, spec).data
            )

    def test_simplified_never_reads_query_projection(self):
        spec = kvb_spec("kvb_simplified")
        params = build_model(spec, 6)
        toks = tokens_for(spec, 1, 8)
        cfg = TTTConfig(eta=0.1, batch_b=2)
        base = per_token_losses(params, toks, spec, cfg)
        for name in params.entries:
            if name.endswith(".ttt.theta_q"):
                params.entries[name].data += 100.0
        assert np.array_equal(per_token_losses(params, toks, spec, cfg), base)

    def test_original_rule_reads_query_projection(self):
        spec = kvb_spec("kvb")
        params = build_model(spec, 6)
        toks = tokens_for(spec, 1, 8)
        cfg = TTTConfig(eta=0.1, batch_b=2)
        base = per_token_losses(params, toks, spec, cfg)
        name = next(n for n in params.entries if n.endswith(".ttt.theta_q"))
        params.entries[name].data += 1.0
        assert not np.array_equal(per_token_losses(params, toks, spec, cfg), base)

    def test_updates_move_fast_weights_per_layer(self):
        spec = kvb_spec("kvb")
        params = build_model(spec, 7)
        toks = tokens_for(spec, 1, 8)
        from tttlab.ttt import prefill_with_ttt

        traj, _, _ = prefill_with_ttt(params, toks, spec, TTTConfig(eta=0.1, batch_b=4))
        w0, w1 = traj.states[0], traj.states[1]
        for blk in range(spec.n_blocks):
            assert not np.array_equal(
                w0[f"blocks.{blk}.ttt.g_w1"], w1[f"blocks.{blk}.ttt.g_w1"]
            )

    def test_query_init_matches_key_projection(self):
        # the query projection starts as a copy of the key projection, so the
        # two output rules coincide at initialization when no step is taken
        spec = kvb_spec("kvb")
        params = build_model(spec, 8)
        for blk in range(spec.n_blocks):
            tk = params.entries[f"blocks.{blk}.ttt.theta_k"].data
            tq = params.entries[f"blocks.{blk}.ttt.theta_q"].data
            assert np.array_equal(tk, tq)

    def test_rules_coincide_at_initialization_eta_zero(self):
        toks = None
        outs = {}
        for variant in ("kvb", "kvb_simplified"):
            spec = kvb_spec(variant)
            params = build_model(spec, 9)
            if toks is None:
                toks = tokens_for(spec, 2, 10)
            outs[variant] = per_token_losses(
                params, toks, spec, TTTConfig(eta=0.0, batch_b=4)
            )
        assert np.array_equal(outs["kvb"], outs["kvb_simplified"])
