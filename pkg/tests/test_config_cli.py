"""Flat config round-trips and the command-line front-end."""

import os

import numpy as np
import pytest

from tttlab.cli import (
    TOY_METHODS,
    _toy_method_setup,
    main,
    make_toy_corpora,
    run_sweep,
    split_seeds,
    write_manifest,
)
from tttlab.config import (
    EvalSettings,
    ExperimentConfig,
    load_config,
    save_config,
)


class TestConfig:
    def test_round_trip_defaults(self):
        cfg = ExperimentConfig()
        again = ExperimentConfig.from_text(cfg.to_text())
        assert again.to_text() == cfg.to_text()

    def test_round_trip_modified(self):
        cfg = ExperimentConfig()
        cfg.model.n_blocks = 4
        cfg.model.attention = "sliding"
        cfg.model.window_k = 32
        cfg.model.fast_fraction = 0.25
        cfg.model.dual_mlp = True
        cfg.ttt.eta = 0.005
        cfg.ttt.batch_b = 16
        cfg.recipe.peak_lr = 3e-3
        cfg.recipe.objective = "e2e"
        cfg.eval.top_p = 0.9
        cfg.output_dir = "elsewhere"
        again = ExperimentConfig.from_text(cfg.to_text())
        assert again.model.n_blocks == 4
        assert again.model.window_k == 32
        assert again.model.fast_fraction == 0.25
        assert again.model.dual_mlp is True
        assert again.ttt.eta == 0.005
        assert again.recipe.objective == "e2e"
        assert again.eval.top_p == 0.9
        assert again.output_dir == "elsewhere"
        assert again.to_text() == cfg.to_text()

    def test_fast_fraction_final_round_trip(self):
        cfg = ExperimentConfig()
        cfg.model.fast_fraction = "final"
        again = ExperimentConfig.from_text(cfg.to_text())
        assert again.model.fast_fraction == "final"
        cfg.model.fast_fraction = 1
        assert ExperimentConfig.from_text(cfg.to_text()).model.fast_fraction == 1

    def test_unknown_key_reports_line(self):
        with pytest.raises(ValueError, match="line 2: unknown key 'model.heads'"):
            ExperimentConfig.from_text("model.n_blocks=2\nmodel.heads=4\n")

    def test_missing_equals_reports_line(self):
        with pytest.raises(ValueError, match="line 1"):
            ExperimentConfig.from_text("model.n_blocks\n")

    def test_comments_and_blanks_ignored(self):
        cfg = ExperimentConfig.from_text("# a comment\n\nmodel.n_blocks=3\n")
        assert cfg.model.n_blocks == 3

    def test_hash_stability_and_sensitivity(self):
        a = ExperimentConfig()
        b = ExperimentConfig()
        assert a.config_hash() == b.config_hash()
        assert len(a.config_hash()) == 16
        b.ttt.eta = 0.123
        assert a.config_hash() != b.config_hash()

    def test_file_round_trip(self, tmp_path):
        cfg = ExperimentConfig()
        cfg.recipe.seed = 42
        path = save_config(cfg, tmp_path / "cfg.txt")
        assert load_config(path).recipe.seed == 42


def small_cfg(tmp_path, steps=3):
    cfg = ExperimentConfig()
    cfg.model.n_blocks = 1
    cfg.model.embed_dim = 8
    cfg.model.n_heads = 2
    cfg.model.mlp_hidden_dim = 8
    cfg.model.ttt_variant = "e2e"
    cfg.model.fast_fraction = "final"
    cfg.ttt.eta = 0.01
    cfg.ttt.batch_b = 16
    cfg.recipe.batch_tokens = 64
    cfg.recipe.total_tokens = 64 * steps
    cfg.recipe.peak_lr = 1e-3
    cfg.eval.context_T = 32
    cfg.eval.n_eval_sequences = 4
    cfg.eval.niah_per_kind = 2
    cfg.eval.haystack_len = 120
    cfg.output_dir = str(tmp_path / "out")
    return cfg


class TestSeeds:
    def test_split_deterministic_and_distinct(self):
        a = split_seeds(7, 5)
        assert a == split_seeds(7, 5)
        assert len(set(a)) == 5
        assert a != split_seeds(8, 5)


class TestToySetup:
    def test_method_table(self):
        cfg = ExperimentConfig()
        cfg.ttt.eta = 0.05
        spec, tc, obj = _toy_method_setup("full", cfg)
        assert (spec.attention, spec.ttt_variant, tc.eta, obj) == ("full", "off", 0.0, "naive")
        spec, tc, obj = _toy_method_setup("baseline", cfg)
        assert (spec.attention, spec.ttt_variant, tc.eta, obj) == ("none", "off", 0.0, "naive")
        spec, tc, obj = _toy_method_setup("ttt_naive", cfg)
        assert (spec.ttt_variant, tc.batch_b, obj) == ("e2e", 1, "naive")
        spec, tc, obj = _toy_method_setup("e2e_b1", cfg)
        assert (tc.batch_b, tc.eta, obj) == (1, 0.05, "e2e")
        spec, tc, obj = _toy_method_setup("e2e_b16", cfg)
        assert (tc.batch_b, obj) == (16, "e2e")

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="unknown toy method"):
            _toy_method_setup("lora", ExperimentConfig())

    def test_corpora_shapes(self, tmp_path):
        cfg = small_cfg(tmp_path)
        train_arr, eval_arr = make_toy_corpora(cfg, 0)
        assert train_arr.shape[1] == cfg.eval.context_T + 1
        assert eval_arr.shape[0] <= cfg.eval.n_eval_sequences
        assert np.all(train_arr[:, 0] == cfg.model.bos_id)


class TestManifest:
    def test_contents(self, tmp_path):
        cfg = ExperimentConfig()
        out = tmp_path / "run"
        path = write_manifest(cfg, out)
        text = open(path).read()
        assert f"config_hash={cfg.config_hash()}" in text
        assert "tttlab_version=" in text
        assert "numpy_version=" in text
        assert (out / "config.txt").exists()


class TestSweep:
    def test_single_point_matches_direct_run(self, tmp_path):
        import dataclasses

        from tttlab import evaluate, train

        cfg = small_cfg(tmp_path)
        rows = run_sweep(cfg, "batch_b", [4], str(tmp_path / "sw"), workers=1)
        value, agg, err = rows[0]
        assert err == ""
        seed = split_seeds(cfg.recipe.seed, 1)[0]
        tc = dataclasses.replace(cfg.ttt, batch_b=4)
        recipe = dataclasses.replace(cfg.recipe, seed=seed)
        train_arr, eval_arr = make_toy_corpora(cfg, seed)
        params, _ = train.train_run(cfg.model, tc, recipe, train_arr)
        direct = evaluate.loss_breakdown(params, cfg.model, tc, eval_arr)
        assert agg == direct.aggregate
        assert (tmp_path / "sw" / "sweep_batch_b.csv").exists()

    def test_bad_point_is_isolated(self, tmp_path):
        cfg = small_cfg(tmp_path)
        # window_k below batch_b is rejected by validation at that point only
        rows = run_sweep(cfg, "window_k", [4, 64], str(tmp_path / "sw2"), workers=1)
        assert np.isnan(rows[0][1]) and rows[0][2] != ""
        assert np.isfinite(rows[1][1]) and rows[1][2] == ""


class TestMain:
    def test_train_then_eval(self, tmp_path, capsys):
        cfg = small_cfg(tmp_path)
        cfg_path = save_config(cfg, tmp_path / "cfg.txt")
        out = str(tmp_path / "run")
        assert main(["--config", str(cfg_path), "--out", out, "train"]) == 0
        assert os.path.exists(os.path.join(out, "params.bin"))
        assert os.path.exists(os.path.join(out, "curve.csv"))
        assert os.path.exists(os.path.join(out, "run-manifest.txt"))
        rc = main([
            "--config", str(cfg_path), "--out", out,
            "eval", "--params", os.path.join(out, "params.bin"),
        ])
        assert rc == 0
        assert "aggregate:" in capsys.readouterr().out
        assert os.path.exists(os.path.join(out, "per_index.csv"))

    def test_finetune(self, tmp_path):
        cfg = small_cfg(tmp_path)
        cfg_path = save_config(cfg, tmp_path / "cfg.txt")
        out = str(tmp_path / "run")
        main(["--config", str(cfg_path), "--out", out, "train"])
        rc = main([
            "--config", str(cfg_path), "--out", out,
            "finetune", "--params", os.path.join(out, "params.bin"),
        ])
        assert rc == 0
        assert os.path.exists(os.path.join(out, "params_ft.bin"))

    def test_niah_oracle(self, tmp_path, capsys):
        cfg = small_cfg(tmp_path)
        cfg_path = save_config(cfg, tmp_path / "cfg.txt")
        out = str(tmp_path / "niah")
        rc = main(["--config", str(cfg_path), "--out", out, "niah", "--oracle"])
        assert rc == 0
        text = open(os.path.join(out, "niah_accuracy.csv")).read()
        for kind in ("passkey", "number", "uuid"):
            assert f"{kind},1.0" in text
        assert os.path.exists(os.path.join(out, "niah.jsonl"))

    def test_bench_command(self, tmp_path, capsys):
        cfg = small_cfg(tmp_path)
        cfg_path = save_config(cfg, tmp_path / "cfg.txt")
        out = str(tmp_path / "bench")
        rc = main(["--config", str(cfg_path), "--out", out, "bench", "--grid", "8,16"])
        assert rc == 0
        lines = open(os.path.join(out, "bench.csv")).read().strip().split("\n")
        assert len(lines) == 3

    def test_sweep_command(self, tmp_path):
        cfg = small_cfg(tmp_path)
        cfg_path = save_config(cfg, tmp_path / "cfg.txt")
        out = str(tmp_path / "sweep")
        rc = main([
            "--config", str(cfg_path), "--out", out,
            "sweep", "--axis", "batch_b", "--values", "2,4",
        ])
        assert rc == 0
        assert os.path.exists(os.path.join(out, "sweep_batch_b.csv"))

    def test_seed_override_changes_hash(self, tmp_path):
        cfg = small_cfg(tmp_path)
        cfg_path = save_config(cfg, tmp_path / "cfg.txt")
        out1, out2 = str(tmp_path / "a"), str(tmp_path / "b")
        main(["--config", str(cfg_path), "--out", out1, "--seed", "1", "bench", "--grid", "8"])
        main(["--config", str(cfg_path), "--out", out2, "--seed", "2", "bench", "--grid", "8"])
        h1 = open(os.path.join(out1, "run-manifest.txt")).readline()
        h2 = open(os.path.join(out2, "run-manifest.txt")).readline()
        assert h1 != h2

    def test_thread_cap_env(self, tmp_path, monkeypatch):
        from tttlab.cli import _thread_cap

        monkeypatch.setenv("TTT_E2E_THREADS", "2")
        assert _thread_cap(8) == 2
        monkeypatch.delenv("TTT_E2E_THREADS")
        assert _thread_cap(8) == 8
