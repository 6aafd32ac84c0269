"""Experiment front-end: batch commands over flat key-value configs.

Every command is reproducible from its config file plus a root seed; all
randomness flows from that seed through deterministic SeedSequence splits.
Outputs are CSV files plus a run-manifest recording the config hash.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import dataclasses
import os
import sys

import numpy as np

from . import __version__, data, evaluate, kvb, train, ttt
from .config import ExperimentConfig, load_config, save_config
from .model import ModelSpec, build_model, load_params, save_params
from .train import DivergenceError, TrainRecipe
from .ttt import TTTConfig

TOY_METHODS = ("full", "baseline", "ttt_naive", "e2e_b1", "e2e_b16")


def split_seeds(root_seed, n):
    """Deterministic child seeds for isolated sub-runs."""
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(root_seed).spawn(n)]


def write_manifest(cfg: ExperimentConfig, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "run-manifest.txt")
    with open(path, "w") as fh:
        fh.write(f"config_hash={cfg.config_hash()}\n")
        fh.write(f"tttlab_version={__version__}\n")
        fh.write(f"numpy_version={np.__version__}\n")
        fh.write(f"python_version={sys.version.split()[0]}\n")
    save_config(cfg, os.path.join(out_dir, "config.txt"))
    return path


def _toy_method_setup(name, cfg: ExperimentConfig):
    """(spec, ttt_cfg, objective) for one of the five toy methods."""
    spec = dataclasses.replace(cfg.model)
    tc = dataclasses.replace(cfg.ttt)
    if name == "full":
        spec.attention, spec.ttt_variant = "full", "off"
        return spec, dataclasses.replace(tc, eta=0.0), "naive"
    spec.attention = "none"
    if name == "baseline":
        spec.ttt_variant = "off"
        return spec, dataclasses.replace(tc, eta=0.0), "naive"
    spec.ttt_variant = "e2e"
    if name == "ttt_naive":
        return spec, dataclasses.replace(tc, batch_b=1), "naive"
    if name == "e2e_b1":
        return spec, dataclasses.replace(tc, batch_b=1), "e2e"
    if name == "e2e_b16":
        return spec, dataclasses.replace(tc, batch_b=16), "e2e"
    raise ValueError(f"unknown toy method {name!r}")


# the full-attention method needs a larger token budget and a lower peak
# learning rate than the TTT methods before its in-context copying circuit
# forms; the other methods share the configured recipe unchanged
_TOY_FULL_BUDGET_MULT = 5
_TOY_FULL_PEAK_LR = 3e-3


def make_toy_corpora(cfg: ExperimentConfig, seed):
    """(train_array, eval_array) of packed toy sequences.

    The training corpus is sized to cover the largest per-method token
    budget so no method repeats data.
    """
    T_len = cfg.eval.context_T
    budget = _TOY_FULL_BUDGET_MULT * cfg.recipe.total_tokens
    n_docs = max(160, -(-budget // (4 * T_len)))
    train_text = data.gen_toy_corpus(n_docs=n_docs, doc_len=4 * T_len, seed=seed)
    eval_text = data.gen_toy_corpus(n_docs=48, doc_len=4 * T_len, seed=seed + 777)
    train_arr = data.sequences_to_array(data.ingest(train_text, T_len, T_len, seed))
    eval_arr = data.sequences_to_array(data.ingest(eval_text, T_len, T_len, seed + 1))
    eval_arr = eval_arr[: cfg.eval.n_eval_sequences]
    return train_arr, eval_arr


def run_toy(cfg: ExperimentConfig, out_dir, seed=None, methods=TOY_METHODS):
    """Train and evaluate the five toy methods; returns per-method results.

    Per-method failures are isolated: a diverged run is reported and the
    others continue.
    """
    os.makedirs(out_dir, exist_ok=True)
    root = cfg.recipe.seed if seed is None else seed
    train_arr, eval_arr = make_toy_corpora(cfg, root)
    results = {}
    for name, sub_seed in zip(methods, split_seeds(root, len(methods))):
        spec, tc, objective = _toy_method_setup(name, cfg)
        recipe = dataclasses.replace(cfg.recipe, objective=objective, seed=sub_seed)
        if name == "full":
            recipe = dataclasses.replace(
                recipe,
                peak_lr=_TOY_FULL_PEAK_LR,
                total_tokens=_TOY_FULL_BUDGET_MULT * recipe.total_tokens,
            )
        try:
            params, curve = train.train_run(spec, tc, recipe, train_arr)
        except DivergenceError as err:
            results[name] = {"error": str(err)}
            continue
        report = evaluate.loss_breakdown(params, spec, tc, eval_arr)
        evaluate.report_to_csv(report, os.path.join(out_dir, f"per_index_{name}.csv"))
        train.curve_to_csv(curve, os.path.join(out_dir, f"curve_{name}.csv"))
        results[name] = {"aggregate": report.aggregate, "report": report, "params": params}
    with open(os.path.join(out_dir, "summary.csv"), "w") as fh:
        fh.write("method,aggregate\n")
        for name in methods:
            agg = results[name].get("aggregate", "diverged")
            fh.write(f"{name},{agg}\n")
    return results


def _sweep_point(arg):
    cfg_text, axis, value, seed = arg
    cfg = ExperimentConfig.from_text(cfg_text)
    spec = dataclasses.replace(cfg.model)
    tc = dataclasses.replace(cfg.ttt)
    if axis == "window_k":
        spec.attention, spec.window_k = "sliding", int(value)
    elif axis == "batch_b":
        tc.batch_b = int(value)
    elif axis == "fast_fraction":
        spec.fast_fraction = value
    else:
        raise ValueError(f"unknown sweep axis {axis!r}")
    recipe = dataclasses.replace(cfg.recipe, seed=seed)
    train_arr, eval_arr = make_toy_corpora(cfg, seed)
    try:
        params, _ = train.train_run(spec, tc, recipe, train_arr)
        report = evaluate.loss_breakdown(params, spec, tc, eval_arr)
        return value, report.aggregate, ""
    except Exception as err:  # per-point isolation
        return value, float("nan"), str(err)


def run_sweep(cfg: ExperimentConfig, axis, values, out_dir, workers=1):
    os.makedirs(out_dir, exist_ok=True)
    seeds = split_seeds(cfg.recipe.seed, len(values))
    args = [(cfg.to_text(), axis, v, s) for v, s in zip(values, seeds)]
    if workers > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_point, args))
    else:
        rows = [_sweep_point(a) for a in args]
    path = os.path.join(out_dir, f"sweep_{axis}.csv")
    with open(path, "w") as fh:
        fh.write(f"{axis},aggregate,error\n")
        for value, agg, err in rows:
            fh.write(f"{value},{agg!r},{err}\n")
    return rows


def _thread_cap(requested):
    cap = os.environ.get("TTT_E2E_THREADS")
    return min(requested, int(cap)) if cap else requested


def main(argv=None):
    ap = argparse.ArgumentParser(prog="tttlab", description=__doc__)
    ap.add_argument("--config", default=None, help="flat key-value config file")
    ap.add_argument("--seed", type=int, default=None, help="root seed override")
    ap.add_argument("--out", default=None, help="output directory override")
    ap.add_argument("--workers", type=int, default=1)
    sub = ap.add_subparsers(dest="command", required=True)
    sub.add_parser("toy")
    sub.add_parser("train")
    p_ft = sub.add_parser("finetune")
    p_ft.add_argument("--params", required=True)
    p_ev = sub.add_parser("eval")
    p_ev.add_argument("--params", required=True)
    p_ni = sub.add_parser("niah")
    p_ni.add_argument("--params", default=None)
    p_ni.add_argument("--oracle", action="store_true")
    p_sw = sub.add_parser("sweep")
    p_sw.add_argument("--axis", required=True, choices=["window_k", "batch_b", "fast_fraction"])
    p_sw.add_argument("--values", required=True, help="comma-separated values")
    p_be = sub.add_parser("bench")
    p_be.add_argument("--grid", default="256,512,1024,2048")
    args = ap.parse_args(argv)

    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg.recipe.seed = args.seed
    out_dir = args.out or cfg.output_dir
    write_manifest(cfg, out_dir)
    workers = _thread_cap(args.workers)
    status = 0

    if args.command == "toy":
        results = run_toy(cfg, out_dir)
        for name, res in results.items():
            line = res.get("aggregate", res.get("error"))
            print(f"{name}: {line}")
            if "error" in res:
                status = 1
    elif args.command == "train":
        train_arr, _ = make_toy_corpora(cfg, cfg.recipe.seed)
        try:
            params, curve = train.train_run(cfg.model, cfg.ttt, cfg.recipe, train_arr)
        except DivergenceError as err:
            print(err)
            return 1
        save_params(params, os.path.join(out_dir, "params.bin"))
        train.curve_to_csv(curve, os.path.join(out_dir, "curve.csv"))
    elif args.command == "finetune":
        params = load_params(args.params)
        train_arr, _ = make_toy_corpora(cfg, cfg.recipe.seed)
        try:
            params, curve = train.finetune_run(params, cfg.model, cfg.ttt, cfg.recipe, train_arr)
        except DivergenceError as err:
            print(err)
            return 1
        save_params(params, os.path.join(out_dir, "params_ft.bin"))
        train.curve_to_csv(curve, os.path.join(out_dir, "curve_ft.csv"))
    elif args.command == "eval":
        params = load_params(args.params)
        _, eval_arr = make_toy_corpora(cfg, cfg.recipe.seed)
        report = evaluate.loss_breakdown(params, cfg.model, cfg.ttt, eval_arr)
        evaluate.report_to_csv(report, os.path.join(out_dir, "per_index.csv"))
        print(f"aggregate: {report.aggregate}")
    elif args.command == "niah":
        instances = []
        for offset, kind in enumerate(data.NIAH_KINDS):
            for s in split_seeds(cfg.recipe.seed + offset, cfg.eval.niah_per_kind):
                instances.append(data.gen_niah(kind, cfg.eval.haystack_len, s))
        data.niah_to_jsonl(instances, os.path.join(out_dir, "niah.jsonl"))
        if args.oracle or not args.params:
            decode_fn = evaluate.oracle_decoder(instances)
        else:
            params = load_params(args.params)
            decode_fn = evaluate.model_decoder(params, cfg.model, cfg.ttt)
        acc = evaluate.niah_eval(instances, decode_fn)
        with open(os.path.join(out_dir, "niah_accuracy.csv"), "w") as fh:
            fh.write("kind,accuracy\n")
            for kind, a in sorted(acc.items()):
                fh.write(f"{kind},{a}\n")
        print(acc)
    elif args.command == "sweep":
        values = []
        for v in args.values.split(","):
            values.append("final" if v == "final" else (int(v) if v.isdigit() else float(v)))
        rows = run_sweep(cfg, args.axis, values, out_dir, workers=workers)
        if any(err for _, _, err in rows):
            status = 1
    elif args.command == "bench":
        grid = [int(v) for v in args.grid.split(",") if v]
        if not grid:
            print("empty grid")
            return 1
        rows = evaluate.bench(lambda s: build_model(s, cfg.recipe.seed), cfg.model, cfg.ttt, grid)
        evaluate.bench_to_csv(rows, os.path.join(out_dir, "bench.csv"))
        for r in rows:
            print(r)
    return status


if __name__ == "__main__":
    sys.exit(main())
