"""Command-line entry point.

Subcommands mirror the pipeline stages and compose through the shared
cache directory::

    hinfuse pipeline --config exp.json --out-dir out/
    hinfuse ingest|similarity|factorize|train --config exp.json --out-dir out/
    hinfuse evaluate --config exp.json --out-dir out/   # needs a trained model
    hinfuse report --out-dir out/                       # per-group selection

Exit status is 0 on success and 1 with a stage-tagged message otherwise.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import fmg, hin, metagraph, pipeline


def _load_config(args):
    cfg = pipeline.ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.solver.seed = args.seed
    if getattr(args, "repeats", None) is not None:
        cfg.repeats = args.repeats
    return cfg


def _stages(cfg, args):
    return pipeline._Stages(cfg, args.out_dir, args.cache_dir)


def cmd_ingest(args):
    cfg = _load_config(args)
    stages = _stages(cfg, args)
    store, ratings, _, specs, report = stages.timed("ingest", stages.ingest)
    summary = {
        "entities": {name: ent.count for name, ent in store.entities.items()},
        "relations": {name: adj.nnz for name, (_, adj) in store.relations.items()},
        "ratings": len(ratings),
        "metagraphs": [s.name for s in specs],
        "validation": {"errors": report.errors, "warnings": report.warnings},
    }
    path = os.path.join(args.out_dir, "ingest.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    print(json.dumps(summary, indent=2))
    return 0


def _through_factorize(cfg, stages):
    store, ratings, rating_decl, specs, _ = stages.timed("ingest", stages.ingest)
    train_rs, valid_rs, test_rs = stages.timed("split", lambda: stages.split(ratings, cfg.seed))
    sims = stages.timed(
        "similarity", lambda: stages.similarities(store, train_rs, rating_decl, specs, cfg.seed)
    )
    return store, (train_rs, valid_rs, test_rs), sims, specs


def cmd_similarity(args):
    cfg = _load_config(args)
    stages = _stages(cfg, args)
    _, _, sims, _ = _through_factorize(cfg, stages)
    for sim, event in zip(sims, stages.cache_events["similarity"]):
        status = "cached" if event["hit"] else "computed"
        print(f"{sim.metagraph}: {sim.shape[0]}x{sim.shape[1]}, nnz={sim.nnz} ({status})")
    return 0


def cmd_factorize(args):
    cfg = _load_config(args)
    stages = _stages(cfg, args)
    _, _, sims, _ = _through_factorize(cfg, stages)
    pairs = stages.timed("factorize", lambda: stages.factorize(sims, cfg.seed))
    for pair, event in zip(pairs, stages.cache_events["factorize"]):
        status = "cached" if event["hit"] else "computed"
        print(f"{pair.metagraph}: rank={pair.rank} method={pair.method} ({status})")
    return 0


def cmd_train(args):
    cfg = _load_config(args)
    stages = _stages(cfg, args)
    _, (train_rs, valid_rs, _), sims, _ = _through_factorize(cfg, stages)
    pairs = stages.timed("factorize", lambda: stages.factorize(sims, cfg.seed))
    train_table, layout = stages.timed("assemble", lambda: stages.assemble(pairs, train_rs, "train"))
    valid_table, _ = stages.timed("assemble", lambda: stages.assemble(pairs, valid_rs, "train"))
    scaler = stages.fit_scaler(train_table)
    if scaler is not None:
        train_table.X = fmg.standardize(train_table.X, scaler)
        if len(valid_table):
            valid_table.X = fmg.standardize(valid_table.X, scaler)
    params, trace, lam, series = stages.timed(
        "train", lambda: stages.train(train_table, valid_table, layout)
    )
    fmg.save_model(os.path.join(args.out_dir, "model.npz"), params, layout,
                   stages.reg_config(layout, lam))
    trace.to_jsonl(os.path.join(args.out_dir, "trace.jsonl"))
    print(f"selected lambda={lam}, nnz={pipeline.nnz_ratio(params):.4f}")
    for entry in series:
        print(f"  lambda={entry['lambda']}: rmse_valid={entry['rmse_valid']:.4f} nnz={entry['nnz']:.4f}")
    return 0


def cmd_evaluate(args):
    cfg = _load_config(args)
    stages = _stages(cfg, args)
    model_path = os.path.join(args.out_dir, "model.npz")
    if not os.path.exists(model_path):
        raise pipeline.StageError("evaluate", f"no model at {model_path}; run train first")
    params, layout, _ = fmg.load_model(model_path)
    _, (train_rs, valid_rs, test_rs), sims, _ = _through_factorize(cfg, stages)
    pairs = stages.timed("factorize", lambda: stages.factorize(sims, cfg.seed))
    scaler = None
    if cfg.standardize_features:
        train_table, _ = stages.assemble(pairs, train_rs, "train")
        scaler = stages.fit_scaler(train_table)
    rmses = stages.timed(
        "evaluate",
        lambda: stages.evaluate(
            params, pairs, {"train": train_rs, "valid": valid_rs, "test": test_rs}, layout,
            scaler=scaler,
        ),
    )
    print(json.dumps(rmses, indent=2))
    return 0


def cmd_pipeline(args):
    cfg = _load_config(args)
    report = pipeline.run_pipeline(cfg, args.out_dir, args.cache_dir)
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def cmd_report(args):
    model_path = os.path.join(args.out_dir, "model.npz")
    if not os.path.exists(model_path):
        raise pipeline.StageError("report", f"no model at {model_path}; run train first")
    params, layout, _ = fmg.load_model(model_path)
    rows = pipeline.report_selected(params, layout, threshold=args.threshold)
    for row in rows:
        flags = ("w" if row["w_selected"] else "-") + ("V" if row["v_selected"] else "-")
        print(f"{row['group']:>24} [{flags}] w_norm={row['w_norm']:.5f} v_norm={row['v_norm']:.5f}")
    print(f"nnz={pipeline.nnz_ratio(params):.4f}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="hinfuse", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    commands = {
        "ingest": cmd_ingest,
        "similarity": cmd_similarity,
        "factorize": cmd_factorize,
        "train": cmd_train,
        "evaluate": cmd_evaluate,
        "pipeline": cmd_pipeline,
        "report": cmd_report,
    }
    for name, fn in commands.items():
        p = sub.add_parser(name)
        if name != "report":
            p.add_argument("--config", required=True, help="experiment config (JSON)")
            p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out-dir", default="out", help="artifact output directory")
        p.add_argument("--cache-dir", default=None, help="cache directory (default: <out-dir>/cache)")
        if name == "report":
            p.add_argument("--threshold", type=float, default=1e-10, help="selection threshold")
        if name == "pipeline":
            p.add_argument("--repeats", type=int, default=None,
                           help="rerun split+train with shifted seeds; report mean and std")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except pipeline.StageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (hin.ValidationError, hin.EdgeFileError, metagraph.MetagraphSyntaxError,
            metagraph.PlanCompileError, ValueError) as exc:
        print(f"[config] {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
