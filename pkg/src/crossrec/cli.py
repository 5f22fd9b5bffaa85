"""Command-line entry points.

Every subcommand reads one JSON config file (all keys optional, defaults
documented in dataio.DEFAULT_CONFIG) plus a few common override flags, and
writes its artifacts under the output directory (--out, else the config's
out_dir, else $CROSSREC_OUT, else ./crossrec-out).

Exit codes: 0 success, 1 configuration/contract problems, 2 I/O problems.
"""

import argparse
import os
import sys

from . import dataio
from .ablation import run_ablations, rows_to_text
from .encoder import load_encoder, save_encoder
from .errors import ConfigError, CrossrecError, DataIOError
from .evaluate import evaluate, split_interactions
from .finetune import (TransferMode, init_target_embeddings, load_table,
                       parse_mode, save_table, scoring_table, train_mf)
from .graph import build_graph, compact, generate_synthetic_pair, k_core
from .ids import IdMap
from .pretrain import run_pretrain, write_loss_trace


def _resolved_config(args) -> dict:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if getattr(args, "mode", None):
        overrides["mode"] = args.mode
    if getattr(args, "r", None):
        overrides["sampler.r"] = args.r
    if getattr(args, "lgcn_layers", None) is not None:
        overrides["finetune.lgcn_layers"] = args.lgcn_layers
    if args.out:
        overrides["out_dir"] = args.out
    return dataio.load_config(args.config, overrides)


def _out_dir(cfg: dict) -> str:
    path = dataio.out_dir(cfg)
    os.makedirs(path, exist_ok=True)
    return path


def _graph_from_path(path, what: str):
    if not path:
        raise ConfigError(f"paths.{what} must be set for this command")
    return build_graph(dataio.read_edge_list(path))


def _split_for(cfg: dict, target):
    return split_interactions(target,
                              test_fraction=cfg["split"]["test_fraction"],
                              val_fraction=cfg["split"]["val_fraction"],
                              seed=cfg["seed"])


# ---------------------------------------------------------------------------
# Subcommands


def cmd_synth(args) -> int:
    cfg = _resolved_config(args)
    out = _out_dir(cfg)
    pair = generate_synthetic_pair(dataio.synth_config(cfg))
    dataio.dump_graph(pair.source, pair.source_ids,
                      os.path.join(out, "source_edges.tsv"))
    dataio.dump_graph(pair.target, pair.target_ids,
                      os.path.join(out, "target_edges.tsv"))
    dataio.write_alignment(os.path.join(out, "common_users.txt"),
                           pair.alignment, pair.target_ids)
    print(f"source: users={pair.source.num_users} items="
          f"{pair.source.num_items} edges={pair.source.edge_count}")
    print(f"target: users={pair.target.num_users} items="
          f"{pair.target.num_items} edges={pair.target.edge_count}")
    print(f"common users: {len(pair.alignment)}")
    return 0


def cmd_ingest(args) -> int:
    cfg = _resolved_config(args)
    out = _out_dir(cfg)
    result = dataio.parse_reviews(args.input, args.format)
    graph, idmap = build_graph(result.pairs)
    core = k_core(graph, cfg["kcore"]["user_k"], cfg["kcore"]["item_k"])
    core, kept_users, kept_items = compact(core)
    out_map = IdMap()
    for old in kept_users:
        out_map.add_user(idmap.user_ids[old])
    for old in kept_items:
        out_map.add_item(idmap.item_ids[old])
    dataio.dump_graph(core, out_map, os.path.join(out, "edges.tsv"))
    print(f"pairs={len(result.pairs)} skipped={result.skipped} "
          f"users={core.num_users} items={core.num_items} "
          f"edges={core.edge_count}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = _resolved_config(args)
    fingerprint = dataio.config_fingerprint(cfg)
    out = _out_dir(cfg)
    source, _ = _graph_from_path(cfg["paths"]["source_edges"], "source_edges")
    result = run_pretrain(source, dataio.pretrain_config(cfg),
                          checkpoint_dir=out)
    save_encoder(os.path.join(out, "encoder.bin"), result.pair, fingerprint)
    write_loss_trace(os.path.join(out, "pretrain_loss.tsv"),
                     result.loss_trace)
    final = result.loss_trace[-1] if result.loss_trace else float("nan")
    print(f"steps={result.steps_done} final_loss={final}")
    return 0


def _alignment_inputs(cfg, target_ids):
    source, source_ids = _graph_from_path(cfg["paths"]["source_edges"],
                                          "source_edges")
    return source, dataio.align_common_users(source_ids, target_ids)


def cmd_init_emb(args) -> int:
    cfg = _resolved_config(args)
    fingerprint = dataio.config_fingerprint(cfg)
    out = _out_dir(cfg)
    mode = parse_mode(cfg["mode"])
    target, target_ids = _graph_from_path(cfg["paths"]["target_edges"],
                                          "target_edges")
    icfg = dataio.init_config(cfg)
    encoder = None
    if mode != TransferMode.RANDOM:
        pair, _ = load_encoder(cfg["paths"]["encoder"]
                               or os.path.join(out, "encoder.bin"))
        encoder = pair.query
    source, alignment = (None, None)
    if mode in (TransferMode.CU_PE, TransferMode.CU_PM) \
            or (mode == TransferMode.FULL and icfg.full_common_from_source):
        source, alignment = _alignment_inputs(cfg, target_ids)
    table = init_target_embeddings(encoder, target, mode,
                                   alignment=alignment, source=source,
                                   cfg=icfg)
    save_table(os.path.join(out, "table_init.bin"), table, fingerprint)
    print(f"mode={mode.value} users={table.num_users} "
          f"items={table.num_items} d={table.d}")
    return 0


def cmd_finetune(args) -> int:
    cfg = _resolved_config(args)
    fingerprint = dataio.config_fingerprint(cfg)
    out = _out_dir(cfg)
    table, _ = load_table(cfg["paths"]["table"]
                          or os.path.join(out, "table_init.bin"))
    target, _ = _graph_from_path(cfg["paths"]["target_edges"],
                                 "target_edges")
    split = _split_for(cfg, target)
    result = train_mf(table, target, split, dataio.finetune_config(cfg))
    save_table(os.path.join(out, "table_best.bin"), result.table, fingerprint)
    with open(os.path.join(out, "finetune_loss.tsv"), "w",
              encoding="ascii") as fh:
        for epoch, loss in result.loss_trace:
            fh.write(f"{epoch}\t{loss!r}\n")
    with open(os.path.join(out, "finetune_val.tsv"), "w",
              encoding="ascii") as fh:
        for epoch, recall in result.val_trace:
            fh.write(f"{epoch}\t{recall!r}\n")
    print(f"epochs={len(result.loss_trace)} best_epoch={result.best_epoch}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _resolved_config(args)
    fingerprint = dataio.config_fingerprint(cfg)
    out = _out_dir(cfg)
    table, _ = load_table(cfg["paths"]["table"]
                          or os.path.join(out, "table_best.bin"))
    target, _ = _graph_from_path(cfg["paths"]["target_edges"],
                                 "target_edges")
    split = _split_for(cfg, target)
    scoring = scoring_table(table, split, cfg["finetune"]["lgcn_layers"])
    report = evaluate(scoring, target, split, ks=tuple(cfg["ks"]),
                      seed=cfg["seed"], fingerprint=fingerprint)
    dataio.write_metrics(report, os.path.join(out, "metrics.txt"),
                         os.path.join(out, "metrics.json"))
    print(report.text(), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = _resolved_config(args)
    fingerprint = dataio.config_fingerprint(cfg)
    out = _out_dir(cfg)
    rows = run_ablations(dataio.synth_config(cfg),
                         dataio.pretrain_config(cfg),
                         dataio.finetune_config(cfg),
                         seeds=cfg["ablation"]["seeds"],
                         ks=tuple(cfg["ks"]), fingerprint=fingerprint)
    text = rows_to_text(rows)
    with open(os.path.join(out, "ablation.txt"), "w", encoding="ascii") as fh:
        fh.write(text)
    import json as _json
    payload = [{"arm": row.arm, "seed": row.seed,
                "report": row.report.json_dict()} for row in rows]
    with open(os.path.join(out, "ablation.json"), "w",
              encoding="ascii") as fh:
        _json.dump(payload, fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")
    print(text, end="")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _resolved_config(args)
    fingerprint = dataio.config_fingerprint(cfg)
    out = _out_dir(cfg)
    paths = cfg["paths"]
    if not (paths["source_edges"] and paths["target_edges"]):
        # Materialize a synthetic pair, then fall through to the file
        # branch: every stage after this point sees exactly what a
        # stage-wise run reading the dumps would see (an edge list cannot
        # carry zero-degree nodes, so the dumps are the canonical form).
        pair = generate_synthetic_pair(dataio.synth_config(cfg))
        dataio.dump_graph(pair.source, pair.source_ids,
                          os.path.join(out, "source_edges.tsv"))
        dataio.dump_graph(pair.target, pair.target_ids,
                          os.path.join(out, "target_edges.tsv"))
        paths = dict(paths,
                     source_edges=os.path.join(out, "source_edges.tsv"),
                     target_edges=os.path.join(out, "target_edges.tsv"))
    source, source_ids = _graph_from_path(paths["source_edges"],
                                          "source_edges")
    target, target_ids = _graph_from_path(paths["target_edges"],
                                          "target_edges")
    alignment = dataio.align_common_users(source_ids, target_ids)
    mode = parse_mode(cfg["mode"])
    encoder = None
    if mode != TransferMode.RANDOM:
        presult = run_pretrain(source, dataio.pretrain_config(cfg))
        save_encoder(os.path.join(out, "encoder.bin"), presult.pair,
                     fingerprint)
        write_loss_trace(os.path.join(out, "pretrain_loss.tsv"),
                         presult.loss_trace)
        encoder = presult.encoder
    table = init_target_embeddings(encoder, target, mode,
                                   alignment=alignment, source=source,
                                   cfg=dataio.init_config(cfg))
    save_table(os.path.join(out, "table_init.bin"), table, fingerprint)
    split = _split_for(cfg, target)
    fcfg = dataio.finetune_config(cfg)
    if mode == TransferMode.PRE_ONLY:
        final, layers = table, 0
    else:
        result = train_mf(table, target, split, fcfg)
        save_table(os.path.join(out, "table_best.bin"), result.table,
                   fingerprint)
        final, layers = result.table, fcfg.lgcn_layers
    report = evaluate(scoring_table(final, split, layers), target, split,
                      ks=tuple(cfg["ks"]), seed=cfg["seed"],
                      fingerprint=fingerprint)
    dataio.write_metrics(report, os.path.join(out, "metrics.txt"),
                         os.path.join(out, "metrics.json"))
    print(report.text(), end="")
    return 0


# ---------------------------------------------------------------------------
# Parser and dispatch


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossrec",
        description="Cross-domain recommendation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    specs = [
        ("synth", cmd_synth, "generate a synthetic source/target pair"),
        ("ingest", cmd_ingest, "parse reviews, k-core filter, dump edges"),
        ("pretrain", cmd_pretrain, "contrastive pre-training on the source"),
        ("init-emb", cmd_init_emb, "build initial target embedding tables"),
        ("finetune", cmd_finetune, "BPR fine-tuning on the target"),
        ("evaluate", cmd_evaluate, "rank and score a table on held-out edges"),
        ("ablate", cmd_ablate, "run every study arm over paired seeds"),
        ("pipeline", cmd_pipeline, "synth/load -> pretrain -> transfer -> "
                                   "finetune -> evaluate"),
    ]
    for name, func, help_text in specs:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None, help="output directory")
        if name == "ingest":
            p.add_argument("--input", required=True, help="review file")
            p.add_argument("--format", required=True,
                           choices=("csv", "jsonl"))
        if name in ("init-emb", "pipeline"):
            p.add_argument("--mode", default=None,
                           choices=[m.value for m in TransferMode])
        if name in ("pretrain", "init-emb", "pipeline", "ablate"):
            p.add_argument("--r", type=int, default=None,
                           help="sampler hop radius")
        if name in ("finetune", "evaluate", "pipeline", "ablate"):
            p.add_argument("--lgcn-layers", type=int, default=None,
                           dest="lgcn_layers")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return args.func(args)
    except DataIOError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CrossrecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
