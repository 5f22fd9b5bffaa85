"""File ingestion, on-disk text formats, and run configuration.

Two review formats are ingested: CSV rows laid out ``item,user,rating,
timestamp`` and JSON-lines objects carrying ``reviewerID``/``asin`` fields.
Malformed lines are counted and skipped, never fatal — only a file with no
valid line at all is an error.

Graphs travel between CLI stages as sorted tab-separated edge lists of
external ids, so dumps are byte-stable regardless of input order.  Run
configuration is one JSON file deep-merged over package defaults plus
optional dotted-path overrides; the sha256 of the resolved config is the
fingerprint stamped into binary artifacts and metrics reports.
"""

import csv
import hashlib
import json
import os
from dataclasses import dataclass

from .errors import ConfigError, DataIOError, FormatError
from .evaluate import MetricsReport
from .graph import BipartiteGraph, SamplerConfig, SynthConfig
from .ids import CommonUserAlignment, IdMap
from .finetune import FinetuneConfig, InitConfig
from .pretrain import PretrainConfig

ENV_OUT_DIR = "CROSSREC_OUT"


# ---------------------------------------------------------------------------
# Review ingestion


@dataclass(frozen=True)
class ParseResult:
    """Valid (user, item) pairs plus the count of skipped input lines."""

    pairs: list
    skipped: int


def _parse_csv(fh):
    pairs, skipped = [], 0
    for row in csv.reader(fh):
        if len(row) < 2:
            skipped += 1
            continue
        item, user = row[0].strip(), row[1].strip()
        if not item or not user:
            skipped += 1
            continue
        pairs.append((user, item))
    return pairs, skipped


def _parse_jsonl(fh):
    pairs, skipped = [], 0
    for line in fh:
        if not line.strip():
            skipped += 1
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError:
            skipped += 1
            continue
        if not isinstance(record, dict):
            skipped += 1
            continue
        user = record.get("reviewerID")
        item = record.get("asin")
        if not isinstance(user, str) or not isinstance(item, str) \
                or not user or not item:
            skipped += 1
            continue
        pairs.append((user, item))
    return pairs, skipped


def parse_reviews(path, fmt: str) -> ParseResult:
    """Extract (user, item) pairs from a review file.

    ``fmt`` is "csv" (columns item,user,rating,timestamp; extra columns
    ignored) or "jsonl" (one object per line with reviewerID and asin).
    Raises DataIOError if the file cannot be read and FormatError if it
    contains no valid line.
    """
    if fmt not in ("csv", "jsonl"):
        raise ConfigError(f"unknown review format {fmt!r}")
    try:
        with open(path, "r", encoding="utf-8", newline="") as fh:
            pairs, skipped = (_parse_csv if fmt == "csv" else _parse_jsonl)(fh)
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    if not pairs:
        raise FormatError(f"{path}: no valid {fmt} lines")
    return ParseResult(pairs=pairs, skipped=skipped)


# ---------------------------------------------------------------------------
# Edge-list text format


def write_edge_list(path, pairs) -> None:
    """Write unique user<TAB>item lines, sorted, trailing newline."""
    unique = sorted(set((str(u), str(i)) for u, i in pairs))
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for user, item in unique:
                fh.write(f"{user}\t{item}\n")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


def read_edge_list(path) -> list:
    """Inverse of write_edge_list; strict about the two-field layout."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise DataIOError(f"cannot read {path}: {exc}") from exc
    pairs = []
    for number, line in enumerate(lines, start=1):
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise FormatError(f"{path}:{number}: expected user<TAB>item")
        pairs.append((parts[0], parts[1]))
    return pairs


def dump_graph(graph: BipartiteGraph, idmap: IdMap, path) -> None:
    """Serialize a graph as an edge list of external ids (sorted)."""
    pairs = [(idmap.user_ids[u], idmap.item_ids[i]) for u, i in graph.edges()]
    write_edge_list(path, pairs)


def align_common_users(source_ids: IdMap,
                       target_ids: IdMap) -> CommonUserAlignment:
    """Pair up users whose external ids appear in both domains."""
    pairs = []
    for t_idx, ext in enumerate(target_ids.user_ids):
        s_idx = source_ids.user_index.get(ext)
        if s_idx is not None:
            pairs.append((s_idx, t_idx))
    return CommonUserAlignment(tuple(pairs))


def write_alignment(path, alignment: CommonUserAlignment,
                    target_ids: IdMap) -> None:
    """One external id per line, in target-index order."""
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for _, t_idx in alignment.pairs:
                fh.write(f"{target_ids.user_ids[t_idx]}\n")
    except OSError as exc:
        raise DataIOError(f"cannot write {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Metrics documents


def write_metrics(report: MetricsReport, text_path, json_path) -> None:
    try:
        with open(text_path, "w", encoding="ascii") as fh:
            fh.write(report.text())
        with open(json_path, "w", encoding="ascii") as fh:
            fh.write(report.json())
    except OSError as exc:
        raise DataIOError(f"cannot write metrics: {exc}") from exc


def read_metrics_json(path) -> MetricsReport:
    try:
        with open(path, "r", encoding="ascii") as fh:
            return MetricsReport.from_json(fh.read())
    except OSError as exc:
        raise DataIOError(f"cannot read metrics {path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Run configuration


DEFAULT_CONFIG = {
    "seed": 0,
    "out_dir": "",
    "mode": "full",
    "ks": [20, 40],
    "paths": {
        "source_edges": "",
        "target_edges": "",
        "encoder": "",
        "table": "",
    },
    "kcore": {"user_k": 5, "item_k": 5},
    "split": {"test_fraction": 0.2, "val_fraction": 0.1},
    "synth": {
        "source_users": 2000,
        "source_items": 1000,
        "target_users": 1500,
        "target_items": 800,
        "shared_user_fraction": 0.5,
        "latent_dim": 8,
        "density": 0.005,
        "num_clusters": 6,
        "cluster_scale": 1.0,
        "activity_scale": 2.0,
        "popularity_scale": 3.0,
    },
    "sampler": {
        "r": 2,
        "restart_prob": 0.8,
        "max_walk_steps": 0,
        "max_subgraph_nodes": 128,
    },
    "pretrain": {
        "feature_dim": 32,
        "embed_dim": 64,
        "num_layers": 3,
        "temperature": 0.07,
        "momentum": 0.999,
        "queue_capacity": 512,
        "lr": 0.005,
        "batch_size": 32,
        "epochs": 1,
        "max_steps": 0,
        "checkpoint_interval": 0,
    },
    "finetune": {
        "lr": 0.001,
        "l2": 1e-4,
        "negatives": 1,
        "batch_size": 1024,
        "epochs": 100,
        "eval_interval": 5,
        "patience": 10,
        "eval_k": 20,
        "lgcn_layers": 0,
    },
    "init": {"full_common_from_source": False},
    "ablation": {"seeds": [0, 1, 2, 3, 4]},
}


def _merge(base: dict, update: dict, prefix: str = "") -> dict:
    out = dict(base)
    for key, value in update.items():
        if key not in base:
            raise ConfigError(f"unknown config key {prefix}{key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {prefix}{key!r} must be a table")
            out[key] = _merge(base[key], value, f"{prefix}{key}.")
        else:
            out[key] = value
    return out


def apply_override(cfg: dict, dotted: str, value) -> None:
    """Set a dotted-path key (e.g. "sampler.r") in a resolved config."""
    node = cfg
    parts = dotted.split(".")
    for part in parts[:-1]:
        if part not in node or not isinstance(node[part], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        node = node[part]
    if parts[-1] not in node:
        raise ConfigError(f"unknown config key {dotted!r}")
    node[parts[-1]] = value


def load_config(path=None, overrides: dict = None) -> dict:
    """Resolve defaults <- config file <- overrides into one plain dict."""
    cfg = json.loads(json.dumps(DEFAULT_CONFIG))  # deep copy
    if path is not None:
        try:
            with open(path, "r", encoding="utf-8") as fh:
                user_cfg = json.load(fh)
        except OSError as exc:
            raise DataIOError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(user_cfg, dict):
            raise FormatError(f"config {path} must hold a JSON object")
        cfg = _merge(cfg, user_cfg)
    for dotted, value in (overrides or {}).items():
        apply_override(cfg, dotted, value)
    return cfg


def config_fingerprint(cfg: dict) -> str:
    """sha256 over the canonical JSON rendering of a resolved config.

    The output directory is excluded: it says where artifacts land, not
    what was computed, so the same run written elsewhere keeps its identity.
    """
    content = {key: value for key, value in cfg.items() if key != "out_dir"}
    canon = json.dumps(content, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def out_dir(cfg: dict) -> str:
    """Configured output directory, else $CROSSREC_OUT, else ./crossrec-out."""
    return cfg["out_dir"] or os.environ.get(ENV_OUT_DIR) or "crossrec-out"


# Typed views over a resolved config dict.

def sampler_config(cfg: dict) -> SamplerConfig:
    return SamplerConfig(**cfg["sampler"])


def synth_config(cfg: dict) -> SynthConfig:
    return SynthConfig(seed=cfg["seed"], **cfg["synth"])


def pretrain_config(cfg: dict) -> PretrainConfig:
    return PretrainConfig(seed=cfg["seed"], sampler=sampler_config(cfg),
                          **cfg["pretrain"])


def finetune_config(cfg: dict) -> FinetuneConfig:
    return FinetuneConfig(seed=cfg["seed"], **cfg["finetune"])


def init_config(cfg: dict) -> InitConfig:
    return InitConfig(feature_dim=cfg["pretrain"]["feature_dim"],
                      embed_dim=cfg["pretrain"]["embed_dim"],
                      seed=cfg["seed"], sampler=sampler_config(cfg),
                      full_common_from_source=cfg["init"]
                      ["full_common_from_source"])
