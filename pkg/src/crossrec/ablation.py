"""Ablation harness: run every study arm on shared per-seed data.

For each seed one synthetic domain pair and one target split are generated
and reused by every arm, so comparisons between arms are paired.  Work that
arms share — the pre-trained encoder for a given hop radius, the initial
tables for a given transfer mode — is computed once per seed.
"""

from dataclasses import dataclass, replace

import numpy as np

from .evaluate import MetricsReport, evaluate, split_interactions
from .finetune import (FinetuneConfig, InitConfig, TransferMode,
                       init_target_embeddings, scoring_table, train_mf)
from .graph import SynthConfig, generate_synthetic_pair
from .pretrain import PretrainConfig, run_pretrain


@dataclass(frozen=True)
class AblationArm:
    """One row of the study: a transfer mode plus its training knobs."""

    name: str
    mode: TransferMode
    finetune: bool = True
    lgcn_layers: int = 0
    r: int = 0                   # 0 = keep the pre-training sampler radius


DEFAULT_ARMS = (
    AblationArm("random", TransferMode.RANDOM),
    AblationArm("pre-only", TransferMode.PRE_ONLY, finetune=False),
    AblationArm("cu-pe", TransferMode.CU_PE),
    AblationArm("cu-pm", TransferMode.CU_PM),
    AblationArm("full", TransferMode.FULL),
    AblationArm("full-lgcn1", TransferMode.FULL, lgcn_layers=1),
    AblationArm("full-lgcn3", TransferMode.FULL, lgcn_layers=3),
    AblationArm("hop-2", TransferMode.FULL, r=2),
    AblationArm("hop-3", TransferMode.FULL, r=3),
)


@dataclass(frozen=True)
class AblationRow:
    arm: str
    seed: int
    report: MetricsReport


def _table_key(arm: AblationArm, radius: int) -> tuple:
    # pre-only and full build the identical initial table.
    mode = TransferMode.FULL if arm.mode == TransferMode.PRE_ONLY else arm.mode
    return (mode, radius)


def run_ablations(synth_cfg: SynthConfig, pretrain_cfg: PretrainConfig,
                  finetune_cfg: FinetuneConfig, seeds,
                  arms=DEFAULT_ARMS, ks=(20, 40),
                  fingerprint: str = "") -> list:
    """Evaluate every arm at every seed; returns AblationRow records.

    Arms with identical effective configurations produce identical rows (a
    useful self-check: "full" and "hop-2" coincide when the pre-training
    sampler radius is already 2).
    """
    rows = []
    for seed in seeds:
        pair = generate_synthetic_pair(replace(synth_cfg, seed=seed))
        split = split_interactions(pair.target, seed=seed)
        encoders = {}
        tables = {}
        trained = {}
        for arm in arms:
            radius = arm.r if arm.r else pretrain_cfg.sampler.r
            if arm.mode != TransferMode.RANDOM and radius not in encoders:
                pcfg = replace(pretrain_cfg, seed=seed,
                               sampler=replace(pretrain_cfg.sampler, r=radius))
                encoders[radius] = run_pretrain(pair.source, pcfg).encoder
            tkey = _table_key(arm, radius)
            if tkey not in tables:
                icfg = InitConfig(
                    feature_dim=pretrain_cfg.feature_dim,
                    embed_dim=pretrain_cfg.embed_dim, seed=seed,
                    sampler=replace(pretrain_cfg.sampler, r=radius))
                encoder = None if arm.mode == TransferMode.RANDOM \
                    else encoders[radius]
                tables[tkey] = init_target_embeddings(
                    encoder, pair.target, arm.mode,
                    alignment=pair.alignment, source=pair.source, cfg=icfg)
            if arm.finetune:
                rkey = tkey + (arm.lgcn_layers,)
                if rkey not in trained:
                    fcfg = replace(finetune_cfg, seed=seed,
                                   lgcn_layers=arm.lgcn_layers)
                    result = train_mf(tables[tkey], pair.target, split, fcfg)
                    trained[rkey] = scoring_table(result.table, split,
                                                  arm.lgcn_layers)
                final = trained[rkey]
            else:
                final = tables[tkey]
            report = evaluate(final, pair.target, split, ks=ks, seed=seed,
                              fingerprint=fingerprint)
            rows.append(AblationRow(arm=arm.name, seed=seed, report=report))
    return rows


def median_recall(rows, arm: str, k: int = 20) -> float:
    """Median over seeds of one arm's test recall@k."""
    values = [row.report.recall[k] for row in rows if row.arm == arm]
    if not values:
        raise KeyError(f"no rows for arm {arm!r}")
    return float(np.median(values))


def rows_to_text(rows) -> str:
    """Fixed-width summary table, one line per (arm, seed)."""
    if not rows:
        return f"{'arm':<12} {'seed':>4}\n"
    ks = sorted(rows[0].report.recall)
    header = f"{'arm':<12} {'seed':>4}"
    for k in ks:
        header += f" {f'recall@{k}':>12} {f'map@{k}':>12}"
    lines = [header]
    for row in rows:
        line = f"{row.arm:<12} {row.seed:>4}"
        for k in ks:
            line += (f" {row.report.recall[k]:>12.6f}"
                     f" {row.report.mean_ap[k]:>12.6f}")
        lines.append(line)
    return "\n".join(lines) + "\n"
