"""
Ablation grid: transfer modes, propagation depth, sampling radius
=================================================================

One call fans a config out over (arm x seed), reusing the expensive stages
where arms share them, and returns one row per cell.  DEFAULT_ARMS covers
every transfer mode plus LightGCN-depth and hop-radius variants; here a
four-arm subset over two seeds keeps the run short.
"""

import numpy as np

from crossrec.ablation import (AblationArm, DEFAULT_ARMS, median_recall,
                               rows_to_text, run_ablations)
from crossrec.finetune import FinetuneConfig, TransferMode
from crossrec.graph import SamplerConfig, SynthConfig
from crossrec.pretrain import PretrainConfig

print("the full default grid:", [arm.name for arm in DEFAULT_ARMS])

arms = (
    AblationArm("random", TransferMode.RANDOM),
    AblationArm("pre-only", TransferMode.PRE_ONLY, finetune=False),
    AblationArm("full", TransferMode.FULL),
    # Same transfer, but smooth scores over the interaction graph at
    # evaluation time with one propagation layer.
    AblationArm("full-lgcn1", TransferMode.FULL, lgcn_layers=1),
)

rows = run_ablations(
    synth_cfg=SynthConfig(source_users=400, source_items=250,
                          target_users=300, target_items=200,
                          shared_user_fraction=0.5, density=0.02, seed=0),
    pretrain_cfg=PretrainConfig(feature_dim=16, embed_dim=32, num_layers=2,
                                batch_size=16, lr=0.005, queue_capacity=64,
                                epochs=100, max_steps=300,
                                sampler=SamplerConfig(r=2,
                                                      max_subgraph_nodes=32)),
    finetune_cfg=FinetuneConfig(lr=0.005, epochs=3, batch_size=1024,
                                eval_interval=1, patience=100, eval_k=20),
    seeds=(0, 1),
    arms=arms,
    ks=(20,),
)

print()
print(rows_to_text(rows), end="")

print("\nmedian recall@20 by arm:")
for arm in arms:
    print(f"  {arm.name:<12} {median_recall(rows, arm.name, k=20):.4f}")
