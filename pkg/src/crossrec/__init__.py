"""Cross-domain recommendation toolkit.

A user-item interaction graph from a data-rich source domain is used to
pre-train a structural subgraph encoder with a contrastive objective; the
encoder then initializes embedding tables in a sparser target domain, which
are fine-tuned with a pairwise ranking loss and evaluated on held-out
interactions.  Everything runs on plain numpy with deterministic,
seed-keyed random streams.

Typical flow::

    from crossrec import graph, pretrain, finetune, evaluate

    pair = graph.generate_synthetic_pair(graph.SynthConfig())
    result = pretrain.run_pretrain(pair.source, pretrain.PretrainConfig())
    table = finetune.init_target_embeddings(
        result.encoder, pair.target, finetune.TransferMode.FULL,
        alignment=pair.alignment, source=pair.source)
    split = evaluate.split_interactions(pair.target)
    best = finetune.train_mf(table, pair.target, split,
                             finetune.FinetuneConfig()).table
    print(evaluate.evaluate(best, pair.target, split).text())

The ``crossrec`` command exposes the same stages as CLI subcommands.
"""

__version__ = "0.1.0"

from . import (ablation, dataio, encoder, errors, evaluate, finetune, graph,
               numerics, pretrain, rng)

__all__ = ["ablation", "dataio", "encoder", "errors", "evaluate", "finetune",
           "graph", "numerics", "pretrain", "rng", "__version__"]
