"""Transfer init, pairwise ranking loss, propagation, fine-tune loop, IO."""

import math

import numpy as np
import pytest
from scipy import stats

from crossrec.encoder import init_encoder
from crossrec.errors import (ConfigError, ContractError, FormatError,
                             NoNegativeAvailableError, NumericError,
                             ShapeError)
from crossrec.evaluate import InteractionSplit, evaluate, split_interactions
from crossrec.finetune import (EmbeddingTable, FinetuneConfig, InitConfig,
                               TransferMode, bpr_loss, init_target_embeddings,
                               lightgcn_propagate, load_table, parse_mode,
                               sample_negatives, save_table, score,
                               scoring_table, train_mf, write_table_text)
from crossrec.graph import SamplerConfig, graph_from_edge_arrays
from crossrec.ids import CommonUserAlignment, IdMap
from crossrec.rng import substream


def rand_table(rng, num_users, num_items, d):
    return EmbeddingTable(rng.normal(size=(num_users, d)),
                          rng.normal(size=(num_items, d)))


def make_graph(rng, num_users=10, num_items=8, num_edges=30):
    u = rng.integers(0, num_users, size=num_edges)
    i = rng.integers(0, num_items, size=num_edges)
    return graph_from_edge_arrays(num_users, num_items, u, i)


# ---------------------------------------------------------------------------
# tables and scores


def test_table_rejects_width_mismatch():
    with pytest.raises(ShapeError):
        EmbeddingTable(np.zeros((2, 3)), np.zeros((2, 4)))


def test_table_rejects_non_finite():
    bad = np.zeros((2, 3))
    bad[1, 1] = np.nan
    with pytest.raises(NumericError):
        EmbeddingTable(bad, np.zeros((2, 3)))


def test_score_is_dot_product():
    table = EmbeddingTable(np.array([[1.0, 2.0], [0.0, 1.0]]),
                           np.array([[3.0, -1.0]]))
    assert score(table, 0, 0) == 1.0
    assert score(table, 1, 0) == -1.0
    with pytest.raises(IndexError):
        score(table, 2, 0)
    with pytest.raises(IndexError):
        score(table, 0, 1)


def test_parse_mode_round_trip():
    for mode in TransferMode:
        assert parse_mode(mode.value) is mode
    with pytest.raises(ConfigError):
        parse_mode("warm-start")


# ---------------------------------------------------------------------------
# pairwise ranking loss


def test_bpr_equal_scores_give_log_two():
    """Zero margin on every triple: loss is n * log 2 with no penalty."""
    table = EmbeddingTable(np.ones((2, 3)), np.ones((4, 3)))
    triples = np.array([[0, 0, 1], [1, 2, 3], [0, 2, 3]])
    loss, _ = bpr_loss(table, triples, l2=0.0)
    assert loss == pytest.approx(3 * math.log(2.0), rel=1e-12)


def test_bpr_penalizes_distinct_rows_once():
    rng = np.random.default_rng(0)
    table = rand_table(rng, 3, 5, 4)
    # user 0 appears twice, item 1 appears twice (as pos and neg)
    triples = np.array([[0, 1, 2], [0, 3, 1]])
    l2 = 0.05
    loss_zero, _ = bpr_loss(table, triples, l2=0.0)
    loss_reg, _ = bpr_loss(table, triples, l2=l2)
    touched = (np.linalg.norm(table.user_emb[0]) ** 2
               + sum(np.linalg.norm(table.item_emb[i]) ** 2
                     for i in (1, 2, 3)))
    assert loss_reg - loss_zero == pytest.approx(l2 * touched, rel=1e-12)


def test_bpr_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    for trial in range(6):
        nu, ni, d = 4, 6, 3
        table = rand_table(rng, nu, ni, d)
        triples = np.column_stack((rng.integers(0, nu, 5),
                                   rng.integers(0, ni, 5),
                                   rng.integers(0, ni, 5)))
        l2 = float(rng.uniform(0.0, 0.1))
        _, rows = bpr_loss(table, triples, l2=l2)
        h = 1e-6

        def total():
            return bpr_loss(table, triples, l2=l2)[0]

        for arr, idx_rows, grads in (
                (table.user_emb, rows.user_rows, rows.user_grads),
                (table.item_emb, rows.item_rows, rows.item_grads)):
            for row, grad in zip(idx_rows, grads):
                for c in range(d):
                    keep = arr[row, c]
                    arr[row, c] = keep + h
                    hi = total()
                    arr[row, c] = keep - h
                    lo = total()
                    arr[row, c] = keep
                    assert grad[c] == pytest.approx((hi - lo) / (2 * h),
                                                    rel=1e-5, abs=1e-9)


def test_bpr_untouched_rows_have_no_gradient():
    rng = np.random.default_rng(2)
    table = rand_table(rng, 5, 5, 3)
    _, rows = bpr_loss(table, np.array([[1, 2, 3]]), l2=0.5)
    assert set(rows.user_rows) == {1}
    assert set(rows.item_rows) == {2, 3}


def test_bpr_rotation_invariance():
    """An orthogonal change of basis moves neither margins nor norms."""
    rng = np.random.default_rng(3)
    table = rand_table(rng, 4, 6, 5)
    q, _ = np.linalg.qr(rng.normal(size=(5, 5)))
    rotated = EmbeddingTable(table.user_emb @ q, table.item_emb @ q)
    triples = np.array([[0, 1, 2], [3, 4, 5], [2, 0, 3]])
    a, _ = bpr_loss(table, triples, l2=0.01)
    b, _ = bpr_loss(rotated, triples, l2=0.01)
    assert a == pytest.approx(b, rel=1e-9)


def test_bpr_membership_contract():
    graph = graph_from_edge_arrays(2, 3, np.array([0, 0, 1]),
                                   np.array([0, 1, 2]))
    table = EmbeddingTable(np.ones((2, 2)), np.ones((3, 2)))
    # fine: user 0 saw item 0, never item 2
    bpr_loss(table, np.array([[0, 0, 2]]), graph=graph)
    with pytest.raises(ContractError):
        bpr_loss(table, np.array([[0, 2, 1]]), graph=graph)   # pos unseen
    with pytest.raises(ContractError):
        bpr_loss(table, np.array([[0, 0, 1]]), graph=graph)   # neg seen


def test_bpr_rejects_bad_shapes():
    table = EmbeddingTable(np.ones((2, 2)), np.ones((3, 2)))
    with pytest.raises(ShapeError):
        bpr_loss(table, np.empty((0, 3), dtype=np.int64))
    with pytest.raises(ShapeError):
        bpr_loss(table, np.array([[0, 1]]))
    with pytest.raises(IndexError):
        bpr_loss(table, np.array([[5, 0, 1]]))
    with pytest.raises(IndexError):
        bpr_loss(table, np.array([[0, 0, 9]]))


# ---------------------------------------------------------------------------
# negative sampling


def test_negatives_two_item_graph():
    graph = graph_from_edge_arrays(1, 2, np.array([0]), np.array([0]))
    draws = sample_negatives(graph, 0, 50, substream(0, "neg"))
    assert (draws == 1).all()


def test_negatives_exhausted_complement():
    graph = graph_from_edge_arrays(1, 2, np.array([0, 0]), np.array([0, 1]))
    with pytest.raises(NoNegativeAvailableError):
        sample_negatives(graph, 0, 1, substream(0, "neg"))


def test_negatives_user_out_of_range():
    graph = graph_from_edge_arrays(1, 2, np.array([0]), np.array([0]))
    with pytest.raises(IndexError):
        sample_negatives(graph, 3, 1, substream(0, "neg"))


def test_negatives_uniform_over_complement():
    positives = np.array([2, 5, 7])
    graph = graph_from_edge_arrays(1, 20, np.zeros(3, dtype=np.int64),
                                   positives)
    draws = sample_negatives(graph, 0, 3400, substream(1, "neg"))
    assert not np.isin(draws, positives).any()
    counts = np.bincount(draws, minlength=20)
    _, p = stats.chisquare(counts[counts > 0])
    assert p > 0.01


def test_negatives_deterministic():
    graph = graph_from_edge_arrays(2, 9, np.array([0, 1]), np.array([3, 4]))
    a = sample_negatives(graph, 0, 20, substream(5, "neg"))
    b = sample_negatives(graph, 0, 20, substream(5, "neg"))
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------------------
# propagation


def dense_propagate(table, graph, layers):
    """Brute-force propagation on the full (U+I) x (U+I) matrix."""
    nu, ni = graph.num_users, graph.num_items
    a_hat = np.zeros((nu + ni, nu + ni))
    for u, i in graph.edges():
        w = 1.0 / math.sqrt(graph.user_degrees[u] * graph.item_degrees[i])
        a_hat[u, nu + i] = a_hat[nu + i, u] = w
    x = np.vstack((table.user_emb, table.item_emb))
    acc = x.copy()
    cur = x
    for _ in range(layers):
        cur = a_hat @ cur
        acc += cur
    out = acc / (layers + 1)
    return EmbeddingTable(out[:nu], out[nu:])


def test_propagate_single_edge():
    graph = graph_from_edge_arrays(1, 1, np.array([0]), np.array([0]))
    table = EmbeddingTable(np.array([[2.0, 0.0]]), np.array([[0.0, 4.0]]))
    out = lightgcn_propagate(table, graph, 1)
    np.testing.assert_allclose(out.user_emb[0], [1.0, 2.0], atol=1e-15)
    np.testing.assert_allclose(out.item_emb[0], [1.0, 2.0], atol=1e-15)


def test_propagate_isolated_node_shrinks():
    graph = graph_from_edge_arrays(2, 1, np.array([0]), np.array([0]))
    table = EmbeddingTable(np.array([[1.0], [9.0]]), np.array([[1.0]]))
    out = lightgcn_propagate(table, graph, 3)
    assert out.user_emb[1, 0] == pytest.approx(9.0 / 4.0, rel=1e-15)


def test_propagate_matches_dense_oracle():
    rng = np.random.default_rng(4)
    for trial in range(8):
        graph = make_graph(rng, 12, 8, 25)
        table = rand_table(rng, 12, 8, 5)
        for layers in (1, 3):
            got = lightgcn_propagate(table, graph, layers)
            want = dense_propagate(table, graph, layers)
            np.testing.assert_allclose(got.user_emb, want.user_emb,
                                       atol=1e-10)
            np.testing.assert_allclose(got.item_emb, want.item_emb,
                                       atol=1e-10)


def test_propagate_is_linear():
    rng = np.random.default_rng(5)
    graph = make_graph(rng, 8, 6, 18)
    x = rand_table(rng, 8, 6, 4)
    y = rand_table(rng, 8, 6, 4)
    mix = EmbeddingTable(2.0 * x.user_emb - 0.5 * y.user_emb,
                         2.0 * x.item_emb - 0.5 * y.item_emb)
    px = lightgcn_propagate(x, graph, 3)
    py = lightgcn_propagate(y, graph, 3)
    pm = lightgcn_propagate(mix, graph, 3)
    np.testing.assert_allclose(pm.user_emb,
                               2.0 * px.user_emb - 0.5 * py.user_emb,
                               atol=1e-12)


def test_propagate_is_self_adjoint():
    """<P x, y> == <x, P y>: the training loop reuses P as its own pullback."""
    rng = np.random.default_rng(6)
    graph = make_graph(rng, 9, 7, 20)
    x = rand_table(rng, 9, 7, 3)
    y = rand_table(rng, 9, 7, 3)
    px = lightgcn_propagate(x, graph, 3)
    py = lightgcn_propagate(y, graph, 3)
    lhs = float((px.user_emb * y.user_emb).sum()
                + (px.item_emb * y.item_emb).sum())
    rhs = float((x.user_emb * py.user_emb).sum()
                + (x.item_emb * py.item_emb).sum())
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_propagate_rejects_bad_arguments():
    graph = graph_from_edge_arrays(2, 2, np.array([0]), np.array([0]))
    table = EmbeddingTable(np.zeros((2, 2)), np.zeros((2, 2)))
    with pytest.raises(ConfigError):
        lightgcn_propagate(table, graph, 0)
    with pytest.raises(ShapeError):
        lightgcn_propagate(EmbeddingTable(np.zeros((3, 2)), np.zeros((2, 2))),
                           graph, 1)


# ---------------------------------------------------------------------------
# transfer initialization


@pytest.fixture(scope="module")
def init_fixture():
    rng = np.random.default_rng(7)
    source = make_graph(rng, 8, 7, 26)
    target = make_graph(rng, 6, 5, 18)
    encoder = init_encoder(seed=9, d_in=6, d=8, num_layers=1).query
    cfg = InitConfig(feature_dim=6, seed=3,
                     sampler=SamplerConfig(r=1, max_subgraph_nodes=8))
    alignment = CommonUserAlignment(pairs=((2, 0), (5, 1), (0, 3)))
    return source, target, encoder, cfg, alignment


def test_init_random_bounds_and_determinism(init_fixture):
    _, target, _, cfg, _ = init_fixture
    a = init_target_embeddings(None, target, TransferMode.RANDOM, cfg=cfg)
    b = init_target_embeddings(None, target, TransferMode.RANDOM, cfg=cfg)
    assert a.user_emb.shape == (6, cfg.embed_dim)
    assert a.item_emb.shape == (5, cfg.embed_dim)
    bound = 1.0 / math.sqrt(cfg.embed_dim)
    assert np.abs(a.user_emb).max() < bound
    np.testing.assert_array_equal(a.user_emb, b.user_emb)
    np.testing.assert_array_equal(a.item_emb, b.item_emb)


def test_init_full_equals_pre_only(init_fixture):
    _, target, encoder, cfg, _ = init_fixture
    full = init_target_embeddings(encoder, target, TransferMode.FULL, cfg=cfg)
    pre = init_target_embeddings(encoder, target, TransferMode.PRE_ONLY,
                                 cfg=cfg)
    np.testing.assert_array_equal(full.user_emb, pre.user_emb)
    np.testing.assert_array_equal(full.item_emb, pre.item_emb)
    norms = np.linalg.norm(full.user_emb, axis=1)
    np.testing.assert_allclose(norms, 1.0, atol=1e-9)   # encoder outputs


def test_init_common_user_modes_touch_only_aligned_rows(init_fixture):
    source, target, encoder, cfg, alignment = init_fixture
    base = init_target_embeddings(None, target, TransferMode.RANDOM,
                                  cfg=InitConfig(feature_dim=6,
                                                 embed_dim=encoder.d,
                                                 seed=cfg.seed,
                                                 sampler=cfg.sampler))
    for mode in (TransferMode.CU_PE, TransferMode.CU_PM):
        table = init_target_embeddings(encoder, target, mode,
                                       alignment=alignment, source=source,
                                       cfg=cfg)
        np.testing.assert_array_equal(table.item_emb, base.item_emb)
        touched = set(alignment.target_indices())
        for t in range(target.num_users):
            same = np.array_equal(table.user_emb[t], base.user_emb[t])
            assert same == (t not in touched)


def test_init_cu_pe_and_cu_pm_use_different_domains(init_fixture):
    """The same user gets structurally different neighborhoods per domain,
    so the two common-user modes land on different rows."""
    _, _, encoder, cfg, _ = init_fixture
    source = graph_from_edge_arrays(2, 3, np.array([0, 0, 0, 1]),
                                    np.array([0, 1, 2, 0]))
    target = graph_from_edge_arrays(1, 1, np.array([0]), np.array([0]))
    alignment = CommonUserAlignment(pairs=((0, 0),))
    pe = init_target_embeddings(encoder, target, TransferMode.CU_PE,
                                alignment=alignment, source=source, cfg=cfg)
    pm = init_target_embeddings(encoder, target, TransferMode.CU_PM,
                                alignment=alignment, cfg=cfg)
    assert not np.array_equal(pe.user_emb[0], pm.user_emb[0])


def test_init_cu_pm_with_empty_alignment_is_random(init_fixture):
    _, target, encoder, cfg, _ = init_fixture
    table = init_target_embeddings(encoder, target, TransferMode.CU_PM,
                                   alignment=CommonUserAlignment(pairs=()),
                                   cfg=cfg)
    base = init_target_embeddings(None, target, TransferMode.RANDOM,
                                  cfg=InitConfig(feature_dim=6,
                                                 embed_dim=encoder.d,
                                                 seed=cfg.seed,
                                                 sampler=cfg.sampler))
    np.testing.assert_array_equal(table.user_emb, base.user_emb)
    np.testing.assert_array_equal(table.item_emb, base.item_emb)


def test_init_missing_pieces_raise(init_fixture):
    source, target, encoder, cfg, alignment = init_fixture
    with pytest.raises(ConfigError):
        init_target_embeddings(None, target, TransferMode.FULL, cfg=cfg)
    with pytest.raises(ConfigError):
        init_target_embeddings(encoder, target, TransferMode.CU_PM, cfg=cfg)
    with pytest.raises(ConfigError):
        init_target_embeddings(encoder, target, TransferMode.CU_PE,
                               alignment=alignment, cfg=cfg)
    with pytest.raises(ConfigError):
        init_target_embeddings(encoder, target, TransferMode.FULL,
                               cfg=InitConfig(feature_dim=9))


# ---------------------------------------------------------------------------
# fine-tuning loop


@pytest.fixture(scope="module")
def train_fixture():
    rng = np.random.default_rng(8)
    graph = make_graph(rng, 12, 10, 70)
    split = split_interactions(graph, test_fraction=0.2, val_fraction=0.2,
                               seed=1)
    table = rand_table(np.random.default_rng(9), graph.num_users,
                       graph.num_items, 8)
    return graph, split, table


def test_train_zero_epochs_returns_init(train_fixture):
    graph, split, table = train_fixture
    res = train_mf(table, graph, split, FinetuneConfig(epochs=0))
    assert res.best_epoch == -1
    assert res.loss_trace == []
    assert len(res.val_trace) == 1
    np.testing.assert_array_equal(res.table.user_emb, table.user_emb)
    np.testing.assert_array_equal(res.table.item_emb, table.item_emb)


def test_train_loss_decreases(train_fixture):
    graph, split, table = train_fixture
    cfg = FinetuneConfig(epochs=30, lr=0.01, batch_size=16, eval_interval=10,
                         eval_k=5, seed=2)
    res = train_mf(table, graph, split, cfg)
    losses = [v for _, v in res.loss_trace]
    assert np.mean(losses[-5:]) < np.mean(losses[:5])


def test_train_returns_best_validation_snapshot(train_fixture):
    graph, split, table = train_fixture
    cfg = FinetuneConfig(epochs=20, lr=0.01, batch_size=16, eval_interval=4,
                         eval_k=5, seed=3)
    res = train_mf(table, graph, split, cfg)
    report = evaluate(scoring_table(res.table, split, cfg.lgcn_layers),
                      graph, split, ks=(cfg.eval_k,), stage="val")
    assert report.recall[cfg.eval_k] == \
        pytest.approx(max(v for _, v in res.val_trace), abs=1e-12)


def test_train_is_reproducible(train_fixture):
    graph, split, table = train_fixture
    cfg = FinetuneConfig(epochs=6, batch_size=16, eval_interval=3, eval_k=5)
    a = train_mf(table, graph, split, cfg)
    b = train_mf(table, graph, split, cfg)
    assert a.loss_trace == b.loss_trace
    assert a.val_trace == b.val_trace
    np.testing.assert_array_equal(a.table.user_emb, b.table.user_emb)
    np.testing.assert_array_equal(a.table.item_emb, b.table.item_emb)


def test_train_multiple_negatives(train_fixture):
    graph, split, table = train_fixture
    cfg = FinetuneConfig(epochs=4, negatives=3, batch_size=16,
                         eval_interval=2, eval_k=5)
    res = train_mf(table, graph, split, cfg)
    assert all(np.isfinite(v) for _, v in res.loss_trace)


def test_train_with_propagation(train_fixture):
    graph, split, table = train_fixture
    cfg = FinetuneConfig(epochs=6, lgcn_layers=1, batch_size=16,
                         eval_interval=3, eval_k=5, lr=0.01)
    res = train_mf(table, graph, split, cfg)
    losses = [v for _, v in res.loss_trace]
    assert losses[-1] < losses[0]


def test_train_rejects_empty_train_split(train_fixture):
    graph, _, table = train_fixture
    edges = graph.edges()
    empty = np.empty((0, 2), dtype=np.int64)
    split = InteractionSplit(train=empty, val=empty, test=edges,
                             num_users=graph.num_users,
                             num_items=graph.num_items)
    with pytest.raises(ConfigError):
        train_mf(table, graph, split, FinetuneConfig(epochs=1))


def test_train_rejects_saturated_user():
    graph = graph_from_edge_arrays(1, 2, np.array([0, 0]), np.array([0, 1]))
    split = InteractionSplit(train=graph.edges().copy(),
                             val=np.empty((0, 2), dtype=np.int64),
                             test=np.empty((0, 2), dtype=np.int64),
                             num_users=1, num_items=2)
    table = EmbeddingTable(np.ones((1, 2)), np.ones((2, 2)))
    with pytest.raises(NoNegativeAvailableError):
        train_mf(table, graph, split, FinetuneConfig(epochs=1))


def test_config_validation():
    with pytest.raises(ConfigError):
        FinetuneConfig(lgcn_layers=2)
    with pytest.raises(ConfigError):
        FinetuneConfig(negatives=0)
    with pytest.raises(ConfigError):
        FinetuneConfig(lr=0.0)


def test_scoring_table_identity_without_propagation(train_fixture):
    _, split, table = train_fixture
    assert scoring_table(table, split, 0) is table


# ---------------------------------------------------------------------------
# table files


def test_table_round_trip(tmp_path):
    rng = np.random.default_rng(10)
    table = rand_table(rng, 4, 6, 3)
    path = tmp_path / "table.bin"
    save_table(path, table, fingerprint="f00d")
    loaded, fingerprint = load_table(path)
    assert fingerprint == "f00d"
    np.testing.assert_array_equal(loaded.user_emb, table.user_emb)
    np.testing.assert_array_equal(loaded.item_emb, table.item_emb)


def test_table_rejects_header_contradiction(tmp_path):
    table = rand_table(np.random.default_rng(11), 4, 6, 3)
    path = tmp_path / "table.bin"
    save_table(path, table)
    blob = bytearray(path.read_bytes())
    blob[11] = 9                        # user count field after magic+version
    path.write_bytes(bytes(blob))
    with pytest.raises(ShapeError):
        load_table(path)


def test_table_rejects_foreign_and_truncated(tmp_path):
    table = rand_table(np.random.default_rng(12), 2, 2, 2)
    path = tmp_path / "table.bin"
    save_table(path, table)
    blob = path.read_bytes()
    path.write_bytes(blob[:-5])
    with pytest.raises(FormatError):
        load_table(path)
    path.write_bytes(b"WRONGX\n" + blob[7:])
    with pytest.raises(FormatError):
        load_table(path)


def test_table_text_export(tmp_path):
    table = EmbeddingTable(np.array([[1.5, -2.0]]), np.array([[0.25, 0.0]]))
    path = tmp_path / "table.tsv"
    write_table_text(path, table)
    lines = path.read_text().splitlines()
    assert lines == ["0\t1.5,-2.0", "1\t0.25,0.0"]

    idmap = IdMap()
    idmap.add_user("alice")
    idmap.add_item("book-1")
    write_table_text(path, table, idmap=idmap)
    lines = path.read_text().splitlines()
    assert lines == ["alice\t1.5,-2.0", "book-1\t0.25,0.0"]
