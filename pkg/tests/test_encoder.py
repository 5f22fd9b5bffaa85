"""Subgraph encoder: forward analytics, exact gradients, momentum, files."""

import hashlib

import numpy as np
import pytest

from crossrec.encoder import (EncoderPair, EncoderParams, gin_backward,
                              gin_forward, init_encoder, load_encoder,
                              momentum_update, save_encoder)
from crossrec.errors import ConfigError, FormatError, ShapeError
from crossrec.graph import EgoSubgraph
from crossrec.numerics import MlpParams, mlp_forward
from crossrec.rng import RNG_ALGORITHM, substream


def make_subgraph(rng, n, d_in, density=0.5):
    """Random connected-enough subgraph with nonneg features."""
    adj = (rng.random((n, n)) < density).astype(float)
    adj = np.triu(adj, 1)
    adj[0, 1:] = 1.0                     # keep everything ego-reachable
    adj = adj + adj.T
    feats = np.abs(rng.normal(size=(n, d_in)))
    return EgoSubgraph(nodes=np.arange(n, dtype=np.int64), local_adj=adj,
                       ego_index=0, features=feats)


def identity_encoder(d, num_layers=1):
    """Identity projections and MLPs, eps = 0: a transparent encoder."""
    ident_mlp = lambda: MlpParams([np.eye(d), np.eye(d)],
                                  [np.zeros(d), np.zeros(d)])
    return EncoderParams(w_in=np.eye(d), b_in=np.zeros(d),
                         eps=[np.zeros(()) for _ in range(num_layers)],
                         mlps=[ident_mlp() for _ in range(num_layers)],
                         w_out=np.eye(d), b_out=np.zeros(d))


# ---------------------------------------------------------------------------
# forward


def test_singleton_identity_encoder_normalizes_features():
    d = 5
    x = np.array([[0.5, 1.0, 0.0, 2.0, 0.25]])
    sub = EgoSubgraph(nodes=np.array([7], dtype=np.int64),
                      local_adj=np.zeros((1, 1)), ego_index=0, features=x)
    emb, _ = gin_forward(identity_encoder(d), sub)
    np.testing.assert_allclose(emb, x[0] / np.linalg.norm(x[0]), atol=1e-12)


def test_two_node_identity_encoder_sums_features():
    """One layer on a single edge leaves both nodes at x_u + x_v."""
    d = 4
    x = np.abs(np.random.default_rng(0).normal(size=(2, d)))
    adj = np.array([[0.0, 1.0], [1.0, 0.0]])
    sub = EgoSubgraph(nodes=np.array([0, 1], dtype=np.int64),
                      local_adj=adj, ego_index=0, features=x)
    emb, tape = gin_forward(identity_encoder(d), sub)
    s = x[0] + x[1]
    np.testing.assert_allclose(tape.pooled, s, atol=1e-12)
    np.testing.assert_allclose(emb, s / np.linalg.norm(s), atol=1e-12)


def test_forward_matches_dense_oracle():
    """Layerwise straight-line re-evaluation agrees to 1e-10."""
    rng = np.random.default_rng(1)
    d_in, d = 6, 8
    pair = init_encoder(seed=3, d_in=d_in, d=d, num_layers=3)
    p = pair.query
    sub = make_subgraph(rng, 8, d_in)
    emb, _ = gin_forward(p, sub)

    h = sub.features @ p.w_in + p.b_in
    for eps, mlp in zip(p.eps, p.mlps):
        mixed = (1.0 + float(eps)) * h + sub.local_adj @ h
        hid = np.maximum(mixed @ mlp.weights[0] + mlp.biases[0], 0.0)
        h = hid @ mlp.weights[1] + mlp.biases[1]
    raw = h.mean(axis=0) @ p.w_out + p.b_out
    want = raw / np.linalg.norm(raw)
    np.testing.assert_allclose(emb, want, atol=1e-10)


def test_forward_rejects_width_mismatch():
    pair = init_encoder(seed=0, d_in=6, d=4, num_layers=1)
    sub = make_subgraph(np.random.default_rng(2), 4, d_in=5)
    with pytest.raises(ShapeError):
        gin_forward(pair.query, sub)


def test_embedding_is_unit_norm():
    rng = np.random.default_rng(3)
    pair = init_encoder(seed=11, d_in=7, d=16, num_layers=2)
    for n in (1, 2, 5, 9, 17):
        emb, _ = gin_forward(pair.query, make_subgraph(rng, n, 7))
        assert abs(np.linalg.norm(emb) - 1.0) < 1e-9


def test_permutation_invariance():
    """Relabeling subgraph rows does not move the embedding."""
    rng = np.random.default_rng(4)
    d_in = 6
    pair = init_encoder(seed=5, d_in=d_in, d=12, num_layers=3)
    sub = make_subgraph(rng, 9, d_in)
    emb, _ = gin_forward(pair.query, sub)
    for trial in range(5):
        perm = rng.permutation(9)
        permuted = EgoSubgraph(
            nodes=np.arange(9, dtype=np.int64),
            local_adj=sub.local_adj[np.ix_(perm, perm)],
            ego_index=int(np.flatnonzero(perm == sub.ego_index)[0]),
            features=sub.features[perm])
        emb2, _ = gin_forward(pair.query, permuted)
        np.testing.assert_allclose(emb2, emb, atol=1e-9)


# ---------------------------------------------------------------------------
# backward


def test_backward_zero_upstream_gives_zero():
    rng = np.random.default_rng(5)
    pair = init_encoder(seed=7, d_in=5, d=6, num_layers=2)
    sub = make_subgraph(rng, 6, 5)
    emb, tape = gin_forward(pair.query, sub)
    grads = gin_backward(pair.query, tape, np.zeros_like(emb))
    assert all(not g.any() for g in grads)


def rand_params(rng, d_in, d, layers):
    """Fully random parameters with nonzero biases.

    Keeps hidden units live and the raw output away from the origin, where
    normalization makes finite differences meaningless.
    """
    mk = lambda *s: rng.normal(scale=0.4, size=s)
    mlps = [MlpParams([mk(d, d), mk(d, d)],
                      [rng.uniform(0.1, 0.6, size=d), mk(d)])
            for _ in range(layers)]
    return EncoderParams(
        w_in=mk(d_in, d), b_in=mk(d),
        eps=[np.asarray(rng.uniform(-0.2, 0.4)) for _ in range(layers)],
        mlps=mlps, w_out=mk(d, d), b_out=mk(d) + 0.3)


def test_backward_matches_finite_differences():
    rng = np.random.default_rng(6)
    for trial in range(6):
        d_in = int(rng.integers(3, 6))
        d = int(rng.integers(3, 7))
        layers = int(rng.integers(1, 4))
        p = rand_params(rng, d_in, d, layers)
        sub = make_subgraph(rng, int(rng.integers(2, 7)), d_in)
        coord = int(rng.integers(0, d))

        def loss():
            e, _ = gin_forward(p, sub)
            return float(e[coord])

        emb, tape = gin_forward(p, sub)
        d_emb = np.zeros(d)
        d_emb[coord] = 1.0
        grads = gin_backward(p, tape, d_emb)
        tensors = p.tensors()
        assert len(grads) == len(tensors)
        h = 1e-6
        for t, g in zip(tensors, grads):
            flat_t = t.reshape(-1) if t.ndim else t
            # probe a handful of coordinates per tensor to keep this quick
            idxs = range(flat_t.size) if flat_t.size <= 4 else \
                rng.choice(flat_t.size, size=4, replace=False)
            for i in idxs:
                keep = flat_t[i] if t.ndim else float(t)
                if t.ndim:
                    flat_t[i] = keep + h
                else:
                    t.fill(keep + h)
                hi = loss()
                if t.ndim:
                    flat_t[i] = keep - h
                else:
                    t.fill(keep - h)
                lo = loss()
                if t.ndim:
                    flat_t[i] = keep
                else:
                    t.fill(keep)
                fd = (hi - lo) / (2 * h)
                got = (g.reshape(-1)[i] if g.ndim else float(g))
                assert got == pytest.approx(fd, rel=1e-4, abs=1e-7)


def test_eps_gradient_on_neighbor_free_subgraph():
    """Without neighbors the layer sees (1+eps)x, so d/d_eps chains through
    the MLP with input-side derivative x."""
    rng = np.random.default_rng(8)
    d = 4
    pair = init_encoder(seed=9, d_in=d, d=d, num_layers=1)
    p = pair.query
    sub = EgoSubgraph(nodes=np.array([0], dtype=np.int64),
                      local_adj=np.zeros((1, 1)), ego_index=0,
                      features=np.abs(rng.normal(size=(1, d))))
    emb, tape = gin_forward(p, sub)
    d_emb = rng.normal(size=d)
    grads = gin_backward(p, tape, d_emb)
    eps_grad = float(grads[2])        # [w_in, b_in, eps0, ...]

    # hand chain: d_mixed from the MLP backward at the recorded tape, then
    # d_eps = <d_mixed, h_in> with h_in the projected features
    h_in = sub.features @ p.w_in + p.b_in
    e = tape.embedding
    d_raw = (d_emb - e * float(e @ d_emb)) / tape.norm
    d_pooled = p.w_out @ d_raw
    from crossrec.numerics import mlp_backward
    d_mixed, _, _ = mlp_backward(p.mlps[0], tape.mlp_tapes[0],
                                 d_pooled[None, :])
    assert eps_grad == pytest.approx(float((d_mixed * h_in).sum()), rel=1e-12)


def test_key_never_sees_gradient():
    """Checksum of the key tensors is stable across a backward pass."""
    rng = np.random.default_rng(9)
    pair = init_encoder(seed=13, d_in=5, d=8, num_layers=2)
    digest = lambda: hashlib.sha256(
        b"".join(t.tobytes() for t in pair.key.tensors())).hexdigest()
    before = digest()
    sub = make_subgraph(rng, 7, 5)
    emb, tape = gin_forward(pair.query, sub)
    gin_backward(pair.query, tape, rng.normal(size=8))
    assert digest() == before


# ---------------------------------------------------------------------------
# momentum


def test_momentum_zero_copies_query():
    pair = init_encoder(seed=1, d_in=4, d=4, num_layers=1, momentum=0.0)
    for t in pair.query.tensors():
        t += 0.5
    momentum_update(pair)
    for q, k in zip(pair.query.tensors(), pair.key.tensors()):
        np.testing.assert_array_equal(q, k)


def test_momentum_scalar_arithmetic():
    pair = init_encoder(seed=1, d_in=3, d=3, num_layers=1, momentum=0.999)
    q0 = pair.query.tensors()[0]
    k0 = pair.key.tensors()[0]
    k0[:] = 0.0
    q0[:] = 1.0
    momentum_update(pair)
    np.testing.assert_allclose(k0, np.full_like(k0, 0.001), atol=1e-15)


def test_momentum_geometric_decay():
    """With a frozen query the key gap shrinks by exactly m per step."""
    m = 0.9
    pair = init_encoder(seed=2, d_in=4, d=5, num_layers=2, momentum=m)
    for t in pair.query.tensors():
        t += 1.0                        # open a gap
    gaps = []
    for _ in range(6):
        momentum_update(pair)
        gap = max(np.max(np.abs(q - k)) for q, k in
                  zip(pair.query.tensors(), pair.key.tensors()))
        gaps.append(gap)
    for a, b in zip(gaps, gaps[1:]):
        assert abs(b / a - m) < 1e-12


def test_momentum_out_of_range():
    q = init_encoder(seed=0, d_in=3, d=3, num_layers=1).query
    with pytest.raises(ConfigError):
        EncoderPair(query=q, key=q.copy(), momentum=1.0)


# ---------------------------------------------------------------------------
# init


def test_init_deterministic():
    a = init_encoder(seed=21, d_in=6, d=10, num_layers=3)
    b = init_encoder(seed=21, d_in=6, d=10, num_layers=3)
    for x, y in zip(a.query.tensors(), b.query.tensors()):
        np.testing.assert_array_equal(x, y)


def test_init_key_equals_query():
    pair = init_encoder(seed=22, d_in=6, d=10, num_layers=2)
    for q, k in zip(pair.query.tensors(), pair.key.tensors()):
        np.testing.assert_array_equal(q, k)
        assert q is not k               # independent storage


def test_init_weight_bounds():
    pair = init_encoder(seed=23, d_in=9, d=12, num_layers=3)
    for t in pair.query.tensors():
        if t.ndim == 2:
            fan_in, fan_out = t.shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            assert np.max(np.abs(t)) <= bound
        elif t.ndim <= 1:
            assert not t.any()          # biases and eps start at zero


def test_init_rejects_bad_dims():
    with pytest.raises(ConfigError):
        init_encoder(seed=0, d_in=0, d=4, num_layers=1)
    with pytest.raises(ConfigError):
        init_encoder(seed=0, d_in=4, d=4, num_layers=0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(tmp_path):
    pair = init_encoder(seed=31, d_in=5, d=8, num_layers=2, momentum=0.99)
    for t in pair.query.tensors():
        t += 0.125                      # make query and key differ
    path = tmp_path / "enc.bin"
    save_encoder(path, pair, fingerprint="abc123")
    loaded, fingerprint = load_encoder(path)
    assert fingerprint == "abc123"
    assert loaded.momentum == 0.99
    for a, b in zip(pair.query.tensors(), loaded.query.tensors()):
        np.testing.assert_array_equal(a, b)
    for a, b in zip(pair.key.tensors(), loaded.key.tensors()):
        np.testing.assert_array_equal(a, b)


def test_checkpoint_rejects_version_bump(tmp_path):
    pair = init_encoder(seed=32, d_in=4, d=4, num_layers=1)
    path = tmp_path / "enc.bin"
    save_encoder(path, pair)
    blob = bytearray(path.read_bytes())
    blob[7] = 99                        # version byte right after magic
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_encoder(path)


def test_checkpoint_rejects_foreign_magic(tmp_path):
    path = tmp_path / "junk.bin"
    path.write_bytes(b"NOTMINE\x01\x00\x00\x00" + b"\x00" * 50)
    with pytest.raises(FormatError):
        load_encoder(path)


def test_checkpoint_rejects_truncation(tmp_path):
    pair = init_encoder(seed=33, d_in=4, d=4, num_layers=1)
    path = tmp_path / "enc.bin"
    save_encoder(path, pair)
    blob = path.read_bytes()
    path.write_bytes(blob[:len(blob) - 9])
    with pytest.raises(FormatError):
        load_encoder(path)


def test_checkpoint_records_rng_algorithm(tmp_path):
    pair = init_encoder(seed=34, d_in=4, d=4, num_layers=1)
    path = tmp_path / "enc.bin"
    save_encoder(path, pair)
    assert RNG_ALGORITHM.encode() in path.read_bytes()
