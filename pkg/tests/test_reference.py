import math

import numpy as np
import pytest
from scipy.stats import chisquare

from indlab.reference import (
    SEQ_LEN,
    AdamW,
    StdModel,
    StdTrainConfig,
    TokenTaskBatch,
    cross_entropy,
    gen_token_batch,
    interpret,
    std_backward,
    std_forward,
    std_train,
    subdiagonal_stats,
)

from oracles import central_difference, naive_softmax_row


def naive_logits(model, tokens, positions):
    """Column-vector formulation, one sequence, explicit loops."""
    p = model.params
    h = np.stack([p["T"][:, t] + p["P"][:, q] for t, q in zip(tokens, positions)], axis=1)  # D x L
    length = h.shape[1]
    for l in (1, 2):
        k, q, v = p[f"W_K{l}"] @ h, p[f"W_Q{l}"] @ h, p[f"W_V{l}"] @ h
        out = np.zeros_like(v)
        for i in range(length):
            scores = np.array([k[:, j] @ q[:, i] for j in range(length)])
            a = naive_softmax_row(scores, lambda j, i=i: j <= i)
            out[:, i] = v @ a
        h = h + p[f"W_O{l}"] @ out
    return (p["W_out"] @ h).T


def small_batch(vocab, block, b, seed):
    g = np.random.default_rng(seed)
    tokens = g.integers(0, vocab, (b, SEQ_LEN))
    offsets = g.integers(0, block - SEQ_LEN + 1, b)
    positions = offsets[:, None] + np.arange(SEQ_LEN)
    return TokenTaskBatch(tokens, positions, g.integers(0, vocab, b), np.zeros(b, int), offsets)


def test_token_batch_construction():
    b = gen_token_batch(32, 32, 500, seed=1)
    assert b.tokens.shape == (500, 17)
    for k in range(500):
        assert len(set(b.tokens[k, :16])) == 16
        q = b.queries[k]
        assert b.tokens[k, 16] == b.tokens[k, 2 * q]
        assert b.targets[k] == b.tokens[k, 2 * q + 1]
    assert np.all(b.positions[:, -1] < 32)
    with pytest.raises(ValueError):
        gen_token_batch(15, 32, 1, 0)
    with pytest.raises(ValueError):
        gen_token_batch(32, 16, 1, 0)


def test_offsets_uniform():
    b = gen_token_batch(32, 32, 10_000, seed=2)
    counts = np.bincount(b.offsets, minlength=16)
    assert len(counts) == 16
    assert chisquare(counts).pvalue > 1e-3


def test_token_batch_deterministic():
    a, b = gen_token_batch(20, 24, 8, 5), gen_token_batch(20, 24, 8, 5)
    assert a.tokens.tobytes() == b.tokens.tobytes() and a.offsets.tobytes() == b.offsets.tobytes()


def test_forward_matches_naive():
    model = StdModel.init(12, 6, 20, 20, seed=3, std=0.3)
    batch = gen_token_batch(20, 20, 3, seed=4)
    logits = std_forward(batch, model).logits
    for k in range(3):
        ref = naive_logits(model, batch.tokens[k], batch.positions[k])
        np.testing.assert_allclose(logits[k], ref, atol=1e-10)


def test_zero_attention_passthrough():
    model = StdModel.init(8, 4, 16, 20, seed=0)
    for l in (1, 2):
        for key in ("W_Q", "W_K", "W_V", "W_O"):
            model.params[f"{key}{l}"][:] = 0
    batch = gen_token_batch(16, 20, 2, seed=0)
    cache = std_forward(batch, model)
    np.testing.assert_array_equal(cache.h[2], cache.h[0])
    np.testing.assert_allclose(cache.logits, cache.h[0] @ model.params["W_out"].T)
    a = cache.layers[0]["a"][0]
    np.testing.assert_allclose(a[4, :5], 0.2)


def test_forward_rejects_out_of_range():
    model = StdModel.init(8, 4, 16, 17, seed=0)
    with pytest.raises(ValueError):
        std_forward(gen_token_batch(32, 17, 1, 0), model)


def test_initial_loss_near_uniform():
    model = StdModel.init(128, 128, 32, 32, seed=0)
    loss = cross_entropy(std_forward(gen_token_batch(32, 32, 256, 0), model), gen_token_batch(32, 32, 256, 0).targets)
    assert abs(loss - math.log(32)) < 0.1 * math.log(32)


def test_backward_matches_finite_differences():
    model = StdModel.init(8, 8, 8, 20, seed=1, std=0.3)
    batch = small_batch(8, 20, 4, seed=2)
    grads = std_backward(batch, model, std_forward(batch, model))
    for name, param in model.params.items():
        fd = central_difference(lambda: cross_entropy(std_forward(batch, model), batch.targets), param, 1e-6)
        rel = np.abs(fd - grads[name]) / np.maximum(np.maximum(np.abs(fd), np.abs(grads[name])), 1e-4)
        assert rel.max() < 1e-4, name


def test_adamw_zero_gradient_no_decay_is_identity():
    params = {"w": np.random.default_rng(0).standard_normal((3, 3))}
    before = params["w"].copy()
    opt = AdamW(params, weight_decay=0.0)
    for _ in range(3):
        opt.step(params, {"w": np.zeros((3, 3))})
    assert params["w"].tobytes() == before.tobytes()


def test_adamw_first_step_is_sign_step():
    params = {"w": np.zeros(4)}
    AdamW(params, lr=0.1, weight_decay=0.0).step(params, {"w": np.array([1.0, -2.0, 3.0, 0.0])})
    np.testing.assert_allclose(params["w"], [-0.1, 0.1, -0.1, 0.0], atol=1e-8)


def test_checkpoint_round_trip(tmp_path):
    model = StdModel.init(8, 4, 16, 20, seed=0)
    back = StdModel.load(model.save(tmp_path / "m.ckpt"))
    assert set(back.params) == set(model.params)
    for k in model.params:
        np.testing.assert_array_equal(back.params[k], model.params[k])
    (tmp_path / "x.ckpt").write_bytes(b"garbage!")
    with pytest.raises(ValueError):
        StdModel.load(tmp_path / "x.ckpt")


def test_interpret_shapes_and_zero_attention():
    model = StdModel.init(8, 4, 16, 20, seed=0)
    rep = interpret(model)
    for name, m in rep.blocks.items():
        if name.startswith("kq"):
            assert m.shape == (36, 36)
        else:
            assert m.shape == (16, 36)
    for key in ("W_Q1", "W_K1", "W_Q2", "W_K2"):
        model.params[key][:] = 0
    assert all(np.all(m == 0) for n, m in interpret(model).blocks.items() if n.startswith("kq"))


def test_interpret_linear_in_query_weights():
    model = StdModel.init(8, 4, 16, 20, seed=0, std=0.3)
    base = interpret(model).blocks
    scaled = model.copy()
    scaled.params["W_Q1"] *= 2.0
    scaled.params["W_Q2"] *= 2.0
    after = interpret(scaled).blocks
    for name in base:
        if name.startswith("kq"):
            np.testing.assert_array_equal(after[name], 2.0 * base[name])


def test_subdiagonal_stats():
    m = np.eye(6, k=-1) * 5.0
    dom, std = subdiagonal_stats(m)
    assert dom == 5.0 and std == 0.0


def test_adamw_fits_a_fixed_batch():
    model = StdModel.init(32, 32, 32, 32, seed=0)
    batch = gen_token_batch(32, 32, 32, seed=1)
    opt = AdamW(model.params, lr=1e-2)
    first = cross_entropy(std_forward(batch, model), batch.targets)
    for _ in range(40):
        cache = std_forward(batch, model)
        opt.step(model.params, std_backward(batch, model, cache))
    assert cross_entropy(std_forward(batch, model), batch.targets) < 0.5 * first


def test_std_train_deterministic():
    cfg = StdTrainConfig(dim=16, head_dim=16, batch=16, steps=5, eval_batch=32)
    a, b = std_train(cfg), std_train(cfg)
    assert a.losses == b.losses and len(a.losses) == 5
    assert 0 <= a.accuracy <= 1
