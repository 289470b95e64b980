import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from oracles import softmax_enumeration
from storylm.model import (ModelConfig, ModelParams, dense_shapes, forward,
                           forward_batch, init_params, layer_norm, load_checkpoint,
                           log_sum_exp, param_count, save_checkpoint, score_candidates)
from storylm.store import ValidationError


def tiny_config(**kw):
    base = dict(arch="mlp", input_dim=4, hidden_dim=3, num_layers=2,
                output_dim=2, dropout_rate=0.0)
    base.update(kw)
    return ModelConfig(**base)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

def test_layer_norm_constant_input_is_bias():
    x = np.full(6, 3.25)
    out = layer_norm(x, np.ones(6), np.zeros(6))
    assert_allclose(out, np.zeros(6), atol=1e-12)


def test_layer_norm_known_values():
    # mean 2.5, population variance 1.25
    out = layer_norm(np.array([1.0, 2.0, 3.0, 4.0]), np.ones(4), np.zeros(4))
    assert_allclose(out, [-1.3416, -0.4472, 0.4472, 1.3416], atol=1e-3)


def test_layer_norm_zero_gain_gives_bias():
    bias = np.array([5.0, -1.0, 2.0])
    out = layer_norm(np.array([9.0, 1.0, 4.0]), np.zeros(3), bias)
    assert np.array_equal(out, bias)


def test_layer_norm_rejects_empty():
    with pytest.raises(ValidationError):
        layer_norm(np.empty(0), np.empty(0), np.empty(0))


def test_layer_norm_rejects_length_mismatch():
    with pytest.raises(ValidationError):
        layer_norm(np.ones(4), np.ones(3), np.ones(4))


def test_layer_norm_batched_matches_rowwise():
    rng = np.random.default_rng(3)
    X = rng.standard_normal((5, 7))
    g, b = rng.standard_normal(7), rng.standard_normal(7)
    batched = layer_norm(X, g, b)
    for i in range(5):
        assert_allclose(batched[i], layer_norm(X[i], g, b), rtol=1e-12)


# ---------------------------------------------------------------------------
# parameter initialization
# ---------------------------------------------------------------------------

def test_init_deterministic():
    cfg = tiny_config()
    a = init_params(cfg, 123)
    b = init_params(cfg, 123)
    for ta, tb in zip(a.tensors(), b.tensors()):
        assert np.array_equal(ta, tb)


def test_init_norms_are_identity():
    p = init_params(tiny_config(), 0)
    assert np.all(p.input_norm[0] == 1.0) and np.all(p.input_norm[1] == 0.0)
    assert np.all(p.output_norm[0] == 1.0) and np.all(p.output_norm[1] == 0.0)
    for _, bias in p.layers:
        assert np.all(bias == 0.0)


@pytest.mark.parametrize("arch", ["mlp", "resmlp"])
def test_param_count_just_over_six_million(arch):
    cfg = ModelConfig(arch=arch)
    n = param_count(cfg)
    assert 6_000_000 < n < 6_100_000
    # param_count must agree with actually allocated tensors
    params = init_params(cfg if arch == "mlp" else ModelConfig(arch=arch), 0)
    assert sum(t.size for t in params.tensors()) == n


def test_dense_shapes_resmlp_projection():
    cfg = ModelConfig(arch="resmlp", input_dim=8, hidden_dim=4, output_dim=2,
                      num_residual_blocks=2, dropout_rate=0.0)
    assert dense_shapes(cfg) == [(8, 4), (4, 4), (4, 4), (4, 4), (4, 4), (4, 2)]
    cfg2 = ModelConfig(arch="resmlp", input_dim=4, hidden_dim=4, output_dim=2,
                       num_residual_blocks=1, dropout_rate=0.0)
    assert dense_shapes(cfg2) == [(4, 4), (4, 4), (4, 2)]


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def test_forward_eval_is_pure():
    cfg = tiny_config(dropout_rate=0.5)
    p = init_params(cfg, 1)
    ctx = np.random.default_rng(0).standard_normal((2, 2)).astype(np.float32)
    h1 = forward(p, cfg, ctx)
    h2 = forward(p, cfg, ctx)
    assert np.array_equal(h1, h2)


def test_forward_no_dropout_train_equals_eval():
    cfg = tiny_config(dropout_rate=0.0)
    p = init_params(cfg, 1)
    ctx = np.random.default_rng(0).standard_normal((2, 2)).astype(np.float32)
    h_train = forward(p, cfg, ctx, mode="train", dropout_rng=np.random.default_rng(5))
    h_eval = forward(p, cfg, ctx)
    assert np.array_equal(h_train, h_eval)


def test_forward_train_dropout_needs_rng():
    cfg = tiny_config(dropout_rate=0.5)
    p = init_params(cfg, 1)
    with pytest.raises(ValidationError):
        forward(p, cfg, np.zeros((2, 2), dtype=np.float32), mode="train")


def test_forward_shape_mismatch():
    cfg = tiny_config()
    p = init_params(cfg, 1)
    with pytest.raises(ValidationError):
        forward(p, cfg, np.zeros((3, 2), dtype=np.float32))


def test_forward_hand_computed_pipeline():
    """Frozen 2-dim pipeline worked out by explicit arithmetic.

    context (3,1),(2,0); input norm; dense ((0.5,-0.25),(1,0.75),(-0.5,0.25),
    (0,1)) + (0.1,-0.2); relu; dense ((1,0.5),(-0.5,2)) + (0,0.3); output norm
    with gain (2,1), bias (0.5,-0.5).
    """
    cfg = ModelConfig(arch="mlp", input_dim=4, hidden_dim=2, num_layers=1,
                      output_dim=2, dropout_rate=0.0)
    w1 = np.array([[0.5, -0.25], [1.0, 0.75], [-0.5, 0.25], [0.0, 1.0]], dtype=np.float32)
    b1 = np.array([0.1, -0.2], dtype=np.float32)
    w2 = np.array([[1.0, 0.5], [-0.5, 2.0]], dtype=np.float32)
    b2 = np.array([0.0, 0.3], dtype=np.float32)
    params = ModelParams(
        layers=[(w1, b1), (w2, b2)],
        input_norm=(np.ones(4, dtype=np.float32), np.zeros(4, dtype=np.float32)),
        output_norm=(np.array([2.0, 1.0], dtype=np.float32),
                     np.array([0.5, -0.5], dtype=np.float32)))
    h = forward(params, cfg, np.array([[3.0, 1.0], [2.0, 0.0]], dtype=np.float32))
    assert_allclose(h, [-1.49936031, 0.49968015], atol=1e-4)


def test_resmlp_zero_blocks_reduce_to_skip():
    """With all residual-block weights zero the block contributes only its
    skip path: out = relu(input-normed x), then final dense + output norm."""
    cfg = ModelConfig(arch="resmlp", input_dim=4, hidden_dim=4, output_dim=3,
                      num_residual_blocks=1, dropout_rate=0.0)
    p = init_params(cfg, 9)
    for w, b in p.layers[:-1]:
        w[...] = 0.0
        b[...] = 0.0
    x = np.random.default_rng(2).standard_normal((3, 4)).astype(np.float32)
    H, _ = forward_batch(p, cfg, x)
    a = layer_norm(x.astype(np.float32), *p.input_norm)
    direct = layer_norm(np.maximum(a, 0) @ p.layers[-1][0] + p.layers[-1][1],
                        *p.output_norm)
    assert_allclose(H, direct, rtol=1e-6)


def test_dropout_masks_distinct_per_call():
    cfg = tiny_config(dropout_rate=0.5, num_layers=1)
    p = init_params(cfg, 1)
    X = np.random.default_rng(0).standard_normal((8, 4)).astype(np.float32)
    rng = np.random.default_rng(11)
    h1, _ = forward_batch(p, cfg, X, train=True, dropout_rng=rng)
    h2, _ = forward_batch(p, cfg, X, train=True, dropout_rng=rng)
    assert not np.array_equal(h1, h2)


# ---------------------------------------------------------------------------
# candidate scoring
# ---------------------------------------------------------------------------

def test_single_candidate_log_prob_zero():
    sr = score_candidates(np.array([0.3, -0.7]), np.array([[1.0, 2.0]]))
    assert sr.log_probs[0] == 0.0
    assert sr.log_partition == sr.logits[0]


def test_zero_h_uniform():
    cands = np.random.default_rng(0).standard_normal((7, 3))
    sr = score_candidates(np.zeros(3), cands)
    assert_allclose(sr.log_probs, -np.log(7), atol=1e-12)


def test_score_known_instance():
    sr = score_candidates(np.array([1.0, 0.0]),
                          np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]))
    assert_allclose(sr.logits, [1.0, 0.0, -1.0], atol=1e-12)
    assert_allclose(sr.log_partition, 1.4076, atol=1e-4)
    assert_allclose(sr.log_probs, [-0.4076, -1.4076, -2.4076], atol=1e-4)
    log_probs, log_z = softmax_enumeration(
        [1.0, 0.0], [[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]])
    assert_allclose(sr.log_probs, log_probs, rtol=1e-12)
    assert_allclose(sr.log_partition, log_z, rtol=1e-12)


def test_score_rejects_empty_pool():
    with pytest.raises(ValidationError):
        score_candidates(np.ones(2), np.empty((0, 2)))


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(1, 8), st.integers(0, 2**32 - 1))
def test_probabilities_sum_to_one(n, d, seed):
    rng = np.random.default_rng(seed)
    sr = score_candidates(rng.standard_normal(d) * 3, rng.standard_normal((n, d)))
    assert abs(np.exp(sr.log_probs).sum() - 1.0) < 1e-6


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-300, 300), min_size=1, max_size=30),
       st.floats(-500, 500))
def test_log_sum_exp_shift_invariance(logits, c):
    z = np.asarray(logits, dtype=np.float64)
    base = log_sum_exp(z)
    shifted = log_sum_exp(z + c)
    assert abs((shifted - base) - c) < 1e-6
    assert_allclose((z + c) - shifted, z - base, atol=1e-6)


def test_argmax_rank_invariant_under_h_rescaling():
    rng = np.random.default_rng(4)
    cands = rng.standard_normal((12, 5))
    h = rng.standard_normal(5)
    order1 = np.argsort(-score_candidates(h, cands).logits, kind="stable")
    order2 = np.argsort(-score_candidates(2.5 * h, cands).logits, kind="stable")
    assert np.array_equal(order1, order2)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("arch", ["mlp", "resmlp"])
def test_checkpoint_roundtrip(tmp_path, arch):
    cfg = ModelConfig(arch=arch, input_dim=6, hidden_dim=4, num_layers=2,
                      num_residual_blocks=2, output_dim=3, dropout_rate=0.25)
    p = init_params(cfg, 42)
    path = tmp_path / "model.slmp"
    save_checkpoint(path, cfg, p)
    cfg2, p2 = load_checkpoint(path)
    assert cfg2 == ModelConfig(arch, 6, 4, 2, 2, 3, cfg2.dropout_rate)
    assert abs(cfg2.dropout_rate - 0.25) < 1e-7
    for a, b in zip(p.tensors(), p2.tensors()):
        assert np.array_equal(a, b)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "model.slmp"
    cfg = tiny_config()
    save_checkpoint(path, cfg, init_params(cfg, 0))
    raw = bytearray(path.read_bytes())
    raw[0] ^= 0xFF
    path.write_bytes(bytes(raw))
    from storylm.store import FormatError
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = tmp_path / "model.slmp"
    cfg = tiny_config()
    save_checkpoint(path, cfg, init_params(cfg, 0))
    path.write_bytes(path.read_bytes()[:-3])
    from storylm.store import LengthError
    with pytest.raises(LengthError):
        load_checkpoint(path)
