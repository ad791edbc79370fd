import numpy as np
import pytest

from hlstm.cells import LayerState
from hlstm.compare import count_chunk_macs, lc_saving_formula
from hlstm.gradcheck import numeric_gradient, relative_error
from hlstm.network import (
    LayerSpec, Model, StackSpec, StateMismatchError, backward_full, forward_csc_utterance, forward_full, forward_lc_chunk, forward_lc_utterance, frame_cross_entropy,
    stack_backward, stack_forward, utterance_chunks,
)

from conftest import make_model


def test_stack_spec_validation():
    with pytest.raises(ValueError):
        StackSpec(3, 2, (LayerSpec("highway", 4),))
    with pytest.raises(ValueError):
        StackSpec(3, 2, (LayerSpec("lstm", 4), LayerSpec("highway", 5)))
    with pytest.raises(ValueError):
        StackSpec(3, 2, (LayerSpec("gru", 4),))
    spec = StackSpec(3, 2, (LayerSpec("lstm", 4, 2), LayerSpec("highway", 4, 2)), True)
    assert spec.layer_input_dim(1) == 4 and spec.head_dim == 4
    assert StackSpec.from_dict(spec.to_dict()) == spec


def test_single_frame_bidirectional_shapes(rng):
    model = make_model(bidirectional=True, kinds=("lstm",))
    post, cache = forward_full(model, rng.normal((1, 3)))
    assert post.shape == (1, 5)
    assert cache.head_in.shape == (1, 1, 6)
    fwd, bwd = cache.runs[0]
    assert fwd.tapes[0].prev.c.sum() == 0 and bwd.tapes[0].prev.c.sum() == 0


def test_zero_params_uniform_posteriors(rng):
    spec = StackSpec(3, 4, (LayerSpec("lstm", 4, 2), LayerSpec("lstm", 4, 2)))
    post, _ = forward_full(Model.zeros(spec), rng.normal((6, 3)))
    assert np.allclose(post, 0.25, atol=0, rtol=0)


def test_empty_utterance_rejected():
    with pytest.raises(ValueError):
        forward_full(make_model(), np.zeros((0, 3)))


@pytest.mark.parametrize("depth", [3, 8])
def test_deep_highway_posteriors_normalized(depth, rng):
    kinds = ("lstm",) + ("highway",) * (depth - 1)
    model = make_model(kinds=kinds, bidirectional=True, scale=0.3)
    post, _ = forward_full(model, rng.normal((20, 3)))
    assert np.all(np.isfinite(post)) and np.all(post >= 0)
    assert np.max(np.abs(post.sum(axis=1) - 1)) <= 1e-10


@pytest.mark.parametrize("n_c", [1, 3, 7, 20])
def test_unidirectional_chunked_equals_full(n_c, rng):
    model = make_model(kinds=("lstm", "highway"))
    u = rng.normal((17, 3))
    full, _ = forward_full(model, u)
    assert np.max(np.abs(forward_lc_utterance(model, u, n_c, 0) - full)) <= 1e-10


def test_lc_with_covering_lookahead_equals_full_blstm(rng):
    model = make_model(bidirectional=True, kinds=("lstm", "highway"))
    u = rng.normal((15, 3))
    full, _ = forward_full(model, u)
    assert np.max(np.abs(forward_lc_utterance(model, u, 4, 15) - full)) <= 1e-10


def test_lc_without_lookahead_is_an_approximation(rng):
    model = make_model(bidirectional=True)
    u = rng.normal((15, 3))
    full, _ = forward_full(model, u)
    assert np.max(np.abs(forward_lc_utterance(model, u, 4, 0) - full)) > 1e-6


def test_csc_whole_context_equals_full(rng):
    model = make_model(bidirectional=True)
    u = rng.normal((12, 3))
    full, _ = forward_full(model, u)
    assert np.max(np.abs(forward_csc_utterance(model, u, 5, 12, 12) - full)) <= 1e-10


def test_csc_error_shrinks_with_left_context(rng):
    model = make_model(bidirectional=True, scale=0.4)
    u = rng.normal((120, 3))
    full, _ = forward_full(model, u)
    errs = []
    for n_l in (0, 2, 4, 8, 16, 32):
        csc = forward_csc_utterance(model, u, 20, n_l, 60)
        errs.append(np.max(np.abs(csc[60:80] - full[60:80])))
    assert all(a > b for a, b in zip(errs, errs[1:])), errs


def test_context_frames_pad_at_edges(rng):
    chunks = utterance_chunks(rng.normal((5, 3)), 2, n_r=2, n_l=3)
    assert len(chunks) == 3
    first, last = chunks[0], chunks[-1]
    assert not first.left_valid.any()
    assert last.valid[:, 0].tolist() == [True, False]
    assert not last.future_valid.any()


def test_lc_chunk_carries_forward_states(rng):
    model = make_model(bidirectional=True)
    chunks = utterance_chunks(rng.normal((8, 3)), 4, 2)
    _, carried, cache = forward_lc_chunk(model, chunks[0])
    assert np.array_equal(carried[0].c, cache.runs[0][0].cs[3])
    assert len(carried) == 2


def test_carried_state_mismatch(rng):
    model = make_model()
    chunk = utterance_chunks(rng.normal((4, 3)), 4)[0]
    chunk.carried_states = [LayerState.zeros(model.layers[0][0].lstm, 1)] * 2
    chunk.carried_ids = np.array([7])
    with pytest.raises(StateMismatchError):
        forward_lc_chunk(model, chunk)
    chunk.carried_ids = np.array([0])
    chunk.carried_states = [LayerState(np.zeros((2, 4)), np.zeros((2, 3)))] * 2
    with pytest.raises(StateMismatchError):
        forward_lc_chunk(model, chunk)


@pytest.mark.parametrize("bidirectional", [False, True])
def test_masked_frames_isolated(bidirectional, rng):
    model = make_model(bidirectional=bidirectional, kinds=("lstm", "highway"))
    xs = rng.normal((9, 2, 3))
    valid = np.ones((9, 2), dtype=bool)
    valid[6:, 1] = False
    garbage = xs.copy()
    garbage[6:, 1] = 1e3
    a = stack_forward(model, xs, valid)
    b = stack_forward(model, garbage, valid)
    assert np.array_equal(a.log_probs[:, 0], b.log_probs[:, 0])
    assert np.array_equal(a.log_probs[:6, 1], b.log_probs[:6, 1])
    single, _ = forward_full(model, xs[:6, 1])
    assert np.max(np.abs(np.exp(a.log_probs[:6, 1]) - single)) <= 1e-12
    labels = rng.integers(0, 5, (9, 2))
    ga = stack_backward(a, frame_cross_entropy(a.log_probs, labels, valid)[1])[0]
    gb = stack_backward(b, frame_cross_entropy(b.log_probs, labels, valid)[1])[0]
    for name in ga:
        assert np.max(np.abs(ga[name] - gb[name])) <= 1e-12


def test_single_frame_loss_gradient(rng):
    model = make_model(kinds=("lstm", "lstm"), cell=4)
    u = rng.normal((6, 3))
    target = 3

    def loss():
        post, _ = forward_full(model, u)
        return float(-np.log(post[2, target]))

    post, cache = forward_full(model, u)
    d_logits = np.zeros((6, 5))
    d_logits[2] = post[2]
    d_logits[2, target] -= 1
    grads = backward_full(cache, d_logits)
    for name, arr in model.named_tensors().items():
        assert relative_error(grads[name], numeric_gradient(loss, arr)).max() <= 1e-4, name


def test_unidirectional_causality(rng):
    model = make_model(kinds=("lstm", "highway"))
    xs = rng.normal((8, 1, 3))
    cache = stack_forward(model, xs, np.ones((8, 1), dtype=bool))
    d_logits = np.zeros_like(cache.log_probs)
    d_logits[3, 0, 1] = 1.0
    _, d_in = stack_backward(cache, d_logits)
    assert not np.any(d_in[4:])
    assert np.any(d_in[:4])


def test_bidirectional_input_gradient_fd(rng):
    model = make_model(bidirectional=True, kinds=("lstm", "highway"))
    xs = rng.normal((5, 1, 3))
    valid = np.ones((5, 1), dtype=bool)
    labels = rng.integers(0, 5, (5, 1))
    cache = stack_forward(model, xs, valid)
    _, d_in = stack_backward(cache, frame_cross_entropy(cache.log_probs, labels, valid)[1])

    def loss():
        return frame_cross_entropy(stack_forward(model, xs, valid).log_probs, labels, valid)[0]

    assert relative_error(d_in, numeric_gradient(loss, xs)).max() <= 1e-4


def test_lc_gradient_truncated_at_carry(rng):
    model = make_model(bidirectional=True)
    chunk = utterance_chunks(rng.normal((6, 3)), 3, 2)[0]
    chunk.carried_states = [LayerState(rng.normal((1, 4)), rng.normal((1, 3))) for _ in range(2)]
    _, _, cache = forward_lc_chunk(model, chunk)
    d = np.ones_like(cache.log_probs)
    grads, _ = stack_backward(cache, d)
    assert set(grads) == set(model.named_tensors())


def test_count_chunk_macs_default_geometry():
    model = make_model(bidirectional=True)
    m = count_chunk_macs(model, 22, 22, 21)
    assert m["saving"] == lc_saving_formula(22, 22, 21)
    assert abs(float(m["saving"]) - 22 / 65) < 1e-15
    assert m["lc_output"] == m["csc_output"]


def test_model_copy_and_checksum():
    model = make_model()
    clone = model.copy()
    assert clone.checksum() == model.checksum()
    clone.W_out[0, 0] += 1e-9
    assert clone.checksum() != model.checksum()
