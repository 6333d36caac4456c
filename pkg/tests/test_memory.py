import math

import numpy as np
import pytest

from lcnmt import tensor as T
from lcnmt.errors import ConstraintError, ShapeError
from lcnmt.memory import (
    K_NONE,
    NONE_ORIGIN,
    SRC_EMBED,
    TGT_EMBED,
    V_NONE,
    AttentionLabels,
    ConstraintMemory,
    ConstraintPair,
    attention_loss,
    build_memory,
    make_attention_labels,
    memory_attention,
)
from lcnmt.tensor import Tensor


@pytest.fixture(autouse=True)
def f64():
    with T.default_dtype(np.float64):
        yield


def tables(d=6, v=10, seed=0):
    rng = np.random.default_rng(seed)
    return {
        SRC_EMBED: Tensor(rng.normal(size=(v, d)), requires_grad=True),
        TGT_EMBED: Tensor(rng.normal(size=(v, d)), requires_grad=True),
        K_NONE: Tensor(rng.normal(size=d), requires_grad=True),
        V_NONE: Tensor(rng.normal(size=d), requires_grad=True),
    }


def test_keys_are_mean_embeddings_and_none_slot_is_last():
    p = tables()
    pairs = [ConstraintPair((1, 2), (3,)), ConstraintPair((4,), (5, 6, 7))]
    mem = build_memory(pairs, p)
    assert mem.size == 3
    src, tgt = p[SRC_EMBED].data, p[TGT_EMBED].data
    np.testing.assert_allclose(mem.keys.data[:, 0], (src[1] + src[2]) / 2)
    np.testing.assert_allclose(mem.values.data[:, 1], tgt[[5, 6, 7]].mean(axis=0))
    np.testing.assert_array_equal(mem.keys.data[:, 2], p[K_NONE].data)
    np.testing.assert_array_equal(mem.values.data[:, 2], p[V_NONE].data)
    assert mem.slot_origins[-1] == NONE_ORIGIN


def test_empty_memory_is_just_the_none_slot():
    mem = build_memory([], tables())
    assert mem.size == 1


def test_constraint_pair_validation():
    with pytest.raises(ConstraintError):
        ConstraintPair((), (1,))
    with pytest.raises(ConstraintError):
        ConstraintPair((1, 2), (3,), source_span=(0, 1))


def test_memory_shape_checks():
    with pytest.raises(ShapeError):
        ConstraintMemory(Tensor(np.zeros((3, 2))), Tensor(np.zeros((3, 3))))
    mem = build_memory([], tables(d=6))
    with pytest.raises(ShapeError):
        memory_attention(Tensor(np.zeros((2, 5))), mem)


def test_memory_attention_matches_direct_formula():
    p = tables()
    mem = build_memory([ConstraintPair((1,), (2,)), ConstraintPair((3,), (4,))], p)
    q = np.random.default_rng(1).normal(size=(4, 6))
    ctx, probs = memory_attention(Tensor(q), mem)
    scores = q @ mem.keys.data / math.sqrt(6)
    ref = np.exp(scores - scores.max(axis=1, keepdims=True))
    ref /= ref.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(probs.data, ref, atol=1e-12)
    np.testing.assert_allclose(ctx.data, ref @ mem.values.data.T, atol=1e-12)


def test_multi_head_probs_are_head_average():
    p = tables(d=8)
    mem = build_memory([ConstraintPair((1,), (2,))], p)
    q = np.random.default_rng(2).normal(size=(3, 8))
    ctx, probs = memory_attention(Tensor(q), mem, n_heads=2)
    heads = []
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        s = q[:, sl] @ mem.keys.data[sl] / 2.0
        e = np.exp(s - s.max(axis=1, keepdims=True))
        heads.append(e / e.sum(axis=1, keepdims=True))
    np.testing.assert_allclose(probs.data, (heads[0] + heads[1]) / 2, atol=1e-12)
    np.testing.assert_allclose(ctx.data[:, :4], heads[0] @ mem.values.data[:4].T, atol=1e-12)


def test_labels_mark_constraint_tokens_and_none_elsewhere():
    pairs = [ConstraintPair((7, 8), (1, 2), 0, (1, 3)), ConstraintPair((9,), (3,), 1, (0, 1))]
    labels = make_attention_labels([4, 2], pairs, memory_size=3)
    np.testing.assert_array_equal(labels.slots, [3, 1, 1, 3, 2, 3])


def test_labels_reject_overlap_and_bad_spans():
    a = ConstraintPair((1, 2), (1,), 0, (0, 2))
    b = ConstraintPair((2,), (1,), 0, (1, 2))
    with pytest.raises(ConstraintError):
        make_attention_labels([3], [a, b], 3)
    with pytest.raises(ConstraintError):
        make_attention_labels([1], [a], 2)


def test_attention_loss_fixtures():
    perfect = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    labels = AttentionLabels(np.array([1, 2]), (2,), 2)
    assert attention_loss(perfect, labels).item() == 0.0
    mixed = Tensor(np.array([[0.5, 0.5], [0.75, 0.25]]))
    assert attention_loss(mixed, labels).item() == pytest.approx((math.log(2) + math.log(4)) / 2, abs=1e-12)
    assert attention_loss(mixed, labels).item() == pytest.approx(1.0397, abs=1e-4)
    uniform = Tensor(np.full((3, 4), 0.25))
    assert attention_loss(uniform, AttentionLabels(np.array([1, 4, 2]), (3,), 4)).item() == pytest.approx(math.log(4))


def test_attention_loss_clamps_zero_probability():
    probs = Tensor(np.array([[1.0, 0.0]]))
    loss = attention_loss(probs, AttentionLabels(np.array([2]), (1,), 2)).item()
    assert loss == pytest.approx(-math.log(1e-9))


def test_attention_loss_gradient_reaches_embeddings():
    from lcnmt.gradcheck import grad_check

    p = tables()
    q = Tensor(np.random.default_rng(3).normal(size=(3, 6)), requires_grad=True)
    pairs = [ConstraintPair((1,), (2,), 0, (0, 1)), ConstraintPair((3, 4), (5,), 0, (1, 3))]
    labels = make_attention_labels([3], pairs, 3)

    def loss():
        ctx, probs = memory_attention(q, build_memory(pairs, p))
        return attention_loss(probs, labels) + ctx.sum() * 0.1

    assert grad_check(loss, [q, *p.values()]) < 1e-6


def test_scalar_softmax_fixture():
    keys = Tensor(np.array([[1.0, 0.0], [0.0, 1.0]]))
    values = Tensor(np.array([[2.0, -1.0], [5.0, 3.0]]))
    ctx, probs = memory_attention(Tensor(np.array([[1.0, 0.0]])), ConstraintMemory(keys, values))
    p1 = math.exp(1 / math.sqrt(2)) / (math.exp(1 / math.sqrt(2)) + 1)
    np.testing.assert_allclose(probs.data, [[p1, 1 - p1]], atol=1e-12)
    assert probs.data[0, 0] == pytest.approx(0.6699, abs=1e-3)
    np.testing.assert_allclose(ctx.data[0], p1 * values.data[:, 0] + (1 - p1) * values.data[:, 1])


def test_single_slot_gives_none_value_everywhere():
    p = tables()
    ctx, probs = memory_attention(Tensor(np.random.default_rng(0).normal(size=(5, 6))), build_memory([], p))
    assert (probs.data == 1.0).all()
    np.testing.assert_allclose(ctx.data, np.tile(p[V_NONE].data, (5, 1)))


def test_build_memory_is_permutation_equivariant():
    p = tables()
    pairs = [ConstraintPair((1,), (2,)), ConstraintPair((3, 4), (5,)), ConstraintPair((6, 7, 8), (9, 1))]
    order = [2, 0, 1]
    a = build_memory(pairs, p)
    b = build_memory([pairs[i] for i in order], p)
    np.testing.assert_allclose(b.keys.data[:, :3], a.keys.data[:, order])
    np.testing.assert_allclose(b.values.data[:, :3], a.values.data[:, order])
    np.testing.assert_array_equal(b.keys.data[:, 3], a.keys.data[:, 3])


def test_three_token_key_matches_running_sum():
    p = tables()
    key = build_memory([ConstraintPair((2, 5, 9), (1,))], p).keys.data[:, 0]
    acc = np.zeros(6)
    for t in (2, 5, 9):
        acc = acc + p[SRC_EMBED].data[t]
    np.testing.assert_allclose(key, acc / 3, atol=1e-12)


def test_labels_whole_sentence_and_second_sentence_fixture():
    labels = make_attention_labels([3, 4], [ConstraintPair((1, 2), (3,), 1, (1, 3))], memory_size=4, slots=[3])
    np.testing.assert_array_equal(labels.slots, [4, 4, 4, 4, 3, 3, 4])
    whole = make_attention_labels([2], [ConstraintPair((1, 2), (3,), 0, (0, 2))], memory_size=2)
    np.testing.assert_array_equal(whole.slots, [1, 1])
    assert (make_attention_labels([2, 1], [], 1).slots == 1).all()


def test_batch_shared_memory_lets_tokens_attend_to_other_sentences_slots():
    from lcnmt.model import ModelConfig, encode_batch, init_params

    config = ModelConfig(src_vocab=10, tgt_vocab=10, d_model=8, n_blocks=1, n_heads=2, ffn_width=8, memory_block=1)
    params = init_params(config, 0)
    # sentence 0 owns the only constraint; sentence 1 still spreads mass over slot 1
    mem = build_memory([ConstraintPair((4,), (5,), 0, (0, 1))], params)
    _, probs, _ = encode_batch(params, config, np.array([[4, 6], [7, 8]]), [2, 2], mem)
    assert (probs.data[1, :, 0] > 0.0).all()


def test_large_matching_key_saturates_attention():
    from lcnmt.model import ModelConfig, encode_with_memory, init_params

    config = ModelConfig(src_vocab=10, tgt_vocab=10, d_model=8, n_blocks=1, n_heads=2, ffn_width=8, memory_block=1)
    params = init_params(config, 0)
    params["enc.1.mem.wq"].data[:] = np.eye(8) * 50.0
    params["enc.1.ln_mem.b"].data[:] = 0.0
    params["enc.1.ln_mem.g"].data[:] = 0.0
    params["enc.1.ln_mem.b"].data[0] = 1.0  # every query points along axis 0
    params["src_embed"].data[4] = 0.0
    params["src_embed"].data[4, 0] = 1.0
    params[K_NONE].data[:] = 0.0
    enc = encode_with_memory(params, config, [4, 5], build_memory([ConstraintPair((4,), (5,))], params))
    assert (enc.memory_probs.data[:, 0] > 0.99).all()
