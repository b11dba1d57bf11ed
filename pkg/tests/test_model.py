import pickle

import numpy as np
import pytest

from stable_gate.errors import CapacityError, DegenerateInputError, UnknownCharacterError
from stable_gate.model import (
    ModelConfig,
    ModelParams,
    TokenSequence,
    Vocabulary,
    detokenize,
    forward_logprobs,
    generate,
    init_params,
    loss_and_grads,
    next_token_logprobs,
    param_shapes,
    qa_sequence,
    sequence_logprob,
    token_logprobs,
    tokenize,
)


def test_vocabulary_roundtrip(vocab):
    assert vocab.size == 31
    assert Vocabulary.from_json(vocab.to_json()) == vocab
    seq = tokenize("kavo color?", vocab)
    assert detokenize(seq, vocab) == "kavo color?"
    assert seq.prompt_len == len(seq)


def test_vocabulary_rejects_bad_symbols():
    with pytest.raises(ValueError):
        Vocabulary(("a", "b", "a", "c"))
    with pytest.raises(ValueError):
        Vocabulary(("a", "bc", "d", "e"))


def test_unknown_character(vocab):
    with pytest.raises(UnknownCharacterError):
        tokenize("Kavo", vocab)


def test_qa_sequence_layout(vocab):
    s = qa_sequence("kavo pet?", "owl", vocab)
    assert s.prompt_len == 9
    assert s.continuation[-1] == vocab.eoa_id
    assert detokenize(s.continuation[:-1], vocab) == "owl"


def test_param_shapes_and_count(small_config):
    shapes = param_shapes(small_config)
    assert shapes["tok_emb"] == (31, 16)
    assert shapes["l0.attn.q.w"] == (16, 16)
    assert shapes["l1.mlp.fc.w"] == (64, 16)
    p = init_params(small_config, seed=0)
    assert p.num_parameters() == sum(int(np.prod(s)) for s in shapes.values())


def test_params_are_immutable(small_params):
    with pytest.raises(ValueError):
        small_params.arrays["tok_emb"][0, 0] = 1.0


def test_params_pickle(small_params):
    assert pickle.loads(pickle.dumps(small_params)).equals(small_params)


def test_logprobs_normalized_and_causal(small_params, vocab):
    ids = tokenize("kavo color? red", vocab).ids
    lp = forward_logprobs(small_params, ids)
    np.testing.assert_allclose(np.exp(lp).sum(-1), 1.0, atol=1e-12)
    # a later token must not influence earlier rows
    lp2 = forward_logprobs(small_params, ids[:-1] + (vocab.id_of("z"),))
    np.testing.assert_array_equal(lp[:-1], lp2[:-1])


def test_sequence_logprob_matches_token_sum(small_params, vocab):
    s = qa_sequence("kavo color?", "red", vocab)
    total, n = sequence_logprob(small_params, s)
    assert n == 4
    assert total == pytest.approx(token_logprobs(small_params, s).sum(), abs=1e-12)
    manual = sum(next_token_logprobs(small_params, s.ids[:t])[s.ids[t]] for t in range(s.prompt_len, len(s)))
    assert total == pytest.approx(manual, abs=1e-10)


def test_sequence_logprob_rejects_degenerate(small_params):
    with pytest.raises(DegenerateInputError):
        sequence_logprob(small_params, TokenSequence((3, 4), 2))


def test_capacity(small_params):
    with pytest.raises(CapacityError):
        forward_logprobs(small_params, [3] * 33)


def test_generate_greedy_deterministic_and_bounded(small_params, vocab):
    p = tokenize("kavo color?", vocab)
    a = generate(small_params, p, max_tokens=5)
    b = generate(small_params, p, max_tokens=5)
    assert a == b
    assert len(a) - len(p) <= 5
    assert a.ids[:len(p)] == p.ids
    if vocab.eoa_id in a.continuation:
        assert a.continuation[-1] == vocab.eoa_id


def test_generate_sample_seeded(small_params, vocab):
    p = tokenize("kavo", vocab)
    a = generate(small_params, p, 8, mode="sample", seed=4)
    assert a == generate(small_params, p, 8, mode="sample", seed=4)


def test_generate_stops_at_context(small_config, vocab):
    params = init_params(small_config, 1)
    p = TokenSequence(tuple([5] * 30), 30)
    out = generate(params, p, max_tokens=10, eoa_id=-1)
    assert len(out) == small_config.context_len


def test_loss_and_grads_trainable_subset(small_params, vocab):
    batch = [qa_sequence("kavo color?", "red", vocab)]
    loss, g = loss_and_grads(small_params, batch, trainable=["unembed.w"])
    assert set(g) == {"unembed.w"}
    loss_all, g_all = loss_and_grads(small_params, batch)
    assert loss == loss_all
    np.testing.assert_array_equal(g["unembed.w"], g_all["unembed.w"])
    assert loss == pytest.approx(-sequence_logprob(small_params, batch[0])[0] / 4, abs=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(31, d_model=10, n_heads=3)
    with pytest.raises(ValueError):
        ModelConfig(31, pos_encoding="rope")


def test_params_shape_checks(small_config, small_params):
    arrays = dict(small_params.arrays)
    arrays["tok_emb"] = np.zeros((3, 3))
    with pytest.raises(ValueError):
        ModelParams(small_config, arrays)
