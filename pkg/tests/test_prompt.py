import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pamrl.env import Observation
from pamrl.nn import Tensor
from pamrl.prompt import (
    DEFAULT_TEMPLATE,
    ContextTokens,
    PromptTemplate,
    TokenVocab,
    assemble_batch,
    assemble_sequence,
    render_prompt,
    split_tokens,
)


def obs_with(levels, throughputs):
    n = len(levels)
    return Observation(np.zeros(n), np.array(levels, float), np.array(throughputs, float),
                       np.ones(n, int), np.zeros(0), np.zeros(2 * n))


def test_render_matches_template_literal():
    text = render_prompt(obs_with([0.80], [12.5e6]))
    assert text == "Slice 1 has a QoS level of 0.80 and a throughput of 12.50 Mbps."


def test_one_sentence_per_slice():
    text = render_prompt(obs_with([0.5, 1.25, 2.0], [1e6, 2e6, 3e6]))
    assert text.count("Slice ") == 3
    assert text.split(". ")[2].startswith("Slice 3")


def test_render_is_deterministic():
    a = obs_with([0.123, 4.5], [7.77e6, 0.0])
    b = obs_with([0.123, 4.5], [7.77e6, 0.0])
    assert render_prompt(a) == render_prompt(b)


def test_template_validation(tmp_path):
    with pytest.raises(ValueError):
        PromptTemplate("Slice {slice} load {load:.2f}")
    with pytest.raises(ValueError):
        PromptTemplate("Slice {slice} level {qos}")
    p = tmp_path / "t.txt"
    p.write_text("# comment\nSlice {slice}: level {qos:.1f}, rate {throughput:.1f}\n")
    t = PromptTemplate.from_file(p)
    assert t.render(2, 0.55, 3.0) == "Slice 2: level 0.6, rate 3.0"


def test_tokenizer_splits_digits_and_punctuation():
    assert split_tokens("Slice 12 has 0.80.") == ["slice", "1", "2", "has", "0", ".", "8", "0", "."]
    assert split_tokens("") == []


def test_empty_text_gives_empty_ids():
    assert TokenVocab.from_templates([DEFAULT_TEMPLATE]).tokenize("") == []


def test_template_corpus_has_no_unknown_tokens():
    vocab = TokenVocab.from_templates([DEFAULT_TEMPLATE])
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 4))
        text = render_prompt(obs_with(rng.uniform(0, 10, n), rng.uniform(0, 1e9, n)))
        assert 0 not in vocab.tokenize(text)


def test_unknown_words_map_to_zero():
    vocab = TokenVocab.from_templates([DEFAULT_TEMPLATE])
    assert vocab.tokenize("banana slice") == [0, vocab.index["slice"]]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(1, 30), max_size=40))
def test_round_trip_on_known_ids(ids):
    vocab = TokenVocab.from_templates([DEFAULT_TEMPLATE])
    ids = [i % (len(vocab) - 1) + 1 for i in ids]
    assert vocab.tokenize(vocab.detokenize(ids)) == ids


def test_vocab_save_load(tmp_path):
    vocab = TokenVocab.from_templates([DEFAULT_TEMPLATE])
    vocab.save(tmp_path / "v.txt")
    back = TokenVocab.load(tmp_path / "v.txt")
    assert back.tokens == vocab.tokens


def test_no_context_sequence_is_plain_embeddings():
    table = Tensor(np.random.default_rng(0).normal(size=(10, 4)))
    ctx = ContextTokens(0, 4, np.random.default_rng(1))
    seq = assemble_sequence([3, 1, 4], ctx, table)
    assert np.array_equal(seq.data, table.data[[3, 1, 4]])
    assert ctx.parameters() == []


def test_context_rows_are_prepended():
    table = Tensor(np.random.default_rng(0).normal(size=(12, 8)))
    ctx = ContextTokens(4, 8, np.random.default_rng(1))
    ids = list(range(1, 11))
    seq = assemble_sequence(ids, ctx, table)
    assert seq.shape == (14, 8)
    assert np.array_equal(seq.data[:4], ctx.embeddings.data)
    assert np.array_equal(seq.data[4:], table.data[ids])


def test_context_init_scale():
    ctx = ContextTokens(200, 64, np.random.default_rng(2))
    assert abs(ctx.embeddings.data.std() - 0.02) < 0.001
    assert ctx.embeddings.requires_grad


def test_batch_assembly_matches_single():
    table = Tensor(np.random.default_rng(0).normal(size=(12, 8)))
    ctx = ContextTokens(3, 8, np.random.default_rng(1))
    ids = np.array([[1, 2, 3], [4, 5, 6]])
    batch = assemble_batch(ids, ctx, table)
    assert batch.shape == (2, 6, 8)
    for b in range(2):
        assert np.array_equal(batch.data[b], assemble_sequence(ids[b], ctx, table).data)


def test_width_mismatch_rejected():
    table = Tensor(np.zeros((5, 8)))
    with pytest.raises(ValueError):
        assemble_sequence([1], ContextTokens(0, 4, np.random.default_rng(0)), table)
    with pytest.raises(ValueError):
        assemble_batch([[1]], ContextTokens(2, 4, np.random.default_rng(0)), table)
