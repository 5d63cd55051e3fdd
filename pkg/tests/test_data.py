import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sparta.data import (DatasetSplits, InstructionTemplate, LabeledExample, Vocab, detokenize,
                         encode_examples, filter_by_length, filter_train, keyword_oracle,
                         load_splits, make_synthetic_task, read_jsonl, save_splits, tokenize)
from sparta.errors import ConfigError, DataError


def test_empty_string_tokenizes_empty():
    assert tokenize("", Vocab()) == [] and tokenize("", Vocab(), "byte") == []


def test_byte_mode_repeats():
    ids = tokenize("ab ab", Vocab(), "byte")
    assert ids[:2] == ids[3:5] and ids == tokenize("ab ab", Vocab(), "byte")
    assert 0 not in ids


@settings(max_examples=100, deadline=None)
@given(st.text())
def test_byte_roundtrip(text):
    assert detokenize(tokenize(text, Vocab(), "byte"), Vocab(), "byte") == text


def test_word_mode_uses_vocab_and_byte_fallback():
    vocab = Vocab(["hello"])
    ids = tokenize("hello zz", vocab)
    assert ids[0] == vocab.word_id("hello") and len(ids) == 3
    assert detokenize(ids, vocab) == "hello zz"


def test_instruction_template_counts_in_length():
    tmpl = InstructionTemplate("Classify:", "Answer:")
    plain = encode_examples([{"text": "a b", "label": 0}], Vocab(["a", "b"]))
    wrapped = encode_examples([{"text": "a b", "label": 0}], Vocab(["a", "b", "Classify:", "Answer:"]), tmpl)
    assert wrapped[0].token_length == plain[0].token_length + 2


def _ex(i, n):
    return LabeledExample(f"e{i}", "x", 0, tuple([1] * n))


def test_filter_known_lengths():
    kept, report = filter_by_length([_ex(0, 10), _ex(1, 20), _ex(2, 300)], 256)
    assert len(kept) == 2 and report["retained_fraction"] == pytest.approx(2 / 3)


def test_filter_infinity_is_identity():
    exs = [_ex(0, 10), _ex(1, 1000)]
    assert filter_by_length(exs, float("inf"))[0] == tuple(exs)
    assert filter_by_length(exs, None)[0] == tuple(exs)


def test_filter_errors():
    with pytest.raises(ConfigError):
        filter_by_length([_ex(0, 10)], 5)
    with pytest.raises(ConfigError):
        filter_by_length([_ex(0, 10)], 0)


def test_filter_is_training_only(keyword_task):
    filtered, _ = filter_train(keyword_task, 6)
    assert len(filtered.train) < len(keyword_task.train)
    assert filtered.dev == keyword_task.dev and filtered.test == keyword_task.test
    assert all(ex.token_length <= 6 for ex in filtered.train)


def test_keyword_oracle_is_perfect(keyword_task):
    for split in (keyword_task.train, keyword_task.dev, keyword_task.test):
        assert all(keyword_oracle(ex) == ex.label for ex in split)


@pytest.mark.parametrize("kind", ["keyword-sentiment", "parity", "majority-token"])
def test_balance_at_10k(kind):
    task = make_synthetic_task(kind, (10000, 10, 10), seed=1)
    c = task.num_classes
    counts = np.bincount([ex.label for ex in task.train], minlength=c) / 10000
    assert np.all(np.abs(counts - 1 / c) < 0.01)


def test_parity_and_majority_labels_follow_rule():
    for ex in make_synthetic_task("parity", (200, 10, 10), seed=2).train:
        assert ex.text.split().count("ping") % 2 == ex.label
    for ex in make_synthetic_task("majority-token", (200, 10, 10), seed=2).train:
        counts = [ex.text.split().count(w) for w in ("red", "green", "blue")]
        assert int(np.argmax(counts)) == ex.label and sorted(counts)[-1] > sorted(counts)[-2]


def test_fixed_seed_identical_splits():
    assert make_synthetic_task(seed=5) == make_synthetic_task(seed=5)
    assert make_synthetic_task(seed=5) != make_synthetic_task(seed=6)


def test_splits_disjoint_and_validated(keyword_task):
    ids = [ex.id for s in (keyword_task.train, keyword_task.dev, keyword_task.test) for ex in s]
    assert len(ids) == len(set(ids))
    with pytest.raises(DataError):
        DatasetSplits(keyword_task.train, keyword_task.train[:3], (), 2)
    with pytest.raises(DataError):
        DatasetSplits((), keyword_task.dev, (), 2)
    with pytest.raises(DataError):
        DatasetSplits((LabeledExample("a", "x", 5),), (LabeledExample("b", "x", 0),), (), 2)


def test_jsonl_roundtrip(keyword_task, tmp_path):
    save_splits(tmp_path, keyword_task)
    back = load_splits(tmp_path)
    assert back == keyword_task
    assert back.vocab == keyword_task.vocab
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["counts"] == keyword_task.counts()
    assert len(read_jsonl(tmp_path / "dev.jsonl")) == len(keyword_task.dev)


def test_bad_jsonl_is_data_error(tmp_path):
    (tmp_path / "train.jsonl").write_text('{"text": "a", "label": 0}\n{oops\n')
    with pytest.raises(DataError):
        load_splits(tmp_path)
    (tmp_path / "train.jsonl").write_text('{"text": "a"}\n')
    with pytest.raises(DataError):
        load_splits(tmp_path)
