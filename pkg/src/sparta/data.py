"""Datasets: toy tokenizer, JSONL splits, training-only length filter, synthetic tasks."""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError, DataError
from .fileio import atomic_write_text

PAD = "<pad>"
BYTE_OFFSET = 1  # ids 1..256 are raw bytes; 0 is padding
N_BYTES = 256


class Vocab:
    """Padding, 256 byte tokens, then whole words. Unknown words fall back to bytes."""

    def __init__(self, words=()):
        self.words = list(dict.fromkeys(words))
        self._word_ids = {w: BYTE_OFFSET + N_BYTES + i for i, w in enumerate(self.words)}

    def __len__(self):
        return BYTE_OFFSET + N_BYTES + len(self.words)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.words == other.words

    def word_id(self, word):
        return self._word_ids[word]

    def id_to_word(self, i):
        return self.words[i - BYTE_OFFSET - N_BYTES]

    def to_dict(self):
        return {"words": self.words}

    @classmethod
    def from_dict(cls, d):
        return cls(d.get("words", ()))


def tokenize(text, vocab, mode="word"):
    """Deterministic ids, never 0. ``byte`` mode is exactly invertible."""
    if mode == "byte":
        return [BYTE_OFFSET + b for b in text.encode("utf-8")]
    if mode != "word":
        raise ConfigError(f"unknown tokenizer mode {mode!r}")
    ids = []
    for word in text.split():
        if word in vocab._word_ids:
            ids.append(vocab._word_ids[word])
        else:
            ids.extend(BYTE_OFFSET + b for b in word.encode("utf-8"))
    return ids


def detokenize(ids, vocab, mode="word"):
    if mode == "byte":
        return bytes(i - BYTE_OFFSET for i in ids).decode("utf-8")
    out, pending = [], bytearray()
    for i in ids:
        if BYTE_OFFSET <= i < BYTE_OFFSET + N_BYTES:
            pending.append(i - BYTE_OFFSET)
            continue
        if pending:
            out.append(pending.decode("utf-8", errors="replace"))
            pending = bytearray()
        out.append(vocab.id_to_word(i))
    if pending:
        out.append(pending.decode("utf-8", errors="replace"))
    return " ".join(out)


@dataclass(frozen=True)
class InstructionTemplate:
    prefix: str = ""
    suffix: str = ""

    def wrap(self, text):
        return " ".join(part for part in (self.prefix, text, self.suffix) if part)


@dataclass(frozen=True)
class LabeledExample:
    id: str
    text: str
    label: int
    tokens: tuple = ()

    @property
    def token_length(self):
        return len(self.tokens)


@dataclass(frozen=True)
class DatasetSplits:
    train: tuple
    dev: tuple
    test: tuple
    num_classes: int
    name: str = "dataset"
    vocab: Vocab = field(default_factory=Vocab, compare=False)
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if not self.train or not self.dev:
            raise DataError("train and dev splits must be non-empty")
        seen = set()
        for split in (self.train, self.dev, self.test):
            ids = {ex.id for ex in split}
            if len(ids) != len(split) or ids & seen:
                raise DataError("example ids must be unique across all splits")
            seen |= ids
            for ex in split:
                if not 0 <= ex.label < self.num_classes:
                    raise DataError(f"label {ex.label} of {ex.id} outside [0, {self.num_classes})")

    def counts(self):
        return {"train": len(self.train), "dev": len(self.dev), "test": len(self.test)}

    def max_length(self):
        return max(ex.token_length for s in (self.train, self.dev, self.test) for ex in s)


def encode_examples(records, vocab, template=None, mode="word", prefix="ex"):
    """``records`` are dicts with ``text``, ``label`` and optional ``id``."""
    out = []
    for i, r in enumerate(records):
        if "text" not in r or "label" not in r:
            raise DataError(f"record {i} needs 'text' and 'label'")
        text = template.wrap(r["text"]) if template else r["text"]
        out.append(LabeledExample(str(r.get("id", f"{prefix}-{i}")), r["text"], int(r["label"]),
                                  tuple(tokenize(text, vocab, mode))))
    return tuple(out)


def filter_by_length(examples, max_tokens=None):
    """Drop training examples longer than ``max_tokens``. Returns ``(kept, report)``."""
    if max_tokens is None or max_tokens == math.inf:
        kept = tuple(examples)
    else:
        if max_tokens < 1:
            raise ConfigError("max_tokens must be >= 1")
        kept = tuple(ex for ex in examples if ex.token_length <= max_tokens)
    if not kept:
        raise ConfigError(f"length filter {max_tokens} removed every training example")
    report = {"max_tokens": max_tokens, "before": len(examples), "kept": len(kept),
              "dropped": len(examples) - len(kept),
              "retained_fraction": len(kept) / len(examples) if examples else 1.0}
    return kept, report


def filter_train(splits, max_tokens=256):
    """Apply the length filter to the training split only."""
    kept, report = filter_by_length(splits.train, max_tokens)
    return replace(splits, train=kept, meta={**splits.meta, "length_filter": report}), report


# -- JSONL --------------------------------------------------------------------

def read_jsonl(path):
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from exc
    return records


def write_jsonl(path, records):
    atomic_write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def save_splits(directory, splits):
    for name in ("train", "dev", "test"):
        write_jsonl(os.path.join(directory, f"{name}.jsonl"),
                    [{"id": ex.id, "text": ex.text, "label": ex.label} for ex in getattr(splits, name)])
    manifest = {"name": splits.name, "num_classes": splits.num_classes, "counts": splits.counts(),
                "vocab": splits.vocab.to_dict(), "meta": splits.meta}
    atomic_write_text(os.path.join(directory, "manifest.json"),
                      json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_splits(directory, vocab=None, template=None, mode="word"):
    """Read ``train/dev/test.jsonl`` (+ optional ``manifest.json``) from a directory."""
    manifest_path = os.path.join(directory, "manifest.json")
    manifest = {}
    if os.path.exists(manifest_path):
        with open(manifest_path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    if vocab is None:
        vocab = Vocab.from_dict(manifest.get("vocab", {}))
    parts = {}
    for name in ("train", "dev", "test"):
        path = os.path.join(directory, f"{name}.jsonl")
        records = read_jsonl(path) if os.path.exists(path) else []
        parts[name] = encode_examples(records, vocab, template, mode, prefix=name)
    labels = [ex.label for p in parts.values() for ex in p]
    num_classes = manifest.get("num_classes") or (max(labels) + 1 if labels else 0)
    return DatasetSplits(parts["train"], parts["dev"], parts["test"], num_classes,
                         manifest.get("name", os.path.basename(os.path.normpath(directory))),
                         vocab, manifest.get("meta", {}))


# -- synthetic tasks ----------------------------------------------------------

TASKS = ("keyword-sentiment", "parity", "majority-token")
KEYWORD = "great"
MARKER = "ping"
MAJORITY = ("red", "green", "blue")
CLASS_WORDS = {"keyword-sentiment": ("no", "yes"), "parity": ("even", "odd"),
               "majority-token": MAJORITY}


def _balanced_labels(n, c, rng):
    labels = np.arange(n) % c
    rng.shuffle(labels)
    return labels


def _gen(kind, label, rng, fillers, min_len, max_len):
    length = int(rng.integers(min_len, max_len + 1))
    if kind == "keyword-sentiment":
        words = list(rng.choice(fillers, size=length))
        if label == 1:
            for _ in range(int(rng.integers(1, 3))):
                words[int(rng.integers(0, length))] = KEYWORD
        return words
    if kind == "parity":
        words = list(rng.choice(fillers, size=length))
        count = int(rng.choice([c for c in range(0, min(4, length) + 1) if c % 2 == label]))
        for pos in rng.choice(length, size=count, replace=False):
            words[int(pos)] = MARKER
        return words
    if kind == "majority-token":
        # winner appears strictly most often among the three colour words
        n_win = int(rng.integers(2, max(3, length // 2) + 1))
        others = [int(rng.integers(0, n_win)) for _ in range(2)]
        tokens = [MAJORITY[label]] * n_win
        losers = [w for i, w in enumerate(MAJORITY) if i != label]
        for w, cnt in zip(losers, others):
            tokens += [w] * cnt
        pad = max(0, length - len(tokens))
        tokens += list(rng.choice(fillers, size=pad))
        rng.shuffle(tokens)
        return [str(t) for t in tokens]
    raise ConfigError(f"unknown synthetic task {kind!r}; choose from {TASKS}")


def make_synthetic_task(kind="keyword-sentiment", sizes=(512, 128, 128), seed=0,
                        n_fillers=24, min_len=4, max_len=12):
    """Label-balanced desk-scale classification task over a small word vocabulary.

    * ``keyword-sentiment``: label 1 iff the keyword occurs.
    * ``parity``: label is the parity of the marker word's count.
    * ``majority-token``: three classes, the colour word that occurs most often.
    """
    if kind not in TASKS:
        raise ConfigError(f"unknown synthetic task {kind!r}; choose from {TASKS}")
    rng = np.random.default_rng(seed)
    fillers = np.array([f"w{i}" for i in range(n_fillers)])
    c = 3 if kind == "majority-token" else 2
    words = list(fillers) + [KEYWORD, MARKER, *MAJORITY, *CLASS_WORDS[kind]]
    vocab = Vocab(words)
    parts = []
    for split, size in zip(("train", "dev", "test"), sizes):
        labels = _balanced_labels(size, c, rng)
        records = [{"id": f"{kind}-{split}-{i}",
                    "text": " ".join(_gen(kind, int(y), rng, fillers, min_len, max_len)),
                    "label": int(y)} for i, y in enumerate(labels)]
        parts.append(encode_examples(records, vocab))
    return DatasetSplits(*parts, num_classes=c, name=kind, vocab=vocab,
                         meta={"kind": kind, "seed": seed,
                               "class_words": list(CLASS_WORDS[kind])})


def keyword_oracle(example):
    """Count-based reference classifier for ``keyword-sentiment``."""
    return int(example.text.split().count(KEYWORD) > 0)
