"""SNLI-format ingestion, vocabulary, and padded mini-batches."""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Iterator, List, Optional, Sequence

import numpy as np

PAD, UNK, BOS, EOS = 0, 1, 2, 3
RESERVED = ["<pad>", "<unk>", "<bos>", "<eos>"]


class Label(Enum):
    ENTAILMENT = 0
    NEUTRAL = 1
    CONTRADICTION = 2

    @classmethod
    def from_string(cls, s: str) -> "Label":
        try:
            return cls[s.strip().upper()]
        except KeyError:
            raise ValueError(
                f"unknown label {s!r}; expected one of entailment, neutral, contradiction"
            ) from None


LABEL_NAMES = [l.name.lower() for l in Label]


@dataclass
class SnliExample:
    premise: List[str]
    hypothesis: List[str]
    label: Label


@dataclass
class ParseStats:
    parsed: int = 0
    skipped_unlabeled: int = 0
    errors: List[str] = field(default_factory=list)
    label_counts: Counter = field(default_factory=Counter)


def tokenize(text: str) -> List[str]:
    return text.lower().split()


def parse_snli_jsonl(path, stats: Optional[ParseStats] = None) -> Iterator[SnliExample]:
    """Yield examples from a JSONL file with gold_label/sentence1/sentence2.

    Lines labeled "-" are skipped and counted; malformed lines are recorded
    in stats.errors and parsing continues.
    """
    if stats is None:
        stats = ParseStats()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                gold = obj["gold_label"]
                if gold == "-":
                    stats.skipped_unlabeled += 1
                    continue
                ex = SnliExample(
                    premise=tokenize(obj["sentence1"]),
                    hypothesis=tokenize(obj["sentence2"]),
                    label=Label.from_string(gold),
                )
                if not ex.premise or not ex.hypothesis:
                    raise ValueError("empty sentence")
            except (json.JSONDecodeError, KeyError, ValueError) as e:
                stats.errors.append(f"line {lineno}: {e}")
                continue
            stats.parsed += 1
            stats.label_counts[ex.label] += 1
            yield ex


class Vocab:
    """Token/id bijection with reserved PAD/UNK/BOS/EOS ids 0..3."""

    def __init__(self, tokens: Sequence[str], min_count: int = 1):
        self.min_count = min_count
        self.id_to_token: List[str] = list(RESERVED) + list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}
        if len(self.token_to_id) != len(self.id_to_token):
            raise ValueError("duplicate tokens in vocabulary")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def id_of(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode(self, tokens: Sequence[str], add_bos_eos: bool = False) -> List[int]:
        ids = [self.id_of(t) for t in tokens]
        if add_bos_eos:
            return [BOS] + ids + [EOS]
        return ids

    def decode(self, ids: Sequence[int]) -> List[str]:
        return [self.id_to_token[i] for i in ids if i not in (PAD, BOS, EOS)]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if lines[:4] != RESERVED:
            raise ValueError(f"{path}: missing reserved-token header")
        return cls(lines[4:])


def build_vocab(examples: Iterable[SnliExample], min_count: int = 3) -> Vocab:
    """Deterministic vocabulary: by descending frequency, then lexicographic."""
    counts: Counter = Counter()
    n = 0
    for ex in examples:
        n += 1
        counts.update(ex.premise)
        counts.update(ex.hypothesis)
    if n == 0:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    kept = [t for t, c in counts.items() if c >= min_count]
    kept.sort(key=lambda t: (-counts[t], t))
    vocab = Vocab(kept, min_count=min_count)
    return vocab


@dataclass
class Batch:
    premise: np.ndarray       # [B, T_p] int64, PAD-padded
    hypothesis: np.ndarray    # [B, T_h]
    premise_len: np.ndarray   # [B]
    hypothesis_len: np.ndarray
    label: np.ndarray         # [B] int64

    @property
    def size(self) -> int:
        return self.premise.shape[0]


def pad_matrix(seqs: Sequence[Sequence[int]]) -> np.ndarray:
    width = max(len(s) for s in seqs)
    mat = np.full((len(seqs), width), PAD, dtype=np.int64)
    for i, s in enumerate(seqs):
        mat[i, : len(s)] = s
    return mat


def make_batches(examples: Sequence[SnliExample], vocab: Vocab,
                 batch_size: int, seed: int,
                 max_len: int = 30) -> List[Batch]:
    """Seeded epoch shuffle, truncation to max_len, per-batch padding."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(examples))
    batches: List[Batch] = []
    for lo in range(0, len(examples), batch_size):
        chunk = [examples[i] for i in order[lo: lo + batch_size]]
        prem = [vocab.encode(ex.premise[:max_len]) for ex in chunk]
        hyp = [vocab.encode(ex.hypothesis[:max_len]) for ex in chunk]
        batches.append(Batch(
            premise=pad_matrix(prem),
            hypothesis=pad_matrix(hyp),
            premise_len=np.array([len(p) for p in prem], dtype=np.int64),
            hypothesis_len=np.array([len(h) for h in hyp], dtype=np.int64),
            label=np.array([ex.label.value for ex in chunk], dtype=np.int64),
        ))
    return batches
