"""Quality and diversity evaluation.

Quality: an internal probe classifier (trained on real triplets only)
scores whether generated premises realize the conditioning label, with a
randomly-permuted-premise control.  Diversity: BLEU-4 with smoothing
technique 2 between pairs of generated premises (SS) and between real and
generated premises (RS).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as D
from . import tensor as T
from .model import ModelBundle
from .tensor import Tensor

NUM_LABELS = 3


# -- BLEU -----------------------------------------------------------------------

def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1))


def smoothed_bleu(candidate: Sequence[str], reference: Sequence[str],
                  max_n: int = 4) -> float:
    """BLEU-4 with brevity penalty, scaled to 0..100.

    For n >= 2, one is added to both the matched and total n-gram counts
    (smoothing technique 2); the unigram precision is left exact, so a
    candidate with no unigram overlap scores 0.
    """
    if not candidate or not reference:
        raise ValueError("smoothed_bleu: empty candidate or reference")
    log_p_sum = 0.0
    for n in range(1, max_n + 1):
        cand = _ngram_counts(candidate, n)
        ref = _ngram_counts(reference, n)
        matched = sum(min(c, ref[g]) for g, c in cand.items())
        total = max(1, sum(cand.values()))
        if n >= 2:
            matched += 1
            total += 1
        if matched == 0:
            return 0.0
        log_p_sum += math.log(matched / total)
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p_sum / max_n)


def symmetric_bleu(a: Sequence[str], b: Sequence[str]) -> float:
    return 0.5 * (smoothed_bleu(a, b) + smoothed_bleu(b, a))


# -- generation helpers ------------------------------------------------------------

def prior_generate(bundle: ModelBundle, vocab: D.Vocab,
                   hypothesis: Sequence[str], label: D.Label,
                   rng: np.random.Generator,
                   count: int = 1, max_len: Optional[int] = None) -> List[List[str]]:
    """Draw `count` prior samples for one (hypothesis, label) and greedy-decode."""
    ids = np.asarray([vocab.encode(hypothesis)], dtype=np.int64)
    lengths = np.asarray([ids.shape[1]], dtype=np.int64)
    labels = np.asarray([label.value], dtype=np.int64)
    out = []
    for _ in range(count):
        eps = bundle.draw_eps(1, rng)
        z = bundle.prior_sample(ids, lengths, labels, eps).detach()
        out.append(vocab.decode(bundle.decode_greedy(z, max_len)[0]))
    return out


def make_prior_generator(bundle: ModelBundle, vocab: D.Vocab,
                         seed: int, max_len: Optional[int] = None
                         ) -> Callable[[D.SnliExample], List[str]]:
    rng = np.random.default_rng(seed)
    def gen(ex: D.SnliExample) -> List[str]:
        return prior_generate(bundle, vocab, ex.hypothesis, ex.label, rng,
                              count=1, max_len=max_len)[0]
    return gen


def make_copy_generator() -> Callable[[D.SnliExample], List[str]]:
    """Fixture generator that returns the real premise (pipeline sanity)."""
    return lambda ex: list(ex.premise)


# -- probe-based quality evaluation ---------------------------------------------------

@dataclass
class EvalReport:
    probe_accuracy: float
    confusion: List[List[float]]  # rows = conditioning label, normalized
    bleu_rs: Optional[float]
    bleu_ss: Optional[float]
    sample_count: int
    random_control_accuracy: Optional[float] = None
    real_pair_accuracy: Optional[float] = None
    generation_failures: int = 0

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)


def probe_predict(probe: ModelBundle, vocab: D.Vocab,
                  premise_tokens: Sequence[str],
                  hypothesis_tokens: Sequence[str]) -> int:
    prem = np.asarray([vocab.encode(premise_tokens)], dtype=np.int64)
    hyp = np.asarray([vocab.encode(hypothesis_tokens)], dtype=np.int64)
    z = probe.encode_premise(prem, np.asarray([prem.shape[1]]))
    probs = probe.classify(z, hyp, np.asarray([hyp.shape[1]]))
    return int(np.argmax(probs[0]))


def probe_accuracy_on_pairs(probe: ModelBundle, vocab: D.Vocab,
                            pairs: Sequence[Tuple[Sequence[str], Sequence[str], int]]) -> float:
    hit = 0
    for premise, hypothesis, label in pairs:
        if probe_predict(probe, vocab, premise, hypothesis) == label:
            hit += 1
    return hit / len(pairs)


def probe_eval(probe: ModelBundle, vocab: D.Vocab,
               generate_fn: Callable[[D.SnliExample], List[str]],
               examples: Sequence[D.SnliExample]) -> EvalReport:
    """Generate a premise per (hypothesis, label), score with the probe."""
    counts = np.zeros((NUM_LABELS, NUM_LABELS), dtype=np.float64)
    failures = 0
    for ex in examples:
        generated = generate_fn(ex)
        if not generated:
            failures += 1
            continue
        pred = probe_predict(probe, vocab, generated, ex.hypothesis)
        counts[ex.label.value, pred] += 1
    used = int(counts.sum())
    accuracy = float(np.trace(counts) / used) if used else 0.0
    rows = counts / np.maximum(counts.sum(axis=1, keepdims=True), 1.0)
    return EvalReport(probe_accuracy=accuracy, confusion=rows.tolist(),
                      bleu_rs=None, bleu_ss=None, sample_count=used,
                      generation_failures=failures)


def random_control(probe: ModelBundle, vocab: D.Vocab,
                   examples: Sequence[D.SnliExample], seed: int,
                   identity: bool = False) -> float:
    """Probe accuracy after a seeded uniform permutation of the premises."""
    rng = np.random.default_rng(seed)
    perm = np.arange(len(examples)) if identity else rng.permutation(len(examples))
    pairs = [(examples[perm[i]].premise, ex.hypothesis, ex.label.value)
             for i, ex in enumerate(examples)]
    return probe_accuracy_on_pairs(probe, vocab, pairs)


# -- diversity evaluation --------------------------------------------------------------

def diversity_eval(bundle: ModelBundle, vocab: D.Vocab,
                   examples: Sequence[D.SnliExample], seed: int,
                   max_len: Optional[int] = None) -> Tuple[float, float, int, int]:
    """Two independent prior draws per triplet.

    Returns (BLEU_RS mean, BLEU_SS mean, items used, items excluded)."""
    rng = np.random.default_rng(seed)
    rs, ss = [], []
    failures = 0
    for ex in examples:
        s1, s2 = prior_generate(bundle, vocab, ex.hypothesis, ex.label, rng,
                                count=2, max_len=max_len)
        if not s1 or not s2:
            failures += 1
            continue
        ss.append(symmetric_bleu(s1, s2))
        rs.append(smoothed_bleu(s1, ex.premise))
    if not ss:
        return 0.0, 0.0, 0, failures
    return float(np.mean(rs)), float(np.mean(ss)), len(ss), failures


# -- latent dump -------------------------------------------------------------------------

def dump_latents(bundle: ModelBundle, vocab: D.Vocab,
                 examples: Sequence[D.SnliExample], n: int, path,
                 seed: int = 0) -> int:
    """Per triplet, write N prior z draws with their reconstruction NLLs as
    JSONL; exactly one row per triplet is flagged as the min-NLL sample."""
    rng = np.random.default_rng(seed)
    rows_written = 0
    with open(path, "w", encoding="utf-8") as fh:
        for idx, ex in enumerate(examples):
            hyp = np.asarray([vocab.encode(ex.hypothesis)], dtype=np.int64)
            prem = np.asarray([vocab.encode(ex.premise)], dtype=np.int64)
            labels = np.asarray([ex.label.value], dtype=np.int64)
            zs, nlls = [], []
            for _ in range(n):
                eps = bundle.draw_eps(1, rng)
                z = bundle.prior_sample(hyp, np.asarray([hyp.shape[1]]),
                                        labels, eps).detach()
                per_ex, _ = bundle.decode_nll(z, prem, np.asarray([prem.shape[1]]))
                zs.append(z.data[0])
                nlls.append(float(per_ex.data[0]))
            argmin = int(np.argmin(nlls))  # ties -> lowest index
            for j in range(n):
                fh.write(json.dumps({
                    "triplet": idx,
                    "sample": j,
                    "z": [float(v) for v in zs[j]],
                    "nll": nlls[j],
                    "is_argmin": j == argmin,
                }) + "\n")
                rows_written += 1
    return rows_written
