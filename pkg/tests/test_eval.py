import json
import math
from fractions import Fraction

import numpy as np
import pytest

import caae.data as D
import caae.tensor as T
from caae.evaluation import (EvalReport, diversity_eval, dump_latents,
                             make_copy_generator, make_prior_generator,
                             prior_generate, probe_accuracy_on_pairs,
                             probe_eval, probe_predict, random_control,
                             smoothed_bleu, symmetric_bleu)
from caae.model import ModelBundle, ModelConfig
from synthetic import make_corpus


def reference_bleu(candidate, reference, max_n=4):
    """Deliberately different formulation: exact rational precisions via
    Fraction, geometric mean as a product of roots."""
    prod = Fraction(1)
    for n in range(1, max_n + 1):
        cand_grams = [tuple(candidate[i:i + n])
                      for i in range(len(candidate) - n + 1)]
        hits = 0
        remaining = [tuple(reference[i:i + n])
                     for i in range(len(reference) - n + 1)]
        for g in cand_grams:
            if g in remaining:
                remaining.remove(g)
                hits += 1
        num, den = hits, max(1, len(cand_grams))
        if n >= 2:
            num, den = num + 1, den + 1
        if num == 0:
            return 0.0
        prod *= Fraction(num, den)
    score = float(prod) ** (1.0 / max_n)
    if len(candidate) <= len(reference):
        score *= math.exp(1.0 - len(reference) / len(candidate))
    return 100.0 * score


def random_sentence(rng, vocab_letters="abcdef", lo=1, hi=12):
    n = int(rng.integers(lo, hi + 1))
    return [vocab_letters[rng.integers(0, len(vocab_letters))] for _ in range(n)]


def tiny_probe(seed=0, n=32):
    examples = make_corpus(n, seed=seed)
    vocab = D.build_vocab(examples, min_count=1)
    cfg = ModelConfig(vocab_size=len(vocab), dim=6, fusion="mosm",
                      n_candidates=2, num_layers=2, max_len=10)
    return ModelBundle(cfg, seed=seed), examples, vocab


class TestSmoothedBleu:
    def test_identical_is_exactly_100(self):
        sent = "a man walks a large brown dog".split()
        assert smoothed_bleu(sent, sent) == 100.0

    def test_no_overlap_is_zero(self):
        assert smoothed_bleu(["a", "b"], ["c", "d"]) == 0.0

    def test_hand_trace_repeated_tokens(self):
        # candidate "a a", reference "b b": p1 = 0 -> score 0
        assert smoothed_bleu(["a", "a"], ["b", "b"]) == 0.0
        # candidate "a a", reference "a a a": p1 = 2/2, p2 = (1+1)/(1+1),
        # p3 = (0+1)/(0+1)... wait, candidate has no 3-grams: total=max(1,0)
        val = smoothed_bleu(["a", "a"], ["a", "a", "a"])
        # p1=1, p2=1, p3=1/2, p4=1/2, bp=exp(1-3/2)
        expected = 100.0 * math.exp(1 - 1.5) * (1 * 1 * 0.5 * 0.5) ** 0.25
        assert abs(val - expected) < 1e-9

    def test_brevity_penalty_hand_trace(self):
        # candidate is a 3-token prefix of a 5-token reference
        ref = "the dog runs very fast".split()
        cand = ref[:3]
        p1 = 3 / 3
        p2 = (2 + 1) / (2 + 1)
        p3 = (1 + 1) / (1 + 1)
        p4 = (0 + 1) / (max(1, 0) + 1)
        expected = 100.0 * math.exp(1 - 5 / 3) * (p1 * p2 * p3 * p4) ** 0.25
        assert abs(smoothed_bleu(cand, ref) - expected) < 1e-9

    def test_longer_candidate_no_penalty(self):
        ref = ["a", "b", "c"]
        cand = ["a", "b", "c", "d"]
        p1 = 3 / 4
        p2 = (2 + 1) / (3 + 1)
        p3 = (1 + 1) / (2 + 1)
        p4 = (0 + 1) / (1 + 1)
        expected = 100.0 * (p1 * p2 * p3 * p4) ** 0.25
        assert abs(smoothed_bleu(cand, ref) - expected) < 1e-9

    def test_empty_inputs_rejected(self):
        with pytest.raises(ValueError):
            smoothed_bleu([], ["a"])
        with pytest.raises(ValueError):
            smoothed_bleu(["a"], [])

    def test_matches_independent_reference_on_200_pairs(self):
        rng = np.random.default_rng(1234)
        for _ in range(200):
            cand = random_sentence(rng)
            ref = random_sentence(rng)
            assert abs(smoothed_bleu(cand, ref) - reference_bleu(cand, ref)) < 1e-6

    def test_range(self):
        rng = np.random.default_rng(99)
        for _ in range(100):
            v = smoothed_bleu(random_sentence(rng), random_sentence(rng))
            assert 0.0 <= v <= 100.0


class TestSymmetricBleu:
    def test_mean_of_directions(self):
        a, b = ["a", "b", "c"], ["a", "b"]
        assert symmetric_bleu(a, b) == pytest.approx(
            0.5 * (smoothed_bleu(a, b) + smoothed_bleu(b, a)))

    def test_symmetric(self):
        a, b = ["x", "y", "z", "x"], ["y", "z"]
        assert symmetric_bleu(a, b) == symmetric_bleu(b, a)

    def test_identical_pair_100(self):
        s = ["one", "two", "three", "four"]
        assert symmetric_bleu(s, s) == 100.0


class TestGenerators:
    def test_copy_generator_returns_premise(self):
        _, examples, _ = tiny_probe()
        gen = make_copy_generator()
        assert gen(examples[0]) == list(examples[0].premise)
        assert gen(examples[0]) is not examples[0].premise

    def test_prior_generate_count_and_determinism(self):
        bundle, examples, vocab = tiny_probe()
        ex = examples[0]
        outs = prior_generate(bundle, vocab, ex.hypothesis, ex.label,
                              np.random.default_rng(5), count=3, max_len=6)
        assert len(outs) == 3
        again = prior_generate(bundle, vocab, ex.hypothesis, ex.label,
                               np.random.default_rng(5), count=3, max_len=6)
        assert outs == again

    def test_prior_generator_closure_advances_rng(self):
        bundle, examples, vocab = tiny_probe()
        gen = make_prior_generator(bundle, vocab, seed=3, max_len=6)
        a = [gen(examples[0]) for _ in range(2)]
        gen2 = make_prior_generator(bundle, vocab, seed=3, max_len=6)
        b = [gen2(examples[0]) for _ in range(2)]
        assert a == b


class TestProbeEval:
    def test_copy_generator_equals_real_pair_accuracy(self):
        probe, examples, vocab = tiny_probe(seed=1)
        report = probe_eval(probe, vocab, make_copy_generator(), examples)
        pairs = [(ex.premise, ex.hypothesis, ex.label.value) for ex in examples]
        real = probe_accuracy_on_pairs(probe, vocab, pairs)
        assert report.probe_accuracy == pytest.approx(real)
        assert report.sample_count == len(examples)
        assert report.generation_failures == 0

    def test_confusion_rows_normalized_and_consistent(self):
        probe, examples, vocab = tiny_probe(seed=2)
        report = probe_eval(probe, vocab, make_copy_generator(), examples)
        conf = np.array(report.confusion)
        assert conf.shape == (3, 3)
        row_sums = conf.sum(axis=1)
        for lbl in range(3):
            n_lbl = sum(1 for ex in examples if ex.label.value == lbl)
            if n_lbl:
                assert row_sums[lbl] == pytest.approx(1.0)
            else:
                assert row_sums[lbl] == 0.0

    def test_empty_generation_counted_as_failure(self):
        probe, examples, vocab = tiny_probe(seed=3)
        report = probe_eval(probe, vocab, lambda ex: [], examples)
        assert report.generation_failures == len(examples)
        assert report.sample_count == 0
        assert report.probe_accuracy == 0.0

    def test_to_json_round_trip(self):
        report = EvalReport(probe_accuracy=0.5, confusion=[[1, 0, 0]] * 3,
                            bleu_rs=1.0, bleu_ss=2.0, sample_count=4)
        parsed = json.loads(report.to_json())
        assert parsed["probe_accuracy"] == 0.5
        assert parsed["sample_count"] == 4


class TestRandomControl:
    def test_identity_permutation_equals_real_accuracy(self):
        probe, examples, vocab = tiny_probe(seed=4)
        pairs = [(ex.premise, ex.hypothesis, ex.label.value) for ex in examples]
        real = probe_accuracy_on_pairs(probe, vocab, pairs)
        assert random_control(probe, vocab, examples, seed=0, identity=True) \
            == pytest.approx(real)

    def test_seeded_determinism(self):
        probe, examples, vocab = tiny_probe(seed=5)
        a = random_control(probe, vocab, examples, seed=11)
        b = random_control(probe, vocab, examples, seed=11)
        assert a == b


class TestDiversityEval:
    def test_collapsed_generator_ss_is_100(self, monkeypatch):
        # force identical greedy output for every draw
        bundle, examples, vocab = tiny_probe(seed=6)
        fixed = [[5, 6, 7, 8]]  # >= 4 tokens so the 4-gram precision is exact
        monkeypatch.setattr(bundle, "decode_greedy",
                            lambda z, max_len=None: [list(fixed[0])])
        rs, ss, used, failures = diversity_eval(bundle, vocab, examples[:6], seed=0)
        assert ss == pytest.approx(100.0)
        assert used == 6
        assert failures == 0

    def test_all_empty_generations(self, monkeypatch):
        bundle, examples, vocab = tiny_probe(seed=7)
        monkeypatch.setattr(bundle, "decode_greedy",
                            lambda z, max_len=None: [[]])
        rs, ss, used, failures = diversity_eval(bundle, vocab, examples[:4], seed=0)
        assert (rs, ss, used) == (0.0, 0.0, 0)
        assert failures == 4

    def test_seeded_determinism(self):
        bundle, examples, vocab = tiny_probe(seed=8)
        a = diversity_eval(bundle, vocab, examples[:5], seed=2, max_len=6)
        b = diversity_eval(bundle, vocab, examples[:5], seed=2, max_len=6)
        assert a == b


class TestDumpLatents:
    def test_row_count_and_argmin_uniqueness(self, tmp_path):
        bundle, examples, vocab = tiny_probe(seed=9)
        path = tmp_path / "latents.jsonl"
        n = 4
        rows = dump_latents(bundle, vocab, examples[:5], n, path, seed=1)
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert rows == len(lines) == 5 * n
        for triplet in range(5):
            group = [l for l in lines if l["triplet"] == triplet]
            assert [l["sample"] for l in group] == list(range(n))
            winners = [l for l in group if l["is_argmin"]]
            assert len(winners) == 1
            best = min(group, key=lambda l: (l["nll"], l["sample"]))
            assert winners[0]["sample"] == best["sample"]
            for l in group:
                assert len(l["z"]) == bundle.cfg.dim
