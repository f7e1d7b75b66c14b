import numpy as np
import pytest

import caae.data as D
import caae.tensor as T
from caae.model import (BaselineBundle, ModelBundle, ModelConfig,
                        _teacher_pairs, bundle_from_checkpoint,
                        load_checkpoint, restore_into, save_checkpoint)


def tiny_cfg(**kw):
    base = dict(vocab_size=12, dim=6, fusion="mosm", n_candidates=2,
                num_layers=2, max_len=8)
    base.update(kw)
    return ModelConfig(**base)


def tiny_vocab():
    return D.Vocab([f"w{i}" for i in range(8)])


@pytest.fixture
def bundle():
    return ModelBundle(tiny_cfg(), seed=0)


def rand_batch(rng, batch=3, width=4, vocab=12):
    ids = rng.integers(4, vocab, (batch, width))
    lengths = rng.integers(1, width + 1, batch)
    for b in range(batch):
        ids[b, lengths[b]:] = D.PAD
    return ids, lengths


class TestTeacherPairs:
    def test_shapes_and_shift(self):
        prem = np.array([[5, 6, 0], [7, 8, 9]])
        lengths = np.array([2, 3])
        inputs, targets = _teacher_pairs(prem, lengths)
        assert inputs.shape == targets.shape == (2, 4)
        assert list(inputs[0]) == [D.BOS, 5, 6, D.PAD]
        assert list(targets[0]) == [5, 6, D.EOS, D.PAD]
        assert list(inputs[1]) == [D.BOS, 7, 8, 9]
        assert list(targets[1]) == [7, 8, 9, D.EOS]


class TestEncoder:
    def test_latent_width(self, bundle):
        rng = np.random.default_rng(0)
        ids, lengths = rand_batch(rng)
        z = bundle.encode_premise(ids, lengths)
        assert z.shape == (3, 6)

    def test_deterministic(self, bundle):
        rng = np.random.default_rng(1)
        ids, lengths = rand_batch(rng)
        a = bundle.encode_premise(ids, lengths)
        b = bundle.encode_premise(ids, lengths)
        assert np.array_equal(a.data, b.data)

    def test_pad_invariance(self, bundle):
        ids = np.array([[5, 6, 0, 0]])
        lengths = np.array([2])
        a = bundle.encode_premise(ids, lengths)
        b = bundle.encode_premise(ids[:, :2], lengths)
        assert np.allclose(a.data, b.data, atol=1e-6)

    def test_empty_rejected(self, bundle):
        with pytest.raises(ValueError):
            bundle.encode_premise(np.zeros((1, 0), dtype=np.int64), np.array([0]))

    def test_mean_fusion_single_token(self):
        bundle = ModelBundle(tiny_cfg(fusion="mean"), seed=0)
        ids = np.array([[7]])
        z = bundle.encode_premise(ids, np.array([1]))
        hs = bundle.enc.run([bundle.emb(ids[:, 0])], np.array([1]))
        assert np.allclose(z.data, hs[0].data)


class TestPrior:
    def test_eps_determinism(self, bundle):
        rng = np.random.default_rng(2)
        ids, lengths = rand_batch(rng)
        labels = np.array([0, 1, 2])
        eps = bundle.draw_eps(3, np.random.default_rng(5))
        a = bundle.prior_sample(ids, lengths, labels, eps)
        b = bundle.prior_sample(ids, lengths, labels, eps)
        assert np.array_equal(a.data, b.data)

    def test_label_changes_sample(self, bundle):
        rng = np.random.default_rng(3)
        ids, lengths = rand_batch(rng, batch=1)
        eps = bundle.draw_eps(1, np.random.default_rng(5))
        a = bundle.prior_sample(ids, lengths, np.array([0]), eps)
        b = bundle.prior_sample(ids, lengths, np.array([2]), eps)
        # magnitudes are ttiny at init, so compare bit patterns
        assert not np.array_equal(a.data, b.data)

    def test_eps_changes_sample(self, bundle):
        rng = np.random.default_rng(4)
        ids, lengths = rand_batch(rng, batch=1)
        labels = np.array([1])
        a = bundle.prior_sample(ids, lengths, labels, bundle.draw_eps(1, np.random.default_rng(6)))
        b = bundle.prior_sample(ids, lengths, labels, bundle.draw_eps(1, np.random.default_rng(7)))
        assert not np.array_equal(a.data, b.data)

    def test_draw_eps_shape(self, bundle):
        eps = bundle.draw_eps(5, np.random.default_rng(0))
        assert eps.shape == (5, 6)


class TestDecoder:
    def test_uniform_logits_nll_is_log_vocab(self, bundle, f64):
        bundle.dec_head.W.data[:] = 0.0
        bundle.dec_head.b.data[:] = 0.0
        rng = np.random.default_rng(5)
        ids, lengths = rand_batch(rng)
        z = bundle.encode_premise(ids, lengths)
        per_ex, mean = bundle.decode_nll(z, ids, lengths)
        assert np.allclose(per_ex.data, np.log(12), atol=1e-10)
        assert np.allclose(mean.data, np.log(12), atol=1e-10)

    def test_per_example_vector_and_mean_agree(self, bundle):
        rng = np.random.default_rng(6)
        ids, lengths = rand_batch(rng)
        z = bundle.encode_premise(ids, lengths)
        per_ex, mean = bundle.decode_nll(z, ids, lengths)
        assert per_ex.shape == (3,)
        assert np.allclose(mean.data, per_ex.data.mean(), rtol=1e-6)

    def test_greedy_respects_max_len(self, bundle):
        z = T.Tensor(np.zeros((2, 6)))
        rows = bundle.decode_greedy(z, max_len=5)
        assert all(len(r) <= 5 for r in rows)

    def test_greedy_deterministic(self, bundle):
        rng = np.random.default_rng(7)
        z = T.Tensor(rng.uniform(-1, 1, (2, 6)))
        assert bundle.decode_greedy(z) == bundle.decode_greedy(z)

    def test_greedy_eos_stub_stops_immediately(self, bundle):
        # bias the head so EOS always wins
        bundle.dec_head.W.data[:] = 0.0
        bundle.dec_head.b.data[:] = 0.0
        bundle.dec_head.b.data[D.EOS] = 10.0
        rows = bundle.decode_greedy(T.Tensor(np.zeros((3, 6))))
        assert rows == [[], [], []]

    def test_token_accuracy_range(self, bundle):
        rng = np.random.default_rng(8)
        ids, lengths = rand_batch(rng)
        z = bundle.encode_premise(ids, lengths)
        acc = bundle.token_accuracy(z, ids, lengths)
        assert 0.0 <= acc <= 1.0


class TestClassifier:
    def test_probabilities_sum_to_one(self, bundle):
        rng = np.random.default_rng(9)
        ids, lengths = rand_batch(rng)
        z = bundle.encode_premise(ids, lengths)
        probs = bundle.classify(z, ids, lengths)
        assert probs.shape == (3, 3)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_untrained_near_chance(self, bundle):
        # small random init keeps the head logits near zero
        rng = np.random.default_rng(10)
        ids, lengths = rand_batch(rng, batch=16)
        z = bundle.encode_premise(ids, lengths)
        probs = bundle.classify(z, ids, lengths)
        assert np.all(np.abs(probs - 1 / 3) < 0.1)

    def test_pad_invariance(self, bundle):
        hyp = np.array([[5, 6, 0, 0]])
        lengths = np.array([2])
        z = T.Tensor(np.random.default_rng(11).uniform(-1, 1, (1, 6)))
        a = bundle.classify(z, hyp, lengths)
        b = bundle.classify(z, hyp[:, :2], lengths)
        assert np.allclose(a, b, atol=1e-5)


class TestDiscriminator:
    def test_probability_range(self, bundle):
        rng = np.random.default_rng(12)
        ids, lengths = rand_batch(rng)
        z = T.Tensor(rng.uniform(-1, 1, (3, 6)))
        p = bundle.discriminate(z, ids, lengths, np.array([0, 1, 2]))
        assert p.shape == (3,)
        assert np.all((p > 0) & (p < 1))

    def test_zero_head_gives_half(self, bundle):
        bundle.disc.head2.W.data[:] = 0.0
        bundle.disc.head2.b.data[:] = 0.0
        rng = np.random.default_rng(13)
        ids, lengths = rand_batch(rng)
        z = T.Tensor(rng.uniform(-1, 1, (3, 6)))
        p = bundle.discriminate(z, ids, lengths, np.array([0, 0, 0]))
        assert np.allclose(p, 0.5)

    def test_pad_invariance(self, bundle):
        hyp = np.array([[5, 6, 0, 0]])
        lengths = np.array([2])
        z = T.Tensor(np.random.default_rng(14).uniform(-1, 1, (1, 6)))
        a = bundle.discriminate(z, hyp, lengths, np.array([1]))
        b = bundle.discriminate(z, hyp[:, :2], lengths, np.array([1]))
        assert np.allclose(a, b, atol=1e-5)


class TestParameterSharing:
    def test_encoder_shared_three_ways(self, bundle):
        # autoencoder, prior, and classifier all call self.enc / self.emb;
        # verify the attribute objects are literally shared
        gen = bundle.generator_named_params()
        assert gen["emb.table"] is bundle.emb.table
        for k, v in bundle.enc.named_params().items():
            assert gen[f"enc.{k}"] is v

    def test_compress_shared_with_prior(self, bundle):
        # prior_sample ends in self.fusion.compress — the same object the
        # autoencoder uses in encode_premise
        comp = bundle.fusion.compress_params()
        gen = bundle.generator_named_params()
        for k, v in comp.items():
            assert gen[f"compress.{k}"] is v

    def test_retrieve_shared_decoder_classifier(self, bundle):
        ret = bundle.fusion.retrieve_params()
        gen = bundle.generator_named_params()
        for k, v in ret.items():
            assert gen[f"retrieve.{k}"] is v

    def test_discriminator_fully_disjoint(self, bundle):
        gen_ids = {id(t) for t in bundle.generator_params()}
        disc_ids = {id(t) for t in bundle.discriminator_params()}
        assert not gen_ids & disc_ids
        gen_arrays = {id(t.data) for t in bundle.generator_params()}
        disc_arrays = {id(t.data) for t in bundle.discriminator_params()}
        assert not gen_arrays & disc_arrays

    def test_no_duplicate_names(self, bundle):
        named = bundle.named_params()
        assert len(named) == len(bundle.generator_params()) + len(bundle.discriminator_params())
        ids = [id(t) for t in named.values()]
        assert len(ids) == len(set(ids))

    def test_gradient_through_prior_touches_shared_encoder(self, bundle, f64):
        rng = np.random.default_rng(15)
        ids, lengths = rand_batch(rng, batch=2)
        eps = bundle.draw_eps(2, np.random.default_rng(1))
        z = bundle.prior_sample(ids, lengths, np.array([0, 1]), eps)
        T.reduce_sum(z).backward()
        enc_params = list(bundle.enc.named_params().values())
        assert any(p.grad is not None and np.any(p.grad != 0) for p in enc_params)


class TestCheckpoint:
    def test_round_trip(self, bundle, tmp_path):
        path = tmp_path / "m.ckpt"
        vocab = tiny_vocab()
        meta = {"model": vars(tiny_cfg()), "epoch": 3}
        save_checkpoint(path, bundle.named_params(), vocab, meta)
        arrays, v2, m2 = load_checkpoint(path)
        assert m2 == meta
        assert v2.id_to_token == vocab.id_to_token
        for name, t in bundle.named_params().items():
            assert np.array_equal(arrays[name], t.data)

    def test_bundle_from_checkpoint(self, bundle, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, bundle.named_params(), tiny_vocab(),
                        {"model": vars(tiny_cfg())})
        rebuilt, vocab, meta = bundle_from_checkpoint(path)
        rng = np.random.default_rng(16)
        ids, lengths = rand_batch(rng)
        a = bundle.encode_premise(ids, lengths)
        b = rebuilt.encode_premise(ids, lengths)
        assert np.array_equal(a.data, b.data)

    def test_extra_arrays_round_trip(self, bundle, tmp_path):
        path = tmp_path / "m.ckpt"
        extra = {"opt.gen.m.emb.table": np.ones((12, 6), dtype=np.float32)}
        save_checkpoint(path, bundle.named_params(), tiny_vocab(),
                        {"model": vars(tiny_cfg())}, extra_arrays=extra)
        arrays, _, _ = load_checkpoint(path)
        assert np.array_equal(arrays["opt.gen.m.emb.table"], extra["opt.gen.m.emb.table"])

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError):
            load_checkpoint(path)

    def test_missing_tensor_rejected(self, bundle, tmp_path):
        path = tmp_path / "m.ckpt"
        named = dict(bundle.named_params())
        named.pop("label_emb")
        save_checkpoint(path, named, tiny_vocab(), {"model": vars(tiny_cfg())})
        arrays, _, _ = load_checkpoint(path)
        with pytest.raises(ValueError):
            restore_into(bundle.named_params(), arrays)

    def test_f64_tensors_round_trip(self, tmp_path, f64):
        b = ModelBundle(tiny_cfg(), seed=1)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, b.named_params(), tiny_vocab(),
                        {"model": vars(tiny_cfg())})
        arrays, _, _ = load_checkpoint(path)
        assert arrays["emb.table"].dtype == np.float64
        assert np.array_equal(arrays["emb.table"], b.emb.table.data)


class TestBaseline:
    def test_latent_deterministic_given_inputs(self):
        b = BaselineBundle(tiny_cfg(kind="baseline"), seed=0)
        rng = np.random.default_rng(17)
        ids, lengths = rand_batch(rng)
        labels = np.array([0, 1, 2])
        x = b.latent(ids, lengths, labels)
        y = b.latent(ids, lengths, labels)
        assert np.array_equal(x.data, y.data)

    def test_forward_nll_shapes(self):
        b = BaselineBundle(tiny_cfg(kind="baseline"), seed=0)
        rng = np.random.default_rng(18)
        hyp, hl = rand_batch(rng)
        prem, pl = rand_batch(rng)
        per_ex, mean = b.forward_nll(hyp, hl, np.array([0, 1, 2]), prem, pl)
        assert per_ex.shape == (3,)
        assert mean.shape == ()

    def test_greedy_label_sensitivity_structure(self):
        b = BaselineBundle(tiny_cfg(kind="baseline"), seed=0)
        rng = np.random.default_rng(19)
        ids, lengths = rand_batch(rng, batch=1)
        a = b.decode_greedy(ids, lengths, np.array([0]))
        c = b.decode_greedy(ids, lengths, np.array([0]))
        assert a == c

    def test_checkpoint_round_trip(self, tmp_path):
        cfg = tiny_cfg(kind="baseline")
        b = BaselineBundle(cfg, seed=2)
        path = tmp_path / "b.ckpt"
        save_checkpoint(path, b.named_params(), tiny_vocab(), {"model": vars(cfg)})
        rebuilt, _, _ = bundle_from_checkpoint(path)
        assert isinstance(rebuilt, BaselineBundle)
        rng = np.random.default_rng(20)
        ids, lengths = rand_batch(rng)
        labels = np.array([0, 1, 2])
        assert np.array_equal(b.latent(ids, lengths, labels).data,
                              rebuilt.latent(ids, lengths, labels).data)
