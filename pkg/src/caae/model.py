"""The conditional adversarial autoencoder: encoder/decoder, conditional
prior, latent classifier, and discriminator, plus the plain encoder-decoder
baseline.

Parameter sharing: the autoencoder, prior, and classifier use one premise/
hypothesis encoder; the prior shares the compression function with the
autoencoder; the classifier shares the retrieval function with the decoder.
The discriminator owns a fully disjoint parameter set, including its own
embeddings and encoder.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import data as D
from . import fusion as F
from . import tensor as T
from .seqnet import BiLstmStack, Embedding, Linear, UniLstmStack, step_masks
from .tensor import Tensor

NUM_LABELS = 3


@dataclass
class ModelConfig:
    vocab_size: int
    dim: int = 300
    fusion: str = "mosm"
    n_candidates: int = 4
    num_layers: int = 2
    max_len: int = 30
    kind: str = "caae"  # or "baseline"


@dataclass
class GenerationSample:
    hypothesis: List[str]
    label: D.Label
    premise: List[str]
    latent: np.ndarray


def _embed_steps(emb: Embedding, ids: np.ndarray) -> List[Tensor]:
    return [emb(ids[:, t]) for t in range(ids.shape[1])]


def _masked_max(parts: Sequence[Tensor], masks: Sequence[np.ndarray]) -> Tensor:
    dim = parts[0].shape[1]
    out = None
    for p, m in zip(parts, masks):
        penalty = Tensor(np.repeat(((1.0 - m) * -1e9)[:, None], dim, axis=1))
        cand = p + penalty
        out = cand if out is None else T.maximum(out, cand)
    return out


def _teacher_pairs(premise: np.ndarray, lengths: np.ndarray):
    """Decoder inputs (BOS + premise) and targets (premise + EOS), padded."""
    batch, width = premise.shape
    inputs = np.full((batch, width + 1), D.PAD, dtype=np.int64)
    targets = np.full((batch, width + 1), D.PAD, dtype=np.int64)
    inputs[:, 0] = D.BOS
    inputs[:, 1:] = premise
    targets[:, :width] = premise
    targets[np.arange(batch), lengths] = D.EOS
    return inputs, targets


class _Discriminator:
    """Disjoint parameter set: own embeddings, encoder, retrieval, heads."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        d = cfg.dim
        self.emb = Embedding(cfg.vocab_size, d, rng)
        self.enc = BiLstmStack(d, d, rng, cfg.num_layers)
        self.fusion = F.make_fusion(cfg.fusion, d, cfg.n_candidates, rng)
        self.label_emb = T.parameter(None, rng, 0.08, (NUM_LABELS, d))
        self.combine = Linear(3 * d, d, rng)
        self.refine = BiLstmStack(d, d, rng, cfg.num_layers)
        self.head1 = Linear(2 * d, d, rng)
        self.head2 = Linear(d, 1, rng)

    def logit(self, z: Tensor, hyp: np.ndarray, lengths: np.ndarray,
              labels: np.ndarray) -> Tensor:
        masks = step_masks(lengths, hyp.shape[1])
        hs = self.enc.run(_embed_steps(self.emb, hyp), lengths)
        e_l = T.gather_rows(self.label_emb, labels)
        combined = []
        for h, m in zip(hs, masks):
            c = self.fusion.retrieve(z, h)
            feats = T.concat([h, c, e_l], axis=1)
            combined.append(T.rowscale(T.tanh(self.combine(feats)), Tensor(m)))
        refined = self.refine.run(combined, lengths)
        pooled = T.concat([_masked_max(refined, masks),
                           F.masked_mean(refined, masks, lengths)], axis=1)
        return self.head2(T.tanh(self.head1(pooled)))  # [B, 1]

    def named_params(self) -> Dict[str, Tensor]:
        out = {"emb.table": self.emb.table, "label_emb": self.label_emb}
        out.update({f"enc.{k}": v for k, v in self.enc.named_params().items()})
        out.update({f"retrieve.{k}": v for k, v in self.fusion.retrieve_params().items()})
        out.update({f"rcompress.{k}": v for k, v in self.fusion.compress_params().items()})
        out.update({f"combine.{k}": v for k, v in self.combine.named_params().items()})
        out.update({f"refine.{k}": v for k, v in self.refine.named_params().items()})
        out.update({f"head1.{k}": v for k, v in self.head1.named_params().items()})
        out.update({f"head2.{k}": v for k, v in self.head2.named_params().items()})
        return out


class ModelBundle:
    """All parameter groups of the full model plus its forward passes."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.dim
        self.emb = Embedding(cfg.vocab_size, d, rng)
        self.enc = BiLstmStack(d, d, rng, cfg.num_layers)          # shared
        self.fusion = F.make_fusion(cfg.fusion, d, cfg.n_candidates, rng)
        self.label_emb = T.parameter(None, rng, 0.08, (NUM_LABELS, d))
        # prior
        self.prior_mlp1 = Linear(3 * d, d, rng)
        self.prior_mlp2 = Linear(d, d, rng)
        self.prior_refine = BiLstmStack(d, d, rng, cfg.num_layers)
        # classifier
        self.cls_combine = Linear(4 * d, d, rng)
        self.cls_refine = BiLstmStack(d, d, rng, cfg.num_layers)
        self.cls_head1 = Linear(2 * d, d, rng)
        self.cls_head2 = Linear(d, NUM_LABELS, rng)
        # decoder
        self.dec = UniLstmStack(d, d, rng, cfg.num_layers)
        self.dec_head = Linear(2 * d, cfg.vocab_size, rng)
        # discriminator (fully disjoint)
        self.disc = _Discriminator(cfg, rng)

    # -- encoder -------------------------------------------------------------
    def encode_premise(self, premise: np.ndarray, lengths: np.ndarray) -> Tensor:
        if premise.shape[1] == 0 or np.any(lengths < 1):
            raise ValueError("encode_premise: empty premise")
        masks = step_masks(lengths, premise.shape[1])
        hs = self.enc.run(_embed_steps(self.emb, premise), lengths)
        return self.fusion.compress(hs, masks, lengths)

    # -- prior ---------------------------------------------------------------
    def prior_sample(self, hyp: np.ndarray, lengths: np.ndarray,
                     labels: np.ndarray, eps: np.ndarray) -> Tensor:
        """z ~ p(z | hypothesis, label); eps is one N(0,1) draw per row,
        broadcast to every time step."""
        masks = step_masks(lengths, hyp.shape[1])
        hs = self.enc.run(_embed_steps(self.emb, hyp), lengths)
        e_l = T.gather_rows(self.label_emb, labels)
        eps_t = T.as_tensor(np.asarray(eps, dtype=T.default_dtype()))
        tilde = []
        for h, m in zip(hs, masks):
            x = T.concat([h, e_l, eps_t], axis=1)
            x = self.prior_mlp2(T.tanh(self.prior_mlp1(x)))
            tilde.append(T.rowscale(x, Tensor(m)))
        refined = self.prior_refine.run(tilde, lengths)
        return self.fusion.compress(refined, masks, lengths)

    def draw_eps(self, batch: int, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal((batch, self.cfg.dim))

    # -- decoder -------------------------------------------------------------
    def decode_nll(self, z: Tensor, premise: np.ndarray,
                   lengths: np.ndarray) -> Tuple[Tensor, Tensor]:
        """Teacher-forced reconstruction loss.

        Returns (per-example mean NLL [B], batch-mean scalar)."""
        inputs, targets = _teacher_pairs(premise, lengths)
        tgt_len = lengths + 1  # EOS is a predicted token
        masks = step_masks(tgt_len, inputs.shape[1])
        state = self.dec.initial_state(premise.shape[0])
        total = None
        for t in range(inputs.shape[1]):
            x = self.emb(inputs[:, t])
            s, state = self.dec.step(x, state)
            c = self.fusion.retrieve(z, s)
            logits = self.dec_head(T.concat([s, c], axis=1))
            nll_t = T.cross_entropy_logits(logits, targets[:, t]) * Tensor(masks[t])
            total = nll_t if total is None else total + nll_t
        per_example = total * Tensor((1.0 / tgt_len).astype(T.default_dtype()))
        return per_example, T.reduce_mean(per_example)

    def token_accuracy(self, z: Tensor, premise: np.ndarray,
                       lengths: np.ndarray) -> float:
        """Teacher-forced greedy token accuracy (diagnostic, no grads)."""
        inputs, targets = _teacher_pairs(premise, lengths)
        tgt_len = lengths + 1
        masks = step_masks(tgt_len, inputs.shape[1])
        state = self.dec.initial_state(premise.shape[0])
        hit = tot = 0.0
        for t in range(inputs.shape[1]):
            x = self.emb(inputs[:, t])
            s, state = self.dec.step(x, state)
            c = self.fusion.retrieve(z, s)
            logits = self.dec_head(T.concat([s, c], axis=1))
            pred = np.argmax(logits.data, axis=1)
            m = masks[t].astype(bool)
            hit += float(np.sum((pred == targets[:, t]) & m))
            tot += float(np.sum(m))
        return hit / max(tot, 1.0)

    def decode_greedy(self, z: Tensor, max_len: Optional[int] = None) -> List[List[int]]:
        """Greedy argmax decoding from z; stops per row at EOS or max_len."""
        max_len = max_len or self.cfg.max_len
        batch = z.shape[0]
        state = self.dec.initial_state(batch)
        current = np.full(batch, D.BOS, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        rows: List[List[int]] = [[] for _ in range(batch)]
        for _ in range(max_len):
            s, state = self.dec.step(self.emb(current), state)
            c = self.fusion.retrieve(z, s)
            logits = self.dec_head(T.concat([s, c], axis=1))
            nxt = np.argmax(logits.data, axis=1)
            for b in range(batch):
                if not done[b]:
                    if nxt[b] == D.EOS:
                        done[b] = True
                    else:
                        rows[b].append(int(nxt[b]))
            if done.all():
                break
            current = np.where(done, D.EOS, nxt)
        return rows

    # -- classifier ------------------------------------------------------------
    def classify_logits(self, z: Tensor, hyp: np.ndarray,
                        lengths: np.ndarray) -> Tensor:
        masks = step_masks(lengths, hyp.shape[1])
        hs = self.enc.run(_embed_steps(self.emb, hyp), lengths)
        combined = []
        for h, m in zip(hs, masks):
            c = self.fusion.retrieve(z, h)
            feats = T.concat([h, c, T.abs_(h - c), h * c], axis=1)
            combined.append(T.rowscale(T.tanh(self.cls_combine(feats)), Tensor(m)))
        refined = self.cls_refine.run(combined, lengths)
        pooled = T.concat([_masked_max(refined, masks),
                           F.masked_mean(refined, masks, lengths)], axis=1)
        return self.cls_head2(T.tanh(self.cls_head1(pooled)))

    def classify(self, z: Tensor, hyp: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        return T.softmax(self.classify_logits(z, hyp, lengths), axis=1).data

    # -- discriminator -----------------------------------------------------------
    def discriminate_logit(self, z: Tensor, hyp: np.ndarray, lengths: np.ndarray,
                           labels: np.ndarray) -> Tensor:
        return self.disc.logit(z, hyp, lengths, labels)

    def discriminate(self, z: Tensor, hyp: np.ndarray, lengths: np.ndarray,
                     labels: np.ndarray) -> np.ndarray:
        logit = self.discriminate_logit(z, hyp, lengths, labels)
        return 1.0 / (1.0 + np.exp(-logit.data.reshape(-1)))

    # -- parameter groups -----------------------------------------------------
    def generator_named_params(self) -> Dict[str, Tensor]:
        out = {"emb.table": self.emb.table, "label_emb": self.label_emb}
        out.update({f"enc.{k}": v for k, v in self.enc.named_params().items()})
        out.update({f"compress.{k}": v for k, v in self.fusion.compress_params().items()})
        out.update({f"retrieve.{k}": v for k, v in self.fusion.retrieve_params().items()})
        for name, lin in (("prior.mlp1", self.prior_mlp1), ("prior.mlp2", self.prior_mlp2),
                          ("cls.combine", self.cls_combine), ("cls.head1", self.cls_head1),
                          ("cls.head2", self.cls_head2), ("dec_head", self.dec_head)):
            out.update({f"{name}.{k}": v for k, v in lin.named_params().items()})
        out.update({f"prior.refine.{k}": v for k, v in self.prior_refine.named_params().items()})
        out.update({f"cls.refine.{k}": v for k, v in self.cls_refine.named_params().items()})
        out.update({f"dec.{k}": v for k, v in self.dec.named_params().items()})
        return out

    def discriminator_named_params(self) -> Dict[str, Tensor]:
        return {f"disc.{k}": v for k, v in self.disc.named_params().items()}

    def named_params(self) -> Dict[str, Tensor]:
        out = self.generator_named_params()
        out.update(self.discriminator_named_params())
        return out

    def generator_params(self) -> List[Tensor]:
        return list(self.generator_named_params().values())

    def discriminator_params(self) -> List[Tensor]:
        return list(self.discriminator_named_params().values())


class BaselineBundle:
    """Deterministic encoder-decoder: z = MLP([compress(hypothesis), e_l])."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.dim
        self.emb = Embedding(cfg.vocab_size, d, rng)
        self.enc = BiLstmStack(d, d, rng, cfg.num_layers)
        self.fusion = F.make_fusion(cfg.fusion, d, cfg.n_candidates, rng)
        self.label_emb = T.parameter(None, rng, 0.08, (NUM_LABELS, d))
        self.mlp1 = Linear(2 * d, d, rng)
        self.mlp2 = Linear(d, d, rng)
        self.dec = UniLstmStack(d, d, rng, cfg.num_layers)
        self.dec_head = Linear(2 * d, cfg.vocab_size, rng)

    def latent(self, hyp: np.ndarray, lengths: np.ndarray,
               labels: np.ndarray) -> Tensor:
        masks = step_masks(lengths, hyp.shape[1])
        hs = self.enc.run(_embed_steps(self.emb, hyp), lengths)
        z_h = self.fusion.compress(hs, masks, lengths)
        e_l = T.gather_rows(self.label_emb, labels)
        return self.mlp2(T.tanh(self.mlp1(T.concat([z_h, e_l], axis=1))))

    def forward_nll(self, hyp: np.ndarray, hyp_len: np.ndarray, labels: np.ndarray,
                    premise: np.ndarray, prem_len: np.ndarray) -> Tuple[Tensor, Tensor]:
        z = self.latent(hyp, hyp_len, labels)
        inputs, targets = _teacher_pairs(premise, prem_len)
        tgt_len = prem_len + 1
        masks = step_masks(tgt_len, inputs.shape[1])
        state = self.dec.initial_state(premise.shape[0])
        total = None
        for t in range(inputs.shape[1]):
            s, state = self.dec.step(self.emb(inputs[:, t]), state)
            logits = self.dec_head(T.concat([s, z], axis=1))
            nll_t = T.cross_entropy_logits(logits, targets[:, t]) * Tensor(masks[t])
            total = nll_t if total is None else total + nll_t
        per_example = total * Tensor((1.0 / tgt_len).astype(T.default_dtype()))
        return per_example, T.reduce_mean(per_example)

    def decode_greedy(self, hyp: np.ndarray, lengths: np.ndarray,
                      labels: np.ndarray, max_len: Optional[int] = None) -> List[List[int]]:
        z = self.latent(hyp, lengths, labels)
        max_len = max_len or self.cfg.max_len
        batch = z.shape[0]
        state = self.dec.initial_state(batch)
        current = np.full(batch, D.BOS, dtype=np.int64)
        done = np.zeros(batch, dtype=bool)
        rows: List[List[int]] = [[] for _ in range(batch)]
        for _ in range(max_len):
            s, state = self.dec.step(self.emb(current), state)
            logits = self.dec_head(T.concat([s, z], axis=1))
            nxt = np.argmax(logits.data, axis=1)
            for b in range(batch):
                if not done[b]:
                    if nxt[b] == D.EOS:
                        done[b] = True
                    else:
                        rows[b].append(int(nxt[b]))
            if done.all():
                break
            current = np.where(done, D.EOS, nxt)
        return rows

    def named_params(self) -> Dict[str, Tensor]:
        out = {"emb.table": self.emb.table, "label_emb": self.label_emb}
        out.update({f"enc.{k}": v for k, v in self.enc.named_params().items()})
        out.update({f"compress.{k}": v for k, v in self.fusion.compress_params().items()})
        out.update({f"retrieve.{k}": v for k, v in self.fusion.retrieve_params().items()})
        for name, lin in (("mlp1", self.mlp1), ("mlp2", self.mlp2),
                          ("dec_head", self.dec_head)):
            out.update({f"{name}.{k}": v for k, v in lin.named_params().items()})
        out.update({f"dec.{k}": v for k, v in self.dec.named_params().items()})
        return out

    def generator_params(self) -> List[Tensor]:
        return list(self.named_params().values())


# -- checkpoint format ---------------------------------------------------------
# magic "CAAE", version u32, meta-JSON block, vocabulary block, named tensors
# (name, dtype tag, shape, little-endian payload).  Shared tensors appear once.

MAGIC = b"CAAE"
VERSION = 1
_DTYPE_TAGS = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(path, named: Dict[str, Tensor], vocab: D.Vocab,
                    meta: Optional[dict] = None,
                    extra_arrays: Optional[Dict[str, np.ndarray]] = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    vocab_bytes = "\n".join(vocab.id_to_token).encode("utf-8")
    arrays = {k: v.data for k, v in named.items()}
    if extra_arrays:
        arrays.update(extra_arrays)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(struct.pack("<I", len(vocab_bytes)))
        fh.write(vocab_bytes)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            nb = name.encode("utf-8")
            tag = arr.dtype.itemsize
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<BB", tag, arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())


def load_checkpoint(path) -> Tuple[Dict[str, np.ndarray], D.Vocab, dict]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a CAAE checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (n,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(n).decode("utf-8"))
        (n,) = struct.unpack("<I", fh.read(4))
        tokens = fh.read(n).decode("utf-8").split("\n")
        if tokens[:4] != D.RESERVED:
            raise ValueError(f"{path}: bad vocabulary block")
        vocab = D.Vocab(tokens[4:])
        (count,) = struct.unpack("<I", fh.read(4))
        arrays: Dict[str, np.ndarray] = {}
        for _ in range(count):
            (ln,) = struct.unpack("<H", fh.read(2))
            name = fh.read(ln).decode("utf-8")
            tag, ndim = struct.unpack("<BB", fh.read(2))
            shape = struct.unpack(f"<{ndim}I", fh.read(4 * ndim)) if ndim else ()
            dt = _DTYPE_TAGS[tag]
            size = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(fh.read(size * dt.itemsize),
                                         dtype=dt).reshape(shape).copy()
    return arrays, vocab, meta


def restore_into(named: Dict[str, Tensor], arrays: Dict[str, np.ndarray]) -> None:
    for name, t in named.items():
        if name not in arrays:
            raise ValueError(f"checkpoint missing tensor {name!r}")
        arr = arrays[name]
        if tuple(arr.shape) != tuple(t.shape):
            raise ValueError(f"tensor {name!r}: shape {arr.shape} != {t.shape}")
        t.data = arr.astype(T.default_dtype())


def bundle_from_checkpoint(path):
    """Rebuild a ModelBundle or BaselineBundle from a checkpoint file."""
    arrays, vocab, meta = load_checkpoint(path)
    cfg = ModelConfig(**meta["model"])
    if cfg.kind == "baseline":
        bundle = BaselineBundle(cfg)
    else:
        bundle = ModelBundle(cfg)
    restore_into(bundle.named_params(), arrays)
    return bundle, vocab, meta
