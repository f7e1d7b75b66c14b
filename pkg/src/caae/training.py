"""Two-phase adversarial training with the min-over-N auxiliary loss.

Each iteration flips a seeded coin: the generative phase updates the
autoencoder, prior, and classifier (reconstruction + classification +
non-saturating confusion + auxiliary loss); the discriminative phase
updates only the discriminator's binary cross-entropy.  Gradients are
clipped to a global norm of 1.0 in both phases.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import data as D
from . import tensor as T
from .model import BaselineBundle, ModelBundle, save_checkpoint
from .tensor import Adam, Tensor, clip_global_norm, global_norm


class NumericError(RuntimeError):
    """Raised when a training loss goes non-finite; carries the components."""

    def __init__(self, phase: str, losses: Dict[str, float]):
        self.phase = phase
        self.losses = losses
        super().__init__(f"non-finite loss in {phase} phase: {losses}")


@dataclass
class TrainConfig:
    lr: float = 0.001
    beta1: float = 0.0
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    epochs: int = 30
    phase_prob: float = 0.5
    aux_n: int = 1
    w_rec: float = 1.0
    w_cls: float = 1.0
    w_adv: float = 1.0
    w_aux: float = 1.0
    batch_size: int = 32
    seed: int = 0
    max_len: int = 30
    lr_decay: float = 1.0
    lr_decay_epoch: int = 0
    log_wall_time: bool = True

    def __post_init__(self):
        if not (0.0 <= self.phase_prob <= 1.0):
            raise ValueError("phase_prob must be in [0, 1]")
        if self.aux_n < 1:
            raise ValueError("aux_n must be >= 1")
        for w in (self.w_rec, self.w_cls, self.w_adv, self.w_aux):
            if w < 0:
                raise ValueError("loss weights must be >= 0")
        if self.lr_decay <= 0:
            raise ValueError("lr_decay must be > 0")


@dataclass
class PhaseOutcome:
    phase: str
    losses: Dict[str, float]
    grad_norm: float


def make_optimizers(bundle: ModelBundle, cfg: TrainConfig):
    kw = dict(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    return (Adam(bundle.generator_params(), **kw),
            Adam(bundle.discriminator_params(), **kw))


def auxiliary_loss(bundle: ModelBundle, batch: D.Batch, n: int,
                   rng: np.random.Generator) -> Tensor:
    """min over N prior-sampled reconstruction NLLs, per example, then the
    batch mean.  Gradient flows only through each row's argmin sample
    (ties resolve to the lowest sample index)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    best = None
    for _ in range(n):
        eps = bundle.draw_eps(batch.size, rng)
        z = bundle.prior_sample(batch.hypothesis, batch.hypothesis_len,
                                batch.label, eps)
        per_ex, _ = bundle.decode_nll(z, batch.premise, batch.premise_len)
        best = per_ex if best is None else T.minimum(best, per_ex)
    return T.reduce_mean(best)


def _check_finite(phase: str, losses: Dict[str, float]) -> None:
    if not all(math.isfinite(v) for v in losses.values()):
        raise NumericError(phase, losses)


def generative_step(bundle: ModelBundle, batch: D.Batch, cfg: TrainConfig,
                    opt_gen: Adam, rng: np.random.Generator) -> PhaseOutcome:
    opt_gen.zero_grad()
    for p in bundle.discriminator_params():
        p.grad = None

    z_enc = bundle.encode_premise(batch.premise, batch.premise_len)
    _, rec = bundle.decode_nll(z_enc, batch.premise, batch.premise_len)
    losses = {"reconstruction": rec.item()}
    total = cfg.w_rec * rec

    cls_real = cls_prior = None
    if cfg.w_cls > 0:
        logits_real = bundle.classify_logits(z_enc, batch.hypothesis,
                                             batch.hypothesis_len)
        cls_real = T.reduce_mean(T.cross_entropy_logits(logits_real, batch.label))
        z_p = bundle.prior_sample(batch.hypothesis, batch.hypothesis_len,
                                  batch.label, bundle.draw_eps(batch.size, rng))
        logits_prior = bundle.classify_logits(z_p, batch.hypothesis,
                                              batch.hypothesis_len)
        cls_prior = T.reduce_mean(T.cross_entropy_logits(logits_prior, batch.label))
        losses["classification_real"] = cls_real.item()
        losses["classification_prior"] = cls_prior.item()
        total = total + cfg.w_cls * (cls_real + cls_prior)

    if cfg.w_adv > 0:
        # Non-saturating confusion: the discriminator labels prior z as 1 and
        # encoder z as 0; the generator drives it toward the opposite.
        d_enc = bundle.discriminate_logit(z_enc, batch.hypothesis,
                                          batch.hypothesis_len, batch.label)
        z_p2 = bundle.prior_sample(batch.hypothesis, batch.hypothesis_len,
                                   batch.label, bundle.draw_eps(batch.size, rng))
        d_prior = bundle.discriminate_logit(z_p2, batch.hypothesis,
                                            batch.hypothesis_len, batch.label)
        adv = T.reduce_mean(T.bce_with_logits(d_enc, np.ones(d_enc.shape))) + \
            T.reduce_mean(T.bce_with_logits(d_prior, np.zeros(d_prior.shape)))
        losses["adversarial_generator"] = adv.item()
        total = total + cfg.w_adv * adv

    if cfg.w_aux > 0:
        aux = auxiliary_loss(bundle, batch, cfg.aux_n, rng)
        losses["auxiliary"] = aux.item()
        total = total + cfg.w_aux * aux

    losses["total"] = total.item()
    _check_finite("generative", losses)

    total.backward()
    gen_params = bundle.generator_params()
    norm = global_norm(gen_params)
    clip_global_norm(gen_params, cfg.clip_norm)
    opt_gen.step()
    opt_gen.zero_grad()
    for p in bundle.discriminator_params():
        p.grad = None  # reached through the confusion term; never applied
    return PhaseOutcome("generative", losses, norm)


def discriminative_step(bundle: ModelBundle, batch: D.Batch, cfg: TrainConfig,
                        opt_disc: Adam, rng: np.random.Generator) -> PhaseOutcome:
    opt_disc.zero_grad()
    # Generator-side forward passes are detached: this phase trains only the
    # discriminator to tell prior z (label 1) from encoder z (label 0).
    z_enc = bundle.encode_premise(batch.premise, batch.premise_len).detach()
    z_prior = bundle.prior_sample(batch.hypothesis, batch.hypothesis_len,
                                  batch.label,
                                  bundle.draw_eps(batch.size, rng)).detach()
    d_prior = bundle.discriminate_logit(z_prior, batch.hypothesis,
                                        batch.hypothesis_len, batch.label)
    d_enc = bundle.discriminate_logit(z_enc, batch.hypothesis,
                                      batch.hypothesis_len, batch.label)
    loss = T.reduce_mean(T.bce_with_logits(d_prior, np.ones(d_prior.shape))) + \
        T.reduce_mean(T.bce_with_logits(d_enc, np.zeros(d_enc.shape)))
    losses = {"discriminator": loss.item(), "total": loss.item()}
    _check_finite("discriminative", losses)

    loss.backward()
    disc_params = bundle.discriminator_params()
    norm = global_norm(disc_params)
    clip_global_norm(disc_params, cfg.clip_norm)
    opt_disc.step()
    opt_disc.zero_grad()
    return PhaseOutcome("discriminative", losses, norm)


def _optimizer_arrays(prefix: str, opt: Adam, names: Sequence[str]) -> Dict[str, np.ndarray]:
    out = {}
    for name, m, v in zip(names, opt.m, opt.v):
        out[f"opt.{prefix}.m.{name}"] = m
        out[f"opt.{prefix}.v.{name}"] = v
    return out


def _restore_optimizer(prefix: str, opt: Adam, names: Sequence[str],
                       arrays: Dict[str, np.ndarray], t: int) -> None:
    opt.t = t
    for i, name in enumerate(names):
        opt.m[i] = arrays[f"opt.{prefix}.m.{name}"].astype(T.default_dtype()).copy()
        opt.v[i] = arrays[f"opt.{prefix}.v.{name}"].astype(T.default_dtype()).copy()


def train_loop(bundle: ModelBundle, examples: Sequence[D.SnliExample],
               vocab: D.Vocab, cfg: TrainConfig,
               out_dir: Optional[Path] = None,
               start_epoch: int = 0,
               resume_arrays: Optional[Dict[str, np.ndarray]] = None,
               resume_meta: Optional[dict] = None) -> List[dict]:
    """Seeded coin-flip alternation between the two phases.

    Writes metrics.jsonl (one JSON object per iteration) and a checkpoint
    per epoch when out_dir is given; returns the metric records."""
    rng = np.random.default_rng(cfg.seed)
    opt_gen, opt_disc = make_optimizers(bundle, cfg)
    gen_names = list(bundle.generator_named_params().keys())
    disc_names = list(bundle.discriminator_named_params().keys())
    if resume_arrays is not None:
        _restore_optimizer("gen", opt_gen, gen_names, resume_arrays,
                           (resume_meta or {}).get("opt_t_gen", 0))
        _restore_optimizer("disc", opt_disc, disc_names, resume_arrays,
                           (resume_meta or {}).get("opt_t_disc", 0))

    metrics: List[dict] = []
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        mode = "a" if start_epoch > 0 else "w"
        metrics_fh = open(out_dir / "metrics.jsonl", mode, encoding="utf-8")
    iteration = 0
    try:
        for epoch in range(start_epoch, cfg.epochs):
            factor = cfg.lr_decay if epoch >= cfg.lr_decay_epoch else 1.0
            opt_gen.lr = cfg.lr * factor
            opt_disc.lr = cfg.lr * factor
            batches = D.make_batches(examples, vocab, cfg.batch_size,
                                     seed=cfg.seed + epoch, max_len=cfg.max_len)
            for batch in batches:
                t0 = time.perf_counter()
                generative = rng.random() < cfg.phase_prob
                if generative:
                    outcome = generative_step(bundle, batch, cfg, opt_gen, rng)
                else:
                    outcome = discriminative_step(bundle, batch, cfg, opt_disc, rng)
                record = {
                    "iteration": iteration,
                    "epoch": epoch,
                    "phase": outcome.phase,
                    "losses": outcome.losses,
                    "grad_norm": outcome.grad_norm,
                }
                if cfg.log_wall_time:
                    record["wall_time"] = time.perf_counter() - t0
                metrics.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                    metrics_fh.flush()
                iteration += 1
            if out_dir is not None:
                meta = {
                    "model": asdict(bundle.cfg),
                    "train": asdict(cfg),
                    "epoch": epoch,
                    "opt_t_gen": opt_gen.t,
                    "opt_t_disc": opt_disc.t,
                }
                extras = _optimizer_arrays("gen", opt_gen, gen_names)
                extras.update(_optimizer_arrays("disc", opt_disc, disc_names))
                save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch:03d}.ckpt",
                                bundle.named_params(), vocab, meta, extras)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return metrics


def train_baseline(bundle: BaselineBundle, examples: Sequence[D.SnliExample],
                   vocab: D.Vocab, cfg: TrainConfig,
                   out_dir: Optional[Path] = None) -> List[dict]:
    """Plain teacher-forced NLL training for the baseline encoder-decoder."""
    opt = Adam(bundle.generator_params(), lr=cfg.lr, beta1=cfg.beta1,
               beta2=cfg.beta2, eps=cfg.eps)
    metrics: List[dict] = []
    metrics_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        metrics_fh = open(out_dir / "metrics.jsonl", "w", encoding="utf-8")
    iteration = 0
    try:
        for epoch in range(cfg.epochs):
            batches = D.make_batches(examples, vocab, cfg.batch_size,
                                     seed=cfg.seed + epoch, max_len=cfg.max_len)
            for batch in batches:
                t0 = time.perf_counter()
                opt.zero_grad()
                _, loss = bundle.forward_nll(batch.hypothesis, batch.hypothesis_len,
                                             batch.label, batch.premise,
                                             batch.premise_len)
                losses = {"reconstruction": loss.item(), "total": loss.item()}
                _check_finite("baseline", losses)
                loss.backward()
                params = bundle.generator_params()
                norm = global_norm(params)
                clip_global_norm(params, cfg.clip_norm)
                opt.step()
                opt.zero_grad()
                record = {"iteration": iteration, "epoch": epoch,
                          "phase": "baseline", "losses": losses, "grad_norm": norm}
                if cfg.log_wall_time:
                    record["wall_time"] = time.perf_counter() - t0
                metrics.append(record)
                if metrics_fh is not None:
                    metrics_fh.write(json.dumps(record, sort_keys=True) + "\n")
                    metrics_fh.flush()
                iteration += 1
            if out_dir is not None:
                meta = {"model": asdict(bundle.cfg), "train": asdict(cfg),
                        "epoch": epoch}
                save_checkpoint(out_dir / "checkpoints" / f"epoch_{epoch:03d}.ckpt",
                                bundle.named_params(), vocab, meta)
    finally:
        if metrics_fh is not None:
            metrics_fh.close()
    return metrics


def train_probe(bundle: ModelBundle, examples: Sequence[D.SnliExample],
                vocab: D.Vocab, cfg: TrainConfig) -> List[float]:
    """Train encoder + classifier on real triplets only (the probe).

    Returns per-epoch training accuracies."""
    params = bundle.generator_params()
    opt = Adam(params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    accs: List[float] = []
    for epoch in range(cfg.epochs):
        batches = D.make_batches(examples, vocab, cfg.batch_size,
                                 seed=cfg.seed + epoch, max_len=cfg.max_len)
        hit = tot = 0
        for batch in batches:
            opt.zero_grad()
            z = bundle.encode_premise(batch.premise, batch.premise_len)
            logits = bundle.classify_logits(z, batch.hypothesis, batch.hypothesis_len)
            loss = T.reduce_mean(T.cross_entropy_logits(logits, batch.label))
            _check_finite("probe", {"classification": loss.item()})
            loss.backward()
            clip_global_norm(params, cfg.clip_norm)
            opt.step()
            opt.zero_grad()
            hit += int(np.sum(np.argmax(logits.data, axis=1) == batch.label))
            tot += batch.size
        accs.append(hit / tot)
    return accs
