"""Finite-difference gradient verification.

Central differences at f64 are the independent oracle against which every
analytic backward rule is checked, per operation and end to end.  The
registry at the bottom is what the grad-check command runs: one entry per
differentiable operation plus each network's end-to-end loss.
"""

from __future__ import annotations

from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T


class GradCheckFailure(AssertionError):
    pass


def _coord_numeric(build_loss: Callable[[], T.Tensor], param: T.Tensor,
                   i: int, h: float) -> float:
    flat = param.data.reshape(-1)
    orig = flat[i]
    flat[i] = orig + h
    f_plus = float(build_loss().data)
    flat[i] = orig - h
    f_minus = float(build_loss().data)
    flat[i] = orig
    return (f_plus - f_minus) / (2.0 * h)


def numeric_grad(build_loss: Callable[[], T.Tensor], param: T.Tensor,
                 h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of build_loss() w.r.t. one parameter."""
    g = np.zeros(param.data.size, dtype=np.float64)
    for i in range(g.size):
        g[i] = _coord_numeric(build_loss, param, i, h)
    return g.reshape(param.data.shape)


def check_gradients(build_loss: Callable[[], T.Tensor],
                    params: Sequence[T.Tensor],
                    rel_tol: float = 1e-4,
                    h: float = 1e-5,
                    name: str = "loss",
                    max_coords_per_param: Optional[int] = None,
                    rng: Optional[np.random.Generator] = None) -> float:
    """Compare analytic and numeric gradients; raises GradCheckFailure.

    For large parameters, max_coords_per_param limits the finite-difference
    probes to a random coordinate subset.  Returns the worst relative error.
    Run at f64 for the stated tolerance to be meaningful.
    """
    for p in params:
        p.grad = None
    loss = build_loss()
    loss.backward()
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    for p in params:
        p.grad = None
    if rng is None:
        rng = np.random.default_rng(0)
    worst = 0.0
    for j, p in enumerate(params):
        size = p.data.size
        if max_coords_per_param is not None and size > max_coords_per_param:
            coords = rng.choice(size, size=max_coords_per_param, replace=False)
        else:
            coords = range(size)
        a_flat = analytic[j].reshape(-1)
        for i in coords:
            n = _coord_numeric(build_loss, p, int(i), h)
            a = float(a_flat[int(i)])
            rel = abs(a - n) / max(abs(a), abs(n), 1.0)
            if rel > rel_tol:
                # The probe may straddle a non-smooth point (max pooling,
                # abs): re-probe with a smaller step.  A genuine backward
                # bug shows a *stable* central difference that still
                # disagrees; an unstable difference means the loss is not
                # locally smooth at this coordinate, so skip it.
                n2 = _coord_numeric(build_loss, p, int(i), h / 10.0)
                stable = abs(n - n2) <= 1e-3 * max(abs(n), abs(n2), 1.0)
                rel = abs(a - n2) / max(abs(a), abs(n2), 1.0)
                if rel > rel_tol and stable:
                    raise GradCheckFailure(
                        f"{name}: param {j} entry {int(i)}: analytic={a:.8g} "
                        f"numeric={n2:.8g} rel={rel:.3g} > {rel_tol:g}")
                if rel > rel_tol:
                    continue
            worst = max(worst, rel)
    return worst


# -- registered checks -------------------------------------------------------

def _rand(rng, *shape):
    return T.Tensor(rng.uniform(-2.0, 2.0, size=shape), requires_grad=True)


def _op_checks(rng: np.random.Generator) -> List[Tuple[str, Callable[[], None]]]:
    checks: List[Tuple[str, Callable[[], None]]] = []

    def register(name: str, make):
        def run():
            build, params = make()
            check_gradients(build, params, name=name, rng=rng)
        checks.append((name, run))

    a = _rand(rng, 3, 4)
    b = _rand(rng, 3, 4)
    m1 = _rand(rng, 3, 4)
    m2 = _rand(rng, 4, 5)
    register("matmul", lambda: (lambda: T.reduce_sum(T.matmul(m1, m2) * T.Tensor(
        np.linspace(0.5, 1.5, 15).reshape(3, 5))), [m1, m2]))
    register("add", lambda: (lambda: T.reduce_sum((a + b) * (a + b)), [a, b]))
    register("sub", lambda: (lambda: T.reduce_sum((a - b) * a), [a, b]))
    register("mul", lambda: (lambda: T.reduce_sum(a * b), [a, b]))
    register("tanh", lambda: (lambda: T.reduce_sum(T.tanh(a)), [a]))
    register("sigmoid", lambda: (lambda: T.reduce_sum(T.sigmoid(a)), [a]))
    # keep abs/relu probes away from the kink at zero
    c = T.Tensor(np.where(np.abs(a.data) < 0.2, 0.5, a.data), requires_grad=True)
    register("abs", lambda: (lambda: T.reduce_sum(T.abs_(c)), [c]))
    register("relu", lambda: (lambda: T.reduce_sum(T.relu(c) * c), [c]))
    register("softmax", lambda: (lambda: T.reduce_sum(T.softmax(a, axis=1) * T.Tensor(
        np.linspace(0.0, 1.0, 12).reshape(3, 4))), [a]))
    register("reduce_sum", lambda: (lambda: T.reduce_sum(T.reduce_sum(a, axis=1) *
                                                         T.Tensor([1.0, 2.0, 3.0])), [a]))
    register("reduce_mean", lambda: (lambda: T.reduce_sum(T.reduce_mean(a, axis=0) *
                                                          T.Tensor([1.0, 2.0, 3.0, 0.5])), [a]))
    register("reduce_max", lambda: (lambda: T.reduce_sum(T.reduce_max(a, axis=1) *
                                                         T.Tensor([1.0, -2.0, 3.0])), [a]))
    register("concat", lambda: (lambda: T.reduce_sum(T.concat([a, b], axis=1) *
                                                     T.Tensor(np.linspace(-1, 1, 24).reshape(3, 8))),
                                [a, b]))
    bias = _rand(rng, 4)
    w_ab = T.Tensor(a.data.copy())
    register("add_bias", lambda: (lambda: T.reduce_sum(T.add_bias(a, bias) * w_ab),
                                  [a, bias]))
    col = _rand(rng, 3)
    register("rowscale", lambda: (lambda: T.reduce_sum(T.rowscale(a, col)), [a, col]))
    register("slice_cols", lambda: (lambda: T.reduce_sum(T.slice_cols(a, 1, 3) *
                                                         T.slice_cols(b, 1, 3)), [a, b]))
    register("gather_rows", lambda: (lambda: T.reduce_sum(
        T.gather_rows(a, np.array([2, 0, 2, 1])) *
        T.Tensor(np.linspace(0.2, 1.0, 16).reshape(4, 4))), [a]))
    emb = _rand(rng, 6, 4)
    register("embedding_lookup", lambda: (lambda: T.reduce_sum(
        T.embedding_lookup(emb, np.array([1, 5, 3, 1]), frozen_rows=(0,)) *
        T.Tensor(np.linspace(-1.0, 1.0, 16).reshape(4, 4))), [emb]))
    logits = _rand(rng, 3, 5)
    register("cross_entropy_logits", lambda: (lambda: T.reduce_sum(
        T.cross_entropy_logits(logits, np.array([0, 4, 2])) *
        T.Tensor([1.0, 0.5, 2.0])), [logits]))
    bl = _rand(rng, 3, 1)
    register("bce_with_logits", lambda: (lambda: T.reduce_sum(
        T.bce_with_logits(bl, np.array([[1.0], [0.0], [1.0]]))), [bl]))
    w_min = T.Tensor(a.data.copy())
    w_max = T.Tensor(b.data.copy())
    register("minimum", lambda: (lambda: T.reduce_sum(T.minimum(a, b) * w_min),
                                 [a, b]))
    register("maximum", lambda: (lambda: T.reduce_sum(T.maximum(a, b) * w_max),
                                 [a, b]))
    register("exp", lambda: (lambda: T.reduce_sum(T.exp(a * 0.3)), [a]))
    register("log", lambda: (lambda: T.reduce_sum(T.log(T.abs_(a) + 0.5)), [a]))
    return checks


def _network_checks(rng: np.random.Generator,
                    max_coords: int = 3) -> List[Tuple[str, Callable[[], None]]]:
    from . import data as D
    from .model import BaselineBundle, ModelBundle, ModelConfig
    from .seqnet import LstmCell
    from .training import TrainConfig, auxiliary_loss

    cfg = ModelConfig(vocab_size=10, dim=8, fusion="mosm", n_candidates=2,
                      max_len=6)
    bundle = ModelBundle(cfg, seed=7)
    premise = np.array([[4, 5, 6], [7, 8, 0]], dtype=np.int64)
    prem_len = np.array([3, 2])
    hyp = np.array([[5, 9, 0], [6, 4, 8]], dtype=np.int64)
    hyp_len = np.array([2, 3])
    labels = np.array([0, 2], dtype=np.int64)
    batch = D.Batch(premise=premise, hypothesis=hyp, premise_len=prem_len,
                    hypothesis_len=hyp_len, label=labels)
    gen_params = bundle.generator_params()
    checks: List[Tuple[str, Callable[[], None]]] = []

    def register(name: str, build, params):
        def run():
            check_gradients(build, params, name=name,
                            max_coords_per_param=max_coords, rng=rng)
        checks.append((name, run))

    cell = LstmCell(3, 3, np.random.default_rng(11))
    x = _rand(rng, 2, 3)
    h0 = _rand(rng, 2, 3)
    c0 = _rand(rng, 2, 3)

    def lstm_loss():
        h, c = cell.step(x, h0, c0)
        return T.reduce_sum(h) + T.reduce_sum(c * c)

    register("lstm_step", lstm_loss,
             [x, h0, c0, cell.Wx, cell.Wh, cell.b])

    register("bilstm_encoder",
             lambda: T.reduce_sum(bundle.encode_premise(premise, prem_len)),
             [bundle.emb.table] + list(bundle.enc.named_params().values()))

    mos = bundle.fusion.retrieve_layer
    v = _rand(rng, 2, 8)
    k = _rand(rng, 2, 8)
    register("mosm_apply",
             lambda: T.reduce_sum(mos.apply(v, k)),
             [v, k, mos.omega] + mos.candidates)

    def ae_loss():
        z = bundle.encode_premise(premise, prem_len)
        _, mean = bundle.decode_nll(z, premise, prem_len)
        return mean

    register("autoencoder_nll", ae_loss, gen_params)

    def cls_loss():
        z = bundle.encode_premise(premise, prem_len)
        logits = bundle.classify_logits(z, hyp, hyp_len)
        return T.reduce_mean(T.cross_entropy_logits(logits, labels))

    register("classifier_ce", cls_loss, gen_params)

    eps = np.random.default_rng(3).standard_normal((2, 8))

    def disc_loss():
        z = bundle.prior_sample(hyp, hyp_len, labels, eps)
        logit = bundle.discriminate_logit(z, hyp, hyp_len, labels)
        return T.reduce_mean(T.bce_with_logits(logit, np.ones(logit.shape)))

    register("discriminator_bce", disc_loss,
             gen_params + bundle.discriminator_params())

    def aux_loss():
        # stubbed sampling: a fixed-seed rng makes the N prior draws
        # identical across finite-difference probes
        return auxiliary_loss(bundle, batch, 2, np.random.default_rng(5))

    register("auxiliary_loss", aux_loss, gen_params)

    base = BaselineBundle(ModelConfig(vocab_size=10, dim=3, fusion="mean",
                                      kind="baseline"), seed=9)

    def baseline_loss():
        _, mean = base.forward_nll(hyp, hyp_len, labels, premise, prem_len)
        return mean

    register("baseline_nll", baseline_loss, base.generator_params())
    return checks


def registered_checks(seed: int = 0) -> List[Tuple[str, Callable[[], None]]]:
    """All finite-difference checks: every differentiable op plus each
    network's end-to-end loss.  Must run under f64 (use tensor.using_dtype)."""
    rng = np.random.default_rng(seed)
    return _op_checks(rng) + _network_checks(rng)


def run_all(seed: int = 0, report=print) -> bool:
    ok = True
    with T.using_dtype(np.float64):
        for name, run in registered_checks(seed):
            try:
                run()
                report(f"PASS {name}")
            except GradCheckFailure as e:
                ok = False
                report(f"FAIL {name}: {e}")
    return ok
