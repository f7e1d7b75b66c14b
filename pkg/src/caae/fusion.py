"""Compression and retrieval of latent sentence vectors.

Two mechanisms: mean pooling (retrieve returns z unchanged) and the
memory-operation-selection layer, where a control vector picks a convex
combination of candidate weight matrices that is then applied to a value
vector.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

ACTIVATIONS = {
    "identity": lambda x: x,
    "tanh": T.tanh,
    "sigmoid": T.sigmoid,
    "relu": T.relu,
}


def masked_mean(parts: Sequence[Tensor], masks: Sequence[np.ndarray],
                lengths: np.ndarray) -> Tensor:
    """Mean of per-step [B, d] tensors over unmasked steps, per row."""
    if np.any(lengths < 1):
        raise ValueError("masked_mean: a row has no unmasked steps")
    total = None
    for p, m in zip(parts, masks):
        term = T.rowscale(p, Tensor(m))
        total = term if total is None else total + term
    inv = Tensor((1.0 / lengths).astype(T.default_dtype()))
    return T.rowscale(total, inv)


class MosmLayer:
    """o = act((sum_i softmax(k @ Omega)_i W_i) v)."""

    def __init__(self, d_value: int, d_out: int, d_key: int,
                 n_candidates: int, activation: str,
                 rng: np.random.Generator):
        if n_candidates < 1:
            raise ValueError("need at least one candidate matrix")
        self.n_candidates = n_candidates
        self.activation = activation
        # Scaled so the value path has roughly unit gain: keeps compressed
        # vectors away from tanh saturation at any width.
        scale = float(np.sqrt(3.0 / d_value))
        self.omega = T.parameter(None, rng, float(np.sqrt(3.0 / d_key)),
                                 (d_key, n_candidates))
        self.candidates = [T.parameter(None, rng, scale, (d_value, d_out))
                           for _ in range(n_candidates)]

    def apply(self, v: Tensor, k: Tensor) -> Tensor:
        if v.shape[1] != self.candidates[0].shape[0]:
            raise T.ShapeError(
                f"mosm: value width {v.shape[1]} != {self.candidates[0].shape[0]}")
        if k.shape[1] != self.omega.shape[0]:
            raise T.ShapeError(
                f"mosm: key width {k.shape[1]} != {self.omega.shape[0]}")
        gamma = T.softmax(T.matmul(k, self.omega), axis=1)  # [B, N_W]
        out = None
        for i, W in enumerate(self.candidates):
            term = T.rowscale(T.matmul(v, W), T.slice_cols(gamma, i, i + 1))
            out = term if out is None else out + term
        return ACTIVATIONS[self.activation](out)

    def named_params(self) -> Dict[str, Tensor]:
        out = {"omega": self.omega}
        for i, W in enumerate(self.candidates):
            out[f"W{i}"] = W
        return out


def mosm_apply(layer: MosmLayer, v: Tensor, k: Tensor) -> Tensor:
    return layer.apply(v, k)


class MeanFusion:
    """Parameter-free compression/retrieval: masked mean, identity retrieve."""

    kind = "mean"

    def compress(self, hs: Sequence[Tensor], masks: Sequence[np.ndarray],
                 lengths: np.ndarray) -> Tensor:
        return masked_mean(hs, masks, lengths)

    def retrieve(self, z: Tensor, s_t: Tensor) -> Tensor:
        return z

    def compress_params(self) -> Dict[str, Tensor]:
        return {}

    def retrieve_params(self) -> Dict[str, Tensor]:
        return {}


class MosmFusion:
    """Separate layers for compression (identity inner activation, outer
    tanh) and retrieval (tanh), over the same width d."""

    kind = "mosm"

    def __init__(self, dim: int, n_candidates: int, rng: np.random.Generator,
                 compress_activation: str = "identity",
                 retrieve_activation: str = "tanh"):
        self.compress_layer = MosmLayer(dim, dim, dim, n_candidates,
                                        compress_activation, rng)
        self.retrieve_layer = MosmLayer(dim, dim, dim, n_candidates,
                                        retrieve_activation, rng)

    def compress(self, hs: Sequence[Tensor], masks: Sequence[np.ndarray],
                 lengths: np.ndarray) -> Tensor:
        parts = [self.compress_layer.apply(h, h) for h in hs]
        return T.tanh(masked_mean(parts, masks, lengths))

    def retrieve(self, z: Tensor, s_t: Tensor) -> Tensor:
        return self.retrieve_layer.apply(z, s_t)

    def compress_params(self) -> Dict[str, Tensor]:
        return {f"compress.{k}": v for k, v in self.compress_layer.named_params().items()}

    def retrieve_params(self) -> Dict[str, Tensor]:
        return {f"retrieve.{k}": v for k, v in self.retrieve_layer.named_params().items()}


def make_fusion(kind: str, dim: int, n_candidates: int,
                rng: np.random.Generator):
    if kind == "mean":
        return MeanFusion()
    if kind == "mosm":
        return MosmFusion(dim, n_candidates, rng)
    raise ValueError(f"unknown fusion kind {kind!r}; expected mean or mosm")


def mean_compress(hs, masks, lengths) -> Tensor:
    return MeanFusion().compress(hs, masks, lengths)


def mean_retrieve(z: Tensor, s_t: Optional[Tensor] = None) -> Tensor:
    return z


def mosm_compress(layer: MosmLayer, hs, masks, lengths) -> Tensor:
    parts = [layer.apply(h, h) for h in hs]
    return T.tanh(masked_mean(parts, masks, lengths))


def mosm_retrieve(layer: MosmLayer, z: Tensor, s_t: Tensor) -> Tensor:
    return layer.apply(z, s_t)
