"""Embedding tables and LSTM stacks.

Encoder/refiner networks are 2-layer bidirectional LSTMs whose per-step
forward/backward concatenation (width 2H) is projected back to H by a
trainable linear map, so everything downstream works with one width.
The decoder is a 2-layer unidirectional LSTM driven step by step.
"""

from __future__ import annotations

from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor

INIT_SCALE = 0.08


class Linear:
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        # Glorot-uniform keeps activations at a usable scale across the
        # MLP heads regardless of width; recurrent cells keep INIT_SCALE.
        bound = float(np.sqrt(6.0 / (d_in + d_out)))
        self.W = T.parameter(None, rng, bound, (d_in, d_out))
        self.b = Tensor(np.zeros(d_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.add_bias(T.matmul(x, self.W), self.b)

    def named_params(self) -> Dict[str, Tensor]:
        return {"W": self.W, "b": self.b}


class Embedding:
    """Trainable [V, d] lookup table; the PAD row stays zero and frozen."""

    def __init__(self, vocab_size: int, dim: int, rng: np.random.Generator,
                 pad_id: int = 0):
        self.pad_id = pad_id
        data = rng.uniform(-INIT_SCALE, INIT_SCALE, size=(vocab_size, dim))
        data[pad_id] = 0.0
        self.table = Tensor(data, requires_grad=True)

    def __call__(self, ids: np.ndarray) -> Tensor:
        return T.embedding_lookup(self.table, ids, frozen_rows=(self.pad_id,))

    def named_params(self) -> Dict[str, Tensor]:
        return {"table": self.table}


class LstmCell:
    """Standard LSTM cell; gate order i, f, g, o; forget bias starts at 1."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.Wx = T.parameter(None, rng, INIT_SCALE, (d_in, 4 * hidden))
        self.Wh = T.parameter(None, rng, INIT_SCALE, (hidden, 4 * hidden))
        b = np.zeros(4 * hidden)
        b[hidden: 2 * hidden] = 1.0
        self.b = Tensor(b, requires_grad=True)

    def step(self, x: Tensor, h: Tensor, c: Tensor) -> Tuple[Tensor, Tensor]:
        pre = T.add_bias(T.matmul(x, self.Wx) + T.matmul(h, self.Wh), self.b)
        H = self.hidden
        i = T.sigmoid(T.slice_cols(pre, 0, H))
        f = T.sigmoid(T.slice_cols(pre, H, 2 * H))
        g = T.tanh(T.slice_cols(pre, 2 * H, 3 * H))
        o = T.sigmoid(T.slice_cols(pre, 3 * H, 4 * H))
        c_new = f * c + i * g
        h_new = o * T.tanh(c_new)
        return h_new, c_new

    def named_params(self) -> Dict[str, Tensor]:
        return {"Wx": self.Wx, "Wh": self.Wh, "b": self.b}


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, cell: LstmCell):
    return cell.step(x, h_prev, c_prev)


def _zeros(batch: int, dim: int) -> Tensor:
    return Tensor(np.zeros((batch, dim)))


def step_masks(lengths: np.ndarray, width: int) -> List[np.ndarray]:
    """mask[t][b] = 1.0 while t is inside sequence b."""
    return [(lengths > t).astype(T.default_dtype()) for t in range(width)]


def reverse_time(xs: Sequence[Tensor], lengths: np.ndarray) -> List[Tensor]:
    """Reverse each row's first `length` steps; padding stays at the tail."""
    if len(xs) == 1:
        return list(xs)
    batch = xs[0].shape[0]
    width = len(xs)
    stacked = T.concat(xs, axis=0)  # [T*B, d], step-major
    out = []
    rows = np.arange(batch)
    for t in range(width):
        src = np.where(t < lengths, lengths - 1 - t, t)
        out.append(T.gather_rows(stacked, src * batch + rows))
    return out


def _run_cell(cell: LstmCell, xs: Sequence[Tensor], masks: Sequence[np.ndarray]) -> List[Tensor]:
    batch = xs[0].shape[0]
    h = _zeros(batch, cell.hidden)
    c = _zeros(batch, cell.hidden)
    outs = []
    for x, m in zip(xs, masks):
        h, c = cell.step(x, h, c)
        outs.append(T.rowscale(h, Tensor(m)))
    return outs


class BiLstmStack:
    """num_layers of (forward cell, backward cell, 2H->H projection)."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator,
                 num_layers: int = 2):
        self.hidden = hidden
        self.layers = []
        for layer in range(num_layers):
            din = d_in if layer == 0 else hidden
            self.layers.append({
                "fw": LstmCell(din, hidden, rng),
                "bw": LstmCell(din, hidden, rng),
                "proj": Linear(2 * hidden, hidden, rng),
            })

    def run(self, xs: Sequence[Tensor], lengths: np.ndarray) -> List[Tensor]:
        """Per-step hidden states, zero at PAD positions."""
        masks = step_masks(lengths, len(xs))
        for layer in self.layers:
            fw = _run_cell(layer["fw"], xs, masks)
            bw_rev = _run_cell(layer["bw"], reverse_time(xs, lengths), masks)
            bw = reverse_time(bw_rev, lengths)
            xs = [T.rowscale(layer["proj"](T.concat([f, b], axis=1)), Tensor(m))
                  for f, b, m in zip(fw, bw, masks)]
        return list(xs)

    def named_params(self) -> Dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for part in ("fw", "bw"):
                for k, v in layer[part].named_params().items():
                    out[f"l{i}.{part}.{k}"] = v
            for k, v in layer["proj"].named_params().items():
                out[f"l{i}.proj.{k}"] = v
        return out


class UniLstmStack:
    """Stacked unidirectional LSTM, driven one step at a time."""

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator,
                 num_layers: int = 2):
        self.hidden = hidden
        self.layers = [LstmCell(d_in if i == 0 else hidden, hidden, rng)
                       for i in range(num_layers)]

    def initial_state(self, batch: int) -> List[Tuple[Tensor, Tensor]]:
        return [(_zeros(batch, c.hidden), _zeros(batch, c.hidden)) for c in self.layers]

    def step(self, x: Tensor, state: List[Tuple[Tensor, Tensor]]):
        new_state = []
        for cell, (h, c) in zip(self.layers, state):
            h, c = cell.step(x, h, c)
            new_state.append((h, c))
            x = h
        return x, new_state

    def run(self, xs: Sequence[Tensor]) -> List[Tensor]:
        state = self.initial_state(xs[0].shape[0])
        outs = []
        for x in xs:
            out, state = self.step(x, state)
            outs.append(out)
        return outs

    def named_params(self) -> Dict[str, Tensor]:
        out = {}
        for i, cell in enumerate(self.layers):
            for k, v in cell.named_params().items():
                out[f"l{i}.{k}"] = v
        return out
