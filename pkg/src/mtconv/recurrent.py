"""Recurrent cells (RNN, LSTM, peephole LSTM, GRU) and a two-layer runner.

Every gate has its own weight over the concatenation ``[h, x]`` with shape
``(hidden, hidden + input)`` and its own bias.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import ops
from .ops import DimensionError
from .tensor import ParamScope, ParamStore, Tensor

CELL_GATES = {
    "rnn": ("h",),
    "gru": ("z", "r", "h"),
    "lstm": ("i", "f", "o", "g"),
    "lstm_peephole": ("i", "f", "o", "g"),
}
PEEPHOLES = ("i", "f", "o")


@dataclass
class CellParams:
    kind: str
    hidden: int
    input: int
    weights: dict[str, Tensor]
    biases: dict[str, Tensor]
    peepholes: dict[str, Tensor] | None = None

    def __post_init__(self):
        if self.kind not in CELL_GATES:
            raise ValueError(f"unknown cell kind {self.kind!r}; expected one of {sorted(CELL_GATES)}")
        for gate in CELL_GATES[self.kind]:
            w, b = self.weights[gate], self.biases[gate]
            if w.shape != (self.hidden, self.hidden + self.input) or b.shape != (self.hidden,):
                raise DimensionError(f"{self.kind} gate {gate}: weight {w.shape}, bias {b.shape} "
                                     f"inconsistent with hidden={self.hidden}, input={self.input}")
        if self.kind == "lstm_peephole":
            if self.peepholes is None:
                raise ValueError("lstm_peephole needs peephole vectors")
            for gate in PEEPHOLES:
                if self.peepholes[gate].shape != (self.hidden,):
                    raise DimensionError(f"peephole {gate} must have length {self.hidden}")

    def tensors(self) -> list[Tensor]:
        out = [self.weights[g] for g in CELL_GATES[self.kind]] + [self.biases[g] for g in CELL_GATES[self.kind]]
        if self.peepholes:
            out += [self.peepholes[g] for g in PEEPHOLES]
        return out

    @classmethod
    def from_scope(cls, scope: ParamScope, kind: str, hidden: int, input: int) -> "CellParams":
        gates = CELL_GATES[kind]
        peep = {g: scope[f"peep_{g}"] for g in PEEPHOLES} if kind == "lstm_peephole" else None
        return cls(kind, hidden, input, {g: scope[f"w_{g}"] for g in gates}, {g: scope[f"b_{g}"] for g in gates}, peep)


def init_cell(scope: ParamScope, kind: str, hidden: int, input: int, rng: np.random.Generator) -> CellParams:
    """Register gate parameters under ``scope``, uniform in +-1/sqrt(hidden + input)."""
    if kind not in CELL_GATES:
        raise ValueError(f"unknown cell kind {kind!r}; expected one of {sorted(CELL_GATES)}")
    bound = 1.0 / np.sqrt(hidden + input)
    for g in CELL_GATES[kind]:
        scope.add(f"w_{g}", rng.uniform(-bound, bound, size=(hidden, hidden + input)))
    for g in CELL_GATES[kind]:
        scope.add(f"b_{g}", rng.uniform(-bound, bound, size=hidden))
    if kind == "lstm_peephole":
        for g in PEEPHOLES:
            scope.add(f"peep_{g}", rng.uniform(-bound, bound, size=hidden))
    return CellParams.from_scope(scope, kind, hidden, input)


def cell_param_count(kind: str, hidden: int, input: int) -> int:
    gates = len(CELL_GATES[kind])
    n = gates * (hidden * (hidden + input) + hidden)
    return n + (len(PEEPHOLES) * hidden if kind == "lstm_peephole" else 0)


@dataclass
class CellState:
    hidden: Tensor
    cell: Tensor | None = None

    @classmethod
    def zeros(cls, kind: str, hidden: int, batch: int | None = None) -> "CellState":
        shape = (hidden,) if batch is None else (batch, hidden)
        cell = Tensor(np.zeros(shape)) if kind.startswith("lstm") else None
        return cls(Tensor(np.zeros(shape)), cell)


def _gate(params: CellParams, gate: str, hx: Tensor) -> Tensor:
    return ops.linear(hx, params.weights[gate], params.biases[gate])


def cell_step(kind: str, x: Tensor, state: CellState, params: CellParams) -> CellState:
    """Advance one time step. ``x`` is ``(input,)`` or batched ``(N, input)``."""
    if kind != params.kind:
        raise ValueError(f"cell kind {kind!r} does not match parameters of kind {params.kind!r}")
    single = x.ndim == 1
    h = state.hidden
    if single:
        x = ops.reshape(x, (1, -1))
        h = ops.reshape(h, (1, -1))
    if x.shape[1] != params.input:
        raise DimensionError(f"{kind} cell: input size {x.shape[1]} != declared {params.input}")
    if h.shape[1] != params.hidden:
        raise DimensionError(f"{kind} cell: state size {h.shape[1]} != declared {params.hidden}")
    hx = ops.concat([h, x], axis=1)
    c_new = None

    if kind == "rnn":
        h_new = ops.tanh(_gate(params, "h", hx))
    elif kind == "gru":
        z = ops.sigmoid(_gate(params, "z", hx))
        r = ops.sigmoid(_gate(params, "r", hx))
        cand = ops.tanh(_gate(params, "h", ops.concat([r * h, x], axis=1)))
        h_new = z * h + (1.0 - z) * cand
    else:
        c = state.cell
        if c is None:
            raise ValueError(f"{kind} cell needs a cell state")
        if single:
            c = ops.reshape(c, (1, -1))
        pre_i, pre_f, pre_o = (_gate(params, g, hx) for g in ("i", "f", "o"))
        if kind == "lstm_peephole":
            p = params.peepholes
            pre_i = pre_i + p["i"] * c
            pre_f = pre_f + p["f"] * c
        i = ops.sigmoid(pre_i)
        f = ops.sigmoid(pre_f)
        g = ops.tanh(_gate(params, "g", hx))
        c_new = f * c + i * g
        if kind == "lstm_peephole":
            pre_o = pre_o + params.peepholes["o"] * c_new
        h_new = ops.sigmoid(pre_o) * ops.tanh(c_new)

    if single:
        h_new = ops.reshape(h_new, (-1,))
        c_new = None if c_new is None else ops.reshape(c_new, (-1,))
    return CellState(h_new, c_new)


def run_dual_layer(kind: str, seq: Tensor, params: tuple[CellParams, CellParams]) -> Tensor:
    """Run two stacked cells over a ``C x T`` (or ``N x C x T``) sequence.

    Both layers start from zero state; layer 1's hidden output at step t is
    layer 2's input. The layer-2 hidden states are returned stacked as
    ``hidden2 x T``.
    """
    first, second = params
    if first.hidden != second.input:
        raise DimensionError(f"layer-1 hidden {first.hidden} != layer-2 input {second.input}")
    single = seq.ndim == 2
    if single:
        seq = ops.reshape(seq, (1, *seq.shape))
    n, c, t = seq.shape
    if c != first.input:
        raise DimensionError(f"sequence has {c} features, layer 1 expects {first.input}")
    s1 = CellState.zeros(kind, first.hidden, n)
    s2 = CellState.zeros(kind, second.hidden, n)
    outs = []
    for step in range(t):
        x = seq[:, :, step]
        s1 = cell_step(kind, x, s1, first)
        s2 = cell_step(kind, s1.hidden, s2, second)
        outs.append(s2.hidden)
    out = ops.stack(outs, axis=2)
    return ops.reshape(out, out.shape[1:]) if single else out
