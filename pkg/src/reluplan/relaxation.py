"""Continuous relaxation of a cell: softmax-weighted mixed edges, first-order
bilevel updates of the mixing logits, and discretization back to a genotype.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Protocol, Sequence

import numpy as np

from . import gradcore as gc
from .cellgraph import SPHYNX_OPS, CellSpec, Edge, Genotype, LEGACY_ONLY_OPS, OpKind
from .errors import GenotypeError, ReluPlanError, ShapeError

DEFAULT_OPS = (OpKind.ZERO, *SPHYNX_OPS)


def _edges(n: int):
    """Every (src, dst) pair with dst an intermediate node and src < dst."""
    return [(i, j) for j in range(2, n - 1) for i in range(j)]


@dataclass
class RelaxationState:
    n: int
    op_set: tuple[OpKind, ...]
    normal: dict[tuple[int, int], np.ndarray]
    reduce: dict[tuple[int, int], np.ndarray]

    def __post_init__(self):
        self.op_set = tuple(OpKind(o) for o in self.op_set)
        if len(self.op_set) < 2:
            raise ReluPlanError("op set needs at least two operations")
        if len(set(self.op_set)) != len(self.op_set):
            raise ReluPlanError("op set has duplicates")
        if all(o is OpKind.ZERO for o in self.op_set):
            raise ReluPlanError("op set has no non-zero operation")
        for name in ("normal", "reduce"):
            cell = getattr(self, name)
            for key, row in cell.items():
                row = np.asarray(row, dtype=np.float64)
                if row.shape != (len(self.op_set),):
                    raise ShapeError(f"{name} edge {key} has {row.shape} logits, need {len(self.op_set)}")
                if not np.all(np.isfinite(row)):
                    raise ReluPlanError(f"{name} edge {key} has non-finite logits")
                cell[key] = row

    @classmethod
    def init(cls, n: int, op_set: Sequence = DEFAULT_OPS, rng: np.random.Generator | None = None,
             scale: float = 1e-3) -> "RelaxationState":
        k = len(op_set)

        def cell():
            if rng is None:
                return {e: np.zeros(k) for e in _edges(n)}
            return {e: scale * rng.standard_normal(k) for e in _edges(n)}

        return cls(n, tuple(op_set), cell(), cell())

    @property
    def space(self) -> str:
        return "legacy" if any(o in LEGACY_ONLY_OPS for o in self.op_set) else "sphynx"

    def copy(self) -> "RelaxationState":
        return RelaxationState(self.n, self.op_set,
                               {k: v.copy() for k, v in self.normal.items()},
                               {k: v.copy() for k, v in self.reduce.items()})

    def to_dict(self) -> dict:
        def cell(c):
            return {f"{i}-{j}": c[(i, j)].tolist() for i, j in sorted(c)}

        return {"n": self.n, "ops": [o.value for o in self.op_set],
                "normal": cell(self.normal), "reduce": cell(self.reduce)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RelaxationState":
        try:
            def cell(c):
                out = {}
                for key, row in c.items():
                    i, j = (int(x) for x in key.split("-"))
                    out[(i, j)] = np.asarray(row, dtype=np.float64)
                return out

            return cls(int(d["n"]), tuple(OpKind(o) for o in d["ops"]),
                       cell(d["normal"]), cell(d["reduce"]))
        except (KeyError, ValueError, AttributeError, TypeError) as exc:
            raise ReluPlanError(f"unparseable relaxation state: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "RelaxationState":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ReluPlanError(f"relaxation state is not valid JSON: {exc}") from exc


def mixed_op(theta_edge, op_outputs: Sequence) -> gc.Tensor:
    """sum_o softmax(theta_edge)_o * op_outputs[o], differentiable in both arguments."""
    theta = gc.as_tensor(theta_edge)
    if theta.value.ndim != 1 or len(op_outputs) != theta.shape[0]:
        raise ShapeError(f"{len(op_outputs)} op outputs for {theta.shape} logits")
    outs = [gc.as_tensor(o) for o in op_outputs]
    if len({o.shape for o in outs}) != 1:
        raise ShapeError("op outputs have different shapes")
    weights = gc.softmax(theta)
    total = None
    for idx, out in enumerate(outs):
        term = gc.mul(gc.pick(weights, idx), out)
        total = term if total is None else gc.add(total, term)
    return total


def edge_strength(theta_edge: np.ndarray, op_set: Sequence[OpKind]) -> tuple[float, int]:
    """Best non-zero op weight with zero excluded from the normalizer, and that op's index.

    Ties resolve to the lowest op index.
    """
    theta_edge = np.asarray(theta_edge, dtype=np.float64)
    live = np.array([o is not OpKind.ZERO for o in op_set])
    z = theta_edge[live]
    weights = np.exp(z - z.max())
    weights /= weights.sum()
    best_live = int(np.argmax(weights))
    return float(weights[best_live]), int(np.flatnonzero(live)[best_live])


def discretize_cell(theta: dict, n: int, op_set: Sequence[OpKind]) -> CellSpec:
    edges = []
    for j in range(2, n - 1):
        candidates = []
        for i in range(j):
            if (i, j) in theta:
                strength, op_idx = edge_strength(theta[(i, j)], op_set)
                candidates.append((-strength, i, op_idx))
        if len(candidates) < 2:
            raise GenotypeError(f"node {j} has {len(candidates)} incoming edges, need >= 2", node=j)
        candidates.sort()
        for _, i, op_idx in candidates[:2]:
            edges.append(Edge(i, j, op_set[op_idx]))
    return CellSpec(n, tuple(sorted(edges, key=lambda e: (e.dst, e.src))))


def discretize(state: RelaxationState) -> Genotype:
    """Keep the two strongest incoming edges per intermediate node, each with its best non-zero op."""
    return Genotype(discretize_cell(state.normal, state.n, state.op_set),
                    discretize_cell(state.reduce, state.n, state.op_set),
                    state.space)


# -- bilevel updates -------------------------------------------------------------


class Surrogate(Protocol):
    """A model whose forward pass goes through mixed_op with the state's logits."""

    params: list[gc.Tensor]

    def loss(self, theta: dict[str, dict], batch) -> gc.Tensor: ...


def _theta_tensors(state: RelaxationState, requires_grad: bool):
    make = gc.parameter if requires_grad else gc.Tensor
    return {
        "normal": {k: make(v) for k, v in state.normal.items()},
        "reduce": {k: make(v) for k, v in state.reduce.items()},
    }


def _check(loss: gc.Tensor, phase: str):
    if not np.isfinite(loss.value).all():
        raise ReluPlanError(f"non-finite {phase} loss", phase=phase)


def bilevel_step(state: RelaxationState, surrogate: Surrogate, batches, *,
                 w_lr: float = 0.05, theta_lr: float = 0.1) -> RelaxationState:
    """One first-order alternating update: weights on the train batch, logits on the validation batch.

    Both updates are plain gradient steps. Returns a new state; the surrogate's
    weights are updated in place.
    """
    train_batch, val_batch = batches
    frozen = _theta_tensors(state, requires_grad=False)
    for p in surrogate.params:
        p.grad = None
    loss = surrogate.loss(frozen, train_batch)
    _check(loss, "train")
    loss.backward()
    for p in surrogate.params:
        if p.grad is not None:
            p.value = p.value - w_lr * p.grad

    theta = _theta_tensors(state, requires_grad=True)
    detached = [gc.Tensor(p.value) for p in surrogate.params]
    saved = surrogate.params
    surrogate.params = detached
    try:
        val = surrogate.loss(theta, val_batch)
    finally:
        surrogate.params = saved
    _check(val, "validation")
    val.backward()
    new = state.copy()
    for cell in ("normal", "reduce"):
        target = getattr(new, cell)
        for key, t in theta[cell].items():
            if t.grad is not None:
                target[key] = target[key] - theta_lr * t.grad
    return new


class ScalarOpSurrogate:
    """Toy regression through one mixed edge: pred = mixed(theta, [x, 2x, 0]) + bias.

    The ops are scalar multipliers. With target ``slope * x + offset`` the unique
    optimum is all mass on the multiplier equal to ``slope`` and bias = offset.
    """

    multipliers = (1.0, 2.0, 0.0)
    op_set = (OpKind.IDENTITY, OpKind.CONV3X3, OpKind.ZERO)  # tags only; the maths uses multipliers
    edge = (0, 2)

    def __init__(self, slope=2.0, offset=0.0, bias=0.0):
        self.slope = slope
        self.offset = offset
        self.params = [gc.parameter(np.array([bias]))]

    def state(self, rng=None) -> RelaxationState:
        state = RelaxationState.init(4, self.op_set, rng)
        for cell in (state.normal, state.reduce):
            for key in list(cell):
                if key != self.edge:
                    cell[key] = np.zeros(len(self.op_set))
        return state

    def batch(self, rng, size=32):
        x = rng.uniform(-2, 2, size)
        return x, self.slope * x + self.offset

    def predict(self, theta, x):
        outs = [m * x for m in self.multipliers]
        return gc.add(mixed_op(theta["normal"][self.edge], outs), self.params[0])

    def loss(self, theta, batch):
        x, y = batch
        return gc.mse(self.predict(theta, x), gc.Tensor(y))


def edge_weights(state: RelaxationState, cell: str = "normal") -> dict:
    """softmax over all ops per edge (zero included), for reporting."""
    out = {}
    for key, row in getattr(state, cell).items():
        e = np.exp(row - row.max())
        out[key] = e / e.sum()
    return out
