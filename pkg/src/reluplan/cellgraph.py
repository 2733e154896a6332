"""Cell DAG genotypes: representation, validation, legacy conversion, ReLU
sharing and DOT export.

Node indexing: 0 and 1 are the two cell inputs, 2..n-2 are intermediate nodes,
n-1 is the output node (implicit concatenation of all intermediates, no edges
stored for it).
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import NamedTuple

from .errors import GenotypeError


class OpKind(str, enum.Enum):
    CONV3X3 = "conv3x3"
    CONV5X5 = "conv5x5"
    DILCONV3X3 = "dilconv3x3"
    DILCONV5X5 = "dilconv5x5"
    AVGPOOL3X3 = "avgpool3x3"
    IDENTITY = "identity"
    ZERO = "zero"
    MAXPOOL3X3 = "maxpool3x3"
    SEPCONV3X3 = "sepconv3x3"
    SEPCONV5X5 = "sepconv5x5"
    SEPDILCONV3X3 = "sepdilconv3x3"
    SEPDILCONV5X5 = "sepdilconv5x5"

    def __str__(self):
        return self.value

    @property
    def is_conv(self) -> bool:
        return self in _KERNEL

    @property
    def is_separable(self) -> bool:
        return self.value.startswith("sep")

    @property
    def kernel(self) -> int:
        return _KERNEL.get(self, 0)


_KERNEL = {
    OpKind.CONV3X3: 3,
    OpKind.CONV5X5: 5,
    OpKind.DILCONV3X3: 3,
    OpKind.DILCONV5X5: 5,
    OpKind.SEPCONV3X3: 3,
    OpKind.SEPCONV5X5: 5,
    OpKind.SEPDILCONV3X3: 3,
    OpKind.SEPDILCONV5X5: 5,
}

SPHYNX_OPS = (
    OpKind.CONV3X3,
    OpKind.CONV5X5,
    OpKind.DILCONV3X3,
    OpKind.DILCONV5X5,
    OpKind.AVGPOOL3X3,
    OpKind.IDENTITY,
)

LEGACY_ONLY_OPS = frozenset(
    {
        OpKind.MAXPOOL3X3,
        OpKind.SEPCONV3X3,
        OpKind.SEPCONV5X5,
        OpKind.SEPDILCONV3X3,
        OpKind.SEPDILCONV5X5,
    }
)

_CONVERSION = {
    OpKind.SEPCONV3X3: OpKind.CONV3X3,
    OpKind.SEPCONV5X5: OpKind.CONV5X5,
    OpKind.SEPDILCONV3X3: OpKind.DILCONV3X3,
    OpKind.SEPDILCONV5X5: OpKind.DILCONV5X5,
    OpKind.MAXPOOL3X3: OpKind.AVGPOOL3X3,
}

SPACES = ("sphynx", "legacy")


class Edge(NamedTuple):
    src: int
    dst: int
    op: OpKind


@dataclass(frozen=True)
class CellSpec:
    n: int
    edges: tuple[Edge, ...]
    # nodes whose ReLU is computed once and shared by all outgoing conv edges
    shared_relu_nodes: frozenset[int] = field(default=frozenset(), compare=False)

    @classmethod
    def from_edges(cls, n, edges):
        return cls(int(n), tuple(Edge(int(s), int(d), OpKind(op)) for s, d, op in edges))

    @property
    def intermediate_nodes(self) -> range:
        return range(2, self.n - 1)

    def incoming(self, node: int) -> list[Edge]:
        return [e for e in self.edges if e.dst == node]

    def outgoing(self, node: int) -> list[Edge]:
        return [e for e in self.edges if e.src == node]

    def op_multiset(self) -> list[str]:
        return sorted(e.op.value for e in self.edges)

    def topology(self) -> set[tuple[int, int]]:
        return {(e.src, e.dst) for e in self.edges}


@dataclass(frozen=True)
class Genotype:
    normal: CellSpec
    reduce: CellSpec
    space: str = "sphynx"

    @property
    def n(self) -> int:
        return self.normal.n

    def cells(self):
        return (("normal", self.normal), ("reduce", self.reduce))


# -- serialization -----------------------------------------------------------


def genotype_to_dict(g: Genotype) -> dict:
    def cell(c):
        return [[e.op.value, e.src, e.dst] for e in c.edges]

    return {"n": g.n, "normal": cell(g.normal), "reduce": cell(g.reduce), "space": g.space}


def genotype_from_dict(d: dict) -> Genotype:
    try:
        n = int(d["n"])
        space = d.get("space", "sphynx")
        cells = {}
        for kind in ("normal", "reduce"):
            cells[kind] = CellSpec.from_edges(n, [(s, t, op) for op, s, t in d[kind]])
    except (KeyError, TypeError, ValueError) as exc:
        raise GenotypeError(f"unparseable genotype: {exc}") from exc
    if space not in SPACES:
        raise GenotypeError(f"unknown space tag {space!r}", space=space)
    return Genotype(cells["normal"], cells["reduce"], space)


def dumps(g: Genotype) -> str:
    """JSON with one edge per line."""
    d = genotype_to_dict(g)
    parts = [f'  "n": {d["n"]}']
    for kind in ("normal", "reduce"):
        rows = ",\n".join(f"    {json.dumps(e)}" for e in d[kind])
        parts.append(f'  "{kind}": [\n{rows}\n  ]' if rows else f'  "{kind}": []')
    parts.append(f'  "space": {json.dumps(d["space"])}')
    return "{\n" + ",\n".join(parts) + "\n}\n"


def loads(text: str) -> Genotype:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise GenotypeError(f"genotype is not valid JSON: {exc}") from exc
    return genotype_from_dict(data)


def load(path) -> Genotype:
    with open(path) as fh:
        return loads(fh.read())


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class Violation:
    cell: str
    rule: str
    message: str
    edge: Edge | None = None

    def to_dict(self):
        edge = None if self.edge is None else [self.edge.op.value, self.edge.src, self.edge.dst]
        return {"cell": self.cell, "rule": self.rule, "message": self.message, "edge": edge}


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[Violation, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def to_dict(self):
        return {"ok": self.ok, "violations": [v.to_dict() for v in self.violations]}


def _check_cell(name: str, cell: CellSpec, space: str) -> list[Violation]:
    out = []
    if cell.n < 4:
        out.append(Violation(name, "node count", f"cell needs at least 4 nodes, got {cell.n}"))
        return out
    for e in cell.edges:
        if e.src >= e.dst:
            out.append(Violation(name, "acyclicity", f"edge {e.src}->{e.dst} does not go forward", e))
        if e.src < 0:
            out.append(Violation(name, "edge source", f"source {e.src} is not a node", e))
        if not 2 <= e.dst <= cell.n - 2:
            out.append(
                Violation(name, "edge target", f"target {e.dst} is not an intermediate node", e)
            )
        if e.op is OpKind.ZERO:
            out.append(Violation(name, "zero op in final genotype", "zero op is search-only", e))
        elif space == "sphynx" and e.op in LEGACY_ONLY_OPS:
            out.append(
                Violation(name, "forbidden op in sphynx space", f"{e.op.value} is not allowed", e)
            )
    for node in cell.intermediate_nodes:
        k = len(cell.incoming(node))
        if k != 2:
            out.append(Violation(name, "in-degree", f"node {node} has {k} incoming edges, need 2"))
    return out


def validate(g: Genotype) -> ValidationReport:
    """Check a genotype against the rules of its claimed space.

    Violations are returned as data; this never raises for a parsed genotype.
    """
    out = []
    if g.space not in SPACES:
        out.append(Violation("genotype", "space tag", f"unknown space {g.space!r}"))
    if g.normal.n != g.reduce.n:
        out.append(
            Violation("genotype", "node count", f"normal has {g.normal.n} nodes, reduce {g.reduce.n}")
        )
    for name, cell in g.cells():
        out.extend(_check_cell(name, cell, g.space))
    return ValidationReport(tuple(out))


def _require_valid(g: Genotype):
    report = validate(g)
    if not report.ok:
        first = report.violations[0]
        raise GenotypeError(
            f"invalid genotype: {first.rule} ({first.message})",
            violations=[v.to_dict() for v in report.violations],
        )


# -- transformations ---------------------------------------------------------


def convert_legacy(g: Genotype) -> Genotype:
    """Rewrite a legacy-space genotype into the ReLU-free cell space.

    Separable convs become vanilla convs of the same kernel/dilation, max pooling
    becomes average pooling. Dropping the ReLU of ReLU-Conv-BN and adding the
    cell-end nonlinearity are implied by the ``sphynx`` tag; topology is kept.
    Already-converted genotypes are returned unchanged.
    """
    _require_valid(g)
    if g.space == "sphynx":
        return g

    def conv(cell):
        return CellSpec(cell.n, tuple(Edge(e.src, e.dst, _CONVERSION.get(e.op, e.op)) for e in cell.edges))

    return Genotype(conv(g.normal), conv(g.reduce), "sphynx")


@dataclass(frozen=True)
class CellDims:
    h: int
    w: int
    c: int
    node_channels: dict | None = None

    def channels(self, node: int) -> int:
        if self.node_channels and node in self.node_channels:
            return self.node_channels[node]
        return self.c


def relu_sharing_pass(cell: CellSpec, dims: CellDims) -> tuple[CellSpec, int]:
    """Share one pre-computed ReLU among all conv modules reading the same node.

    Returns the annotated cell and the number of ReLUs saved:
    sum over nodes of (fan-out - 1) * H * W * C_node for nodes with conv fan-out >= 2.
    """
    shared = set()
    saved = 0
    for node in range(cell.n - 1):
        k = sum(1 for e in cell.outgoing(node) if e.op.is_conv)
        if k >= 2:
            shared.add(node)
            saved += (k - 1) * dims.h * dims.w * dims.channels(node)
    return CellSpec(cell.n, cell.edges, frozenset(shared)), saved


# -- DOT export --------------------------------------------------------------


def cell_to_dot(cell: CellSpec, name: str = "cell", *, standalone: bool = True) -> str:
    lines = []
    indent = "  " if standalone else "    "
    if standalone:
        lines.append(f"digraph {name} {{")
        lines.append("  rankdir=LR;")
    for node in range(cell.n):
        lines.append(f'{indent}{name}_N{node} [label="N{node}"];')
    for e in sorted(cell.edges, key=lambda e: (e.dst, e.src, e.op.value)):
        lines.append(f'{indent}{name}_N{e.src} -> {name}_N{e.dst} [label="{e.op.value}"];')
    for node in cell.intermediate_nodes:
        lines.append(f"{indent}{name}_N{node} -> {name}_N{cell.n - 1} [style=dashed];")
    if standalone:
        lines.append("}")
    return "\n".join(lines) + "\n"


def to_dot(g: Genotype) -> str:
    _require_valid(g)
    lines = ["digraph genotype {", "  rankdir=LR;"]
    for name, cell in g.cells():
        lines.append(f"  subgraph cluster_{name} {{")
        lines.append(f'    label="{name}";')
        lines.append(cell_to_dot(cell, name, standalone=False).rstrip("\n"))
        lines.append("  }")
    lines.append("}")
    return "\n".join(lines) + "\n"
