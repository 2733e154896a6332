"""ReLU, FLOP and parameter ledgers for planned networks, plus the budget planner.

FLOPs are 2 x multiply-accumulates; BN, ReLU and pooling contribute none.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

from .cellgraph import CellDims, CellSpec, Genotype, OpKind, relu_sharing_pass, validate
from .errors import GenotypeError, PlanError
from .plan import NetworkPlan
from .skeleton import CellStage, PostStage, StemStage, build_skeleton

CSV_COLUMNS = ("cell_index", "H", "W", "C", "relus", "flops", "params")
DEFAULT_NODES = 7


@dataclass
class CellCost:
    index: int | str
    kind: str
    h: int
    w: int
    c: int
    relus: int = 0
    flops: int = 0
    params: int = 0


@dataclass
class CostLedger:
    relus: int = 0
    per_cell_relus: list[int] = field(default_factory=list)
    stem_relus: int = 0
    flops: int = 0
    params: int = 0
    # legacy maxpool comparisons, kept apart from ReLUs
    maxpool_units: int = 0
    rows: list[CellCost] = field(default_factory=list)

    def check(self):
        assert self.relus == self.stem_relus + sum(self.per_cell_relus)
        assert min([self.relus, self.stem_relus, self.flops, self.params, self.maxpool_units,
                    *self.per_cell_relus]) >= 0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rows"] = [asdict(r) for r in self.rows]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([r.index, r.h, r.w, r.c, r.relus, r.flops, r.params])
        return buf.getvalue()


def imagenet_stem_relus(channels: int) -> int:
    if channels % 2:
        raise PlanError("stem channel split: imagenet3 stem needs even channels", channels=channels)
    return 112 * 112 * (channels // 2) + 56 * 56 * channels


def _stem_relus(plan: NetworkPlan) -> int:
    return imagenet_stem_relus(plan.channels) if plan.stem == "imagenet3" else 0


def cell_dims(plan: NetworkPlan) -> list[tuple[str, int, int, int]]:
    """(kind, H, W, C) at the output of every cell, following the balancing policy."""
    h, w, c = plan.h0, plan.w0, plan.channels
    out = []
    for i in range(plan.depth):
        if i in plan.placement:
            h, w, c = h // 2, w // 2, c * plan.channel_factor
            out.append(("reduce", h, w, c))
        else:
            out.append(("normal", h, w, c))
    return out


def _finish(plan: NetworkPlan, stem_relus: int, rows: list[CellCost], maxpool_units=0) -> CostLedger:
    flops = flops_params_rows(plan)
    by_index = {r.index: r for r in flops}
    for r in rows:
        r.flops = by_index[r.index].flops
        r.params = by_index[r.index].params
    stem_row = CellCost("stem", "stem", plan.h0, plan.w0, plan.channels, stem_relus,
                        sum(r.flops for r in flops if r.kind == "stem"),
                        sum(r.params for r in flops if r.kind == "stem"))
    post = by_index["classifier"]
    ledger = CostLedger(
        relus=stem_relus + sum(r.relus for r in rows),
        per_cell_relus=[r.relus for r in rows],
        stem_relus=stem_relus,
        flops=sum(r.flops for r in flops),
        params=sum(r.params for r in flops),
        maxpool_units=maxpool_units,
        rows=[stem_row, *rows, post],
    )
    ledger.check()
    return ledger


def count_sphynx(plan: NetworkPlan) -> CostLedger:
    """ReLU-balanced ledger: every cell's post-processing ReLU sees H0*W0*C elements.

    Halving H and W while quadrupling C keeps H*W*C fixed, so the total is
    stem + H0*W0*C*D whatever the placement.
    """
    if plan.balancing != "relu":
        raise PlanError("count_sphynx requires relu balancing", balancing=plan.balancing)
    per_cell = plan.h0 * plan.w0 * plan.channels
    rows = [CellCost(i, kind, h, w, c, per_cell) for i, (kind, h, w, c) in enumerate(cell_dims(plan))]
    return _finish(plan, _stem_relus(plan), rows)


def count_flop_balanced(plan: NetworkPlan) -> CostLedger:
    """FLOP-balanced ledger: channels double at each reduce, so cost depends on placement."""
    if plan.balancing != "flop":
        raise PlanError("count_flop_balanced requires flop balancing", balancing=plan.balancing)
    rows = [CellCost(i, kind, h, w, c, h * w * c) for i, (kind, h, w, c) in enumerate(cell_dims(plan))]
    return _finish(plan, _stem_relus(plan), rows)


def count_plan(plan: NetworkPlan) -> CostLedger:
    return count_sphynx(plan) if plan.balancing == "relu" else count_flop_balanced(plan)


@dataclass(frozen=True)
class LegacyCellCount:
    conv_relus: int
    preprocess_relus: int
    maxpool_units: int
    saved_relus: int

    @property
    def relus(self) -> int:
        return self.conv_relus + self.preprocess_relus


def count_legacy_cell(cell: CellSpec, dims: CellDims, *, share_relus: bool = False) -> LegacyCellCount:
    """ReLU tally of one legacy (ReLU-Conv-BN) cell.

    Each conv edge applies a ReLU to its source node; the two ReLU-Conv1x1-BN
    preprocessing layers cost 2*4*H*W*C. With sharing, a node feeding several
    conv edges pays for its ReLU once.
    """
    saved = 0
    if share_relus:
        cell, saved = relu_sharing_pass(cell, dims)
    conv = 0
    seen = set()
    maxpool = 0
    for e in cell.edges:
        unit = dims.h * dims.w * dims.channels(e.src)
        if e.op.is_conv:
            if e.src in cell.shared_relu_nodes:
                if e.src in seen:
                    continue
                seen.add(e.src)
            conv += unit
        elif e.op is OpKind.MAXPOOL3X3:
            maxpool += unit
    return LegacyCellCount(conv, 2 * 4 * dims.h * dims.w * dims.c, maxpool, saved)


def count_legacy(plan: NetworkPlan, genotype: Genotype | None = None, *,
                 share_relus: bool = False) -> CostLedger:
    genotype = genotype or plan.genotype
    if genotype is None:
        raise PlanError("legacy counting needs a genotype")
    if genotype.space != "legacy":
        raise GenotypeError("space mismatch: legacy counting needs a legacy genotype",
                            space=genotype.space)
    report = validate(genotype)
    if not report.ok:
        raise GenotypeError("invalid legacy genotype",
                            violations=[v.to_dict() for v in report.violations])
    rows = []
    maxpool = 0
    for i, (kind, h, w, c) in enumerate(cell_dims(plan)):
        cell = genotype.reduce if kind == "reduce" else genotype.normal
        tally = count_legacy_cell(cell, CellDims(h, w, c), share_relus=share_relus)
        maxpool += tally.maxpool_units
        rows.append(CellCost(i, kind, h, w, c, tally.relus))
    return _finish(plan, _stem_relus(plan), rows, maxpool)


# -- FLOPs and parameters ----------------------------------------------------


def conv_cost(k: int, c_in: int, c_out: int, h: int, w: int, *, bn: bool = True) -> tuple[int, int]:
    """(FLOPs, params) of a k x k convolution producing an h x w map."""
    flops = 2 * k * k * c_in * c_out * h * w
    params = k * k * c_in * c_out + (2 * c_out if bn else 0)
    return flops, params


def _op_cost(op: OpKind, c: int, h: int, w: int) -> tuple[int, int]:
    if not op.is_conv:
        return 0, 0
    if op.is_separable:
        df, dp = 2 * op.kernel * op.kernel * c * h * w, op.kernel * op.kernel * c
        pf, pp = conv_cost(1, c, c, h, w)
        return df + pf, dp + pp
    return conv_cost(op.kernel, c, c, h, w)


def flops_params_rows(plan: NetworkPlan) -> list[CellCost]:
    """Per-stage FLOPs and parameters under a fixed cost model.

    Cell edges run at the cell's output resolution with C_out channels; an input
    whose shape differs from the cell's is adapted by a 1x1 Conv-BN; the
    post-processing 1x1 conv maps the concatenated intermediates back to C_out.
    Without a genotype only the structural convs are counted.
    """
    skel = build_skeleton(plan)
    n = plan.genotype.n if plan.genotype is not None else DEFAULT_NODES
    n_inter = n - 3
    rows = []
    for s in skel.stages:
        if isinstance(s, StemStage):
            f, p = conv_cost(3, s.c_in, s.c_out, s.h, s.w)
            rows.append(CellCost(s.name, "stem", s.h, s.w, s.c_out, s.relus, f, p))
        elif isinstance(s, CellStage):
            flops = params = 0
            for src in s.inputs:
                prev = skel.stages[src]
                if (prev.h, prev.w, prev.c_out) != (s.h, s.w, s.c_out):
                    f, p = conv_cost(1, prev.c_out, s.c_out, s.h, s.w)
                    flops, params = flops + f, params + p
            if plan.genotype is not None:
                cell = plan.genotype.reduce if s.kind == "reduce" else plan.genotype.normal
                for e in cell.edges:
                    f, p = _op_cost(e.op, s.c_out, s.h, s.w)
                    flops, params = flops + f, params + p
            f, p = conv_cost(1, n_inter * s.c_out, s.c_out, s.h, s.w)
            rows.append(CellCost(s.index, s.kind, s.h, s.w, s.c_out, s.relus,
                                 flops + f, params + p))
        elif isinstance(s, PostStage):
            f = 2 * s.c_in * s.num_classes
            p = s.c_in * s.num_classes + s.num_classes
            rows.append(CellCost("classifier", "classifier", 1, 1, s.num_classes, 0, f, p))
    return rows


def count_flops_params(plan: NetworkPlan) -> CostLedger:
    return count_plan(plan)


# -- generic chain networks --------------------------------------------------


def count_layered(spec: dict) -> CostLedger:
    """Ledger for a chain network described layer by layer.

    Each layer: {"name", "op": "conv"|"linear"|"pool", "k", "cin", "cout",
    "h_out", "w_out", "relu": bool}. A ReLU costs h_out*w_out*cout.
    """
    rows = []
    for i, layer in enumerate(spec["layers"]):
        op = layer["op"]
        h, w = layer.get("h_out", 1), layer.get("w_out", 1)
        cout = layer["cout"]
        if op == "conv":
            f, p = conv_cost(layer["k"], layer["cin"], cout, h, w, bn=layer.get("bn", True))
        elif op == "linear":
            f, p = 2 * layer["cin"] * cout, layer["cin"] * cout + cout
        elif op == "pool":
            f, p = 0, 0
        else:
            raise PlanError(f"unknown layer op {op!r}", layer=layer.get("name", i))
        relus = h * w * cout if layer.get("relu") else 0
        rows.append(CellCost(layer.get("name", i), op, h, w, cout, relus, f, p))
    ledger = CostLedger(
        relus=sum(r.relus for r in rows),
        per_cell_relus=[r.relus for r in rows],
        flops=sum(r.flops for r in rows),
        params=sum(r.params for r in rows),
        rows=rows,
    )
    ledger.check()
    return ledger


# -- budget planner ----------------------------------------------------------


def plan_budget(budget: int, h0: int, w0: int, c_range, d_range, tol_fraction: float):
    """Every (C, D) whose ReLU-balanced total H0*W0*C*D lies within tol of the budget.

    Sorted by absolute deviation, then by C. Ranges are inclusive (lo, hi) pairs.
    An empty result is a valid answer.
    """
    if budget <= 0:
        raise PlanError("budget must be positive", budget=budget)
    if tol_fraction < 0:
        raise PlanError("tolerance must be non-negative", tol=tol_fraction)
    c_lo, c_hi = c_range
    d_lo, d_hi = d_range
    if c_lo > c_hi or d_lo > d_hi:
        raise PlanError("empty channel or depth range", c_range=c_range, d_range=d_range)
    limit = tol_fraction * budget
    found = []
    for c in range(max(1, c_lo), c_hi + 1):
        for d in range(max(2, d_lo), d_hi + 1):
            relus = h0 * w0 * c * d
            if abs(relus - budget) <= limit:
                found.append((abs(relus - budget), c, d, relus))
    found.sort()
    return [(c, d, relus) for _, c, d, relus in found]


def plan_budget_csv(rows, budget: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["channels", "depth", "relus", "deviation"])
    for c, d, relus in rows:
        writer.writerow([c, d, relus, relus - budget])
    return buf.getvalue()
