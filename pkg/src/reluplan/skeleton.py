"""Concrete network skeletons: stems, cell stacking and reduce placements."""

from __future__ import annotations

import itertools
from dataclasses import asdict, dataclass

from .errors import PlanError
from .plan import IMAGENET_INPUT, NetworkPlan


@dataclass(frozen=True)
class StemStage:
    name: str
    kind: str  # "conv-bn" or "relu-conv-bn"
    h_in: int
    w_in: int
    c_in: int
    h: int
    w: int
    c_out: int
    stride: int
    relus: int


@dataclass(frozen=True)
class CellStage:
    kind: str  # "normal" or "reduce"
    index: int
    h_in: int
    w_in: int
    c_in: int
    h: int
    w: int
    c_out: int
    inputs: tuple[int, int]  # stage indices feeding the two cell inputs
    relus: int  # post-processing Conv1x1-BN-ReLU on the output tensor


@dataclass(frozen=True)
class PostStage:
    h_in: int
    w_in: int
    c_in: int
    num_classes: int
    kind: str = "gap-linear"
    relus: int = 0


@dataclass(frozen=True)
class Skeleton:
    stages: tuple

    @property
    def stems(self):
        return [s for s in self.stages if isinstance(s, StemStage)]

    @property
    def cells(self) -> list[CellStage]:
        return [s for s in self.stages if isinstance(s, CellStage)]

    @property
    def relus(self) -> int:
        return sum(s.relus for s in self.stages)

    def segments(self) -> tuple[int, int, int]:
        runs, current = [], 0
        for cell in self.cells:
            if cell.kind == "reduce":
                runs.append(current)
                current = 0
            else:
                current += 1
        runs.append(current)
        return tuple(runs)

    def to_dict(self) -> dict:
        records = []
        for s in self.stages:
            rec = {"stage": type(s).__name__.removesuffix("Stage").lower()}
            rec.update(asdict(s))
            if "inputs" in rec:
                rec["inputs"] = list(rec["inputs"])
            records.append(rec)
        return {"segments": list(self.segments()), "relus": self.relus, "stages": records}


def enumerate_placements(depth: int, *, restrict_last: bool = False) -> list[tuple[int, int]]:
    """All reduce-cell index pairs (i, j), 0 <= i < j <= depth-1, lexicographic.

    ``restrict_last`` drops pairs using the final cell, giving C(depth-1, 2) candidates.
    """
    if depth < 2:
        raise PlanError("depth must be >= 2 to place two reduce cells", depth=depth)
    upper = depth - 1 if restrict_last else depth
    return list(itertools.combinations(range(upper), 2))


def imagenet_stem(channels: int) -> list[StemStage]:
    if channels % 2:
        raise PlanError("stem channel split: imagenet stem needs even channels", channels=channels)
    half = channels // 2
    r1, r2, r3 = IMAGENET_INPUT // 2, IMAGENET_INPUT // 4, IMAGENET_INPUT // 8
    return [
        StemStage("stem1", "conv-bn", IMAGENET_INPUT, IMAGENET_INPUT, 3, r1, r1, half, 2, 0),
        StemStage("stem2", "relu-conv-bn", r1, r1, half, r2, r2, channels, 2, r1 * r1 * half),
        StemStage("stem3", "relu-conv-bn", r2, r2, channels, r3, r3, channels, 2, r2 * r2 * channels),
    ]


def direct_stem(h0: int, w0: int, channels: int) -> list[StemStage]:
    return [StemStage("stem", "conv-bn", h0, w0, 3, h0, w0, channels, 1, 0)]


def build_skeleton(plan: NetworkPlan) -> Skeleton:
    if plan.stem == "imagenet3":
        stages: list = imagenet_stem(plan.channels)
    else:
        stages = direct_stem(plan.h0, plan.w0, plan.channels)
    reduces = set(plan.placement)
    if max(reduces) >= plan.depth:
        raise PlanError("placement index >= depth", placement=plan.placement, depth=plan.depth)

    last = stages[-1]
    h, w, c = last.h, last.w, last.c_out
    first_cell = len(stages)
    for i in range(plan.depth):
        pos = len(stages)
        # cell 0 reads the stem twice, cell 1 reads (stem, cell 0)
        inputs = (max(pos - 2, first_cell - 1), pos - 1)
        h_in, w_in, c_in = h, w, c
        if i in reduces:
            kind = "reduce"
            h, w, c = h // 2, w // 2, c * plan.channel_factor
        else:
            kind = "normal"
        stages.append(CellStage(kind, i, h_in, w_in, c_in, h, w, c, inputs, h * w * c))
    stages.append(PostStage(h, w, c, plan.num_classes))
    return Skeleton(tuple(stages))
