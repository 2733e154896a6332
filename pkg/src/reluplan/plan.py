"""Network plan: the skeleton parameters shared by accounting and skeleton."""

from __future__ import annotations

from dataclasses import dataclass

from .cellgraph import Genotype
from .errors import PlanError

STEMS = ("direct", "imagenet3")
BALANCING = ("relu", "flop")
IMAGENET_INPUT = 224
IMAGENET_CELL_RES = 28


@dataclass(frozen=True)
class NetworkPlan:
    """Input resolution after the stem, initial channels, cell count and reduce placement."""

    h0: int
    w0: int
    channels: int
    depth: int
    placement: tuple[int, int]
    stem: str = "direct"
    balancing: str = "relu"
    genotype: Genotype | None = None
    num_classes: int = 100

    def __post_init__(self):
        object.__setattr__(self, "placement", tuple(int(p) for p in self.placement))
        if self.channels < 1:
            raise PlanError("channels must be >= 1", channels=self.channels)
        if self.depth < 2:
            raise PlanError("depth must be >= 2", depth=self.depth)
        if self.h0 < 1 or self.w0 < 1:
            raise PlanError("spatial size must be positive", h0=self.h0, w0=self.w0)
        if self.h0 % 4 or self.w0 % 4:
            raise PlanError("spatial size must survive two halvings", h0=self.h0, w0=self.w0)
        if len(self.placement) != 2:
            raise PlanError("placement must name exactly two reduce cells", placement=self.placement)
        i, j = self.placement
        if not 0 <= i < j:
            raise PlanError("placement must be a sorted pair of distinct indices", placement=self.placement)
        if j >= self.depth:
            raise PlanError("placement index >= depth", placement=self.placement, depth=self.depth)
        if self.stem not in STEMS:
            raise PlanError(f"unknown stem {self.stem!r}", stem=self.stem)
        if self.balancing not in BALANCING:
            raise PlanError(f"unknown balancing {self.balancing!r}", balancing=self.balancing)
        if self.stem == "imagenet3":
            if (self.h0, self.w0) != (IMAGENET_CELL_RES, IMAGENET_CELL_RES):
                raise PlanError("imagenet3 stem yields 28x28 cell inputs", h0=self.h0, w0=self.w0)
            if self.channels % 2:
                raise PlanError("stem channel split: imagenet3 stem needs even channels",
                                channels=self.channels)

    @property
    def channel_factor(self) -> int:
        return 4 if self.balancing == "relu" else 2

    def segments(self) -> tuple[int, int, int]:
        """Normal-cell run lengths (M1, M2, M3) around the two reduce cells."""
        i, j = self.placement
        return i, j - i - 1, self.depth - j - 1

    def to_dict(self) -> dict:
        return {
            "h0": self.h0,
            "w0": self.w0,
            "channels": self.channels,
            "depth": self.depth,
            "placement": list(self.placement),
            "stem": self.stem,
            "balancing": self.balancing,
        }


def default_placement(depth: int) -> tuple[int, int]:
    """Conventional reduce positions at D/3 and 2D/3."""
    i, j = depth // 3, (2 * depth) // 3
    if i == j:
        j = min(i + 1, depth - 1)
        if i == j:
            i = j - 1
    return i, j
