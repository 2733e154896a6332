"""Gumbel-sampled bilevel search over reduce-cell placements, and the
exhaustive grid search it is validated against.

An evaluator owns K candidate networks ("branches"). The search alternates a
weight step on the sampled branch (train minibatch) with a logit step on the
placement distribution (validation minibatch), one sampled branch per batch.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Protocol

import numpy as np

from . import gradcore as gc
from .accounting import count_flop_balanced
from .errors import ReluPlanError, SearchAborted
from .plan import NetworkPlan
from .skeleton import enumerate_placements


@dataclass(frozen=True)
class SearchConfig:
    epochs: int = 600
    batch_size: int = 64
    steps_per_epoch: int | None = None  # None: ask the evaluator
    tau_start: float = 1000.0
    tau_end: float = 0.1
    w_lr: float = 0.025
    w_lr_min: float = 0.001
    w_momentum: float = 0.9
    w_weight_decay: float = 3e-4
    grad_clip: float = 5.0
    beta_lr: float = 3e-4
    beta_weight_decay: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ReluPlanError("epochs must be >= 1", epochs=self.epochs)
        if self.batch_size < 1:
            raise ReluPlanError("batch_size must be >= 1", batch_size=self.batch_size)
        if not self.tau_start >= self.tau_end > 0:
            raise ReluPlanError("need tau_start >= tau_end > 0",
                                tau_start=self.tau_start, tau_end=self.tau_end)

    def tau(self, epoch: int) -> float:
        return gc.linear_tau(epoch, self.epochs, self.tau_start, self.tau_end)

    def w_lr_at(self, epoch: int) -> float:
        # cosine annealing from w_lr to w_lr_min
        if self.epochs <= 1:
            return self.w_lr
        frac = epoch / (self.epochs - 1)
        return self.w_lr_min + 0.5 * (self.w_lr - self.w_lr_min) * (1 + math.cos(math.pi * frac))

    @classmethod
    def from_dict(cls, d: dict) -> "SearchConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ReluPlanError(f"unknown search config keys: {sorted(unknown)}")
        return cls(**d)


class Evaluator(Protocol):
    """What the search needs from a family of candidate networks."""

    branch_count: int
    steps_per_epoch: int

    def init_params(self, branch: int, rng: np.random.Generator) -> list[gc.Tensor]: ...

    def sample_train(self, rng: np.random.Generator, batch_size: int): ...

    def sample_val(self, rng: np.random.Generator, batch_size: int): ...

    def loss(self, branch: int, params: list[gc.Tensor], batch) -> gc.Tensor: ...

    def val_loss(self, branch: int, params: list[gc.Tensor]) -> float: ...


# -- evaluators ----------------------------------------------------------------


class QuadraticBowlEvaluator:
    """K quadratic bowls with planted irreducible validation loss.

    Branch j fits a point w to samples ``c_j + sigma_j * z`` (z shared standard
    normal noise), so its expected loss is ``|w - c_j|^2 + floor_j`` with
    ``floor_j = sigma_j^2 * dim``. The floors fix the true ranking.
    """

    def __init__(self, floors, dim: int = 4, seed: int = 0, steps_per_epoch: int = 8,
                 val_size: int = 4096):
        self.floors = np.asarray(floors, dtype=np.float64)
        if self.floors.ndim != 1 or self.floors.size < 1 or np.any(self.floors < 0):
            raise ReluPlanError("floors must be a non-empty vector of non-negative values")
        self.branch_count = int(self.floors.size)
        self.dim = dim
        self.steps_per_epoch = steps_per_epoch
        rng = np.random.default_rng(seed)
        self.centers = rng.uniform(-1, 1, (self.branch_count, dim))
        self.sigmas = np.sqrt(self.floors / dim)
        self._val_noise = rng.standard_normal((val_size, dim))

    @classmethod
    def planted(cls, k: int = 6, best: int = 3, margin: float = 0.5, seed: int = 0, **kw):
        _check_planted(k, best)
        floors = 1.0 + margin + 0.25 * np.arange(k)
        floors[best] = 1.0
        return cls(floors, seed=seed, **kw)

    @classmethod
    def uniform(cls, k: int = 6, floor: float = 1.0, seed: int = 0, **kw):
        return cls(np.full(k, floor), seed=seed, **kw)

    @property
    def best_branch(self) -> int:
        return int(np.argmin(self.floors))

    def init_params(self, branch, rng):
        return [gc.parameter(rng.uniform(-2, 2, self.dim))]

    def sample_train(self, rng, batch_size):
        return rng.standard_normal((batch_size, self.dim))

    sample_val = sample_train

    def loss(self, branch, params, batch):
        targets = self.centers[branch] + self.sigmas[branch] * batch
        diff = gc.sub(params[0], targets)
        return gc.mean(gc.tensor_sum(gc.square(diff), axis=1))

    def val_loss(self, branch, params):
        return float(self.loss(branch, [gc.Tensor(params[0].value)], self._val_noise).value)


def _check_planted(k: int, best: int):
    if k < 1 or not 0 <= best < k:
        raise ReluPlanError("planted branch out of range", best=best, branches=k)


def _mlp_init(widths, rng):
    params = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        params.append(gc.parameter(rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)))
        params.append(gc.parameter(np.zeros((1, fan_out))))
    return params


def _mlp_forward(params, x):
    h = gc.as_tensor(x)
    last = len(params) // 2 - 1
    for i in range(0, len(params), 2):
        h = gc.add(gc.matmul(h, params[i]), params[i + 1])
        if i // 2 < last:
            h = gc.relu(h)
    return h


class _TeacherTask:
    """Shared synthetic classification task labelled by a fixed random teacher MLP."""

    def __init__(self, n_features, n_classes, seed):
        rng = np.random.default_rng(seed)
        self.n_features = n_features
        self.n_classes = n_classes
        self._teacher = _mlp_init([n_features, 16, n_classes], rng)
        for p in self._teacher:
            p.requires_grad = False

    def labels(self, x):
        return np.argmax(_mlp_forward(self._teacher, x).value, axis=1)

    def batch(self, rng, n):
        x = rng.standard_normal((n, self.n_features))
        # per-sample uniforms and replacement labels let each branch apply its own noise rate
        return x, self.labels(x), rng.random(n), rng.integers(0, self.n_classes, n)


class SyntheticEvaluator:
    """K small dense classifiers on one teacher task with planted label noise.

    Branch j sees labels replaced by uniform random classes with probability
    ``noise[j]``, which raises its irreducible cross-entropy.
    """

    def __init__(self, noise, n_features=8, n_classes=4, hidden=16, seed=0,
                 steps_per_epoch=8, val_size=2048):
        self.noise = np.asarray(noise, dtype=np.float64)
        if np.any((self.noise < 0) | (self.noise > 1)):
            raise ReluPlanError("label noise rates must lie in [0, 1]")
        self.branch_count = int(self.noise.size)
        self.hidden = hidden
        self.steps_per_epoch = steps_per_epoch
        self.task = _TeacherTask(n_features, n_classes, seed)
        self._val = self.task.batch(np.random.default_rng([seed, 1]), val_size)

    @classmethod
    def planted(cls, k=6, best=0, seed=0, **kw):
        _check_planted(k, best)
        noise = 0.3 + 0.1 * np.arange(k)
        noise[best] = 0.0
        return cls(np.minimum(noise, 1.0), seed=seed, **kw)

    @property
    def best_branch(self) -> int:
        return int(np.argmin(self.noise))

    def _widths(self, branch):
        return [self.task.n_features, self.hidden, self.task.n_classes]

    def init_params(self, branch, rng):
        return _mlp_init(self._widths(branch), rng)

    def sample_train(self, rng, batch_size):
        return self.task.batch(rng, batch_size)

    sample_val = sample_train

    def _noisy_labels(self, branch, batch):
        _, y, u, replacement = batch
        return np.where(u < self.noise[branch], replacement, y)

    def loss(self, branch, params, batch):
        x = batch[0]
        return gc.cross_entropy(_mlp_forward(params, x), self._noisy_labels(branch, batch))

    def val_loss(self, branch, params):
        frozen = [gc.Tensor(p.value) for p in params]
        return float(self.loss(branch, frozen, self._val).value)


class SurrogateSkeletonEvaluator(SyntheticEvaluator):
    """Branch i is a dense encoder shaped like placement i of a FLOP-balanced skeleton.

    Each cell becomes one hidden layer whose width is proportional to that cell's
    ReLU count, so moving reduces changes capacity the way it does in the real
    network. All branches share one noiseless teacher task.
    """

    def __init__(self, depth=5, channels=16, h0=32, w0=32, max_width=24, seed=0,
                 restrict_last=False, **kw):
        self.placements = enumerate_placements(depth, restrict_last=restrict_last)
        super().__init__(np.zeros(len(self.placements)), seed=seed, **kw)
        self.profiles = []
        for placement in self.placements:
            plan = NetworkPlan(h0, w0, channels, depth, placement, balancing="flop")
            self.profiles.append(count_flop_balanced(plan).per_cell_relus)
        peak = max(max(p) for p in self.profiles)
        self.layer_widths = [
            [max(2, round(max_width * r / peak)) for r in profile] for profile in self.profiles
        ]

    @property
    def best_branch(self) -> int:
        raise ReluPlanError("the surrogate skeleton has no planted optimum")

    def _widths(self, branch):
        return [self.task.n_features, *self.layer_widths[branch], self.task.n_classes]


# -- search --------------------------------------------------------------------


def pick_final(beta) -> int:
    """Index of the peak of softmax(beta); ties go to the lowest index."""
    beta = np.asarray(beta, dtype=np.float64)
    if not np.all(np.isfinite(beta)):
        raise ReluPlanError("beta contains non-finite logits")
    lp = beta - beta.max()
    lp = lp - np.log(np.exp(lp).sum())
    return int(np.argmax(lp))


@dataclass
class EpochRecord:
    epoch: int
    tau: float
    train_loss: float
    val_loss: float
    beta: list[float]


@dataclass
class SearchResult:
    final_beta: list[float]
    picked: int
    trajectory: list[EpochRecord]
    w_steps: int = 0
    beta_steps: int = 0
    branch_samples: list[int] = field(default_factory=list)

    @property
    def gradient_steps(self) -> int:
        return self.w_steps + self.beta_steps

    def to_dict(self) -> dict:
        return {
            "final_beta": self.final_beta,
            "picked": self.picked,
            "w_steps": self.w_steps,
            "beta_steps": self.beta_steps,
            "branch_samples": self.branch_samples,
            "trajectory": [asdict(r) for r in self.trajectory],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def trajectory_csv(self) -> str:
        k = len(self.final_beta)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "tau", "train_loss", "val_loss", *[f"beta_{i}" for i in range(k)]])
        for r in self.trajectory:
            w.writerow([r.epoch, repr(r.tau), repr(r.train_loss), repr(r.val_loss), *map(repr, r.beta)])
        return buf.getvalue()


def _streams(seed: int, k: int):
    root = np.random.SeedSequence(seed)
    init_ss, data_ss, gumbel_ss = root.spawn(3)
    init = [np.random.default_rng(s) for s in init_ss.spawn(k)]
    return init, np.random.default_rng(data_ss), np.random.default_rng(gumbel_ss)


def _check_finite(loss: gc.Tensor, epoch: int, branch: int, phase: str):
    if not np.isfinite(loss.value).all():
        raise SearchAborted(f"non-finite {phase} loss", epoch=epoch, branch=branch)


def _branch_optimizer(params, config: SearchConfig) -> gc.SGD:
    return gc.SGD(params, lr=config.w_lr, momentum=config.w_momentum,
                  weight_decay=config.w_weight_decay, nesterov=True)


def run_search(evaluator: Evaluator, config: SearchConfig, seed: int | None = None) -> SearchResult:
    """Alternate weight steps on the sampled branch with straight-through logit steps.

    Per minibatch: draw a train batch, sample a branch from the current logits
    and update that branch's weights only; then draw a validation batch, sample
    again with the straight-through estimator and update the logits only.
    """
    seed = config.seed if seed is None else seed
    k = evaluator.branch_count
    if k < 1:
        raise ReluPlanError("evaluator has no branches")
    steps = config.steps_per_epoch or evaluator.steps_per_epoch
    init_rngs, data_rng, gumbel_rng = _streams(seed, k)
    params = [evaluator.init_params(j, init_rngs[j]) for j in range(k)]
    w_opts = [_branch_optimizer(params[j], config) for j in range(k)]
    beta = gc.parameter(np.zeros(k))
    beta_opt = gc.Adam([beta], lr=config.beta_lr, weight_decay=config.beta_weight_decay)
    trajectory, samples = [], [0] * k
    w_steps = beta_steps = 0

    for epoch in range(config.epochs):
        tau = config.tau(epoch)
        lr = config.w_lr_at(epoch)
        train_total = val_total = 0.0
        for _ in range(steps):
            batch = evaluator.sample_train(data_rng, config.batch_size)
            j = int(np.argmax(gc.gumbel_sample(beta.value, gumbel_rng)))
            samples[j] += 1
            loss = evaluator.loss(j, params[j], batch)
            _check_finite(loss, epoch, j, "train")
            w_opts[j].zero_grad()
            loss.backward()
            gc.clip_grad_norm(params[j], config.grad_clip)
            w_opts[j].lr = lr
            w_opts[j].step()
            w_steps += 1
            train_total += loss.item()

            batch = evaluator.sample_val(data_rng, config.batch_size)
            draw = gc.gumbel_softmax_st(beta, tau, gumbel_rng)
            # loss-level mixture sum_k h_k L_k: forward equals the sampled branch's
            # loss, and d/dh_k = L_k needs every branch's (forward-only) loss
            losses = np.empty(k)
            for b in range(k):
                losses[b] = evaluator.loss(b, [gc.Tensor(p.value) for p in params[b]], batch).item()
            if not np.all(np.isfinite(losses)):
                raise SearchAborted("non-finite validation loss", epoch=epoch,
                                    branch=int(np.flatnonzero(~np.isfinite(losses))[0]))
            val = gc.tensor_sum(gc.mul(draw.hard, losses))
            beta_opt.zero_grad()
            val.backward()
            beta_opt.step()
            beta_steps += 1
            val_total += val.item()
        trajectory.append(EpochRecord(epoch, tau, train_total / steps, val_total / steps,
                                      beta.value.tolist()))

    final = beta.value.tolist()
    return SearchResult(final, pick_final(final), trajectory, w_steps, beta_steps, samples)


@dataclass
class GridRow:
    branch: int
    placement: tuple | None
    val_loss: float
    steps: int


@dataclass
class GridResult:
    rows: list[GridRow]
    epochs: int

    @property
    def gradient_steps(self) -> int:
        return sum(r.steps for r in self.rows)

    @property
    def training_epochs(self) -> int:
        return self.epochs * len(self.rows)

    def argmin(self) -> int:
        losses = [r.val_loss for r in self.rows]
        return int(np.argmin(losses))

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "gradient_steps": self.gradient_steps,
            "argmin": self.argmin(),
            "rows": [
                {"branch": r.branch, "placement": None if r.placement is None else list(r.placement),
                 "val_loss": r.val_loss, "steps": r.steps}
                for r in self.rows
            ],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["branch", "placement", "val_loss", "steps"])
        for r in self.rows:
            place = "" if r.placement is None else f"{r.placement[0]}-{r.placement[1]}"
            w.writerow([r.branch, place, repr(r.val_loss), r.steps])
        return buf.getvalue()


def train_branch(evaluator: Evaluator, branch: int, config: SearchConfig, seed_seq) -> GridRow:
    """Train one branch alone for the full budget; its RNG stream depends only on seed_seq."""
    init_ss, data_ss = seed_seq.spawn(2)
    params = evaluator.init_params(branch, np.random.default_rng(init_ss))
    data_rng = np.random.default_rng(data_ss)
    opt = _branch_optimizer(params, config)
    steps = config.steps_per_epoch or evaluator.steps_per_epoch
    count = 0
    for epoch in range(config.epochs):
        opt.lr = config.w_lr_at(epoch)
        for _ in range(steps):
            loss = evaluator.loss(branch, params, evaluator.sample_train(data_rng, config.batch_size))
            _check_finite(loss, epoch, branch, "train")
            opt.zero_grad()
            loss.backward()
            gc.clip_grad_norm(params, config.grad_clip)
            opt.step()
            count += 1
    val = evaluator.val_loss(branch, params)
    if not math.isfinite(val):
        raise SearchAborted("non-finite validation loss", epoch=config.epochs - 1, branch=branch)
    placement = getattr(evaluator, "placements", None)
    return GridRow(branch, None if placement is None else tuple(placement[branch]), val, count)


def _train_branch_job(args):
    return train_branch(*args)


def grid_search(evaluator: Evaluator, config: SearchConfig, seed: int | None = None,
                workers: int = 1) -> GridResult:
    """Train every branch independently with identical budgets; rows sorted by branch."""
    seed = config.seed if seed is None else seed
    k = evaluator.branch_count
    streams = np.random.SeedSequence([seed, 0x6772]).spawn(k)
    jobs = [(evaluator, j, config, streams[j]) for j in range(k)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_train_branch_job, jobs))
    else:
        rows = [_train_branch_job(job) for job in jobs]
    return GridResult(sorted(rows, key=lambda r: r.branch), config.epochs)


def desk_config(**overrides) -> SearchConfig:
    """Small-scale defaults: short schedule, faster logit learning rate."""
    base = dict(epochs=40, batch_size=32, steps_per_epoch=8, beta_lr=0.01)
    base.update(overrides)
    return SearchConfig(**base)


def with_seed(config: SearchConfig, seed: int) -> SearchConfig:
    return replace(config, seed=seed)
