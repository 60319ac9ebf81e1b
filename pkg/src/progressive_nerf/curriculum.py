"""Stage assignment, inclusive multi-level loss and the grow-as-you-train loop.

Stage 1 holds the most remote views; stage ``L_max`` the closest. Training
stage ``L`` samples rays from every training image with indicator <= L,
renders them at heads 1..L and supervises head ``l`` with the rays whose
indicator is <= l.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time
from collections.abc import Callable, Sequence

import numpy as np

from .autodiff import AdamState, Node, Tape, adam_step, learning_rate, reset_optimizer
from .field import FieldConfig, FieldParams, grow, init_field

log = logging.getLogger(__name__)

ABLATIONS = ("no_multilevel_sup", "no_data_schedule", "no_growing", "no_skip", "no_residual")


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message: str, snapshot: dict):
        super().__init__(message)
        self.snapshot = snapshot


def assign_stage(distance: float, d_min: float, L_max: int) -> int:
    """Each doubling of camera distance beyond ``d_min`` is one stage more remote."""
    if d_min <= 0:
        raise ValueError(f"d_min must be positive, got {d_min}")
    if distance < d_min:
        raise ValueError(f"distance {distance} closer than d_min {d_min}")
    # guard log2 rounding for exact powers of two
    octaves = math.floor(math.log2(distance / d_min) + 1e-12)
    return L_max - min(octaves, L_max - 1)


def head_masks(indicators: np.ndarray, L: int, inclusive: bool = True) -> list[np.ndarray]:
    """Ray membership per head: R_l = {I <= l} (or {I == l} if not inclusive)."""
    indicators = np.asarray(indicators)
    if np.any(indicators > L) or np.any(indicators < 1):
        raise ValueError(f"indicators must lie in [1, {L}]")
    return [(indicators <= l) if inclusive else (indicators == l) for l in range(1, L + 1)]


def stage_loss(
    predictions: Sequence,
    ground_truth,
    indicators,
    L: int,
    inclusive: bool = True,
    tape: Tape | None = None,
    per_head: list | None = None,
):
    """Sum over heads l <= L of squared colour error over rays in R_l.

    ``predictions[l-1]`` is head ``l``'s (R, 3) colour, as arrays or tape
    nodes. Returns a scalar node when ``tape`` is given, else a float. If
    ``per_head`` is a list it receives each head's term as a float.
    """
    if len(predictions) < L:
        raise ValueError(f"need predictions for heads 1..{L}, got {len(predictions)}")
    masks = head_masks(indicators, L, inclusive)
    own_tape = tape is None
    if own_tape:
        tape = Tape(record=False)
    gt = np.asarray(ground_truth)
    total = None
    for pred, mask in zip(predictions[:L], masks):
        pred = pred if isinstance(pred, Node) else tape.constant(np.asarray(pred, dtype=np.float64))
        sq = tape.square(tape.sub(pred, gt.astype(pred.value.dtype)))
        term = tape.sum(tape.mul(sq, mask[:, None].astype(pred.value.dtype)))
        if per_head is not None:
            per_head.append(float(term.value))
        total = term if total is None else total + term
    return float(total.value) if own_tape else total


@dataclasses.dataclass
class RayPool:
    origins: np.ndarray
    directions: np.ndarray
    near: np.ndarray
    far: np.ndarray
    colors: np.ndarray
    stages: np.ndarray

    def __len__(self):
        return self.origins.shape[0]

    def subset(self, idx) -> RayPool:
        return RayPool(*(a[idx] for a in dataclasses.astuple(self)))

    def rays(self):
        from .render import RayBatch

        return RayBatch(self.origins, self.directions, self.near, self.far)


def dataset_rays(dataset, split: str = "train") -> RayPool:
    """Every pixel ray of every view in ``split``, with its colour and stage."""
    from .geometry import camera_rays

    parts = []
    for v in dataset.split(split):
        o, d, n, f = camera_rays(v.camera, dataset.scene_center, dataset.scene_radius)
        parts.append((o, d, n, f, v.image.reshape(-1, 3), np.full(len(o), v.stage)))
    return RayPool(*(np.concatenate(col) for col in zip(*parts)))


def expand_training_set(dataset, L: int, exact: bool = False, pool: RayPool | None = None) -> RayPool:
    """Training rays with indicator <= L (== L when ``exact``)."""
    if not 1 <= L <= dataset.L_max:
        raise ValueError(f"stage {L} outside [1, {dataset.L_max}]")
    pool = dataset_rays(dataset) if pool is None else pool
    keep = pool.stages == L if exact else pool.stages <= L
    if not keep.any():
        raise ValueError(f"no training images at stage {L}")
    return pool.subset(keep)


@dataclasses.dataclass
class TrainConfig:
    iters_per_stage: int = 3000
    batch_size: int = 2048
    n_samples: int = 128
    base_lr: float = 5e-4
    lr_final: float = 5e-6
    seed: int = 0
    ablations: tuple[str, ...] = ()
    precision: str = "float64"
    deterministic: bool = True
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    eval_samples: int | None = None
    eval_every_stage: bool = True

    def __post_init__(self):
        for name in ("iters_per_stage", "batch_size", "n_samples"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        self.ablations = tuple(self.ablations)
        bad = [a for a in self.ablations if a not in ABLATIONS]
        if bad:
            raise ValueError(f"unknown ablation(s) {bad}; valid names: {', '.join(ABLATIONS)}")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    def has(self, flag: str) -> bool:
        return flag in self.ablations

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


def apply_ablations(config: FieldConfig, train: TrainConfig) -> FieldConfig:
    return dataclasses.replace(
        config,
        skip=config.skip and not train.has("no_skip"),
        residual=config.residual and not train.has("no_residual"),
    )


@dataclasses.dataclass
class StageLog:
    records: list[dict] = dataclasses.field(default_factory=list)
    stage_metrics: list[dict] = dataclasses.field(default_factory=list)
    stage_seconds: list[float] = dataclasses.field(default_factory=list)
    param_counts: list[int] = dataclasses.field(default_factory=list)

    def write_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec) + "\n")

    def losses(self, head: int | None = None) -> np.ndarray:
        if head is None:
            seen = {}
            for r in self.records:
                seen[r["iteration"]] = seen.get(r["iteration"], 0.0) + r["loss"]
            return np.array([seen[k] for k in sorted(seen)])
        return np.array([r["loss"] for r in self.records if r["head"] == head])


@dataclasses.dataclass
class StagePlan:
    depth: int  # network depth during this stage
    pool_stage: int  # rays with indicator <= pool_stage (or == if exact)
    heads: list[tuple[int, bool]]  # (head, inclusive) pairs contributing to the loss


def stage_plan(L: int, L_max: int, train: TrainConfig) -> StagePlan:
    growing = not (train.has("no_growing") or train.has("no_data_schedule"))
    depth = L if growing else L_max
    pool_stage = L_max if train.has("no_data_schedule") else L
    if train.has("no_growing"):
        heads = [(L_max, True)]
    else:
        inclusive = not train.has("no_multilevel_sup")
        heads = [(l, inclusive) for l in range(1, min(depth, pool_stage) + 1)]
    return StagePlan(depth, pool_stage, heads)


def batch_loss(tape, renders, colors, stages, plan: StagePlan, per_head: list | None = None):
    """Loss for one batch following ``plan``; ``renders[h-1]`` is head h."""
    gt = np.asarray(colors)
    total = None
    for head, inclusive in plan.heads:
        pred = renders[head - 1].color
        mask = (stages <= head) if inclusive else (stages == head)
        sq = tape.square(tape.sub(pred, gt.astype(pred.value.dtype)))
        term = tape.sum(tape.mul(sq, mask[:, None].astype(pred.value.dtype)))
        if per_head is not None:
            per_head.append((head, float(term.value)))
        total = term if total is None else total + term
    return total


def run_curriculum(
    dataset,
    field_config: FieldConfig,
    train: TrainConfig,
    evaluate: Callable[[FieldParams, int], dict] | None = None,
    on_stage_end: Callable[[FieldParams, int, StageLog], None] | None = None,
    log_every: int = 1,
) -> tuple[FieldParams, StageLog]:
    """Grow-and-train over stages 1..L_max of ``dataset``.

    ``evaluate(field, stage)`` is called after each stage and its dict is
    stored in ``StageLog.stage_metrics``.
    """
    L_max = dataset.L_max
    config = apply_ablations(dataclasses.replace(field_config, L_max=L_max), train)
    rng = np.random.default_rng(train.seed)
    first = stage_plan(1, L_max, train)
    field = init_field(config, rng, depth=first.depth, dtype=train.dtype)
    full_pool = dataset_rays(dataset)
    state = AdamState.for_params(
        field.params, base_lr=train.base_lr, lr_final=train.lr_final, decay_steps=train.iters_per_stage
    )
    slog = StageLog()
    iteration = 0
    for L in range(1, L_max + 1):
        t0 = time.perf_counter()
        plan = stage_plan(L, L_max, train)
        while field.depth < plan.depth:
            field = grow(field, rng)
        state = reset_optimizer(AdamState.for_params(field.params, **_adam_kwargs(state)))
        pool = expand_training_set(dataset, plan.pool_stage, pool=full_pool)
        slog.param_counts.append(field.size)
        top_head = max(h for h, _ in plan.heads)
        for _ in range(train.iters_per_stage):
            idx = rng.integers(0, len(pool), size=train.batch_size)
            batch = pool.subset(np.sort(idx) if train.deterministic else idx)
            tape = Tape(field.params)
            renders = _render(tape, field, batch, top_head, train, rng)
            per_head: list = []
            loss = batch_loss(tape, renders, batch.colors, batch.stages, plan, per_head)
            if not np.isfinite(loss.value):
                snapshot = {"iteration": iteration, "stage": L, "per_head": per_head, "field": field}
                raise NonFiniteLoss(f"non-finite loss at iteration {iteration} (stage {L})", snapshot)
            lr = learning_rate(state)
            grads = tape.backward(loss)
            field.params, state = adam_step(field.params, grads, state)
            if iteration % log_every == 0:
                for head, value in per_head:
                    slog.records.append(
                        {"iteration": iteration, "stage": L, "head": head, "loss": value, "lr": lr}
                    )
            iteration += 1
        slog.stage_seconds.append(time.perf_counter() - t0)
        if evaluate is not None and (train.eval_every_stage or L == L_max):
            metrics = evaluate(field, L)
            slog.stage_metrics.append({"stage": L, **metrics})
        if on_stage_end is not None:
            on_stage_end(field, L, slog)
        log.info("stage %d done: %d iterations, %.1fs", L, train.iters_per_stage, slog.stage_seconds[-1])
    return field, slog


def _adam_kwargs(state: AdamState) -> dict:
    return {
        "base_lr": state.base_lr,
        "lr_final": state.lr_final,
        "decay_steps": state.decay_steps,
        "betas": state.betas,
        "eps": state.eps,
    }


def _render(tape, field, batch: RayPool, head: int, train: TrainConfig, rng):
    from .render import render_rays

    return render_rays(tape, field, batch.rays(), head, train.n_samples, rng, True, train.background)
