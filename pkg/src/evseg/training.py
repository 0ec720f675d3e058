"""Losses, subset-cycling schedules, and the mini-batch training loop."""

from __future__ import annotations

import copy
import csv
import io
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, NormStats, Tape, Tensor
from .graph import EventGraph
from .gtnn import GtnnModel, Pyramid, build_pyramid, model_forward

log = logging.getLogger(__name__)

LOSS_KINDS = ("cross_entropy", "focal", "dual_focal")
_CLAMP = 1e-12


class ScheduleError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossConfig:
    kind: str = "focal"
    gamma: float = 2.0
    weights: tuple[float, float] = (1.0, 1.0)

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ValueError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if min(self.weights) < 0 or max(self.weights) == 0:
            raise ValueError(f"class weights must be non-negative and not both zero: {self.weights}")


def inverse_frequency_weights(labels: Sequence[np.ndarray]) -> tuple[float, float]:
    """``n / (2 n_c)`` per class; a class that never occurs gets weight 0."""
    all_labels = np.concatenate([np.asarray(l) for l in labels]) if len(labels) else np.zeros(0)
    n = len(all_labels)
    out = []
    for c in (0, 1):
        nc = int(np.sum(all_labels == c))
        out.append(n / (2.0 * nc) if nc else 0.0)
    if max(out) == 0:
        return (1.0, 1.0)
    return (out[0], out[1])


def compute_loss(probs: Tensor, labels: np.ndarray, config: LossConfig) -> Tensor:
    """Mean per-event (weighted) loss over ``(N, 2)`` class probabilities."""
    labels = np.asarray(labels, dtype=np.intp)
    p = probs.data
    if p.ndim != 2 or p.shape[1] != 2 or labels.shape != (p.shape[0],):
        raise ad.ShapeError(f"probs {p.shape} vs labels {labels.shape}")
    if np.any((labels != 0) & (labels != 1)):
        raise ValueError("labels must be 0 or 1")
    n = p.shape[0]
    rows = np.arange(n)
    w = np.asarray(config.weights, dtype=np.float64)[labels]
    gamma = 0.0 if config.kind == "cross_entropy" else float(config.gamma)

    p_t = p[rows, labels]
    p_o = p[rows, 1 - labels]
    pt_c = np.maximum(p_t, _CLAMP)
    log_t = np.log(pt_c)
    live_t = p_t > _CLAMP  # clamped entries carry no gradient through the log
    one_m = 1.0 - p_t
    focus = one_m**gamma
    per = -w * focus * log_t
    if gamma == 0:
        d_focus = np.zeros(n)
    else:
        d_focus = np.where(one_m > 0, gamma * np.power(np.where(one_m > 0, one_m, 1.0), gamma - 1), 0.0)
    g_t = -w * (-d_focus * log_t + np.where(live_t, focus / pt_c, 0.0))
    g_o = np.zeros(n)

    if config.kind == "dual_focal":
        q = np.maximum(1.0 - p_o, _CLAMP)
        log_q = np.log(q)
        live_q = (1.0 - p_o) > _CLAMP
        po_pow = p_o**gamma
        per = per - w * po_pow * log_q
        if gamma == 0:
            d_po = np.zeros(n)
        else:
            d_po = np.where(p_o > 0, gamma * np.power(np.where(p_o > 0, p_o, 1.0), gamma - 1), 0.0)
        g_o = -w * (d_po * log_q - np.where(live_q, po_pow / q, 0.0))

    value = np.asarray(per.mean())

    def back(g):
        gp = np.zeros_like(p)
        gp[rows, labels] = g_t / n
        gp[rows, 1 - labels] = g_o / n
        return (gp * g,)

    return ad.record(value, (probs,), back)


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class TrainingSchedule:
    subsets: tuple[tuple[int, ...], ...]
    epochs: int
    batch_size: int = 8
    seed: int = 0

    @property
    def L(self) -> int:
        return len(self.subsets)

    def subset_index(self, epoch: int) -> int:
        return epoch % self.L

    def epoch_order(self, epoch: int) -> list[int]:
        """Samples of this epoch's subset, reshuffled with an epoch-derived seed."""
        members = list(self.subsets[self.subset_index(epoch)])
        rng = np.random.default_rng([self.seed, epoch])
        return [members[i] for i in rng.permutation(len(members))]


def make_schedule(samples: Sequence[int], L: int, seed: int = 0) -> tuple[tuple[int, ...], ...]:
    """Shuffle ``samples`` once and deal them into ``L`` near-equal subsets."""
    samples = list(samples)
    if L < 1 or L > len(samples):
        raise ScheduleError(f"cannot split {len(samples)} samples into {L} subsets")
    rng = np.random.default_rng(seed)
    shuffled = [samples[i] for i in rng.permutation(len(samples))]
    bounds = np.linspace(0, len(shuffled), L + 1).round().astype(int)
    return tuple(tuple(shuffled[bounds[j] : bounds[j + 1]]) for j in range(L))


def build_schedule(n_samples: int, L: int, epochs: int, batch_size: int = 8, seed: int = 0) -> TrainingSchedule:
    return TrainingSchedule(make_schedule(range(n_samples), L, seed), epochs, batch_size, seed)


# ---------------------------------------------------------------------------
# training loop


@dataclass(eq=False)
class Sample:
    graph: EventGraph
    labels: np.ndarray
    pyramid: Pyramid | None = None


@dataclass
class EpochRecord:
    epoch: int
    subset: int
    loss: float
    seconds: float
    checksum: float
    samples: int


@dataclass
class TrainHistory:
    entries: list[EpochRecord] = field(default_factory=list)

    def to_csv(self, include_timing: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "subset", "loss", "seconds"])
        for e in self.entries:
            w.writerow([e.epoch, e.subset, f"{e.loss:.8f}", f"{e.seconds:.3f}" if include_timing else ""])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")


class _StatsRecorder(NormStats):
    """Collects per-graph statistics instead of folding them in immediately."""

    def __init__(self):
        self.seen: list[tuple[np.ndarray, np.ndarray]] = []

    def update(self, mean, var):
        self.seen.append((mean, var))


def _grad_of_sample(model: GtnnModel, sample: Sample, loss_config: LossConfig):
    """Loss, parameter gradients, and the norm statistics this sample observed."""
    # a shallow view shares parameters but keeps the running stats untouched,
    # so samples can run on any thread and stats are folded in batch order
    view = copy.copy(model)
    view.norms = {k: _StatsRecorder() for k in model.norms}
    params = model.parameters()
    with Tape() as tape:
        probs = model_forward(view, sample.graph, sample.pyramid)
        loss = compute_loss(probs, sample.labels, loss_config)
    return float(loss.data), tape.backward(loss, params), view.norms


def train(
    model: GtnnModel,
    dataset: Sequence[Sample],
    schedule: TrainingSchedule,
    loss_config: LossConfig,
    optimizer: AdamState | None = None,
    threads: int = 1,
    on_epoch: Callable[[EpochRecord], None] | None = None,
) -> TrainHistory:
    """Run ``schedule.epochs`` epochs; epoch ``i`` sees only subset ``i mod L``."""
    if any(len(s) == 0 for s in schedule.subsets):
        raise ScheduleError("schedule contains an empty subset")
    optimizer = optimizer or AdamState()
    params = model.parameters()
    for s in dataset:
        if s.pyramid is None:
            s.pyramid = build_pyramid(s.graph, model.config)
    history = TrainHistory()
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    model.training = True
    try:
        for epoch in range(schedule.epochs):
            start = time.perf_counter()
            order = schedule.epoch_order(epoch)
            losses = []
            for b in range(0, len(order), schedule.batch_size):
                batch = [dataset[i] for i in order[b : b + schedule.batch_size]]
                where = f"epoch {epoch}, batch {b // schedule.batch_size}"
                try:
                    if pool is None:
                        results = [_grad_of_sample(model, s, loss_config) for s in batch]
                    else:
                        results = list(pool.map(lambda s: _grad_of_sample(model, s, loss_config), batch))
                except ad.NonFiniteError as exc:
                    raise TrainingError(f"non-finite forward value at {where}: {exc}") from exc
                batch_losses = [r[0] for r in results]
                if not np.all(np.isfinite(batch_losses)):
                    raise TrainingError(f"non-finite loss at {where}: {batch_losses}")
                grads = [sum(r[1][j] for r in results) / len(results) for j in range(len(params))]
                with np.errstate(over="ignore", invalid="ignore"):
                    bad = [n for n, g in zip(model.params, grads) if not np.isfinite(np.sum(g * g))]
                if bad:
                    raise TrainingError(f"non-finite or overflowing gradient at {where} in {bad[:3]}")
                ad.adam_step(params, grads, optimizer)
                for r in results:
                    for name, rec in r[2].items():
                        for mean, var in rec.seen:
                            model.norms[name].update(mean, var)
                losses.extend(batch_losses)
            rec = EpochRecord(
                epoch=epoch,
                subset=schedule.subset_index(epoch),
                loss=float(np.mean(losses)),
                seconds=time.perf_counter() - start,
                checksum=model.checksum(),
                samples=len(order),
            )
            history.entries.append(rec)
            log.debug("epoch %d subset %d loss %.5f", rec.epoch, rec.subset, rec.loss)
            if on_epoch is not None:
                on_epoch(rec)
    finally:
        model.training = False
        if pool is not None:
            pool.shutdown()
    return history


@dataclass
class TrainConfig:
    """Key=value training settings shared by the CLI and config files."""

    lr: float = 0.001
    batch: int = 8
    epochs: int = 100
    subsets: int = 5
    loss: str = "focal"
    gamma: float = 2.0
    seed: int = 0
    dims: tuple[int, int, int] = (32, 64, 128)
    global_dim: int = 128
    head: int = 64
    k: int = 16
    window_ms: float = 10.0
    nmax: int = 5000

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        cfg = cls()
        for raw in text.splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip().replace("-", "_"), val.strip()
            if not sep or not hasattr(cfg, key):
                raise ValueError(f"unknown training config line {line!r}")
            cfg.set(key, val)
        return cfg

    def set(self, key: str, val) -> None:
        current = getattr(self, key)
        if key == "dims":
            if isinstance(val, str):
                val = tuple(int(v) for v in val.split(","))
            val = tuple(int(v) for v in val)
            if len(val) != 3:
                raise ValueError("dims needs three comma-separated widths")
        elif isinstance(current, bool):
            val = str(val).lower() in ("1", "true", "yes")
        elif isinstance(current, int):
            val = int(val)
        elif isinstance(current, float):
            val = float(val)
        else:
            val = str(val)
        setattr(self, key, val)

    def to_text(self) -> str:
        out = []
        for key in self.__dataclass_fields__:
            v = getattr(self, key)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{key}={v}")
        return "\n".join(out) + "\n"
