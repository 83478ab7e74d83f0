"""Alternating optimization loop.

Unsupervised steps minimize the full objective and update all parameters;
every R-th step additionally takes one supervised step on the labeled
subset, which touches only the encoder. Two Adam instances keep the moment
statistics of the two losses separate. A reduce-on-plateau scheduler watches
the epoch-mean total loss. On divergence the parameters are rolled back to
the end of the last completed epoch and the log is marked aborted.
"""

from __future__ import annotations

import csv
import queue
import threading
from dataclasses import dataclass, field

import numpy as np

from .data import LabeledSubset
from .model import PartedModel
from .objective import ObjectiveConfig, compute_objective, semi_supervised_loss
from .optim import Adam, ReduceLROnPlateau, TrainingError

__all__ = ["TrainLog", "train", "train_classifier"]

LOG_COLUMNS = (
    "iteration",
    "reconstruction",
    "u_capacity",
    "entropy",
    "aggregate",
    "z_capacity",
    "bc_penalty",
    "c_u",
    "c_z",
    "total",
    "supervised",
    "lr",
)

LOG_FORMAT_VERSION = 1


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    epochs: list = field(default_factory=list)
    aborted: bool = False
    abort_reason: str = ""

    def append(self, **kw) -> None:
        self.rows.append(tuple(kw[c] for c in LOG_COLUMNS))

    def __len__(self) -> int:
        return len(self.rows)

    def column(self, name: str) -> np.ndarray:
        i = LOG_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow([f"v{LOG_FORMAT_VERSION}:{c}" if c == "iteration" else c for c in LOG_COLUMNS])
            w.writerows(self.rows)


class _Prefetcher:
    """Prepares upcoming image batches on worker threads.

    Batch index order is fixed up front, so prefetching changes timing only,
    never content. With one thread the fetch is synchronous.
    """

    def __init__(self, dataset, index_batches: list, threads: int):
        self.dataset = dataset
        self.batches = index_batches
        self.threads = max(1, threads)
        if self.threads > 1:
            self.q: queue.Queue = queue.Queue(maxsize=self.threads)
            self.worker = threading.Thread(target=self._fill, daemon=True)
            self.worker.start()

    def _fill(self):
        for idx in self.batches:
            self.q.put((idx, self.dataset.image_batch(idx)))
        self.q.put(None)

    def __iter__(self):
        if self.threads == 1:
            for idx in self.batches:
                yield idx, self.dataset.image_batch(idx)
            return
        while True:
            item = self.q.get()
            if item is None:
                return
            yield item


def _snapshot(model: PartedModel) -> dict:
    return {name: p.data.copy() for name, p in model.params.items()}


def _restore(model: PartedModel, snap: dict) -> None:
    for name, p in model.params.items():
        p.data[:] = snap[name]


def train(
    model: PartedModel,
    dataset,
    cfg: ObjectiveConfig,
    *,
    epochs: int,
    batch_size: int,
    lr: float,
    rng: np.random.Generator,
    labeled: LabeledSubset | None = None,
    sup_every: int = 1,
    plateau_factor: float = 0.5,
    plateau_patience: int = 5,
    min_lr: float = 1e-6,
    max_steps: int | None = None,
    prefetch_threads: int = 1,
    step_callback=None,
    optimizers: tuple | None = None,
    start_iteration: int = 0,
) -> TrainLog:
    """Run the alternating loop; returns the per-step log.

    ``labeled`` may be None or empty, in which case the trajectory is the
    pure-unsupervised one. ``max_steps`` caps the absolute iteration count
    (useful with ``start_iteration`` when resuming). ``optimizers`` may
    supply prebuilt (main, supervised) Adam instances whose state carries
    over from a checkpoint. ``step_callback(model, iteration)`` runs after
    every optimizer step (checkpoint hooks).
    """
    if sup_every < 1:
        raise ValueError("sup_every must be >= 1")
    use_sup = labeled is not None and len(labeled) > 0
    if optimizers is not None:
        opt_main, opt_sup = optimizers
        if use_sup and opt_sup is None:
            raise ValueError("labeled data given but no supervised optimizer")
    else:
        opt_main = Adam(model.parameters(), lr=lr)
        opt_sup = Adam(model.encoder_parameters(), lr=lr) if use_sup else None
    scheduler = ReduceLROnPlateau(
        [opt_main] + ([opt_sup] if use_sup else []),
        factor=plateau_factor,
        patience=plateau_patience,
        min_lr=min_lr,
    )
    log = TrainLog()
    n = len(dataset)
    if use_sup:
        sup_batch = min(batch_size, len(labeled))
        sup_order: list = []

    iteration = start_iteration
    snap = _snapshot(model)
    try:
        for epoch in range(epochs):
            perm = rng.permutation(n)
            steps = n // batch_size
            index_batches = [perm[s * batch_size : (s + 1) * batch_size] for s in range(steps)]
            if max_steps is not None:
                index_batches = index_batches[: max(0, max_steps - iteration)]
            totals = []
            for idx, x in _Prefetcher(dataset, index_batches, prefetch_threads):
                breakdown = compute_objective(x, model, cfg, iteration, rng)
                opt_main.zero_grad()
                breakdown.total.backward()
                opt_main.step()
                total_value = float(breakdown.total.data)

                sup_value = float("nan")
                if use_sup and iteration % sup_every == 0:
                    if len(sup_order) < sup_batch:
                        sup_order = list(rng.permutation(len(labeled)))
                    take = [sup_order.pop() for _ in range(sup_batch)]
                    sx = dataset.image_batch(labeled.indices[take])
                    sup_loss = semi_supervised_loss(sx, labeled.labels[take], model)
                    opt_sup.zero_grad()
                    sup_loss.backward()
                    opt_sup.step()
                    sup_value = float(sup_loss.data)

                log.append(
                    iteration=iteration,
                    **dict(zip(breakdown.COLUMNS, breakdown.values())),
                    total=total_value,
                    supervised=sup_value,
                    lr=opt_main.lr,
                )
                totals.append(total_value)
                iteration += 1
                if step_callback is not None:
                    step_callback(model, iteration)
            if totals:
                mean_total = float(np.mean(totals))
                scheduler.update(mean_total)
                log.epochs.append({"epoch": epoch, "mean_total": mean_total, "lr": opt_main.lr, "steps": iteration})
            snap = _snapshot(model)
            if max_steps is not None and iteration >= max_steps:
                break
    except TrainingError as err:
        _restore(model, snap)
        log.aborted = True
        log.abort_reason = str(err)
    return log
