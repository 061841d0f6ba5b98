"""Training loop, optimizer, ensembled inference and evaluation harnesses.

All randomness is drawn from :func:`consistgnn.sampler.substream` keyed by
the run seed plus a stream name and position (epoch, step, view), so a run is
a pure function of its dataset, configs and seed.
"""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

from . import numerics as nx
from .errors import ConfigError, ShapeError
from .graphstore import Dataset, induce_train_subgraph, multi_source_bfs
from .losses import (
    ConsistencyConfig,
    TsaSchedule,
    combine_losses,
    consistency_loss,
    tsa_masked_cross_entropy,
)
from .models import ModelConfig, ModelParams, dropout_masks, forward, init_params, predict_proba
from .numerics import GradTensor
from .sampler import ALL, check_fanouts, drop_nodes, full_blocks, sample_blocks, substream

ALPHA_GRID = (0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0)
GRID_CSV_HEADER = ("views", "model_count", "accuracy_mean", "accuracy_std")


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "transductive"
    fanouts: tuple[int, ...] = (5, 5)
    batch_size_labeled: int = 32
    # None means the same size as the labeled batch
    batch_size_unlabeled: Optional[int] = None
    epochs: int = 50
    learning_rate: float = 5e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0
    consistency: Optional[ConsistencyConfig] = None
    small_graph_mode: bool = False
    node_drop_rate: float = 0.1
    use_tsa: bool = True
    eval_views: int = 1
    record_wall_time: bool = False
    run_id: str = "run"

    def __post_init__(self):
        object.__setattr__(self, "fanouts", check_fanouts(self.fanouts))
        if self.mode not in ("transductive", "inductive"):
            raise ConfigError(f"mode must be transductive or inductive, got {self.mode!r}")
        if self.batch_size_labeled < 1 or (self.batch_size_unlabeled is not None
                                           and self.batch_size_unlabeled < 1):
            raise ConfigError("batch sizes must be >= 1")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0.0 <= self.node_drop_rate < 1.0:
            raise ConfigError("node_drop_rate must be in [0, 1)")
        if self.eval_views < 1:
            raise ConfigError("eval_views must be >= 1")

    @property
    def unlabeled_batch(self) -> int:
        return self.batch_size_unlabeled or self.batch_size_labeled

    @property
    def consistency_on(self) -> bool:
        return self.consistency is not None and self.consistency.alpha > 0.0

    def eval_fanouts(self) -> tuple[int, ...]:
        return (ALL,) * len(self.fanouts) if self.small_graph_mode else self.fanouts


@dataclass(frozen=True)
class EnsembleConfig:
    num_models: int = 1
    num_views: int = 1
    seeds: Optional[tuple[int, ...]] = None
    # independent view draws per grid cell, for the mean/std columns
    repeats: int = 1

    def __post_init__(self):
        if self.num_models < 1 or self.num_views < 1 or self.repeats < 1:
            raise ConfigError("ensemble sizes must be >= 1")
        if self.seeds is not None and len(self.seeds) != self.num_models:
            raise ConfigError("ensemble.seeds must have num_models entries")

    def model_seeds(self, base_seed: int) -> tuple[int, ...]:
        if self.seeds is not None:
            return tuple(self.seeds)
        return tuple(base_seed + i for i in range(self.num_models))


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def for_params(cls, params: Sequence[GradTensor]) -> "AdamState":
        return cls([np.zeros_like(p.values) for p in params],
                   [np.zeros_like(p.values) for p in params])


@dataclass
class MetricsRecord:
    run_id: str
    seed: int
    epoch: int
    step: int
    split: str
    accuracy: float
    loss_supervised: float
    loss_consistency: Optional[float]
    eta: float
    wall_time: Optional[float] = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=False)


@dataclass(frozen=True)
class DistanceBucket:
    distance: float
    count: int
    accuracy: float


# ---------------------------------------------------------------------------
# optimizer


def adam_step(params: Sequence[GradTensor], grads: Sequence[np.ndarray], state: AdamState,
              cfg: TrainConfig) -> None:
    """In-place Adam update with bias correction and decoupled weight decay."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError("params, grads and optimizer state differ in length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ShapeError(f"gradient {g.shape} does not match parameter {p.shape}")
    state.step += 1
    b1, b2 = cfg.adam_beta1, cfg.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if cfg.weight_decay:
            p.values -= cfg.learning_rate * cfg.weight_decay * p.values
        p.values -= cfg.learning_rate * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)


# ---------------------------------------------------------------------------
# views and inference


def _features_without(X: GradTensor, dropped: np.ndarray) -> GradTensor:
    if not dropped.any():
        return X
    vals = X.values.copy()
    vals[dropped] = 0.0
    return GradTensor(vals)


def _draw_view(ds: Dataset, targets, cfg: TrainConfig, num_layers: int, rng, protected=None):
    """One stochastic expansion: fanout sampling, or node dropping in small-graph mode."""
    if cfg.small_graph_mode:
        prot = targets if protected is None else protected
        graph, dropped = drop_nodes(ds.graph, cfg.node_drop_rate, prot, rng)
        return full_blocks(graph, targets, num_layers), _features_without(ds.features, dropped)
    return sample_blocks(ds.graph, targets, cfg.fanouts, rng), ds.features


def self_ensemble_predict(params: ModelParams, ds: Dataset, targets, fanouts, n_views: int,
                          seed: int) -> np.ndarray:
    """Mean class probabilities over ``n_views`` independently sampled expansions.

    View ``i`` is sampled from ``substream(seed, "view", i)``, so the first
    ``k`` views are shared by every call with ``n_views >= k``.
    """
    if n_views < 1:
        raise ConfigError("n_views must be >= 1")
    total = None
    for probs in _view_probs(params, ds, targets, fanouts, n_views, seed):
        total = probs if total is None else total + probs
    return total / n_views


def _view_probs(params, ds, targets, fanouts, n_views, seed):
    fanouts = check_fanouts(fanouts, params.config.num_layers)
    for i in range(n_views):
        rng = None if all(f == ALL for f in fanouts) else substream(seed, "view", i)
        blocks = sample_blocks(ds.graph, targets, fanouts, rng)
        yield predict_proba(forward(params, blocks, ds.features))


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def evaluate(params: ModelParams, ds: Dataset, nodes, fanouts, n_views: int = 1,
             seed: int = 0) -> float:
    nodes = np.asarray(nodes, dtype=np.int64)
    probs = self_ensemble_predict(params, ds, nodes, fanouts, n_views, seed)
    return accuracy(probs, ds.labels[nodes])


def grid_evaluate(models: Sequence[ModelParams], ds: Dataset, targets, fanouts, max_views: int,
                  seed: int) -> np.ndarray:
    """Accuracy of averaged predictions over ``i`` models and ``j`` views.

    Entry ``[i-1, j-1]`` averages probabilities of the first ``i`` models on
    the first ``j`` views.  View ``j`` is the same sampled expansion for every
    model.
    """
    if not models:
        raise ConfigError("grid_evaluate needs at least one model")
    targets = np.asarray(targets, dtype=np.int64)
    labels = ds.labels[targets]
    # per_view[v] accumulates model-prefix sums: cum[i] = sum of first i+1 models on view v
    sums = np.zeros((len(models), max_views) + (targets.size, models[0].config.num_classes))
    for m, params in enumerate(models):
        for v, probs in enumerate(_view_probs(params, ds, targets, fanouts, max_views, seed)):
            sums[m, v] = probs
    cum = np.cumsum(np.cumsum(sums, axis=0), axis=1)
    table = np.zeros((len(models), max_views))
    for i in range(len(models)):
        for j in range(max_views):
            table[i, j] = accuracy(cum[i, j] / ((i + 1) * (j + 1)), labels)
    return table


def accuracy_by_distance(ds: Dataset, probs: np.ndarray) -> list[DistanceBucket]:
    """Test accuracy bucketed by hop distance to the nearest train node.

    ``probs`` holds one row per node of ``ds.split.test`` in that order.
    """
    test = ds.split.test
    if test.size == 0:
        raise ConfigError("accuracy_by_distance needs a non-empty test set")
    if probs.shape[0] != test.size:
        raise ShapeError(f"{probs.shape[0]} prediction rows for {test.size} test nodes")
    dist = multi_source_bfs(ds.graph, ds.split.train)[test]
    correct = np.argmax(probs, axis=1) == ds.labels[test]
    buckets = []
    for d in np.unique(dist):
        sel = dist == d
        buckets.append(DistanceBucket(float(d), int(sel.sum()), float(correct[sel].mean())))
    return buckets


# ---------------------------------------------------------------------------
# training


def train(ds: Dataset, model_cfg: ModelConfig, cfg: TrainConfig
          ) -> tuple[ModelParams, list[MetricsRecord]]:
    """Minibatch training with optional multi-view consistency loss.

    Validation accuracy (training accuracy if there is no validation split)
    is logged once per epoch with ``cfg.eval_views``
    sampled views (the first views of the ``cfg.seed`` inference stream) on
    the full dataset graph.
    """
    check_fanouts(cfg.fanouts, model_cfg.num_layers)
    if model_cfg.num_classes != ds.num_classes:
        raise ConfigError(f"model has {model_cfg.num_classes} classes, dataset {ds.num_classes}")
    if ds.split.train.size == 0:
        raise ConfigError("training split is empty")
    if cfg.consistency is not None and cfg.consistency.num_views < 2:
        raise ConfigError("consistency needs at least two views")

    train_ds = induce_train_subgraph(ds) if cfg.mode == "inductive" else ds
    labeled = train_ds.split.train
    eligible = np.arange(train_ds.num_nodes, dtype=np.int64)
    L = model_cfg.num_layers

    params = init_params(model_cfg, ds.feature_dim, substream(cfg.seed, "init"))
    tensors = params.tensors()
    state = AdamState.for_params(tensors)
    steps_per_epoch = math.ceil(labeled.size / cfg.batch_size_labeled)
    schedule = TsaSchedule(max(ds.num_classes, 2), cfg.epochs * steps_per_epoch)
    eval_fanouts = cfg.eval_fanouts()
    # without validation nodes the training split is logged instead
    log_split = "val" if ds.split.val.size else "train"
    log_nodes = getattr(ds.split, log_split)

    records: list[MetricsRecord] = []
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        order = substream(cfg.seed, "epoch", epoch).permutation(labeled)
        sup_losses, con_losses = [], []
        for b in range(steps_per_epoch):
            batch = order[b * cfg.batch_size_labeled:(b + 1) * cfg.batch_size_labeled]
            sup, con = _train_step(params, tensors, state, train_ds, batch, eligible, cfg,
                                   schedule, step)
            sup_losses.append(sup)
            if con is not None:
                con_losses.append(con)
            step += 1
        val_acc = evaluate(params, ds, log_nodes, eval_fanouts, cfg.eval_views, cfg.seed)
        records.append(MetricsRecord(
            run_id=cfg.run_id,
            seed=cfg.seed,
            epoch=epoch,
            step=step,
            split=log_split,
            accuracy=val_acc,
            loss_supervised=float(np.mean(sup_losses)),
            loss_consistency=float(np.mean(con_losses)) if con_losses else None,
            eta=schedule.threshold(step - 1) if cfg.use_tsa else 1.0,
            wall_time=round(time.perf_counter() - start, 6) if cfg.record_wall_time else None,
        ))
    return params, records


def _train_step(params, tensors, state, ds: Dataset, batch, eligible, cfg: TrainConfig,
                schedule: TsaSchedule, step: int):
    L = params.config.num_layers
    seed = cfg.seed
    unl = None
    if cfg.consistency_on:
        size = min(cfg.unlabeled_batch, eligible.size)
        unl = np.sort(substream(seed, "unlabeled", step).choice(eligible, size=size, replace=False))
    protected = batch if unl is None else np.union1d(batch, unl)

    for t in tensors:
        t.grad = None
    with nx.Tape() as tape:
        blocks, X = _draw_view(ds, batch, cfg, L, substream(seed, "sup", step), protected)
        masks = dropout_masks(params, blocks, substream(seed, "dropout", step, 0))
        logits = forward(params, blocks, X, masks)
        tsa_step = step if cfg.use_tsa else schedule.total_steps
        sup = tsa_masked_cross_entropy(logits, ds.labels[batch], schedule, tsa_step)
        con = None
        if unl is not None:
            views = []
            for i in range(cfg.consistency.num_views):
                blocks, X = _draw_view(ds, unl, cfg, L, substream(seed, "view", step, i), protected)
                masks = dropout_masks(params, blocks, substream(seed, "dropout", step, i + 1))
                views.append(nx.softmax_rows(forward(params, blocks, X, masks)))
            con = consistency_loss(views, cfg.consistency)
        loss = combine_losses(sup, con, cfg.consistency.alpha if con is not None else 0.0)
    if loss.requires_grad:
        nx.backward(tape, loss)
    grads = [t.grad if t.grad is not None else np.zeros_like(t.values) for t in tensors]
    adam_step(tensors, grads, state, cfg)
    return sup.item(), (con.item() if con is not None else None)


# ---------------------------------------------------------------------------
# harnesses


def train_ensemble(ds: Dataset, model_cfg: ModelConfig, cfg: TrainConfig,
                   seeds: Iterable[int]) -> list[ModelParams]:
    return [train(ds, model_cfg, replace(cfg, seed=s))[0] for s in seeds]


def grid_table(models: Sequence[ModelParams], ds: Dataset, targets, fanouts, max_views: int,
               seed: int, repeats: int = 1) -> list[dict]:
    """Grid rows with mean/std over ``repeats`` independent view draws."""
    tables = np.stack([grid_evaluate(models, ds, targets, fanouts, max_views, seed + r)
                       for r in range(repeats)])
    rows = []
    for j in range(max_views):
        for i in range(len(models)):
            cell = tables[:, i, j]
            rows.append({"views": j + 1, "model_count": i + 1,
                         "accuracy_mean": float(cell.mean()), "accuracy_std": float(cell.std())})
    return rows


@dataclass
class SweepResult:
    alpha: float
    val_accuracy: float
    trial_accuracies: list[float] = field(default_factory=list)


def sweep_alpha(ds: Dataset, model_cfg: ModelConfig, cfg: TrainConfig,
                alphas: Sequence[float] = ALPHA_GRID, trials: int = 2
                ) -> tuple[float, list[SweepResult]]:
    """Pick the consistency weight with the best mean final validation accuracy.

    Trial ``t`` uses seed ``cfg.seed + t``.  Ties go to the smaller alpha.
    """
    base = cfg.consistency or ConsistencyConfig(alpha=1.0)
    results = []
    for alpha in alphas:
        run_cfg = replace(cfg, consistency=replace(base, alpha=float(alpha)))
        accs = [train(ds, model_cfg, replace(run_cfg, seed=cfg.seed + t))[1][-1].accuracy
                for t in range(trials)]
        results.append(SweepResult(float(alpha), float(np.mean(accs)), accs))
    return select_alpha(results), results


def select_alpha(results: Sequence[SweepResult]) -> float:
    best = max(r.val_accuracy for r in results)
    return min(r.alpha for r in results if r.val_accuracy == best)


# ---------------------------------------------------------------------------
# output formats


def write_metrics_jsonl(path, records: Iterable[MetricsRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_metrics_jsonl(path) -> list[MetricsRecord]:
    with open(path, encoding="utf-8") as fh:
        return [MetricsRecord(**json.loads(line)) for line in fh if line.strip()]


def write_grid_csv(path, rows: Iterable[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_CSV_HEADER)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
