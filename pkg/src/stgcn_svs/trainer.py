"""Minibatch Adam training, evaluation and k-fold cross-validation.

One seeded Generator drives parameter init, epoch shuffling and dropout in a
fixed order, so a run is bit-reproducible and a checkpointed optimizer/RNG
snapshot resumes the exact trajectory.  Epochs draw `steps_per_epoch` batches;
when the dataset is smaller than batch*steps the shuffled index queue refills
with fresh permutations (leftovers are dropped at the epoch boundary, which
keeps snapshots small).
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from threadpoolctl import threadpool_limits

from .checkpoint import Checkpoint, decode_array, encode_array, save_checkpoint
from .errors import (
    DimensionMismatch,
    NonFiniteValue,
    SingleClassDataset,
    StgcnError,
)
from . import autodiff as ad
from .model import (
    ModelConfig,
    ModelParams,
    NormStats,
    UNSTABLE,
    bank_for,
    forward_batch,
)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 100
    epochs: int = 30
    steps_per_epoch: int = 48
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    folds: int = 5
    accept_threshold: float = 0.95

    def __post_init__(self):
        if self.batch_size < 1:
            raise StgcnError("batch_size must be >= 1")
        # learning_rate 0 is allowed so the degenerate no-op run stays testable
        if self.learning_rate < 0:
            raise StgcnError("learning_rate must be >= 0")
        if self.epochs < 1 or self.steps_per_epoch < 1:
            raise StgcnError("epochs and steps_per_epoch must be >= 1")
        if self.folds < 2:
            raise StgcnError("folds must be >= 2")


@dataclass
class EpochStats:
    epoch: int
    loss: float
    train_acc: float
    test_acc: float | None
    seconds: float


@dataclass(frozen=True)
class Metrics:
    """Confusion counts with 'unstable' as the positive class."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0 or self.count == 0:
            raise StgcnError("invalid confusion counts")

    @property
    def count(self):
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self):
        return (self.tp + self.tn) / self.count

    def to_dict(self):
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn,
                "count": self.count, "accuracy": self.accuracy}


class AdamState:
    def __init__(self, params: ModelParams):
        self.t = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}


def adam_step(params: ModelParams, state: AdamState, cfg: TrainConfig):
    """One Adam update from the gradients accumulated in params."""
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1 ** state.t
    bc2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = p.grad
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)
        if not np.isfinite(p.data).all():
            raise NonFiniteValue(f"parameter {name} after adam step {state.t}")


def _epoch_index_plan(rng, size, batch, steps):
    """Batches for one epoch: shuffled queue, refilled with fresh permutations."""
    plan = []
    queue = rng.permutation(size)
    pos = 0
    for _ in range(steps):
        need = batch
        parts = []
        while need > 0:
            if pos >= queue.size:
                queue = rng.permutation(size)
                pos = 0
            take = min(need, queue.size - pos)
            parts.append(queue[pos:pos + take])
            pos += take
            need -= take
        plan.append(np.concatenate(parts) if len(parts) > 1 else parts[0])
    return plan


def _predict(params, stats, bank, panel, batch_size=256):
    preds = np.empty(panel.shape[0], dtype=np.int64)
    for lo in range(0, panel.shape[0], batch_size):
        out = forward_batch(panel[lo:lo + batch_size], None, bank, params, stats)
        preds[lo:lo + out["predicted"].size] = out["predicted"]
    return preds


def _grouped_banks(dataset, cheb_order):
    groups = dataset.topology_groups()
    return groups, [bank_for(topo, cheb_order) for topo, _ in groups]


def _predict_grouped(params, stats, groups, banks, panel, batch_size=256):
    preds = np.empty(panel.shape[0], dtype=np.int64)
    for (_, idx), bank in zip(groups, banks):
        if idx.size == 0:
            continue
        preds[idx] = _predict(params, stats, bank, panel[idx], batch_size)
    return preds


def _confusion(preds, labels) -> Metrics:
    pos, truth = preds == UNSTABLE, labels == UNSTABLE
    return Metrics(
        tp=int(np.sum(pos & truth)),
        tn=int(np.sum(~pos & ~truth)),
        fp=int(np.sum(pos & ~truth)),
        fn=int(np.sum(~pos & truth)),
    )


@dataclass
class TrainResult:
    config: ModelConfig
    params: ModelParams
    stats: NormStats
    history: list
    trainer_state: dict
    best_values: dict | None = None
    best_epoch: int | None = None
    best_test_acc: float | None = None
    seed: int = 0
    accept_threshold: float = 0.95

    @property
    def accepted(self):
        return self.best_test_acc is not None and self.best_test_acc >= self.accept_threshold

    def as_checkpoint(self, with_state=True) -> Checkpoint:
        return Checkpoint(self.config, self.params, self.stats,
                          self.trainer_state if with_state else None)

    def best_params(self) -> ModelParams:
        values = self.best_values if self.best_values is not None else self.params.copy_values()
        return ModelParams.from_values(self.config, values)

    def save(self, path, with_state=True):
        save_checkpoint(path, self.config, self.params, self.stats,
                        self.trainer_state if with_state else None)

    def save_best(self, path):
        save_checkpoint(path, self.config, self.best_params(), self.stats, None)


def _values_to_b64(values):
    return {name: encode_array(arr) for name, arr in values.items()}


def _values_from_b64(blob, params: ModelParams):
    return {name: decode_array(blob[name], p.data.shape) for name, p in params.items()}


def _check_dataset(dataset, config: ModelConfig):
    if len(dataset) == 0:
        raise StgcnError("empty dataset")
    if dataset.window_len != config.window_len or dataset.n != config.num_buses:
        raise DimensionMismatch(
            f"dataset (N={dataset.window_len}, n={dataset.n}) vs "
            f"config (N={config.window_len}, n={config.num_buses})"
        )


def train(dataset, model_cfg: ModelConfig = None, train_cfg: TrainConfig = None,
          test_dataset=None, topology=None, resume: Checkpoint = None,
          stop_after_epoch=None) -> TrainResult:
    """Train on a labeled dataset; dropout active, metrics recorded per epoch.

    `resume` takes a checkpoint whose trainer_state was saved at an epoch
    boundary and continues the identical trajectory up to train_cfg.epochs.
    """
    train_cfg = train_cfg or TrainConfig()
    topology = topology if topology is not None else dataset.topology
    model_cfg = model_cfg or ModelConfig(num_buses=topology.n, window_len=dataset.window_len)
    _check_dataset(dataset, model_cfg)
    labels = dataset.labels()
    classes = np.unique(labels)
    if classes.size < 2:
        raise SingleClassDataset(f"dataset has only class {classes.tolist()}")
    minority = min(np.mean(labels == c) for c in classes)
    if minority < 0.2:
        warnings.warn(f"minority class is only {minority:.1%} of the dataset")

    rng = np.random.default_rng(train_cfg.seed)
    panel = dataset.panel()
    if resume is not None:
        if resume.trainer_state is None:
            raise StgcnError("checkpoint has no trainer state to resume from")
        if resume.config != model_cfg:
            raise DimensionMismatch("resume checkpoint config differs from model_cfg")
        params = resume.params
        stats = resume.stats
        state = AdamState(params)
        saved = resume.trainer_state
        state.t = saved["adam"]["t"]
        for name, p in params.items():
            state.m[name] = decode_array(saved["adam"]["m"][name], p.data.shape)
            state.v[name] = decode_array(saved["adam"]["v"][name], p.data.shape)
        rng.bit_generator.state = saved["rng_state"]
        start_epoch = saved["epochs_done"]
        best_values = (_values_from_b64(saved["best"]["params"], params)
                       if saved.get("best") else None)
        best_epoch = saved["best"]["epoch"] if saved.get("best") else None
        best_test_acc = saved["best"]["test_acc"] if saved.get("best") else None
    else:
        params = ModelParams.init(model_cfg, rng)
        stats = NormStats.from_panel(panel)
        state = AdamState(params)
        start_epoch = 0
        best_values, best_epoch, best_test_acc = None, None, None

    # inputs normalized once up front; per-batch forwards then use identity stats
    xn = (panel - stats.mean[None, :, None, None]) / stats.std[None, :, None, None]
    identity = NormStats.identity()
    # one filter bank per topology variant; the usual case is a single group
    if topology is not dataset.topology:
        groups = [(topology, np.arange(len(dataset)))]
        banks = [bank_for(topology, model_cfg.cheb_order)]
    else:
        groups, banks = _grouped_banks(dataset, model_cfg.cheb_order)
    sample_group = np.zeros(len(dataset), dtype=np.int64)
    for gi, (_, idx) in enumerate(groups):
        sample_group[idx] = gi
    if test_dataset is not None:
        _check_dataset(test_dataset, model_cfg)
        test_groups, test_banks = _grouped_banks(test_dataset, model_cfg.cheb_order)
        test_panel = test_dataset.panel()
        test_labels = test_dataset.labels()

    history = []
    last_epoch = train_cfg.epochs if stop_after_epoch is None else min(
        stop_after_epoch, train_cfg.epochs)
    # single-threaded BLAS: these matmul shapes lose to thread wakeup latency
    with threadpool_limits(limits=1, user_api="blas"):
        for epoch in range(start_epoch + 1, last_epoch + 1):
            t0 = time.perf_counter()
            losses = []
            correct = seen = 0
            for idx in _epoch_index_plan(rng, len(dataset), train_cfg.batch_size,
                                         train_cfg.steps_per_epoch):
                if len(groups) == 1:
                    out = forward_batch(xn[idx], labels[idx], banks[0], params,
                                        identity, training=True, rng=rng)
                    step_loss = out["loss"].item()
                    ad.backward(out["loss"], release=True)
                    step_correct = int(np.sum(out["predicted"] == labels[idx]))
                else:
                    # gradients accumulate across per-topology sub-batches,
                    # each weighted so the total is the batch-mean loss
                    gids = sample_group[idx]
                    step_loss = 0.0
                    step_correct = 0
                    for gi in np.unique(gids):
                        sub = idx[gids == gi]
                        out = forward_batch(xn[sub], labels[sub], banks[gi], params,
                                            identity, training=True, rng=rng)
                        part = ad.scalar_mul(out["loss"], sub.size / idx.size)
                        step_loss += part.item()
                        ad.backward(part, release=True)
                        step_correct += int(np.sum(out["predicted"] == labels[sub]))
                adam_step(params, state, train_cfg)
                params.zero_grads()
                losses.append(step_loss)
                correct += step_correct
                seen += idx.size
            test_acc = None
            if test_dataset is not None:
                preds = _predict_grouped(params, stats, test_groups, test_banks,
                                         test_panel)
                test_acc = float(np.mean(preds == test_labels))
                if best_test_acc is None or test_acc > best_test_acc:
                    best_test_acc, best_epoch = test_acc, epoch
                    best_values = params.copy_values()
            history.append(EpochStats(
                epoch=epoch,
                loss=float(np.mean(losses)),
                train_acc=correct / seen,
                test_acc=test_acc,
                seconds=time.perf_counter() - t0,
            ))

    trainer_state = {
        "epochs_done": last_epoch,
        "adam": {
            "t": state.t,
            "m": {name: encode_array(arr) for name, arr in state.m.items()},
            "v": {name: encode_array(arr) for name, arr in state.v.items()},
        },
        "rng_state": rng.bit_generator.state,
        "best": None if best_values is None else {
            "epoch": best_epoch,
            "test_acc": best_test_acc,
            "params": _values_to_b64(best_values),
        },
    }
    return TrainResult(
        config=model_cfg, params=params, stats=stats, history=history,
        trainer_state=trainer_state, best_values=best_values,
        best_epoch=best_epoch, best_test_acc=best_test_acc,
        seed=train_cfg.seed, accept_threshold=train_cfg.accept_threshold,
    )


def evaluate(ckpt, dataset, batch_size=256) -> Metrics:
    """Deterministic inference-mode metrics; topology comes from the dataset
    (per-sample topologies are honored for topology-diverse datasets)."""
    if len(dataset) == 0:
        raise StgcnError("empty dataset")
    _check_dataset(dataset, ckpt.config)
    groups, banks = _grouped_banks(dataset, ckpt.config.cheb_order)
    with threadpool_limits(limits=1, user_api="blas"):
        preds = _predict_grouped(ckpt.params, ckpt.stats, groups, banks,
                                 dataset.panel(), batch_size)
    return _confusion(preds, dataset.labels())


# ---------------------------------------------------------------------------
# k-fold cross-validation
# ---------------------------------------------------------------------------

@dataclass
class FoldOutcome:
    fold: int
    test_indices: list
    history: list
    final_values: dict
    best_values: dict | None
    stats_mean: list
    stats_std: list
    final_train_acc: float = 0.0
    final_test_acc: float = 0.0
    final_loss: float = 0.0
    best_test_acc: float | None = None

    def params(self, config: ModelConfig) -> ModelParams:
        return ModelParams.from_values(config, self.final_values)

    def checkpoint(self, config: ModelConfig) -> Checkpoint:
        stats = NormStats(mean=np.array(self.stats_mean), std=np.array(self.stats_std))
        return Checkpoint(config, self.params(config), stats)


@dataclass
class KFoldResult:
    config: ModelConfig
    folds: list
    mean_train_acc: float
    mean_test_acc: float
    mean_final_loss: float

    def best_fold(self) -> FoldOutcome:
        return max(self.folds, key=lambda f: f.final_test_acc)


def fold_seed(seed, fold_index):
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(fold_index,)).generate_state(1)[0])


def fold_partition(size, k, seed):
    """Disjoint, exhaustive folds with sizes differing by at most one."""
    if k > size:
        raise StgcnError(f"k={k} exceeds dataset size {size}")
    perm = np.random.default_rng(seed).permutation(size)
    return [np.sort(part) for part in np.array_split(perm, k)]


def _run_fold(args):
    fold_idx, train_ds, test_ds, model_cfg, train_cfg = args
    result = train(train_ds, model_cfg, train_cfg, test_dataset=test_ds)
    final = result.history[-1]
    return FoldOutcome(
        fold=fold_idx,
        test_indices=[],
        history=result.history,
        final_values=result.params.copy_values(),
        best_values=result.best_values,
        stats_mean=result.stats.mean.tolist(),
        stats_std=result.stats.std.tolist(),
        final_train_acc=final.train_acc,
        final_test_acc=final.test_acc,
        final_loss=final.loss,
        best_test_acc=result.best_test_acc,
    )


def worker_count(k):
    env = os.environ.get("STGCN_THREADS")
    try:
        cap = int(env) if env else (os.cpu_count() or 1)
    except ValueError:
        raise StgcnError(f"STGCN_THREADS must be an integer, got {env!r}")
    return max(1, min(k, cap))


def kfold(dataset, k=None, model_cfg: ModelConfig = None, train_cfg: TrainConfig = None,
          workers=None) -> KFoldResult:
    """k-fold cross-validation; folds use independent derived seeds so serial
    and parallel execution produce identical results."""
    train_cfg = train_cfg or TrainConfig()
    k = k or train_cfg.folds
    model_cfg = model_cfg or ModelConfig(num_buses=dataset.n, window_len=dataset.window_len)
    parts = fold_partition(len(dataset), k, train_cfg.seed)
    tasks = []
    for i, test_idx in enumerate(parts):
        mask = np.ones(len(dataset), dtype=bool)
        mask[test_idx] = False
        train_ds = dataset.subset(np.flatnonzero(mask))
        test_ds = dataset.subset(test_idx)
        cfg_i = replace(train_cfg, seed=fold_seed(train_cfg.seed, i))
        tasks.append((i, train_ds, test_ds, model_cfg, cfg_i))

    workers = workers or worker_count(k)
    if workers > 1:
        import multiprocessing

        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(max_workers=workers, mp_context=ctx) as pool:
            outcomes = list(pool.map(_run_fold, tasks))
    else:
        outcomes = [_run_fold(t) for t in tasks]
    for outcome, part in zip(outcomes, parts):
        outcome.test_indices = [int(i) for i in part]
    return KFoldResult(
        config=model_cfg,
        folds=outcomes,
        mean_train_acc=float(np.mean([o.final_train_acc for o in outcomes])),
        mean_test_acc=float(np.mean([o.final_test_acc for o in outcomes])),
        mean_final_loss=float(np.mean([o.final_loss for o in outcomes])),
    )


# ---------------------------------------------------------------------------
# metrics files
# ---------------------------------------------------------------------------

METRICS_HEADER = "epoch,loss,train_acc,test_acc,seconds"


def metrics_csv_text(history):
    lines = [METRICS_HEADER]
    for h in history:
        test = "" if h.test_acc is None else repr(float(h.test_acc))
        lines.append(f"{h.epoch},{float(h.loss)!r},{float(h.train_acc)!r},{test},{float(h.seconds)!r}")
    return "\n".join(lines) + "\n"


def parse_metrics_csv(text):
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != METRICS_HEADER:
        raise StgcnError("bad metrics CSV header")
    history = []
    for ln in lines[1:]:
        epoch, loss, train_acc, test_acc, seconds = ln.split(",")
        history.append(EpochStats(
            epoch=int(epoch), loss=float(loss), train_acc=float(train_acc),
            test_acc=None if test_acc == "" else float(test_acc),
            seconds=float(seconds),
        ))
    return history
