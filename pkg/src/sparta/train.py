"""Training harness: merge-bracketed forward/backward, Adam, early stopping, metrics."""

from __future__ import annotations

import contextlib
import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .adapter import (SparseDelta, SparsityConfig, gather_grads, inference_merge, merged,
                      sample_for_budget, sample_indices)
from .baselines import AdapterSpec, adapter_weights, init_lora, merge_lora
from .errors import ConfigError, DataError, NumericError, TrainingDiverged
from .model import ParamType, forward, pad_batch, parse_types
from .optim import AdamState, adam_step, clip_grad_norm

LR_GRID = (1e-3, 5e-4, 2e-4, 1e-4, 5e-5, 1e-5, 5e-6)

TARGET_SETS = (
    ("Wq, Wv", "wq,wv"),
    ("Wv, Wo", "wv,wo"),
    ("Wq, Wk, Wv", "wq,wk,wv"),
    ("Wq, Wk, Wo", "wq,wk,wo"),
    ("Wq, Wk, Wv, Wo", "wq,wk,wv,wo"),
    ("MLP", "mlp"),
    ("Wq, MLP", "wq,mlp"),
    ("Wk, MLP", "wk,mlp"),
    ("Wv, MLP", "wv,mlp"),
    ("Wo, MLP", "wo,mlp"),
    ("Wq, Wk, MLP", "wq,wk,mlp"),
    ("Wv, Wo, MLP", "wv,wo,mlp"),
    ("W, MLP, norm", "all"),
)


@dataclass(frozen=True)
class TrainConfig:
    adapter: AdapterSpec = field(default_factory=lambda: AdapterSpec("sparta", density=0.05))
    batch_size: int = 16
    max_epochs: int = 20
    max_steps: int | None = None
    lr: float = 1e-3
    weight_decay: float = 0.0
    dropout: float = 0.0
    max_grad_norm: float | None = None
    patience: int = 3
    eval_every: int = 50
    eval_batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        for f in ("batch_size", "max_epochs", "eval_every", "eval_batch_size"):
            if getattr(self, f) < 1:
                raise ConfigError(f"{f} must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigError("max_steps must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must be in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["adapter"] = self.adapter.to_dict()
        return d


@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float
    mcc: float
    mcc_defined: bool = True


@dataclass(frozen=True)
class EvalRecord:
    step: int
    train_loss: float | None  # None for the evaluation before the first step
    dev_loss: float
    dev_accuracy: float
    dev_mcc: float


@dataclass
class RunMetrics:
    evals: list = field(default_factory=list)
    best_step: int = 0
    best_dev_loss: float = math.inf
    test: EvalResult | None = None
    trainable: int = 0
    steps: int = 0
    stopped_early: bool = False
    wall_clock: float = field(default=0.0, compare=False)

    def to_dict(self, with_time=False):
        d = {"evals": [asdict(e) for e in self.evals], "best_step": self.best_step,
             "best_dev_loss": self.best_dev_loss, "trainable": self.trainable,
             "steps": self.steps, "stopped_early": self.stopped_early,
             "test": asdict(self.test) if self.test else None}
        if with_time:
            d["wall_clock"] = self.wall_clock
        return d


# -- metrics ------------------------------------------------------------------

def confusion_matrix(labels, preds, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def matthews_corrcoef(cm):
    """Multiclass MCC from a confusion matrix (rows: truth). Returns ``(mcc, defined)``.

    Degenerate matrices (a single class predicted or present) give ``(0.0, False)``.
    """
    cm = np.asarray(cm, dtype=np.float64)
    t = cm.sum(axis=1)
    p = cm.sum(axis=0)
    c = np.trace(cm)
    s = cm.sum()
    cov = c * s - p @ t
    denom = (s * s - p @ p) * (s * s - t @ t)
    if denom <= 0:
        return 0.0, False
    return float(np.clip(cov / math.sqrt(denom), -1.0, 1.0)), True


def classification_metrics(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    loss = float(np.mean(lse - z[np.arange(len(labels)), labels]))
    preds = logits.argmax(axis=1)
    mcc, ok = matthews_corrcoef(confusion_matrix(labels, preds, logits.shape[1]))
    return EvalResult(loss, float(np.mean(preds == labels)), mcc, ok)


def predict_logits(params, examples, weights=None, batch_size=128):
    out = []
    for i in range(0, len(examples), batch_size):
        chunk = examples[i: i + batch_size]
        ids, _ = pad_batch([ex.tokens for ex in chunk], params.config.max_seq_len)
        out.append(forward(params, ids, weights=weights).data)
    return np.concatenate(out) if out else np.zeros((0, params[params.head_name].shape[0]))


def evaluate(params, examples, weights=None, batch_size=128):
    """Mean cross-entropy, accuracy and MCC of ``params`` on labelled ``examples``."""
    if not examples:
        raise DataError("cannot evaluate an empty split")
    logits = predict_logits(params, examples, weights, batch_size)
    return classification_metrics(logits, [ex.label for ex in examples])


# -- per-method runtimes ------------------------------------------------------

class _Runtime:
    """Trainable state for one method; ``arrays`` are what Adam updates in place."""

    def __init__(self, work):
        self.work = work
        self.head_name = work.head_name

    @contextlib.contextmanager
    def eval_weights(self):
        yield None

    def loss_and_grads(self, ids, labels, dropout, rng):
        raise NotImplementedError


class SpartaRuntime(_Runtime):
    def __init__(self, work, index_set):
        super().__init__(work)
        self.index_set = index_set
        self.delta = SparseDelta.zeros(index_set)
        self.names = [t.name for t in index_set if t.m]
        self.arrays = [self.delta.values[n] for n in self.names] + [work[self.head_name]]
        self.labels = [f"delta:{n}" for n in self.names] + [self.head_name]

    @property
    def trainable(self):
        return self.index_set.m

    @contextlib.contextmanager
    def eval_weights(self):
        with merged(self.work, self.index_set, self.delta):
            yield None

    def loss_and_grads(self, ids, labels, dropout, rng):
        with merged(self.work, self.index_set, self.delta):
            leaves = {n: T.Tensor(self.work[n], requires_grad=True) for n in self.names}
            leaves[self.head_name] = T.Tensor(self.work[self.head_name], requires_grad=True)
            with T.Tape() as tape:
                loss = T.softmax_crossentropy(
                    forward(self.work, ids, weights=leaves, dropout=dropout, rng=rng), labels)
                tape.backward(loss)
        gd = gather_grads({n: leaves[n] for n in self.names}, _Subset(self.index_set, self.names))
        return float(loss.data), [gd.values[n] for n in self.names] + [leaves[self.head_name].grad]

    def snapshot(self):
        return {"delta": self.delta.copy(), "head": self.work[self.head_name].copy()}

    def restore(self, snap):
        for n, v in snap["delta"].values.items():
            self.delta.values[n][...] = v
        self.work[self.head_name][...] = snap["head"]

    def merged_params(self):
        return inference_merge(self.work, self.index_set, self.delta)


class _Subset:
    def __init__(self, index_set, names):
        self._items = [index_set.tensors[n] for n in names]

    def __iter__(self):
        return iter(self._items)


class LoraRuntime(_Runtime):
    def __init__(self, work, adapter):
        super().__init__(work)
        self.adapter = adapter
        keyed = adapter.arrays()
        self.keys = [k for k, _ in keyed]
        self.arrays = [a for _, a in keyed] + [work[self.head_name]]
        self.labels = self.keys + [self.head_name]

    @property
    def trainable(self):
        return self.adapter.num_params

    @contextlib.contextmanager
    def eval_weights(self):
        yield adapter_weights(self.work, self.adapter)

    def loss_and_grads(self, ids, labels, dropout, rng):
        leaves = {k: T.Tensor(a, requires_grad=True) for k, a in zip(self.keys, self.arrays)}
        head = T.Tensor(self.work[self.head_name], requires_grad=True)
        with T.Tape() as tape:
            weights = adapter_weights(self.work, self.adapter, leaves)
            weights[self.head_name] = head
            loss = T.softmax_crossentropy(
                forward(self.work, ids, weights=weights, dropout=dropout, rng=rng), labels)
            tape.backward(loss)
        return float(loss.data), [leaves[k].grad for k in self.keys] + [head.grad]

    def snapshot(self):
        return {"adapter": self.adapter.copy(), "head": self.work[self.head_name].copy()}

    def restore(self, snap):
        for (_, dst), (_, src) in zip(self.adapter.arrays(), snap["adapter"].arrays()):
            dst[...] = src
        self.work[self.head_name][...] = snap["head"]

    def merged_params(self):
        return merge_lora(self.work, self.adapter)


class DenseRuntime(_Runtime):
    """Full fine-tuning (every tensor) or head-only training."""

    def __init__(self, work, types):
        super().__init__(work)
        self.names = [k for k, e in work.entries() if e.ptype in types]
        self.arrays = [work[n] for n in self.names]
        self.labels = list(self.names)

    @property
    def trainable(self):
        return sum(a.size for n, a in zip(self.names, self.arrays) if n != self.head_name)

    def loss_and_grads(self, ids, labels, dropout, rng):
        leaves = {n: T.Tensor(self.work[n], requires_grad=True) for n in self.names}
        with T.Tape() as tape:
            loss = T.softmax_crossentropy(
                forward(self.work, ids, weights=leaves, dropout=dropout, rng=rng), labels)
            tape.backward(loss)
        return float(loss.data), [leaves[n].grad for n in self.names]

    def snapshot(self):
        return {n: self.work[n].copy() for n in self.names}

    def restore(self, snap):
        for n, v in snap.items():
            self.work[n][...] = v

    def merged_params(self):
        return self.work.copy()


def build_runtime(params, spec, seed=0, index_set=None):
    """Fresh trainable state on a private copy of ``params``."""
    work = params.copy()
    if spec.method == "sparta":
        if index_set is None:
            if spec.budget is not None:
                index_set = sample_for_budget(work, spec.targets, spec.budget, seed)
            else:
                index_set = sample_indices(work, SparsityConfig(spec.density, spec.targets, seed))
        return SpartaRuntime(work, index_set)
    if spec.method in ("lora", "dora"):
        return LoraRuntime(work, init_lora(work, spec.targets, spec.rank, spec.alpha, seed,
                                           dora=spec.method == "dora"))
    if spec.method == "full":
        # --targets all leaves the embedding frozen, which matches sparta at k = 1
        return DenseRuntime(work, spec.targets | {ParamType.HEAD})
    return DenseRuntime(work, frozenset({ParamType.HEAD}))


@dataclass
class TrainResult:
    spec: AdapterSpec
    runtime: _Runtime
    metrics: RunMetrics

    @property
    def head(self):
        return self.runtime.work[self.runtime.head_name]

    def evaluate(self, examples, batch_size=128):
        with self.runtime.eval_weights() as w:
            return evaluate(self.runtime.work, examples, w, batch_size)

    def merged_params(self):
        return self.runtime.merged_params()


def _batches(examples, batch_size, rng):
    order = rng.permutation(len(examples))
    for i in range(0, len(order), batch_size):
        yield [examples[j] for j in order[i: i + batch_size]]


def train(params, splits, cfg, index_set=None, log=None):
    """Fine-tune ``params`` (classification head already swapped in) on ``splits``.

    Each step merges the trainable state, runs forward/backward on a batch,
    restores the frozen weights, then applies Adam. Dev loss is checked every
    ``eval_every`` steps; training stops after ``patience`` checks without
    improvement and the best checkpoint is restored.
    """
    if not splits.dev:
        raise ConfigError("early stopping needs a non-empty dev split")
    head_rows = params[params.head_name].shape[0]
    if head_rows != splits.num_classes:
        raise ConfigError(f"head has {head_rows} rows but the task has {splits.num_classes} "
                          "classes; swap the head first")
    start = time.perf_counter()
    rt = build_runtime(params, cfg.adapter, cfg.seed, index_set)
    state = AdamState.for_params(rt.arrays, lr=cfg.lr, weight_decay=cfg.weight_decay)
    data_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    metrics = RunMetrics(trainable=rt.trainable)
    best = rt.snapshot()
    since_best, running, step = 0, [], 0
    max_len = params.config.max_seq_len

    def check():
        nonlocal best, since_best, running
        with rt.eval_weights() as w:
            dev = evaluate(rt.work, splits.dev, w, cfg.eval_batch_size)
        rec = EvalRecord(step, float(np.mean(running)) if running else None,
                         dev.loss, dev.accuracy, dev.mcc)
        running = []
        metrics.evals.append(rec)
        if log:
            log(rec)
        if dev.loss < metrics.best_dev_loss:
            metrics.best_dev_loss, metrics.best_step = dev.loss, step
            best, since_best = rt.snapshot(), 0
        else:
            since_best += 1
        return since_best >= cfg.patience

    check()
    stop = False
    for _ in range(cfg.max_epochs):
        for batch in _batches(splits.train, cfg.batch_size, data_rng):
            ids, _ = pad_batch([ex.tokens for ex in batch], max_len)
            labels = np.array([ex.label for ex in batch])
            try:
                loss, grads = rt.loss_and_grads(ids, labels, cfg.dropout, drop_rng)
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite training loss at step {step + 1}")
                if cfg.max_grad_norm:
                    clip_grad_norm(grads, cfg.max_grad_norm)
                adam_step(state, rt.arrays, grads, rt.labels)
            except NumericError as exc:
                rt.restore(best)
                metrics.steps, metrics.wall_clock = step, time.perf_counter() - start
                raise TrainingDiverged(str(exc), snapshot=best, metrics=metrics) from exc
            step += 1
            running.append(loss)
            if step % cfg.eval_every == 0 and check():
                stop = metrics.stopped_early = True
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
            if stop:
                break
        if stop:
            break
    if step % cfg.eval_every:
        check()
    rt.restore(best)
    metrics.steps = step
    if splits.test:
        with rt.eval_weights() as w:
            metrics.test = evaluate(rt.work, splits.test, w, cfg.eval_batch_size)
    metrics.wall_clock = time.perf_counter() - start
    return TrainResult(cfg.adapter, rt, metrics)


# -- ablation and sweeps ------------------------------------------------------

def ablate_targets(params, splits, budget, cfg, target_sets=TARGET_SETS, seeds=(0,),
                   tol=0.02):
    """Train one sparse run per target set and seed at a fixed trainable budget.

    Returns rows ``{label, targets, capacity, density, realized_m, loss, accuracy}``
    averaged over seeds, sorted by test (or dev) loss.
    """
    rows = []
    for label, types in target_sets:
        targets = parse_types(types)
        capacity = sum(params[n].size for n, e in params.entries() if e.ptype in targets)
        if budget > capacity:
            raise ConfigError(f"budget {budget} exceeds capacity {capacity} of target set {label!r}")
        realized, losses, accs = [], [], []
        for seed in seeds:
            phi = sample_for_budget(params, targets, budget, seed, tol)
            spec = AdapterSpec("sparta", density=phi.density, targets=targets, budget=budget)
            res = train(params, splits, replace(cfg, adapter=spec, seed=seed), index_set=phi)
            final = res.metrics.test or res.evaluate(splits.dev)
            realized.append(phi.m)
            losses.append(final.loss)
            accs.append(final.accuracy)
        rows.append({"label": label, "targets": sorted(t.value for t in targets),
                     "capacity": capacity, "density": budget / capacity,
                     "realized_m": float(np.mean(realized)), "realized_all": realized,
                     "loss": float(np.mean(losses)), "accuracy": float(np.mean(accs))})
    rows.sort(key=lambda r: (r["loss"], r["label"]))
    for rank, row in enumerate(rows, 1):
        row["rank"] = rank
    return rows


def format_ablation(rows):
    lines = [f"{'rank':>4}  {'targets':<16} {'m':>8} {'density':>9} {'loss':>7} {'acc':>7}"]
    for r in rows:
        lines.append(f"{r['rank']:>4}  {r['label']:<16} {r['realized_m']:>8.0f} "
                     f"{r['density']:>9.5f} {r['loss']:>7.3f} {r['accuracy']:>7.1%}")
    return "\n".join(lines) + "\n"


def sweep(params, splits, cfg, lrs=LR_GRID):
    """One run per learning rate; the best is the lowest best-dev-loss."""
    results = []
    for lr in lrs:
        res = train(params, splits, replace(cfg, lr=lr))
        results.append({"lr": lr, "best_dev_loss": res.metrics.best_dev_loss,
                        "best_step": res.metrics.best_step,
                        "test": asdict(res.metrics.test) if res.metrics.test else None})
    best = min(results, key=lambda r: r["best_dev_loss"])
    return results, best
