"""Few-shot sampling and the masked-adapter fine-tuning loop."""

from __future__ import annotations

import copy
import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .adapters import AdapterBank, LoraAdapter, adapter_delta, trainable_masks, trainable_parameter_count
from .analysis import residual_norm_per_layer
from .model import BaseModel, Dataset, accuracy, forward
from .optim import AdamWState, adamw_step, cosine_lr
from .tensor import ContractError

LR_GRID = (1e-4, 5e-4, 1e-3, 5e-3)
SWEEP_FIELDS = ["method", "dataset", "seed", "lr", "val_acc", "test_acc", "params", "runtime_s"]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 0.0
    epochs: int = 200
    batch_size: int | None = None  # None: the whole training set per step
    seed: int = 0
    scheduler: str = "cosine"
    early_stop_patience: int = 20
    rank: int = 4
    alpha: float = 8.0
    tau: float = 0.90

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ContractError("learning_rate must be positive")
        if self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.early_stop_patience < 1:
            raise ContractError("early_stop_patience must be >= 1")
        if self.scheduler not in ("cosine", "constant"):
            raise ContractError(f"unknown scheduler {self.scheduler!r}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")


@dataclass
class RunRecord:
    config: dict
    method: str = "lora"
    dataset: str = ""
    seed: int = 0
    train_loss: list[float] = field(default_factory=list)
    val_acc: list[float] = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = 0.0
    test_acc: float | None = None
    trainable_params: int = 0
    residual_norms: list[float] = field(default_factory=list)
    wall_time: float = 0.0
    status: str = "ok"

    def to_json(self, include_time: bool = True) -> str:
        d = asdict(self)
        if not include_time:
            d.pop("wall_time")
        return json.dumps(d, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))


def few_shot_sample(data: Dataset, shots: int, seed: int) -> tuple[Dataset, Dataset]:
    """``shots`` samples per class for training plus a disjoint ``shots`` per class for validation."""
    if shots < 1:
        raise ContractError("shots must be >= 1")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in np.unique(data.y):
        idx = np.flatnonzero(data.y == c)
        if idx.size < 2 * shots:
            raise ContractError(f"class {c} has {idx.size} samples, need {2 * shots}")
        idx = rng.permutation(idx)
        train_idx.extend(np.sort(idx[:shots]))
        val_idx.extend(np.sort(idx[shots : 2 * shots]))
    return data.subset(train_idx), data.subset(val_idx)


@dataclass
class _TaskRun:
    """Optimisation state of one adapter set on one task."""

    name: str
    adapters: list[LoraAdapter]
    masks: list
    train: Dataset
    val: Dataset
    test: Dataset | None
    rng: np.random.Generator
    state: AdamWState = field(default_factory=AdamWState)
    record: RunRecord | None = None
    best: list | None = None
    best_key: tuple = (-1.0, 0.0)
    stale: int = 0
    done: bool = False
    step: int = 0
    losses: list = field(default_factory=list)

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for l, a in enumerate(self.adapters):
            out[f"B{l}"], out[f"A{l}"] = a.B, a.A
        return out

    def trainable(self) -> dict[str, np.ndarray]:
        out = {}
        for l, (a, u) in enumerate(zip(self.adapters, self.masks)):
            t = trainable_masks(a, u)
            out[f"B{l}"], out[f"A{l}"] = t["B"], t["A"]
        return out

    def deltas(self):
        return [adapter_delta(a.B, a.A, a.scaling, u) for a, u in zip(self.adapters, self.masks)]

    def batches(self, batch_size: int | None) -> list[np.ndarray]:
        n = len(self.train)
        if batch_size is None or batch_size >= n:
            return [np.arange(n)]
        order = self.rng.permutation(n)
        return [order[s : s + batch_size] for s in range(0, n, batch_size)]


def _val_key(model: BaseModel, run: _TaskRun) -> tuple[float, float]:
    deltas = run.deltas()
    logits = T.value(forward(model, run.val.x, deltas))
    acc = float(np.mean(np.argmax(logits, axis=0) == run.val.y))
    loss = float(T.value(T.softmax_cross_entropy(logits, run.val.y))[0, 0])
    return acc, -loss


def _train_step(model: BaseModel, run: _TaskRun, idx: np.ndarray, lr: float, config: TrainConfig,
                trainable: dict) -> float:
    tape = T.Tape()
    leaves = {}
    deltas = []
    for l, (a, u) in enumerate(zip(run.adapters, run.masks)):
        B, A = tape.leaf(a.B), tape.leaf(a.A)
        leaves[f"B{l}"], leaves[f"A{l}"] = B, A
        deltas.append(adapter_delta(B, A, a.scaling, u))
    logits = forward(model, run.train.x[:, idx], deltas)
    loss = T.softmax_cross_entropy(logits, run.train.y[idx])
    T.backward(tape, loss)
    grads = {k: tape.grad(v) for k, v in leaves.items()}
    adamw_step(run.params(), grads, run.state, lr, weight_decay=config.weight_decay, trainable=trainable)
    return float(loss.value[0, 0])


def _snapshot(adapters: Sequence[LoraAdapter]) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(a.B.copy(), a.A.copy()) for a in adapters]


def _restore(adapters: Sequence[LoraAdapter], snap) -> None:
    for a, (B, A) in zip(adapters, snap):
        a.B[...] = B
        a.A[...] = A


def _run_tasks(model: BaseModel, runs: list[_TaskRun], config: TrainConfig, method: str) -> dict[str, RunRecord]:
    t0 = time.perf_counter()
    trainables = {r.name: r.trainable() for r in runs}
    n_batches = {r.name: (1 if config.batch_size is None else -(-len(r.train) // config.batch_size)) for r in runs}
    for r in runs:
        r.record = RunRecord(config=asdict(config), method=method, dataset=r.name, seed=config.seed)
        r.record.trainable_params = sum(trainable_parameter_count(a, u) for a, u in zip(r.adapters, r.masks))
        key = _val_key(model, r)
        r.best_key, r.best = key, _snapshot(r.adapters)
        r.record.best_val_acc = key[0]

    for epoch in range(1, config.epochs + 1):
        active = [r for r in runs if not r.done]
        if not active:
            break
        plans = {r.name: r.batches(config.batch_size) for r in active}
        for r in active:
            r.losses = []
        # round-robin: batch b of every task before batch b+1 of any
        for b in range(max(len(p) for p in plans.values())):
            for r in active:
                if r.done or b >= len(plans[r.name]):
                    continue
                total = config.epochs * n_batches[r.name]
                lr = (cosine_lr(r.step, total, config.learning_rate) if config.scheduler == "cosine"
                      else config.learning_rate)
                try:
                    r.losses.append(_train_step(model, r, plans[r.name][b], lr, config, trainables[r.name]))
                except FloatingPointError:
                    r.record.status = "diverged"
                    r.done = True
                    continue
                r.step += 1
        for r in active:
            if r.done:
                continue
            r.record.train_loss.append(float(np.mean(r.losses)))
            try:
                key = _val_key(model, r)
            except FloatingPointError:
                r.record.status = "diverged"
                r.done = True
                continue
            r.record.val_acc.append(key[0])
            if key > r.best_key:
                r.best_key, r.best, r.stale = key, _snapshot(r.adapters), 0
                r.record.best_epoch = epoch
                r.record.best_val_acc = key[0]
            else:
                r.stale += 1
                if r.stale >= config.early_stop_patience:
                    r.done = True

    out = {}
    elapsed = time.perf_counter() - t0
    for r in runs:
        _restore(r.adapters, r.best)
        rec = r.record
        if r.test is not None:
            rec.test_acc = accuracy(model, r.deltas(), r.test)
        rec.residual_norms = residual_norm_per_layer(r.adapters, r.masks)
        rec.wall_time = elapsed
        out[r.name] = rec
    return out


def train_adapters(
    model: BaseModel,
    adapters: list[LoraAdapter],
    masks: list | None,
    train: Dataset,
    val: Dataset,
    config: TrainConfig,
    *,
    test: Dataset | None = None,
    method: str = "lora",
    name: str = "task",
) -> RunRecord:
    """Fine-tune ``adapters`` in place under frozen ``masks``.

    Training stops early after ``early_stop_patience`` epochs without a better
    validation (accuracy, then loss); the best adapters are restored at the end.
    """
    if masks is None:
        masks = [None] * len(adapters)
    if len(adapters) != model.depth or len(masks) != model.depth:
        raise ContractError("one adapter and one mask per layer")
    for l, (a, (m, n)) in enumerate(zip(adapters, model.dims)):
        if a.shape != (m, n):
            raise ContractError(f"adapter {l} shape {a.shape} does not match layer {(m, n)}")
    run = _TaskRun(name, adapters, list(masks), train, val, test, np.random.default_rng(config.seed))
    return _run_tasks(model, [run], config, method)[name]


def multi_task_train(
    model: BaseModel,
    bank: AdapterBank,
    tasks: Mapping[str, tuple[Dataset, Dataset, Dataset | None]],
    config: TrainConfig,
    method: str = "multi",
) -> dict[str, RunRecord]:
    """Train one bank member per task, alternating batches across tasks.

    Each batch only updates its own task's adapters; every task gets its own
    optimiser state, early stopping and shuffling stream (all seeded alike).
    """
    if set(tasks) != set(bank.names()):
        raise ContractError("need exactly one adapter set per task")
    runs = []
    for name in bank.names():
        adapters, masks = bank[name]
        train, val, test = tasks[name]
        runs.append(_TaskRun(name, adapters, list(masks), train, val, test, np.random.default_rng(config.seed)))
    return _run_tasks(model, runs, config, method)


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepSummary:
    records: list[RunRecord]
    top_k: int
    groups: dict[str, dict] = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [
            {
                "method": r.method,
                "dataset": r.dataset,
                "seed": r.seed,
                "lr": r.config.get("learning_rate"),
                "val_acc": r.best_val_acc,
                "test_acc": r.test_acc,
                "params": r.trainable_params,
                "runtime_s": r.wall_time,
            }
            for r in self.records
        ]

    def to_csv(self, include_time: bool = True) -> str:
        fields = SWEEP_FIELDS if include_time else SWEEP_FIELDS[:-1]
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=fields, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for row in self.rows():
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
        return buf.getvalue()


def top_k_by_validation(records: Sequence[RunRecord], k: int) -> list[RunRecord]:
    """Highest best-validation accuracy first; ties keep run order."""
    order = sorted(range(len(records)), key=lambda i: (-records[i].best_val_acc, i))
    return [records[i] for i in order[:k]]


def summarize(records: Sequence[RunRecord], top_k: int) -> dict[str, dict]:
    groups: dict[str, list[RunRecord]] = {}
    for r in records:
        groups.setdefault(r.method, []).append(r)
    out = {}
    for method, recs in groups.items():
        top = top_k_by_validation(recs, top_k)
        accs = np.array([r.test_acc for r in top], dtype=np.float64)
        out[method] = {
            "runs": len(recs),
            "top_k": len(top),
            "mean_test_acc": float(accs.mean()),
            "std_test_acc": float(accs.std()),
            "mean_params": float(np.mean([r.trainable_params for r in top])),
        }
    return out


def sweep(
    run: Callable[[dict, int], RunRecord],
    configs: Sequence[dict],
    seeds: Sequence[int],
    top_k: int,
) -> SweepSummary:
    """Run every (config, seed) pair and summarise the top-``k`` runs per method by validation."""
    if top_k < 1:
        raise ContractError("top_k must be >= 1")
    records = [run(dict(cfg), seed) for cfg in configs for seed in seeds]
    return SweepSummary(records, top_k, summarize(records, top_k))


def copy_adapters(adapters: Sequence[LoraAdapter]) -> list[LoraAdapter]:
    return [copy.deepcopy(a) for a in adapters]
