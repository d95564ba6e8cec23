"""Frozen MLP base models, toy classification tasks and the adapter-aware forward pass."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .optim import AdamWState, adamw_step, cosine_lr
from .tensor import ContractError, DimensionError

TASK_KINDS = ("gaussian_mixture", "rotated_mixture", "xor_bands", "teacher_relabel")


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""


def _frozen(a) -> np.ndarray:
    arr = np.array(T.as_matrix(a), dtype=np.float64, copy=True)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class FrozenLayer:
    W: np.ndarray
    b: np.ndarray
    activation: str = "relu"

    def __post_init__(self):
        W, b = _frozen(self.W), _frozen(self.b)
        if b.shape != (W.shape[0], 1):
            raise DimensionError(f"bias {b.shape} does not match weight {W.shape}")
        if self.activation not in T.ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "b", b)

    @property
    def shape(self) -> tuple[int, int]:
        return self.W.shape


@dataclass(frozen=True)
class BaseModel:
    layers: tuple[FrozenLayer, ...]
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ContractError("a model needs at least one layer")
        for l in range(len(layers) - 1):
            if layers[l].W.shape[0] != layers[l + 1].W.shape[1]:
                raise DimensionError(f"layer {l} output does not feed layer {l + 1}")
        object.__setattr__(self, "layers", layers)

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].W.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].W.shape[0]

    @property
    def dims(self) -> list[tuple[int, int]]:
        """(m, n) of every weight matrix."""
        return [layer.shape for layer in self.layers]


def model_hash(model: BaseModel) -> str:
    h = hashlib.sha256()
    for layer in model.layers:
        h.update(np.ascontiguousarray(layer.W).tobytes())
        h.update(np.ascontiguousarray(layer.b).tobytes())
        h.update(layer.activation.encode())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# tasks


@dataclass(frozen=True)
class TaskSpec:
    """A synthetic classification task.

    ``seed`` fixes the task structure (cluster means, rotation, relabeling);
    sample draws take their own seed in :func:`make_dataset`.
    ``rotation`` (radians) and ``relabel`` (number of classes whose labels are
    cyclically shifted) only affect ``rotated_mixture``.
    """

    kind: str = "gaussian_mixture"
    classes: int = 4
    input_dim: int = 16
    noise: float = 1.0
    seed: int = 0
    spread: float = 3.0
    rotation: float = 0.5
    relabel: int = 0
    signal_dim: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ContractError(f"unknown task kind {self.kind!r}")
        if self.classes < 2:
            raise ContractError("classes must be >= 2")
        if self.noise < 0:
            raise ContractError("noise must be >= 0")
        if not 0 <= self.relabel <= self.classes:
            raise ContractError("relabel must be in [0, classes]")
        if self.signal_dim is not None and not 2 <= self.signal_dim <= self.input_dim:
            raise ContractError("signal_dim must be in [2, input_dim]")

    @property
    def effective_signal_dim(self) -> int:
        return self.input_dim if self.signal_dim is None else self.signal_dim


@dataclass(frozen=True)
class Dataset:
    x: np.ndarray  # input_dim x N, one sample per column
    y: np.ndarray  # N integer labels
    name: str = ""

    def __post_init__(self):
        x = T.as_matrix(self.x)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        if x.shape[1] != y.shape[0]:
            raise DimensionError(f"{x.shape[1]} samples but {y.shape[0]} labels")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    def __len__(self) -> int:
        return int(self.y.shape[0])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.x[:, idx], self.y[idx], self.name)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.hstack([self.x, other.x]), np.concatenate([self.y, other.y]), self.name)


def _signal_basis(spec: TaskSpec) -> np.ndarray:
    """Orthonormal basis (input_dim x signal_dim) of the subspace holding the class means."""
    rng = np.random.default_rng([spec.seed, 5])
    s = spec.effective_signal_dim
    if s == spec.input_dim:
        return np.eye(s)
    basis, _ = np.linalg.qr(rng.normal(size=(spec.input_dim, s)))
    return basis


def _cluster_means(spec: TaskSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 0])
    coords = rng.normal(size=(spec.effective_signal_dim, spec.classes))
    coords /= np.linalg.norm(coords, axis=0, keepdims=True)
    return _signal_basis(spec) @ coords * spec.spread


def _rotation(spec: TaskSpec) -> np.ndarray:
    """Rotation by ``spec.rotation`` in a seeded random plane inside the signal subspace."""
    rng = np.random.default_rng([spec.seed, 1])
    plane, _ = np.linalg.qr(rng.normal(size=(spec.effective_signal_dim, 2)))
    basis = _signal_basis(spec) @ plane
    u, v = basis[:, 0], basis[:, 1]
    c, s = np.cos(spec.rotation), np.sin(spec.rotation)
    R = np.eye(spec.input_dim)
    R += (c - 1.0) * (np.outer(u, u) + np.outer(v, v)) + s * (np.outer(v, u) - np.outer(u, v))
    return R


def _label_map(spec: TaskSpec) -> np.ndarray:
    """Cluster index -> label; the first ``relabel`` clusters are shifted cyclically."""
    mapping = np.arange(spec.classes)
    r = spec.relabel
    if r >= 2:
        mapping[:r] = np.roll(mapping[:r], 1)
    return mapping


def task_means(spec: TaskSpec) -> np.ndarray:
    means = _cluster_means(spec)
    if spec.kind == "rotated_mixture":
        means = _rotation(spec) @ means
    return means


def make_dataset(spec: TaskSpec, n_per_class: int, seed: int, teacher: BaseModel | None = None) -> Dataset:
    """Draw a dataset of ``n_per_class`` samples per class (total for teacher_relabel)."""
    if n_per_class < 1:
        raise ContractError("n_per_class must be >= 1")
    rng = np.random.default_rng([spec.seed, 2, seed])
    C, d = spec.classes, spec.input_dim
    if spec.kind in ("gaussian_mixture", "rotated_mixture"):
        means = task_means(spec)
        clusters = np.repeat(np.arange(C), n_per_class)
        x = means[:, clusters] + spec.noise * rng.normal(size=(d, clusters.size))
        y = _label_map(spec)[clusters] if spec.kind == "rotated_mixture" else clusters
    elif spec.kind == "xor_bands":
        if d < 2:
            raise ContractError("xor_bands needs input_dim >= 2")
        xs, ys = [], []
        # rejection-sample until each band label has n_per_class points
        counts = np.zeros(C, dtype=int)
        while counts.min() < n_per_class:
            cand = rng.uniform(-spec.spread, spec.spread, size=(d, 256))
            lab = (np.floor(cand[0]) + np.floor(cand[1])).astype(int) % C
            for j in range(cand.shape[1]):
                if counts[lab[j]] < n_per_class:
                    counts[lab[j]] += 1
                    xs.append(cand[:, j])
                    ys.append(lab[j])
        x = np.array(xs).T + spec.noise * 0.1 * rng.normal(size=(d, len(ys)))
        y = np.array(ys)
        order = np.argsort(y, kind="stable")
        x, y = x[:, order], y[order]
    else:
        if teacher is None:
            raise ContractError("teacher_relabel needs a teacher model")
        if teacher.input_dim != d or teacher.output_dim != C:
            raise DimensionError("teacher does not match the task shape")
        x = rng.normal(size=(d, n_per_class * C)) * spec.spread
        y = predict(teacher, x)
    return Dataset(x, y, spec.kind)


# ---------------------------------------------------------------------------
# forward


def forward(
    model: BaseModel,
    x,
    deltas: Sequence | None = None,
    *,
    weights: Mapping[int, object] | None = None,
):
    """Logits of ``model`` on ``x`` (input_dim x N).

    ``deltas`` holds one entry per layer (None, an array or a tape ``Var``)
    added to that layer's weight before the affine map. ``weights`` replaces
    chosen layers' weights outright. The model itself is never modified.
    """
    h = x if isinstance(x, T.Var) else T.as_matrix(x)
    if T.value(h).shape[0] != model.input_dim:
        raise DimensionError(f"input has {T.value(h).shape[0]} rows, model expects {model.input_dim}")
    if deltas is not None and len(deltas) != model.depth:
        raise DimensionError(f"{len(deltas)} deltas for {model.depth} layers")
    for l, layer in enumerate(model.layers):
        W = layer.W if weights is None or l not in weights else weights[l]
        if T.value(W).shape != layer.shape:
            raise DimensionError(f"layer {l} weight override has shape {T.value(W).shape}")
        d = None if deltas is None else deltas[l]
        if d is not None:
            if T.value(d).shape != layer.shape:
                raise DimensionError(f"layer {l} delta has shape {T.value(d).shape}, expected {layer.shape}")
            W = T.add(W, d)
        h = T.add_bias(T.matmul(W, h), layer.b)
        h = T.ACTIVATIONS[layer.activation](h)
    return h


def predict(model: BaseModel, x, deltas=None, **kw) -> np.ndarray:
    # np.argmax takes the first maximum, so ties go to the lowest class index
    return np.argmax(T.value(forward(model, x, deltas, **kw)), axis=0)


def accuracy(model: BaseModel, deltas, data: Dataset, **kw) -> float:
    if len(data) == 0:
        raise ContractError("empty dataset")
    return float(np.mean(predict(model, data.x, deltas, **kw) == data.y))


# ---------------------------------------------------------------------------
# pretraining


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 60
    learning_rate: float = 3e-3
    weight_decay: float = 1e-4
    batch_size: int = 64
    train_per_class: int = 200
    test_per_class: int = 200
    activation: str = "relu"
    seed: int = 0


def init_model(widths: Sequence[int], activation: str, seed: int) -> BaseModel:
    """He-uniform weights, zero biases; last layer has identity activation."""
    rng = np.random.default_rng([seed, 3])
    layers = []
    for l in range(len(widths) - 1):
        n_in, n_out = widths[l], widths[l + 1]
        bound = np.sqrt(6.0 / n_in)
        W = rng.uniform(-bound, bound, size=(n_out, n_in))
        act = "identity" if l == len(widths) - 2 else activation
        layers.append(FrozenLayer(W, np.zeros((n_out, 1)), act))
    return BaseModel(tuple(layers))


def pretrain(spec: TaskSpec, widths: Sequence[int], config: PretrainConfig = PretrainConfig()) -> tuple[BaseModel, float]:
    """Train every weight of an MLP on ``spec``; return the frozen model and held-out accuracy.

    ``widths`` lists hidden widths only; input and output sizes come from ``spec``.
    """
    full = [spec.input_dim, *widths, spec.classes]
    model = init_model(full, config.activation, config.seed)
    params = {}
    for l, layer in enumerate(model.layers):
        params[f"W{l}"] = np.array(layer.W)
        params[f"b{l}"] = np.array(layer.b)
    train = make_dataset(spec, config.train_per_class, seed=config.seed * 2 + 1)
    test = make_dataset(spec, config.test_per_class, seed=config.seed * 2 + 2)
    rng = np.random.default_rng([config.seed, 4])
    state = AdamWState()
    n = len(train)
    steps_per_epoch = max(1, -(-n // config.batch_size))
    total = config.epochs * steps_per_epoch
    step = 0
    acts = [layer.activation for layer in model.layers]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            tape = T.Tape()
            leaves = {k: tape.leaf(v) for k, v in params.items()}
            h = train.x[:, idx]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    for l, act in enumerate(acts):
                        h = T.ACTIVATIONS[act](T.add_bias(T.matmul(leaves[f"W{l}"], h), leaves[f"b{l}"]))
                    loss = T.softmax_cross_entropy(h, train.y[idx])
            except FloatingPointError as e:
                raise TrainingError(f"pretraining diverged: {e}") from e
            T.backward(tape, loss)
            grads = {k: tape.grad(v) for k, v in leaves.items()}
            lr = cosine_lr(step, total, config.learning_rate)
            adamw_step(params, grads, state, lr, weight_decay=config.weight_decay)
            step += 1
    layers = tuple(
        FrozenLayer(params[f"W{l}"], params[f"b{l}"], acts[l]) for l in range(len(acts))
    )
    provenance = {"task": _spec_dict(spec), "widths": list(widths), "seed": config.seed}
    model = BaseModel(layers, provenance)
    return model, accuracy(model, None, test)


def _spec_dict(spec: TaskSpec) -> dict:
    from dataclasses import asdict

    return asdict(spec)


def materialize(model: BaseModel, deltas: Sequence) -> BaseModel:
    """A copy of ``model`` whose weights are ``W + delta``."""
    layers = []
    for layer, d in zip(model.layers, deltas):
        W = layer.W if d is None else layer.W + T.value(d)
        layers.append(replace(layer, W=W))
    return BaseModel(tuple(layers), dict(model.provenance))
