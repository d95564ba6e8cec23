"""LoRA factor pairs, row/column and element masks, and adapter banks."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .model import BaseModel, forward
from .tensor import ContractError, DimensionError


@dataclass
class LoraAdapter:
    """Low-rank residual ``(alpha / d) * B @ A`` for an m x n weight."""

    B: np.ndarray  # m x d
    A: np.ndarray  # d x n
    alpha: float

    def __post_init__(self):
        self.B = np.array(T.as_matrix(self.B), dtype=np.float64)
        self.A = np.array(T.as_matrix(self.A), dtype=np.float64)
        if self.B.shape[1] != self.A.shape[0]:
            raise DimensionError(f"B {self.B.shape} and A {self.A.shape} disagree on rank")
        if self.rank > min(self.shape):
            raise ContractError(f"rank {self.rank} exceeds min{self.shape}")

    @property
    def rank(self) -> int:
        return self.A.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return adapter_delta(self.B, self.A, self.scaling)

    def copy(self) -> "LoraAdapter":
        return copy.deepcopy(self)


@dataclass(frozen=True)
class MaskPair:
    u_row: np.ndarray
    u_col: np.ndarray
    p_row: float
    p_col: float
    seed: int | None = None

    def __post_init__(self):
        for name in ("u_row", "u_col"):
            u = np.asarray(getattr(self, name))
            if u.ndim != 1 or not np.isin(u, (0, 1)).all():
                raise ContractError(f"{name} must be a binary vector")
            u = u.astype(np.uint8)
            u.flags.writeable = False
            object.__setattr__(self, name, u)

    @property
    def shape(self) -> tuple[int, int]:
        return self.u_row.size, self.u_col.size

    def __eq__(self, other):
        if not isinstance(other, MaskPair):
            return NotImplemented
        return (
            np.array_equal(self.u_row, other.u_row)
            and np.array_equal(self.u_col, other.u_col)
            and self.p_row == other.p_row
            and self.p_col == other.p_col
            and self.seed == other.seed
        )

    __hash__ = None


@dataclass(frozen=True)
class ElementMask:
    U: np.ndarray
    p: float
    seed: int | None = None

    def __post_init__(self):
        U = np.asarray(self.U)
        if U.ndim != 2 or not np.isin(U, (0, 1)).all():
            raise ContractError("element mask must be a binary matrix")
        U = U.astype(np.uint8)
        U.flags.writeable = False
        object.__setattr__(self, "U", U)

    @property
    def shape(self) -> tuple[int, int]:
        return self.U.shape


def init_adapter(m: int, n: int, d: int, alpha: float | None = None, seed: int = 0) -> LoraAdapter:
    """B = 0 and A ~ U[-1/sqrt(n), 1/sqrt(n)], so the initial delta is zero.

    ``alpha`` defaults to ``2 * d``.
    """
    if not 1 <= d <= min(m, n):
        raise ContractError(f"rank {d} must be in [1, {min(m, n)}]")
    rng = np.random.default_rng(seed)
    bound = 1.0 / np.sqrt(n)
    A = rng.uniform(-bound, bound, size=(d, n))
    return LoraAdapter(np.zeros((m, d)), A, float(2 * d if alpha is None else alpha))


def adapter_delta(B, A, scaling: float, mask: MaskPair | ElementMask | None = None):
    """Scaled product of the factors under an optional mask.

    Works on plain arrays and on tape variables alike, so the training path and
    the inspection path compute bit-identical deltas.
    """
    m, d = T.value(B).shape
    n = T.value(A).shape[1]
    if mask is None:
        return T.scale(T.matmul(B, A), scaling)
    if mask.shape != (m, n):
        raise DimensionError(f"mask {mask.shape} does not fit a {m}x{n} delta")
    if isinstance(mask, MaskPair):
        row = np.repeat(mask.u_row.astype(np.float64)[:, None], d, axis=1)
        col = np.repeat(mask.u_col.astype(np.float64)[None, :], d, axis=0)
        return T.scale(T.matmul(T.hadamard(B, row), T.hadamard(A, col)), scaling)
    return T.hadamard(T.scale(T.matmul(B, A), scaling), mask.U.astype(np.float64))


def masked_delta(adapter: LoraAdapter, mask: MaskPair) -> np.ndarray:
    """``(alpha/d) (u_row * B)(A * u_col)``."""
    if not isinstance(mask, MaskPair):
        raise ContractError("masked_delta takes a MaskPair")
    return adapter_delta(adapter.B, adapter.A, adapter.scaling, mask)


def element_masked_delta(adapter: LoraAdapter, mask: ElementMask) -> np.ndarray:
    if not isinstance(mask, ElementMask):
        raise ContractError("element_masked_delta takes an ElementMask")
    return adapter_delta(adapter.B, adapter.A, adapter.scaling, mask)


def effective_delta(adapter: LoraAdapter, mask=None) -> np.ndarray:
    return adapter_delta(adapter.B, adapter.A, adapter.scaling, mask)


def sample_mask_pair(m: int, n: int, p_row: float, p_col: float, seed: int) -> MaskPair:
    for p in (p_row, p_col):
        if not 0.0 <= p <= 1.0:
            raise ContractError(f"rate {p} outside [0, 1]")
    rng = np.random.default_rng(seed)
    u_row = rng.random(m) < p_row
    u_col = rng.random(n) < p_col
    return MaskPair(u_row, u_col, float(p_row), float(p_col), seed)


def sample_element_mask(m: int, n: int, p: float, seed: int) -> ElementMask:
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"rate {p} outside [0, 1]")
    rng = np.random.default_rng(seed)
    return ElementMask(rng.random((m, n)) < p, float(p), seed)


def full_mask(m: int, n: int) -> MaskPair:
    return MaskPair(np.ones(m, np.uint8), np.ones(n, np.uint8), 1.0, 1.0)


def effective_element_rate(mask: MaskPair | ElementMask) -> float:
    if isinstance(mask, ElementMask):
        return float(mask.U.mean())
    return float(mask.u_row.mean() * mask.u_col.mean())


def trainable_parameter_count(adapter: LoraAdapter, mask: MaskPair | ElementMask | None = None) -> int:
    """Factor entries that can receive a nonzero gradient under ``mask``."""
    m, n = adapter.shape
    d = adapter.rank
    if mask is None:
        return d * (m + n)
    if isinstance(mask, ElementMask):
        rows = int(mask.U.any(axis=1).sum())
        cols = int(mask.U.any(axis=0).sum())
        return d * (rows + cols)
    return d * (int(mask.u_row.sum()) + int(mask.u_col.sum()))


def trainable_masks(adapter: LoraAdapter, mask) -> dict[str, np.ndarray]:
    """0/1 arrays marking which entries of B and A the optimiser may touch."""
    m, n = adapter.shape
    d = adapter.rank
    if mask is None:
        return {"B": np.ones((m, d)), "A": np.ones((d, n))}
    if isinstance(mask, ElementMask):
        rows, cols = mask.U.any(axis=1), mask.U.any(axis=0)
    else:
        rows, cols = mask.u_row.astype(bool), mask.u_col.astype(bool)
    return {
        "B": np.repeat(rows[:, None], d, axis=1).astype(np.float64),
        "A": np.repeat(cols[None, :], d, axis=0).astype(np.float64),
    }


def layer_deltas(adapters: Sequence[LoraAdapter | None], masks: Sequence | None = None) -> list:
    if masks is None:
        masks = [None] * len(adapters)
    if len(masks) != len(adapters):
        raise DimensionError("one mask per adapter")
    return [None if a is None else effective_delta(a, u) for a, u in zip(adapters, masks)]


def init_adapters_for(model: BaseModel, d: int, alpha: float | None = None, seed: int = 0) -> list[LoraAdapter]:
    """One adapter per layer; layer l draws its A from seed (seed, l)."""
    return [
        init_adapter(m, n, min(d, m, n), alpha, seed=np.random.SeedSequence([seed, l]).generate_state(1)[0])
        for l, (m, n) in enumerate(model.dims)
    ]


@dataclass
class AdapterBank:
    """Named adapter sets over one frozen model; only one is active per forward."""

    members: dict[str, tuple[list[LoraAdapter], list]] = field(default_factory=dict)

    def add(self, name: str, adapters: list[LoraAdapter], masks: list | None = None) -> None:
        if masks is None:
            masks = [None] * len(adapters)
        self.members[name] = (adapters, masks)

    def __contains__(self, name) -> bool:
        return name in self.members

    def __getitem__(self, name):
        if name not in self.members:
            raise KeyError(f"no adapter named {name!r}")
        return self.members[name]

    def names(self) -> list[str]:
        return list(self.members)


def multi_adapter_forward(model: BaseModel, x, bank: AdapterBank, active: str):
    adapters, masks = bank[active]
    return forward(model, x, layer_deltas(adapters, masks))
