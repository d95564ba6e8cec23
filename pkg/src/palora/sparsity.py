"""Per-layer sparsity derivation on a frozen model, baseline profiles and mask generation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .adapters import MaskPair, sample_element_mask, sample_mask_pair
from .importance import (
    ImportanceScores,
    deterministic_top_indices,
    layer_scores,
    ranking,
    stochastic_indices,
)
from .linalg import DEFAULT_ENERGY
from .model import BaseModel, Dataset, accuracy
from .tensor import ContractError

log = logging.getLogger(__name__)

DEFAULT_TAU = 0.90
TAU_PRESETS = {"default": 0.90, "relaxed80": 0.80, "relaxed70": 0.70}
MASK_MODES = ("partial", "targeted", "stochastic", "inverted")
PROFILE_HEADER = "# palora sparsity profile"
PROFILE_VERSION = 1
_FIELDS = ["layer", "m", "n", "retained_rows", "retained_cols", "p_row", "p_col", "element_rate",
           "tau", "mu", "method", "seed"]


@dataclass(frozen=True)
class LayerSparsity:
    layer: int
    m: int
    n: int
    retained_rows: int
    retained_cols: int
    p_row: float
    p_col: float
    element_rate: float

    def __post_init__(self):
        for p in (self.p_row, self.p_col, self.element_rate):
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"rate {p} outside [0, 1]")


@dataclass(frozen=True)
class SparsityProfile:
    layers: tuple[LayerSparsity, ...]
    method: str
    tau: float | None = None
    mu: float | None = None
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.tau is not None and not 0.0 < self.tau < 1.0:
            raise ContractError("tau must lie in (0, 1)")
        if self.mu is not None and not 0.0 <= self.mu <= 1.0:
            raise ContractError("mu must lie in [0, 1]")

    @property
    def element_rates(self) -> list[float]:
        return [r.element_rate for r in self.layers]


@dataclass
class LayerDerivation:
    retained_rows: int
    retained_cols: int
    accuracy: float
    mu: float
    saturated: bool = False  # guard failed even with everything retained
    trace: list[tuple[int, int, float]] = field(default_factory=list)


def default_step(dim: int) -> int:
    return max(1, math.ceil(dim / 100))


def masked_layer_accuracy(model: BaseModel, layer: int, data: Dataset, rows_kept: np.ndarray,
                          cols_kept: np.ndarray) -> float:
    """Accuracy with only ``layer``'s weight restricted to the kept rows and columns."""
    W = model.layers[layer].W
    U = np.outer(rows_kept, cols_kept)
    return accuracy(model, None, data, weights={layer: W * U})


def derive_layer_sparsity(
    model: BaseModel,
    layer: int,
    data: Dataset,
    scores: ImportanceScores,
    tau: float = DEFAULT_TAU,
    step: int | None = None,
) -> LayerDerivation:
    """Shrink one layer's retained rows/columns until accuracy would fall below ``tau * mu``.

    Drops alternate between the ``step`` least important rows and the ``step``
    least important columns, rows first. A drop that fails the guard blocks
    its axis until the other axis shrinks again; the search ends when neither
    axis can drop. With ``step=None`` the step is 1% of each dimension and
    each failing chunk is bisected down to single indices.
    """
    if not 0.0 < tau < 1.0:
        raise ContractError("tau must lie in (0, 1)")
    if scores.granularity != "row_col":
        raise ContractError("derivation needs row/column scores")
    m, n = model.layers[layer].shape
    if scores.rows.size != m or scores.cols.size != n:
        raise ContractError("scores do not match the layer shape")
    refine = step is None
    step_r = default_step(m) if step is None else int(step)
    step_c = default_step(n) if step is None else int(step)
    if step_r < 1 or step_c < 1:
        raise ContractError("step must be >= 1")

    row_order, col_order = ranking(scores.rows), ranking(scores.cols)

    def kept(order, count, size):
        u = np.zeros(size)
        u[order[:count]] = 1.0
        return u

    def acc_at(r, c):
        return masked_layer_accuracy(model, layer, data, kept(row_order, r, m), kept(col_order, c, n))

    mu = accuracy(model, None, data)
    floor = tau * mu
    r, c = m, n
    best_acc = acc_at(r, c)
    trace = [(r, c, best_acc)]
    if best_acc < floor:
        log.warning("layer %d: accuracy guard fails with full retention", layer)
        return LayerDerivation(m, n, best_acc, mu, saturated=True, trace=trace)

    counts = {"row": r, "col": c}
    steps = {"row": step_r, "col": step_c}
    other = {"row": "col", "col": "row"}
    # other-axis count at this axis's last failed drop; the axis stays blocked until that count moves
    failed_at = {"row": None, "col": None}
    turn = "row"

    def blocked(axis):
        return counts[axis] == 0 or failed_at[axis] == counts[other[axis]]

    def evaluate(cand):
        a = acc_at(cand["row"], cand["col"])
        trace.append((cand["row"], cand["col"], a))
        return a

    while not (blocked("row") and blocked("col")):
        axis = turn if not blocked(turn) else other[turn]
        turn = other[turn]
        cand = dict(counts)
        cand[axis] = max(0, counts[axis] - steps[axis])
        a = evaluate(cand)
        if a >= floor:
            counts, best_acc = cand, a
            continue
        if refine:
            # bisect between the failing count and the last passing one
            lo, hi = cand[axis], counts[axis]
            while hi - lo > 1:
                mid = dict(counts)
                mid[axis] = (lo + hi) // 2
                a = evaluate(mid)
                if a >= floor:
                    hi, best_acc = mid[axis], a
                else:
                    lo = mid[axis]
            counts[axis] = hi
        failed_at[axis] = counts[other[axis]]
    r, c = counts["row"], counts["col"]
    return LayerDerivation(r, c, best_acc, mu, trace=trace)


def derive_profile(
    model: BaseModel,
    data: Dataset,
    method: str = "svd",
    tau: float = DEFAULT_TAU,
    step: int | None = None,
    *,
    k: int | None = None,
    energy: float = DEFAULT_ENERGY,
    seed: int | None = None,
    scores: Sequence[ImportanceScores] | None = None,
) -> SparsityProfile:
    """Derive every layer independently (other layers stay intact while one is masked)."""
    records = []
    mu = accuracy(model, None, data)
    for l, (m, n) in enumerate(model.dims):
        s = scores[l] if scores is not None else layer_scores(model, l, data, method, k=k, energy=energy)
        res = derive_layer_sparsity(model, l, data, s, tau, step)
        p_row, p_col = res.retained_rows / m, res.retained_cols / n
        records.append(LayerSparsity(l, m, n, res.retained_rows, res.retained_cols, p_row, p_col, p_row * p_col))
    return SparsityProfile(tuple(records), method, tau, mu, seed)


def _exact_power(p: float, l: int) -> float:
    # correctly rounded p**l for the decimal p as written
    return float(Fraction(repr(float(p))) ** l)


def _rate_profile(rates: Sequence[float], dims: Sequence[tuple[int, int]], method: str) -> SparsityProfile:
    records = []
    for l, (rate, (m, n)) in enumerate(zip(rates, dims)):
        s = math.sqrt(rate)
        records.append(LayerSparsity(l, m, n, round(s * m), round(s * n), s, s, rate))
    return SparsityProfile(tuple(records), method)


def pyramidal_profile(p: float, L: int, dims: Sequence[tuple[int, int]]) -> SparsityProfile:
    """Element rate ``p**l`` at 1-based layer l, split evenly as sqrt onto rows and columns."""
    if not 0.0 < p <= 1.0:
        raise ContractError("p must lie in (0, 1]")
    if len(dims) != L:
        raise ContractError(f"{len(dims)} layer shapes for L={L}")
    return _rate_profile([_exact_power(p, l) for l in range(1, L + 1)], dims, "pyramidal")


def balanced_profile(p: float, L: int, dims: Sequence[tuple[int, int]]) -> SparsityProfile:
    if not 0.0 <= p <= 1.0:
        raise ContractError("p must lie in [0, 1]")
    if len(dims) != L:
        raise ContractError(f"{len(dims)} layer shapes for L={L}")
    return _rate_profile([float(p)] * L, dims, "balanced")


def invert_mask_pair(mask: MaskPair) -> MaskPair:
    return MaskPair(1 - mask.u_row, 1 - mask.u_col, 1.0 - mask.p_row, 1.0 - mask.p_col, mask.seed)


def layer_seed(seed: int, layer: int) -> int:
    return int(np.random.SeedSequence([seed, layer]).generate_state(1)[0])


def profile_to_masks(
    profile: SparsityProfile,
    mode: str,
    scores: Sequence[ImportanceScores] | None = None,
    seed: int = 0,
    temperature: float = 1.0,
) -> list[MaskPair]:
    """Per-layer masks realising ``profile``.

    partial samples Bernoulli masks at the profile rates; targeted keeps the
    top-scoring retained counts; stochastic samples those counts from a
    softmax of the scores; inverted is the complement of targeted.
    """
    if mode not in MASK_MODES:
        raise ContractError(f"unknown mask mode {mode!r}")
    if mode != "partial" and (scores is None or len(scores) != len(profile.layers)):
        raise ContractError(f"mode {mode!r} needs one score set per layer")
    masks = []
    for rec in profile.layers:
        if mode == "partial":
            mask = sample_mask_pair(rec.m, rec.n, rec.p_row, rec.p_col, layer_seed(seed, rec.layer))
        elif mode == "stochastic":
            mask = stochastic_indices(scores[rec.layer], rec.retained_rows, rec.retained_cols,
                                      temperature, layer_seed(seed, rec.layer))
        else:
            mask = deterministic_top_indices(scores[rec.layer], rec.retained_rows, rec.retained_cols)
            if mode == "inverted":
                mask = invert_mask_pair(mask)
        masks.append(mask)
    return masks


def profile_to_element_masks(profile: SparsityProfile, seed: int = 0):
    """Element-level Bernoulli masks at each layer's element rate."""
    return [sample_element_mask(r.m, r.n, r.element_rate, layer_seed(seed, r.layer)) for r in profile.layers]


# ---------------------------------------------------------------------------
# text serialisation


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def profile_to_text(profile: SparsityProfile) -> str:
    lines = [PROFILE_HEADER, f"version {PROFILE_VERSION}", ",".join(_FIELDS)]
    for r in profile.layers:
        vals = [r.layer, r.m, r.n, r.retained_rows, r.retained_cols, r.p_row, r.p_col, r.element_rate,
                profile.tau, profile.mu, profile.method, profile.seed]
        lines.append(",".join(_fmt(v) for v in vals))
    return "\n".join(lines) + "\n"


def profile_from_text(text: str) -> SparsityProfile:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != PROFILE_HEADER:
        raise ValueError("not a sparsity profile")
    if lines[1] != f"version {PROFILE_VERSION}":
        raise ValueError(f"unsupported profile {lines[1]!r}")
    if lines[2].split(",") != _FIELDS:
        raise ValueError("unexpected profile columns")
    records, meta = [], None
    for ln in lines[3:]:
        f = dict(zip(_FIELDS, ln.split(",")))
        records.append(LayerSparsity(int(f["layer"]), int(f["m"]), int(f["n"]), int(f["retained_rows"]),
                                     int(f["retained_cols"]), float(f["p_row"]), float(f["p_col"]),
                                     float(f["element_rate"])))
        meta = (
            f["method"],
            float(f["tau"]) if f["tau"] else None,
            float(f["mu"]) if f["mu"] else None,
            int(f["seed"]) if f["seed"] else None,
        )
    if meta is None:
        raise ValueError("profile has no layers")
    method, tau, mu, seed = meta
    return SparsityProfile(tuple(records), method, tau, mu, seed)


def save_profile(profile: SparsityProfile, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(profile_to_text(profile))


def load_profile(path) -> SparsityProfile:
    with open(path, encoding="utf-8") as fh:
        return profile_from_text(fh.read())
