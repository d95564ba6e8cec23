"""Row/column and element importance scores for frozen weights.

SVD leverage scores work on a weight alone; SNIP and IMP need gradients of
the summed cross-entropy on a batch, taken with the chosen layer's weight
temporarily tracked on a private tape.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .adapters import MaskPair
from .linalg import DEFAULT_ENERGY, choose_rank_k, leverage_scores, truncated_svd
from .model import BaseModel, Dataset, forward
from .tensor import ContractError, DimensionError

METHODS = ("svd", "snip", "imp")


@dataclass(frozen=True)
class ImportanceScores:
    layer: int
    method: str
    element: np.ndarray | None = None  # m x n, granularity "element"
    rows: np.ndarray | None = None  # granularity "row_col"
    cols: np.ndarray | None = None
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown importance method {self.method!r}")
        if (self.element is None) == (self.rows is None or self.cols is None):
            raise ContractError("give either element scores or both row and column scores")
        for name in ("element", "rows", "cols"):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.array(v, dtype=np.float64)
            if not np.all(np.isfinite(v)) or np.any(v < 0):
                raise ContractError(f"{name} scores must be finite and nonnegative")
            v.flags.writeable = False
            object.__setattr__(self, name, v)

    @property
    def granularity(self) -> str:
        return "element" if self.element is not None else "row_col"


def svd_importance(W, k: int | None = None, *, energy: float = DEFAULT_ENERGY, layer: int = 0) -> ImportanceScores:
    """Leverage scores of the top-``k`` singular subspace (``k`` from ``energy`` if omitted)."""
    W = T.as_matrix(W)
    if k is None:
        full = truncated_svd(W, min(W.shape))
        k = choose_rank_k(full.S, energy)
        svd = type(full)(full.P[:, :k], full.S[:k], full.Q[:k], k)
    else:
        svd = truncated_svd(W, k)
    rows, cols = leverage_scores(svd)
    # leverage scores are squared norms; clip roundoff below zero away
    return ImportanceScores(layer, "svd", rows=np.clip(rows, 0, None), cols=np.clip(cols, 0, None),
                            provenance={"k": k})


def weight_gradient(model: BaseModel, layer: int, batch: Dataset) -> np.ndarray:
    """d(summed cross-entropy)/dW_layer on ``batch``."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    if not 0 <= layer < model.depth:
        raise ContractError(f"layer {layer} out of range")
    tape = T.Tape()
    W = tape.leaf(model.layers[layer].W)
    logits = forward(model, batch.x, weights={layer: W})
    loss = T.softmax_cross_entropy(logits, batch.y, reduction="sum")
    T.backward(tape, loss)
    return np.array(tape.grad(W))


def snip_importance(model: BaseModel, layer: int, batch: Dataset) -> ImportanceScores:
    g = weight_gradient(model, layer, batch)
    return ImportanceScores(layer, "snip", element=np.abs(g), provenance={"n": len(batch)})


def imp_importance(model: BaseModel, layer: int, batch: Dataset) -> ImportanceScores:
    g = weight_gradient(model, layer, batch)
    return ImportanceScores(layer, "imp", element=np.abs(model.layers[layer].W * g), provenance={"n": len(batch)})


def reduce_to_row_col(scores: ImportanceScores) -> ImportanceScores:
    if scores.granularity != "element":
        raise ContractError("reduce_to_row_col needs element scores")
    e = scores.element
    return ImportanceScores(scores.layer, scores.method, rows=e.sum(axis=1), cols=e.sum(axis=0),
                            provenance=dict(scores.provenance))


def layer_scores(model: BaseModel, layer: int, batch: Dataset, method: str, *,
                 k: int | None = None, energy: float = DEFAULT_ENERGY) -> ImportanceScores:
    """Row/column scores of ``layer`` under ``method``."""
    if method == "svd":
        return svd_importance(model.layers[layer].W, k, energy=energy, layer=layer)
    if method == "snip":
        return reduce_to_row_col(snip_importance(model, layer, batch))
    if method == "imp":
        return reduce_to_row_col(imp_importance(model, layer, batch))
    raise ContractError(f"unknown importance method {method!r}")


def ranking(scores: np.ndarray) -> np.ndarray:
    """Indices from most to least important; equal scores keep the lower index first."""
    return np.lexsort((np.arange(scores.size), -np.asarray(scores)))


def _top_mask(scores: np.ndarray, count: int) -> np.ndarray:
    if not 0 <= count <= scores.size:
        raise ContractError(f"count {count} outside [0, {scores.size}]")
    u = np.zeros(scores.size, dtype=np.uint8)
    u[ranking(scores)[:count]] = 1
    return u


def deterministic_top_indices(scores: ImportanceScores, count_row: int, count_col: int) -> MaskPair:
    if scores.granularity != "row_col":
        raise ContractError("need row/column scores")
    u_row = _top_mask(scores.rows, count_row)
    u_col = _top_mask(scores.cols, count_col)
    return MaskPair(u_row, u_col, count_row / u_row.size, count_col / u_col.size)


def _softmax_sample(scores: np.ndarray, count: int, temperature: float, rng: np.random.Generator) -> np.ndarray:
    # Gumbel-top-k: equivalent to successive softmax draws without replacement
    if not 0 <= count <= scores.size:
        raise ContractError(f"count {count} outside [0, {scores.size}]")
    keys = np.asarray(scores) / temperature + rng.gumbel(size=scores.size)
    u = np.zeros(scores.size, dtype=np.uint8)
    u[ranking(keys)[:count]] = 1
    return u


def stochastic_indices(scores: ImportanceScores, count_row: int, count_col: int,
                       temperature: float, seed: int) -> MaskPair:
    """Sample ``count`` indices per axis without replacement from softmax(scores / temperature)."""
    if scores.granularity != "row_col":
        raise ContractError("need row/column scores")
    if not temperature > 0:
        raise ContractError("temperature must be positive")
    rng = np.random.default_rng(seed)
    u_row = _softmax_sample(scores.rows, count_row, temperature, rng)
    u_col = _softmax_sample(scores.cols, count_col, temperature, rng)
    return MaskPair(u_row, u_col, count_row / u_row.size, count_col / u_col.size, seed)


def flow_reweigh(scores_per_layer: Sequence[ImportanceScores]) -> list[ImportanceScores]:
    """Add each layer's incoming importance from the next layer to its rows.

    For layer l, ``incoming[i]`` is the column sum of layer l+1's scores over
    its input i, rescaled so its mean matches the mean of layer l's scores,
    then added to every element of row i. The last layer is unchanged; the
    incoming term always uses the next layer's original scores.
    """
    out = list(scores_per_layer)
    for s in out:
        if s.granularity != "element":
            raise ContractError("flow_reweigh needs element scores")
    for l in range(len(out) - 1):
        cur, nxt = scores_per_layer[l].element, scores_per_layer[l + 1].element
        if nxt.shape[1] != cur.shape[0]:
            raise DimensionError(f"layer {l + 1} input dim {nxt.shape[1]} != layer {l} output dim {cur.shape[0]}")
        incoming = nxt.sum(axis=0)
        if incoming.sum() == 0.0:
            continue
        incoming = incoming * (cur.mean() / incoming.mean())
        s = scores_per_layer[l]
        out[l] = ImportanceScores(s.layer, s.method, element=cur + incoming[:, None],
                                  provenance={**s.provenance, "flow": True})
    return out


def scores_to_csv(scores: Sequence[ImportanceScores], seed: int | None = None) -> str:
    """CSV rows ``layer,kind,index,score,method,seed`` for row/column scores."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["layer", "kind", "index", "score", "method", "seed"])
    for s in scores:
        if s.granularity == "element":
            s = reduce_to_row_col(s)
        for kind, vec in (("row", s.rows), ("col", s.cols)):
            for i, v in enumerate(vec):
                w.writerow([s.layer, kind, i, repr(float(v)), s.method, "" if seed is None else seed])
    return buf.getvalue()
