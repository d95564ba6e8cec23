"""Residual norms, mask overlap and subnetwork size reports."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapters import ElementMask, LoraAdapter, MaskPair, effective_delta
from .sparsity import SparsityProfile
from .tensor import ContractError

REPORT_KINDS = ("residual_norms", "overlap", "fractions")


@dataclass(frozen=True)
class AnalysisReport:
    kind: str
    values: tuple[float, ...]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in REPORT_KINDS:
            raise ContractError(f"unknown report kind {self.kind!r}")
        vals = tuple(float(v) for v in self.values)
        if not all(np.isfinite(vals)):
            raise ContractError("report values must be finite")
        if self.kind == "overlap" and not all(0.0 <= v <= 1.0 for v in vals):
            raise ContractError("overlap values must lie in [0, 1]")
        object.__setattr__(self, "values", vals)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["kind", "layer", "value"])
        for l, v in enumerate(self.values):
            w.writerow([self.kind, l, repr(v)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"kind": self.kind, "values": list(self.values), "metadata": self.metadata}


def residual_norm_per_layer(
    adapters: Sequence[LoraAdapter],
    masks: Sequence | None = None,
    weights: Sequence[np.ndarray] | None = None,
) -> list[float]:
    """Frobenius norm of each layer's effective delta, optionally divided by ``||W||_F``."""
    if masks is None:
        masks = [None] * len(adapters)
    norms = []
    for l, (a, u) in enumerate(zip(adapters, masks)):
        v = float(np.linalg.norm(effective_delta(a, u)))
        if weights is not None:
            v /= float(np.linalg.norm(weights[l]))
        norms.append(v)
    return norms


def _index_set(mask: MaskPair | ElementMask) -> set:
    if isinstance(mask, ElementMask):
        return {("e", int(i), int(j)) for i, j in zip(*np.nonzero(mask.U))}
    rows = {("r", int(i)) for i in np.flatnonzero(mask.u_row)}
    cols = {("c", int(j)) for j in np.flatnonzero(mask.u_col)}
    return rows | cols


def mask_overlap(a, b, mode: str = "jaccard") -> float:
    """Overlap of the retained index sets of two masks (rows and columns pooled).

    ``jaccard`` is |A & B| / |A | B|; ``min`` is |A & B| / min(|A|, |B|).
    Two empty masks overlap fully.
    """
    if a.shape != b.shape or type(a) is not type(b):
        raise ContractError("masks must have the same kind and shape")
    sa, sb = _index_set(a), _index_set(b)
    inter = len(sa & sb)
    if mode == "jaccard":
        denom = len(sa | sb)
    elif mode == "min":
        denom = min(len(sa), len(sb))
        if denom == 0:
            return 1.0 if not sa and not sb else 0.0
    else:
        raise ContractError(f"unknown overlap mode {mode!r}")
    return 1.0 if denom == 0 else inter / denom


def subnetwork_fraction(profile: SparsityProfile | None = None, masks: Sequence | None = None) -> list[float]:
    """Retained elements over ``m * n`` per layer.

    From a profile this is ``retained_rows * retained_cols / (m n)``; from
    sampled masks it counts the elements the masks actually allow.
    """
    if (profile is None) == (masks is None):
        raise ContractError("give a profile or a list of masks")
    if profile is not None:
        return [r.retained_rows * r.retained_cols / (r.m * r.n) for r in profile.layers]
    out = []
    for u in masks:
        if isinstance(u, ElementMask):
            out.append(float(u.U.mean()))
        else:
            out.append(float(u.u_row.sum() * u.u_col.sum()) / (u.u_row.size * u.u_col.size))
    return out


def overlap_report(masks_a: Sequence, masks_b: Sequence, mode: str = "jaccard", **metadata) -> AnalysisReport:
    vals = [mask_overlap(a, b, mode) for a, b in zip(masks_a, masks_b)]
    return AnalysisReport("overlap", tuple(vals), {"mode": mode, **metadata})


def bundle_json(reports: Sequence[AnalysisReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"
