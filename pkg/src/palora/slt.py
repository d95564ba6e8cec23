"""Strong-lottery-ticket width bounds and an empirical mask-search check.

The calculators evaluate the width requirement for a randomly masked LoRA to
contain a subnetwork approximating a target LoRA. The empirical side builds a
random target adapter and a wider random adapter, then searches element masks
over the wide adapter's factor entries for the best worst-case match on a
finite sample set.
"""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .adapters import LoraAdapter
from .tensor import ContractError

EXHAUSTIVE_LIMIT = 20  # mask bits
CSV_FIELDS = ["width", "trial", "search", "best_error", "mask_density", "seed"]


@dataclass(frozen=True)
class SltConfig:
    epsilon: float = 0.1
    delta: float = 0.1
    gamma: float = 0.0
    C: float = 1.0
    sparsities: tuple[float, ...] = (0.5, 0.5)
    target_widths: tuple[int, ...] = (2, 2)

    def __post_init__(self):
        if not (0 < self.epsilon < 1 and 0 < self.delta < 1):
            raise ContractError("epsilon and delta must lie in (0, 1)")
        if self.gamma < 0 or self.C <= 0:
            raise ContractError("need gamma >= 0 and C > 0")
        if not all(0 < p < 1 for p in self.sparsities):
            raise ContractError("sparsities must lie in (0, 1)")


def _log_inv_keep(p: float) -> float:
    """log(1 / (1 - p))."""
    if not 0 < p < 1:
        raise ContractError(f"p={p} outside (0, 1)")
    return -math.log1p(-p)


def rho(C: float, N_T: float, min_p: float, gamma: float, min_eps_l: float, delta: float) -> float:
    if C <= 0 or N_T <= 0 or gamma < 0:
        raise ContractError("need C > 0, N_T > 0, gamma >= 0")
    floor = min(min_eps_l, delta)
    if not 0 < floor < 1:
        raise ContractError("min(eps_l, delta) must lie in (0, 1)")
    return C * N_T ** (1 + gamma) / _log_inv_keep(min_p) ** (1 + gamma) * math.log(1.0 / floor)


def epsilon_l(eps: float, n_lora_L: int, L: int, B_prev: float, target_norms: Sequence[float]) -> float:
    """Per-layer tolerance for layer l.

    ``target_norms`` are the infinity norms of target weights for layers
    l+1 .. L-1 (empty when l+1 > L-1, giving an empty product of 1).
    """
    if L < 2:
        raise ContractError("L must be >= 2")
    if n_lora_L < 1 or B_prev < 0:
        raise ContractError("need n_lora_L >= 1 and B_prev >= 0")
    norms = [float(v) for v in target_norms]
    if not all(math.isfinite(v) and v >= 0 for v in norms) or not math.isfinite(B_prev):
        raise ContractError("norms must be finite and nonnegative")
    prod = math.prod(v + eps / L for v in norms)
    return eps / (n_lora_L * L) / ((1.0 + B_prev) * (1.0 + eps / L) * prod)


def width_bound_value(n_T_l: float, p_next: float, eps_l: float, delta: float, rho_value: float,
                      C: float = 1.0) -> float:
    floor = min(eps_l, delta / rho_value)
    if not 0 < floor < 1:
        raise ContractError("min(eps_l, delta/rho) must lie in (0, 1)")
    return C * n_T_l / _log_inv_keep(p_next) * math.log(1.0 / floor)


def width_bound(n_T_l: float, p_next: float, eps_l: float, delta: float, rho_value: float, C: float = 1.0) -> int:
    v = width_bound_value(n_T_l, p_next, eps_l, delta, rho_value, C)
    # absorb last-bit roundoff so exact integers are not bumped up
    return math.ceil(v * (1 - 4 * np.finfo(float).eps))


def matrix_inf_norm(W) -> float:
    """Maximum absolute row sum."""
    return float(np.max(np.sum(np.abs(np.asarray(W)), axis=1)))


def feature_l1_bound(features) -> float:
    """sup over samples (columns) of the l1 norm of a layer's features."""
    return float(np.max(np.sum(np.abs(np.asarray(features)), axis=0)))


def theorem_widths(config: SltConfig, target_norms: Sequence[float], feature_bounds: Sequence[float],
                   n_lora_L: int, N_T: float) -> list[int]:
    """Required wide-adapter widths for every layer of an L-layer target."""
    L = len(config.target_widths)
    eps = [
        epsilon_l(config.epsilon, n_lora_L, L, feature_bounds[l], target_norms[l + 1 : L - 1])
        for l in range(L)
    ]
    r = rho(config.C, N_T, min(config.sparsities), config.gamma, min(eps), config.delta)
    out = []
    for l in range(L):
        p_next = config.sparsities[min(l + 1, L - 1)]
        out.append(width_bound(config.target_widths[l], p_next, eps[l], config.delta, r, config.C))
    return out


# ---------------------------------------------------------------------------
# empirical mask search


@dataclass
class ApproxResult:
    best_error: float
    mask_B: np.ndarray
    mask_A: np.ndarray
    evaluations: int
    search: str

    @property
    def density(self) -> float:
        bits = self.mask_B.size + self.mask_A.size
        return float((self.mask_B.sum() + self.mask_A.sum()) / bits)


@dataclass
class FactorPair:
    """Unscaled factors ``B @ A``; unlike :class:`LoraAdapter` the width may exceed min(m, n)."""

    B: np.ndarray
    A: np.ndarray
    scaling: float = 1.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.B.shape[0], self.A.shape[1]

    @property
    def width(self) -> int:
        return self.B.shape[1]

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B @ self.A)


def uniform_factors(m: int, n: int, width: int, rng: np.random.Generator) -> FactorPair:
    """Factor entries drawn from U[-1, 1]."""
    return FactorPair(rng.uniform(-1.0, 1.0, size=(m, width)), rng.uniform(-1.0, 1.0, size=(width, n)))


def max_error(target_delta: np.ndarray, delta: np.ndarray, X: np.ndarray) -> float:
    R = (target_delta - delta) @ X
    return float(np.sqrt(np.max(np.sum(R * R, axis=0))))


def _exhaustive(T: np.ndarray, B: np.ndarray, A: np.ndarray, X: np.ndarray, chunk: int = 4096):
    m, w = B.shape
    n = A.shape[1]
    nb = m * w
    bits = nb + w * n
    if bits > EXHAUSTIVE_LIMIT:
        raise ContractError(f"exhaustive search over {bits} bits exceeds 2^{EXHAUSTIVE_LIMIT}")
    target = T @ X  # m x N
    best, best_code = math.inf, 0
    codes_all = np.arange(2**bits, dtype=np.int64)
    shifts = np.arange(bits, dtype=np.int64)
    for start in range(0, codes_all.size, chunk):
        codes = codes_all[start : start + chunk]
        masks = ((codes[:, None] >> shifts) & 1).astype(np.float64)
        UB = masks[:, :nb].reshape(-1, m, w)
        UA = masks[:, nb:].reshape(-1, w, n)
        D = np.matmul(B * UB, A * UA)  # batch x m x n
        R = target - np.matmul(D, X)
        errs = np.sqrt(np.max(np.sum(R * R, axis=1), axis=1))
        i = int(np.argmin(errs))
        if errs[i] < best:
            best, best_code = float(errs[i]), int(codes[i])
    mask = (best_code >> shifts) & 1
    return best, mask[:nb].reshape(m, w), mask[nb:].reshape(w, n), 2**bits


def _greedy(T: np.ndarray, B: np.ndarray, A: np.ndarray, X: np.ndarray, start: str):
    m, w = B.shape
    n = A.shape[1]
    bits = m * w + w * n
    UB = np.ones((m, w)) if start == "full" else np.zeros((m, w))
    UA = np.ones((w, n)) if start == "full" else np.zeros((w, n))
    target = T @ X
    evals = 1

    def residual():
        return target - (B * UB) @ ((A * UA) @ X)

    R = residual()
    cur = float(np.sqrt(np.max(np.sum(R * R, axis=0))))
    for _ in range(10 * bits):
        Bm, Am = B * UB, A * UA
        tot = np.sum(R * R, axis=0)  # N
        # flip B[i, k]: row i of R loses t * B[i,k] * (Am X)[k]
        AmX = Am @ X  # w x N
        tB = 1.0 - 2.0 * UB  # +1 turns on, -1 turns off
        dB = (tB * B)[:, :, None] * AmX[None, :, :]  # m x w x N
        Ri = R[:, None, :]
        newB = tot[None, None, :] - Ri**2 + (Ri - dB) ** 2
        errB = np.sqrt(np.max(newB, axis=2))
        # flip A[k, j]: R loses c * outer(Bm[:, k], X[j])
        tA = 1.0 - 2.0 * UA
        c = tA * A  # w x n
        BtR = Bm.T @ R  # w x N
        bnorm = np.sum(Bm * Bm, axis=0)  # w
        newA = (tot[None, None, :] - 2.0 * c[:, :, None] * X[None, :, :] * BtR[:, None, :]
                + (c**2)[:, :, None] * (X**2)[None, :, :] * bnorm[:, None, None])
        errA = np.sqrt(np.max(np.maximum(newA, 0.0), axis=2))
        evals += bits
        errs = np.concatenate([errB.ravel(), errA.ravel()])
        i = int(np.argmin(errs))
        if not errs[i] < cur:
            break
        if i < m * w:
            UB.flat[i] = 1.0 - UB.flat[i]
        else:
            UA.flat[i - m * w] = 1.0 - UA.flat[i - m * w]
        R = residual()
        cur = float(np.sqrt(np.max(np.sum(R * R, axis=0))))
    return cur, UB.astype(np.uint8), UA.astype(np.uint8), evals


def empirical_approximation(target: LoraAdapter | FactorPair, wide: LoraAdapter | FactorPair, X, search: str = "greedy",
                            start: str = "full") -> ApproxResult:
    """Best worst-case output gap between the target delta and a masked wide delta.

    Masks act on the individual entries of the wide adapter's B and A. The
    frozen weight and bias cancel in the gap, so only the deltas matter.
    ``start`` ("full" or "empty") seeds greedy search.
    """
    X = np.asarray(X, dtype=np.float64)
    if target.shape != wide.shape:
        raise ContractError("target and wide adapters must have the same m x n")
    if X.shape[0] != target.shape[1]:
        raise ContractError("sample dimension does not match the adapter input size")
    T = target.delta()
    B, A = wide.B * wide.scaling, wide.A
    if search == "exhaustive":
        err, UB, UA, evals = _exhaustive(T, B, A, X)
    elif search == "greedy":
        if start not in ("full", "empty"):
            raise ContractError(f"unknown greedy start {start!r}")
        err, UB, UA, evals = _greedy(T, B, A, X, start)
    else:
        raise ContractError(f"unknown search {search!r}")
    return ApproxResult(err, np.asarray(UB, dtype=np.uint8), np.asarray(UA, dtype=np.uint8), evals, search)


@dataclass
class WidthSweep:
    rows: list[dict] = field(default_factory=list)

    def medians(self) -> dict[int, float]:
        out: dict[int, list[float]] = {}
        for r in self.rows:
            out.setdefault(r["width"], []).append(r["best_error"])
        return {w: float(np.median(v)) for w, v in sorted(out.items())}

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        wr.writeheader()
        for r in self.rows:
            wr.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()


def width_sweep(
    widths: Sequence[int],
    trials: int,
    *,
    m: int = 3,
    n: int = 3,
    target_width: int = 2,
    n_points: int = 16,
    search: str = "greedy",
    seed: int = 0,
) -> WidthSweep:
    """Each trial draws one target adapter and sample set, shared by every width."""
    out = WidthSweep()
    for trial in range(trials):
        rng = np.random.default_rng([seed, trial])
        target = uniform_factors(m, n, target_width, rng)
        X = rng.uniform(-1.0, 1.0, size=(n, n_points))
        for w in widths:
            wrng = np.random.default_rng([seed, trial, w])
            wide = uniform_factors(m, n, w, wrng)
            res = empirical_approximation(target, wide, X, search)
            out.rows.append({"width": w, "trial": trial, "search": search, "best_error": res.best_error,
                             "mask_density": res.density, "seed": seed})
    return out


def all_masks(bits: int):
    """Every 0/1 vector of length ``bits`` (for small brute-force checks)."""
    return itertools.product((0, 1), repeat=bits)
