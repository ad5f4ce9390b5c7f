"""Critical-parameter similarity between models and the normality-to-weight transform."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .params import (
    CriticalSets,
    LayoutError,
    ParamVector,
    compute_importance,
    extract_critical_sets,
    rank_map,
)

LOGIT_EPS = 1e-6


@dataclass(frozen=True)
class ModelSignature:
    importance: np.ndarray
    critical: CriticalSets
    ranks: np.ndarray

    @property
    def dim(self) -> int:
        return self.importance.size


def signature(delta: ParamVector, theta: ParamVector, k_ratio: float) -> ModelSignature:
    imp = compute_importance(delta, theta)
    return signature_from_importance(imp, k_ratio)


def signature_from_importance(imp, k_ratio: float) -> ModelSignature:
    imp = np.asarray(imp, dtype=np.float64)
    return ModelSignature(imp, extract_critical_sets(imp, k_ratio), rank_map(imp))


def global_signature(phi_prev: ParamVector, phi: ParamVector, k_ratio: float) -> ModelSignature:
    """Signature of the global model from two consecutive global snapshots."""
    return signature(phi - phi_prev, phi, k_ratio)


def jaccard(a, b) -> float:
    a, b = set(np.asarray(a).tolist()), set(np.asarray(b).tolist())
    union = len(a | b)
    if union == 0:
        return 1.0
    return len(a & b) / union


def spearman_norm(ranks_a, ranks_b) -> float:
    """Pearson correlation of two rank sequences, mapped from [-1, 1] onto [0, 1].

    Returns 0.5 when there are fewer than two ranks or either side is constant.
    """
    a = np.asarray(ranks_a, dtype=np.float64)
    b = np.asarray(ranks_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"rank sequences differ in length: {a.size} vs {b.size}")
    if a.size < 2:
        return 0.5
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    if denom == 0.0:
        return 0.5
    rho = float(a @ b) / denom
    return (min(1.0, max(-1.0, rho)) + 1.0) / 2.0


def _relative_ranks(global_ranks: np.ndarray, idx: np.ndarray) -> np.ndarray:
    # re-rank 0..m-1 inside the shared index set
    out = np.empty(idx.size, dtype=np.int64)
    out[np.argsort(global_ranks[idx], kind="stable")] = np.arange(idx.size)
    return out


def _set_terms(sig_i: ModelSignature, sig_j: ModelSignature, set_i, set_j) -> float:
    shared = np.intersect1d(set_i, set_j)
    rho = spearman_norm(_relative_ranks(sig_i.ranks, shared), _relative_ranks(sig_j.ranks, shared))
    return jaccard(set_i, set_j) + rho


def model_similarity(
    sig_i: ModelSignature,
    sig_j: ModelSignature,
    use_top: bool = True,
    use_bottom: bool = True,
) -> float:
    """Critical-set Jaccard plus rank agreement on the shared critical sets.

    Each enabled set (top, bottom) contributes a Jaccard term and a
    normalized Spearman term, so the full measure lies in [0, 4].
    """
    if sig_i.dim != sig_j.dim:
        raise LayoutError(f"signature dimensions differ: {sig_i.dim} vs {sig_j.dim}")
    total = 0.0
    if use_top:
        total += _set_terms(sig_i, sig_j, sig_i.critical.top, sig_j.critical.top)
    if use_bottom:
        total += _set_terms(sig_i, sig_j, sig_i.critical.bottom, sig_j.critical.bottom)
    return total


def similarity_matrix(sigs: Sequence[ModelSignature], use_top=True, use_bottom=True) -> np.ndarray:
    n = len(sigs)
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = model_similarity(sigs[i], sigs[j], use_top, use_bottom)
    return out


def normality_scores(
    sigs: Sequence[ModelSignature],
    global_sig: Optional[ModelSignature] = None,
    *,
    use_top: bool = True,
    use_bottom: bool = True,
    use_local: bool = True,
    use_global: bool = True,
) -> list[float]:
    """Raw normality of each client.

    The local term is the sum of similarities to every *other* client divided
    by the total number of clients; the global term is the similarity to the
    global-model signature and is skipped when none is available. If the
    global term is unavailable the local term is used even when disabled, so
    a score always exists.
    """
    if not sigs:
        raise ValueError("normality needs at least one client signature")
    n = len(sigs)
    with_global = use_global and global_sig is not None
    with_local = use_local or not with_global
    sims = similarity_matrix(sigs, use_top, use_bottom) if with_local else None
    scores = []
    for i in range(n):
        score = 0.0
        if with_global:
            score += model_similarity(sigs[i], global_sig, use_top, use_bottom)
        if with_local:
            # ordered summation keeps results bit-stable
            local = 0.0
            for j in range(n):
                if j != i:
                    local += sims[i, j]
            score += local / n
        scores.append(score)
    return scores


def min_max_scale(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    lo, hi = raw.min(), raw.max()
    if hi == lo:
        return np.full(raw.shape, 0.5)
    return (raw - lo) / (hi - lo)


def logit_weight(scaled, eps: float = LOGIT_EPS) -> np.ndarray:
    """``clip(ln(s / (1 - s)) + 0.5, 0, 1)`` with ``s`` clamped into ``[eps, 1 - eps]``."""
    s = np.clip(np.asarray(scaled, dtype=np.float64), eps, 1.0 - eps)
    return np.clip(np.log(s / (1.0 - s)) + 0.5, 0.0, 1.0)


def weights_from_scores(raw) -> np.ndarray:
    if len(raw) == 0:
        raise ValueError("no scores to convert")
    return logit_weight(min_max_scale(raw))
