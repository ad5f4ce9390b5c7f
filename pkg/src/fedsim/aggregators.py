"""Server-side aggregation rules.

Every rule maps one round's :class:`UpdateSet` to an :class:`AggregationResult`
holding the global delta to add to the current global model, plus the
per-client weights the rule implied (for logging).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .params import ConfigurationError, LayoutError, ParamVector
from .similarity import (
    global_signature,
    logit_weight,
    min_max_scale,
    normality_scores,
    signature,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ClientUpdate:
    client_id: int
    delta: ParamVector
    theta: ParamVector
    dataset_size: int = 1


@dataclass(frozen=True)
class UpdateSet:
    entries: tuple[ClientUpdate, ...]

    def __post_init__(self):
        entries = tuple(self.entries)
        if not entries:
            raise ValueError("an update set needs at least one client")
        layout = entries[0].delta.layout
        for e in entries:
            if e.delta.layout != layout or e.theta.layout != layout:
                raise LayoutError(f"client {e.client_id} submitted a mismatched layout")
        ids = [e.client_id for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError("client ids in an update set must be unique")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_deltas(cls, deltas, thetas=None, ids=None, sizes=None) -> "UpdateSet":
        """Convenience constructor from raw arrays (used heavily in tests)."""
        deltas = [d if isinstance(d, ParamVector) else ParamVector.flat(d) for d in deltas]
        if thetas is None:
            thetas = deltas
        thetas = [t if isinstance(t, ParamVector) else ParamVector.flat(t) for t in thetas]
        ids = list(range(len(deltas))) if ids is None else list(ids)
        sizes = [1] * len(deltas) if sizes is None else list(sizes)
        return cls(tuple(ClientUpdate(i, d, t, s) for i, d, t, s in zip(ids, deltas, thetas, sizes)))

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def ids(self) -> list[int]:
        return [e.client_id for e in self.entries]

    @property
    def layout(self):
        return self.entries[0].delta.layout

    def delta_matrix(self) -> np.ndarray:
        return np.stack([e.delta.values for e in self.entries])


@dataclass(frozen=True)
class AggregationResult:
    global_delta: ParamVector
    client_weights: dict


def _result(u: UpdateSet, values: np.ndarray, weights: Sequence[float]) -> AggregationResult:
    return AggregationResult(
        ParamVector(values, u.layout),
        {cid: float(w) for cid, w in zip(u.ids, weights)},
    )


def _ordered_mean(rows: np.ndarray) -> np.ndarray:
    # fixed left-to-right summation so results do not depend on BLAS blocking
    total = np.zeros(rows.shape[1])
    for r in rows:
        total = total + r
    return total / rows.shape[0]


def agg_fedavg(u: UpdateSet, weighted: bool = False) -> AggregationResult:
    """Plain mean of the deltas; ``weighted=True`` weights by local dataset size."""
    x = u.delta_matrix()
    if not weighted:
        return _result(u, _ordered_mean(x), [1.0 / len(u)] * len(u))
    sizes = np.array([e.dataset_size for e in u.entries], dtype=np.float64)
    w = sizes / sizes.sum()
    total = np.zeros(x.shape[1])
    for wi, row in zip(w, x):
        total = total + wi * row
    return _result(u, total, w)


def _median_rows(x: np.ndarray) -> np.ndarray:
    s = np.sort(x, axis=0)
    n = s.shape[0]
    if n % 2:
        return s[n // 2]
    return (s[n // 2 - 1] + s[n // 2]) / 2.0


def agg_median(u: UpdateSet) -> AggregationResult:
    return _result(u, _median_rows(u.delta_matrix()), [1.0] * len(u))


def agg_trimmed_mean(u: UpdateSet, trim_fraction: float = 0.2) -> AggregationResult:
    """Coordinatewise mean after dropping ``floor(trim_fraction * n)`` values from each end."""
    n = len(u)
    k = math.floor(trim_fraction * n)
    if trim_fraction < 0 or 2 * k >= n:
        raise ConfigurationError(f"trim fraction {trim_fraction} removes every one of {n} values")
    s = np.sort(u.delta_matrix(), axis=0)
    kept = s[k : n - k]
    return _result(u, kept.sum(axis=0) / kept.shape[0], [(n - 2 * k) / n] * n)


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - x[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def krum_select(x: np.ndarray, n_attackers: int, select_count: Optional[int] = None) -> list[int]:
    """Row indices picked by Multi-Krum, in selection order.

    Each candidate is scored by the summed squared distance to its
    ``n - m - 2`` nearest remaining neighbours (capped by how many remain).
    The best candidate is removed from the pool and the rest are rescored.
    Ties go to the lowest row index.
    """
    n = x.shape[0]
    if n < n_attackers + 3:
        raise ConfigurationError(f"Multi-Krum needs n >= m + 3 (n={n}, m={n_attackers})")
    if select_count is None:
        select_count = n - n_attackers
    if not 1 <= select_count <= n:
        raise ConfigurationError(f"cannot select {select_count} of {n} updates")
    dist = _pairwise_sq_dists(x)
    neighbours = n - n_attackers - 2
    pool = list(range(n))
    chosen = []
    for _ in range(select_count):
        k = min(neighbours, len(pool) - 1)
        best, best_score = None, math.inf
        for i in pool:
            others = np.sort([dist[i, j] for j in pool if j != i])
            score = float(others[:k].sum())
            if score < best_score:
                best, best_score = i, score
        chosen.append(best)
        pool.remove(best)
    return chosen


def agg_multi_krum(u: UpdateSet, n_attackers: int, select_count: Optional[int] = None) -> AggregationResult:
    x = u.delta_matrix()
    # order rows by client id so ties break on the lowest id
    order = np.argsort(u.ids, kind="stable")
    picked = sorted(order[i] for i in krum_select(x[order], n_attackers, select_count))
    weights = np.zeros(len(u))
    weights[picked] = 1.0
    return _result(u, _ordered_mean(x[picked]), weights)


@dataclass
class FoolsGoldState:
    """Running sum of every client's submitted deltas, keyed by client id."""

    history: dict = field(default_factory=dict)

    def update(self, u: UpdateSet) -> None:
        for e in u.entries:
            prev = self.history.get(e.client_id)
            self.history[e.client_id] = e.delta.values.copy() if prev is None else prev + e.delta.values


def foolsgold_weights(history: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    n = history.shape[0]
    if n == 1:
        return np.ones(1)
    norms = np.linalg.norm(history, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = history / safe[:, None]
    cs = unit @ unit.T
    np.fill_diagonal(cs, 0.0)
    maxcs = cs.max(axis=1)
    # pardoning: shrink similarity to clients that look more sybil-like than i
    for i in range(n):
        for j in range(n):
            if i != j and maxcs[i] < maxcs[j]:
                cs[i, j] = cs[i, j] * maxcs[i] / maxcs[j]
    wv = np.clip(1.0 - cs.max(axis=1), 0.0, 1.0)
    if wv.max() > 0:
        wv = wv / wv.max()
    return logit_weight(wv, eps)


def agg_foolsgold(u: UpdateSet, state: FoolsGoldState) -> AggregationResult:
    """FoolsGold reweighting on accumulated update histories.

    ``state`` must already contain this round's deltas (call
    ``state.update(u)`` first).
    """
    missing = [cid for cid in u.ids if cid not in state.history]
    if missing:
        raise ValueError(f"FoolsGold history lacks clients {missing}; update the state first")
    hist = np.stack([state.history[cid] for cid in u.ids])
    lam = foolsgold_weights(hist)
    x = u.delta_matrix()
    total = np.zeros(x.shape[1])
    for w, row in zip(lam, x):
        total = total + w * row
    return _result(u, total / len(u), lam)


def agg_norm_bound(u: UpdateSet, threshold: Optional[float] = None, median_factor: float = 2.0,
                   mode: str = "exclude") -> AggregationResult:
    """Drop (or clip) updates whose L2 norm exceeds a threshold, then average.

    Without a fixed ``threshold`` the bound is ``median_factor`` times the
    median update norm of the round.
    """
    x = u.delta_matrix()
    norms = np.linalg.norm(x, axis=1)
    tau = float(median_factor * np.median(norms)) if threshold is None else float(threshold)
    if mode == "clip":
        scale = np.where(norms > tau, tau / np.where(norms > 0, norms, 1.0), 1.0)
        return _result(u, _ordered_mean(x * scale[:, None]), scale)
    if mode != "exclude":
        raise ConfigurationError(f"unknown norm-bound mode {mode!r}")
    keep = norms <= tau
    if not keep.any():
        log.warning("norm bound %.4g excluded every update; falling back to all", tau)
        keep[:] = True
    return _result(u, _ordered_mean(x[keep]), keep.astype(float))


def geometric_median(x: np.ndarray, smoothing: float = 1e-6, max_iters: int = 100,
                     tol: float = 1e-8) -> np.ndarray:
    """Smoothed Weiszfeld iteration started from the mean."""
    z = _ordered_mean(x)
    for _ in range(max_iters):
        d = np.maximum(np.linalg.norm(x - z, axis=1), smoothing)
        w = 1.0 / d
        z_new = (w @ x) / w.sum()
        step = float(np.linalg.norm(z_new - z))
        z = z_new
        if step < tol:
            break
    return z


def agg_rfa(u: UpdateSet, smoothing: float = 1e-6, max_iters: int = 100) -> AggregationResult:
    x = u.delta_matrix()
    z = geometric_median(x, smoothing, max_iters)
    d = np.maximum(np.linalg.norm(x - z, axis=1), smoothing)
    w = (1.0 / d) / (1.0 / d).sum()
    return _result(u, z, w)


def repeated_median_line(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Siegel repeated-median fit of ``y[:, d]`` against ``x = 0..n-1`` for each column."""
    n = y.shape[0]
    x = np.arange(n, dtype=np.float64)
    if n == 1:
        return np.zeros(y.shape[1]), y[0].copy()
    dx = x[None, :] - x[:, None]
    dy = y[None, :, :] - y[:, None, :]
    off = ~np.eye(n, dtype=bool)
    slopes = np.empty((n, n - 1, y.shape[1]))
    for i in range(n):
        slopes[i] = dy[i, off[i]] / dx[i, off[i]][:, None]
    slope = np.median(np.median(slopes, axis=1), axis=0)
    intercept = np.median(y - slope[None, :] * x[:, None], axis=0)
    return slope, intercept


def agg_residual_base(u: UpdateSet, confidence_interval: float = 2.0,
                      clip_threshold: float = 0.05) -> AggregationResult:
    """Residual-based reweighting with a repeated-median fit per coordinate.

    Client values of each coordinate are sorted and fitted against their rank
    with a repeated-median line; confidence falls linearly with the residual
    measured in robust (MAD) standard deviations.
    """
    x = u.delta_matrix()
    n, dim = x.shape
    order = np.argsort(x, axis=0, kind="stable")
    y = np.take_along_axis(x, order, axis=0)
    slope, intercept = repeated_median_line(y)
    fit = intercept[None, :] + slope[None, :] * np.arange(n, dtype=np.float64)[:, None]
    resid = y - fit
    sigma = np.maximum(1.4826 * np.median(np.abs(resid), axis=0), 1e-12)
    conf = np.maximum(0.0, 1.0 - np.abs(resid) / (confidence_interval * sigma[None, :]))
    conf[conf < clip_threshold] = 0.0
    csum = conf.sum(axis=0)
    agg = np.where(csum > 0, (conf * y).sum(axis=0) / np.where(csum > 0, csum, 1.0), _median_rows(y))
    # map per-coordinate confidences back to clients for a diagnostic weight
    back = np.empty_like(conf)
    np.put_along_axis(back, order, conf, axis=0)
    return _result(u, agg, back.mean(axis=1))


@dataclass(frozen=True)
class FedCpaConfig:
    k_ratio: float = 0.01
    use_top: bool = True
    use_bottom: bool = True
    use_global_term: bool = True
    use_local_term: bool = True
    normalize: str = "count"

    def __post_init__(self):
        if not (self.use_top or self.use_bottom):
            raise ConfigurationError("FedCPA needs at least one of use_top / use_bottom")
        if not (self.use_global_term or self.use_local_term):
            raise ConfigurationError("FedCPA needs at least one of the global / local terms")
        if self.normalize not in ("count", "sum"):
            raise ConfigurationError(f"unknown FedCPA normalization {self.normalize!r}")


def fedcpa_weights(u: UpdateSet, prev_global=None, cfg: FedCpaConfig = FedCpaConfig()):
    """Raw normality scores and the resulting client weights."""
    sigs = [signature(e.delta, e.theta, cfg.k_ratio) for e in u.entries]
    gsig = None
    if prev_global is not None:
        phi_prev, phi = prev_global
        gsig = global_signature(phi_prev, phi, cfg.k_ratio)
    raw = normality_scores(
        sigs, gsig,
        use_top=cfg.use_top, use_bottom=cfg.use_bottom,
        use_local=cfg.use_local_term, use_global=cfg.use_global_term,
    )
    return np.asarray(raw), logit_weight(min_max_scale(raw))


def agg_fedcpa(u: UpdateSet, prev_global=None, cfg: FedCpaConfig = FedCpaConfig()) -> AggregationResult:
    """Critical-parameter-weighted aggregation.

    ``prev_global`` is the pair ``(previous global model, current global
    model)``; pass ``None`` in the first round. The weighted sum of deltas is
    divided by the number of clients with a positive weight (``normalize=
    "count"``) or by the weight sum (``normalize="sum"``).
    """
    _, lam = fedcpa_weights(u, prev_global, cfg)
    x = u.delta_matrix()
    total = np.zeros(x.shape[1])
    for w, row in zip(lam, x):
        total = total + w * row
    denom = float(np.count_nonzero(lam > 0)) if cfg.normalize == "count" else float(lam.sum())
    if denom == 0:
        raise ValueError("every FedCPA weight is zero")
    return _result(u, total / denom, lam)


AGGREGATORS: dict[str, Callable] = {
    "fedavg": agg_fedavg,
    "median": agg_median,
    "trimmed_mean": agg_trimmed_mean,
    "multi_krum": agg_multi_krum,
    "foolsgold": agg_foolsgold,
    "norm_bound": agg_norm_bound,
    "rfa": agg_rfa,
    "residual_base": agg_residual_base,
    "fedcpa": agg_fedcpa,
}
