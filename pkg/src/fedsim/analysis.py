"""Importance-rank-change profiles of local models against the global model."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .params import LayoutError, ParamVector, compute_importance, rank_map
from .simulation import ScenarioConfig, build_environment, client_step, run_scenario


@dataclass(frozen=True)
class RankChangeProfile:
    """Mean and std of |rank change| per bucket of global-importance rank.

    Bucket 0 holds the least important parameters of the global model.
    ``centers`` is the mean global rank inside each bucket and ``sizes`` the
    number of parameters it holds.
    """

    centers: np.ndarray
    mean_change: np.ndarray
    std_change: np.ndarray
    sizes: np.ndarray

    @property
    def bucket_count(self) -> int:
        return int(self.centers.size)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bucket", "center", "mean_change", "std_change"])
            for b in range(self.bucket_count):
                w.writerow([b, repr(float(self.centers[b])), repr(float(self.mean_change[b])),
                            repr(float(self.std_change[b]))])


@dataclass(frozen=True)
class Disparity:
    centers: np.ndarray
    values: np.ndarray

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bucket", "center", "disparity"])
            for b, (c, v) in enumerate(zip(self.centers, self.values)):
                w.writerow([b, repr(float(c)), repr(float(v))])


def rank_changes(global_importance, local_importance) -> np.ndarray:
    """Per-parameter |rank_global - rank_local|."""
    g = rank_map(global_importance)
    loc = rank_map(local_importance)
    return np.abs(g - loc).astype(np.float64)


def profile_from_importance(global_importance, local_importances: Sequence, buckets: int = 50) -> RankChangeProfile:
    g_imp = np.asarray(global_importance, dtype=np.float64)
    dim = g_imp.size
    if not local_importances:
        raise ValueError("need at least one local model")
    if not 2 <= buckets <= dim:
        raise ValueError(f"bucket count must lie in [2, {dim}], got {buckets}")
    if np.ptp(g_imp) == 0:
        raise ValueError("global importance is constant; its ranking carries no information")
    order = np.argsort(rank_map(g_imp))  # parameter indices by ascending global rank
    groups = np.array_split(np.arange(dim), buckets)
    means = np.zeros((len(local_importances), buckets))
    stds = np.zeros_like(means)
    for c, imp in enumerate(local_importances):
        imp = np.asarray(imp, dtype=np.float64)
        if imp.size != dim:
            raise LayoutError("local importance size differs from the global model")
        change = rank_changes(g_imp, imp)[order]
        for b, pos in enumerate(groups):
            means[c, b] = change[pos].mean()
            stds[c, b] = change[pos].std()
    return RankChangeProfile(
        centers=np.array([pos.mean() for pos in groups]),
        mean_change=means.mean(axis=0),
        std_change=stds.mean(axis=0),
        sizes=np.array([pos.size for pos in groups]),
    )


def rank_change_profile(phi_prev: ParamVector, phi: ParamVector, local_thetas: Sequence[ParamVector],
                        buckets: int = 50) -> RankChangeProfile:
    """Compare each local model trained from ``phi`` with the global update that produced ``phi``."""
    if phi_prev.layout != phi.layout:
        raise LayoutError("global checkpoints have different layouts")
    g_imp = compute_importance(phi - phi_prev, phi)
    locals_ = []
    for theta in local_thetas:
        if theta.layout != phi.layout:
            raise LayoutError("local model layout differs from the global model")
        locals_.append(compute_importance(theta - phi, theta))
    return profile_from_importance(g_imp, locals_, buckets)


def average_profiles(profiles: Sequence[RankChangeProfile]) -> RankChangeProfile:
    if not profiles:
        raise ValueError("nothing to average")
    first = profiles[0]
    if any(p.bucket_count != first.bucket_count for p in profiles):
        raise ValueError("profiles have different bucket counts")
    return RankChangeProfile(
        centers=np.mean([p.centers for p in profiles], axis=0),
        mean_change=np.mean([p.mean_change for p in profiles], axis=0),
        std_change=np.mean([p.std_change for p in profiles], axis=0),
        sizes=first.sizes,
    )


def disparity_profile(benign: RankChangeProfile, poisoned: RankChangeProfile) -> Disparity:
    """Poisoned minus benign mean rank change, bucket by bucket."""
    if benign.bucket_count != poisoned.bucket_count:
        raise ValueError(f"bucket counts differ ({benign.bucket_count} vs {poisoned.bucket_count})")
    return Disparity(benign.centers.copy(), poisoned.mean_change - benign.mean_change)


def decile_means(values, buckets: int) -> tuple[float, float, float]:
    """(bottom, middle, top) decile averages of a per-bucket series.

    ``buckets`` must be a multiple of 10 so that deciles align with buckets;
    the middle decile is the central tenth straddling the median rank.
    """
    if buckets % 10:
        raise ValueError("decile summary needs a bucket count divisible by 10")
    v = np.asarray(values, dtype=np.float64)
    w = buckets // 10
    mid = buckets // 2
    return float(v[:w].mean()), float(v[mid - w // 2 - w % 2: mid + w // 2].mean()), float(v[-w:].mean())


@dataclass(frozen=True)
class Snapshot:
    """Global models around round ``round`` plus locals trained from ``phi``."""

    round: int
    phi_prev: ParamVector
    phi: ParamVector
    benign: tuple
    poisoned: tuple


def collect_snapshots(cfg: ScenarioConfig, rounds: Sequence[int]) -> list[Snapshot]:
    """Run a clean scenario and, after each listed round, train every client
    once on clean data and once on backdoored data from the same global model.

    The clean and poisoned model of a client share the training seed, so they
    differ only by the poisoned samples.
    """
    wanted = set(int(t) for t in rounds)
    if not wanted or min(wanted) < 0 or max(wanted) >= cfg.rounds:
        raise ValueError(f"analysis rounds must lie in [0, {cfg.rounds})")
    # the global trajectory itself is attack-free
    cfg = replace(cfg, attack="none")
    env = build_environment(cfg)
    snaps = []

    def grab(t, phi_prev, phi):
        if t not in wanted:
            return
        benign, poisoned = [], []
        for i, shard in enumerate(env.shards):
            benign.append(client_step("benign", phi, shard, cfg, t + 1, i)[1])
            poisoned.append(client_step("backdoor", phi, shard, cfg, t + 1, i, env.trigger)[1])
        snaps.append(Snapshot(t, phi_prev, phi, tuple(benign), tuple(poisoned)))

    run_scenario(cfg, env=env, callback=grab)
    return snaps
