"""Round-based federated training with benign and malicious clients."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import aggregators as agg
from .data import (
    Dataset,
    PartitionSpec,
    TriggerSpec,
    apply_trigger,
    dirichlet_partition,
    make_blobs,
    poison_backdoor,
    poison_label_flip,
)
from .model import MLPSpec, TrainConfig, accuracy, init_model, predict, train_local
from .params import ConfigurationError, ParamVector

ATTACKS = ("none", "label_flip", "gaussian", "backdoor")

# RNG stream tags, mixed into SeedSequence entropy
_ROLES, _SAMPLE, _CLIENT, _INIT, _PARTITION, _TRAIN_DATA, _TEST_DATA = range(7)


@dataclass(frozen=True)
class DataConfig:
    """Synthetic blob dataset used for training and held-out evaluation."""

    classes: int = 4
    dim: int = 64
    per_class: int = 500
    test_per_class: int = 250
    spread: float = 0.1
    scale: float = 1.0
    layout: str = "top"

    def __post_init__(self):
        if self.classes < 2 or self.dim < 2:
            raise ConfigurationError("data needs at least 2 classes and 2 dimensions")
        if self.per_class < 1 or self.test_per_class < 1:
            raise ConfigurationError("per_class and test_per_class must be positive")
        if self.spread < 0:
            raise ConfigurationError("spread must be non-negative")
        if self.layout not in ("stripes", "top"):
            raise ConfigurationError(f"unknown blob layout {self.layout!r}")


@dataclass(frozen=True)
class AggregatorConfig:
    name: str = "fedcpa"
    # desk-scale critical fraction; see FedCpaConfig for the full-size value
    fedcpa: agg.FedCpaConfig = agg.FedCpaConfig(k_ratio=0.1)
    trim_fraction: float = 0.2
    krum_attackers: Optional[int] = None
    krum_select: Optional[int] = None
    norm_threshold: Optional[float] = None
    norm_median_factor: float = 2.0
    norm_mode: str = "exclude"
    rfa_smoothing: float = 1e-6
    rfa_max_iters: int = 100
    rb_confidence_interval: float = 2.0
    rb_clip_threshold: float = 0.05
    fedavg_weighted: bool = False

    def __post_init__(self):
        if self.name not in agg.AGGREGATORS:
            raise ConfigurationError(f"unknown aggregator {self.name!r}")


@dataclass(frozen=True)
class ScenarioConfig:
    n_clients: int = 20
    attacker_fraction: float = 0.2
    beta: float = 0.5
    attack: str = "none"
    gamma_p: float = 0.8
    gaussian_std: float = 0.05
    rounds: int = 100
    participation_fraction: float = 0.5
    aggregator: AggregatorConfig = AggregatorConfig()
    hidden: tuple[int, ...] = (128,)
    train: TrainConfig = TrainConfig()
    data: DataConfig = DataConfig()
    trigger: TriggerSpec = TriggerSpec()
    asr_include_target: bool = False
    summary_window: int = 10
    master_seed: int = 0

    def __post_init__(self):
        if self.n_clients < 2:
            raise ConfigurationError("n_clients must be at least 2")
        if not 0.0 <= self.attacker_fraction < 1.0:
            raise ConfigurationError("attacker_fraction must lie in [0, 1)")
        if not 0.0 < self.participation_fraction <= 1.0:
            raise ConfigurationError("participation_fraction must lie in (0, 1]")
        if self.rounds < 1:
            raise ConfigurationError("rounds must be at least 1")
        if self.attack not in ATTACKS:
            raise ConfigurationError(f"attack must be one of {ATTACKS}, got {self.attack!r}")
        if not 0.0 <= self.gamma_p <= 1.0:
            raise ConfigurationError("gamma_p must lie in [0, 1]")
        if not self.beta > 0:
            raise ConfigurationError("beta must be positive")
        if self.gaussian_std < 0:
            raise ConfigurationError("gaussian_std must be non-negative")
        if self.summary_window < 1:
            raise ConfigurationError("summary_window must be at least 1")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigurationError("hidden must list positive layer widths")

    @property
    def model_spec(self) -> MLPSpec:
        return MLPSpec((self.data.dim, *self.hidden, self.data.classes))

    @property
    def clients_per_round(self) -> int:
        return math.ceil(self.participation_fraction * self.n_clients)


@dataclass
class RoundLog:
    round: int
    selected: list
    weights: dict
    acc: float
    asr: Optional[float]
    update_norm: float


@dataclass
class Summary:
    acc: float
    asr: Optional[float]
    window: int


def _rng(cfg: ScenarioConfig, *tags) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.master_seed, *tags]))


def _seed(cfg: ScenarioConfig, *tags) -> np.random.SeedSequence:
    return np.random.SeedSequence([cfg.master_seed, *tags])


def assign_roles(cfg: ScenarioConfig) -> frozenset:
    """The fixed set of malicious client ids for this scenario."""
    m = math.floor(cfg.attacker_fraction * cfg.n_clients + 0.5)
    if m >= cfg.n_clients:
        raise ConfigurationError(f"{m} attackers leave no benign client among {cfg.n_clients}")
    if m == 0 or cfg.attack == "none":
        return frozenset()
    ids = _rng(cfg, _ROLES).choice(cfg.n_clients, size=m, replace=False)
    return frozenset(int(i) for i in ids)


def client_step(role: str, global_params: ParamVector, local_data: Dataset, cfg: ScenarioConfig,
                round_idx: int, client_id: int, trigger: Optional[TriggerSpec] = None):
    """One client's work for a round; returns ``(delta, theta)``.

    Only the client's own data and the global model are visible here.
    """
    if len(local_data) == 0:
        raise ValueError(f"client {client_id} has no local data")
    stream = _seed(cfg, _CLIENT, client_id, round_idx)
    poison_seed, train_seed = stream.spawn(2)
    if role == "gaussian":
        rng = np.random.default_rng(train_seed)
        delta = global_params.with_values(rng.normal(0.0, cfg.gaussian_std, global_params.dim))
        return delta, global_params + delta
    if role == "label_flip":
        local_data = poison_label_flip(local_data, cfg.gamma_p, poison_seed)
    elif role == "backdoor":
        local_data = poison_backdoor(local_data, cfg.gamma_p, trigger or cfg.trigger, poison_seed)
    elif role != "benign":
        raise ValueError(f"unknown client role {role!r}")
    theta, delta = train_local(global_params, cfg.model_spec, local_data, cfg.train, train_seed)
    return delta, theta


def evaluate_asr(params: ParamVector, spec: MLPSpec, test: Dataset, trigger: TriggerSpec,
                 include_target: bool = False) -> float:
    """Fraction of triggered test inputs classified as the target label.

    Samples whose true label already is the target are skipped unless
    ``include_target`` is set.
    """
    if len(test) == 0:
        raise ValueError("empty test set")
    trigger = trigger.resolved(test)
    mask = np.ones(len(test), dtype=bool) if include_target else test.labels != trigger.target_label
    if not mask.any():
        raise ValueError("every test sample already carries the target label")
    feats = apply_trigger(test.features[mask], trigger, test.grid)
    return float(np.mean(predict(params, spec, feats) == trigger.target_label))


@dataclass
class Environment:
    """Everything fixed for a run: data shards, roles and the test set."""

    train: Dataset
    test: Dataset
    shards: list
    malicious: frozenset
    trigger: TriggerSpec


def build_environment(cfg: ScenarioConfig) -> Environment:
    d = cfg.data
    seed_train, seed_test, seed_part = (int(s.generate_state(1)[0]) for s in
                                        (_seed(cfg, _TRAIN_DATA), _seed(cfg, _TEST_DATA), _seed(cfg, _PARTITION)))
    train = make_blobs(d.classes, d.dim, d.per_class, d.spread, seed_train, scale=d.scale,
                       layout=d.layout)
    test = make_blobs(d.classes, d.dim, d.test_per_class, d.spread, seed_test, scale=d.scale,
                      layout=d.layout)
    parts = dirichlet_partition(train, PartitionSpec(cfg.n_clients, cfg.beta, seed_part))
    shards = [train.subset(p) for p in parts]
    # one patch value shared by attackers and evaluation
    trigger = cfg.trigger.resolved(train)
    return Environment(train, test, shards, assign_roles(cfg), trigger)


def _aggregate(u: agg.UpdateSet, cfg: ScenarioConfig, prev_global, fg_state, n_malicious: int):
    a = cfg.aggregator
    if a.name == "fedavg":
        return agg.agg_fedavg(u, weighted=a.fedavg_weighted)
    if a.name == "median":
        return agg.agg_median(u)
    if a.name == "trimmed_mean":
        return agg.agg_trimmed_mean(u, a.trim_fraction)
    if a.name == "multi_krum":
        m = a.krum_attackers
        if m is None:
            # the server knows the attacker bound; scale it to the round's sample
            m = math.ceil(n_malicious * len(u) / cfg.n_clients)
        m = min(m, len(u) - 3)
        return agg.agg_multi_krum(u, max(m, 0), a.krum_select)
    if a.name == "foolsgold":
        fg_state.update(u)
        return agg.agg_foolsgold(u, fg_state)
    if a.name == "norm_bound":
        return agg.agg_norm_bound(u, a.norm_threshold, a.norm_median_factor, a.norm_mode)
    if a.name == "rfa":
        return agg.agg_rfa(u, a.rfa_smoothing, a.rfa_max_iters)
    if a.name == "residual_base":
        return agg.agg_residual_base(u, a.rb_confidence_interval, a.rb_clip_threshold)
    return agg.agg_fedcpa(u, prev_global, a.fedcpa)


def run_scenario(cfg: ScenarioConfig, workers: int = 1, env: Optional[Environment] = None,
                 callback=None):
    """Run the full simulation; returns ``(round_logs, summary)``.

    ``workers`` only controls how many client steps run concurrently; the
    result is the same for any value. ``callback(round, phi_prev, phi)``
    is invoked after every round if given.
    """
    env = env or build_environment(cfg)
    spec = cfg.model_spec
    phi = init_model(spec, int(_seed(cfg, _INIT).generate_state(1)[0]))
    phi_prev = None
    fg_state = agg.FoolsGoldState()
    role_of = {i: (cfg.attack if i in env.malicious else "benign") for i in range(cfg.n_clients)}
    logs = []
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for t in range(cfg.rounds):
            selected = sorted(int(i) for i in _rng(cfg, _SAMPLE, t).choice(
                cfg.n_clients, size=cfg.clients_per_round, replace=False))
            jobs = [(role_of[i], phi, env.shards[i], cfg, t, i, env.trigger) for i in selected]
            if pool is None:
                outs = [client_step(*j) for j in jobs]
            else:
                outs = list(pool.map(lambda j: client_step(*j), jobs))
            u = agg.UpdateSet(tuple(
                agg.ClientUpdate(i, delta, theta, len(env.shards[i]))
                for i, (delta, theta) in zip(selected, outs)))
            prev_pair = (phi_prev, phi) if phi_prev is not None else None
            res = _aggregate(u, cfg, prev_pair, fg_state, len(env.malicious))
            phi_prev, phi = phi, phi + res.global_delta
            acc = accuracy(phi, spec, env.test)
            asr = None
            if cfg.attack == "backdoor":
                asr = evaluate_asr(phi, spec, env.test, env.trigger, cfg.asr_include_target)
            logs.append(RoundLog(t, selected, res.client_weights, acc, asr, res.global_delta.norm()))
            if callback is not None:
                callback(t, phi_prev, phi)
    finally:
        if pool is not None:
            pool.shutdown()
    return logs, summarize(logs, cfg.summary_window)


def summarize(logs: list, window: int = 10) -> Summary:
    tail = logs[-min(window, len(logs)):]
    asrs = [r.asr for r in tail if r.asr is not None]
    return Summary(
        acc=float(np.mean([r.acc for r in tail])),
        asr=float(np.mean(asrs)) if asrs else None,
        window=len(tail),
    )


ROUND_FIELDS = ["round", "acc", "asr", "update_norm", "selected_ids", "weights"]


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_rounds_csv(logs: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ROUND_FIELDS)
        for r in logs:
            w.writerow([
                r.round, _fmt(r.acc), _fmt(r.asr), _fmt(r.update_norm),
                ";".join(str(i) for i in r.selected),
                ";".join(f"{cid}={float(lam)!r}" for cid, lam in sorted(r.weights.items())),
            ])


def read_rounds_csv(path) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            weights = {}
            if row["weights"]:
                for pair in row["weights"].split(";"):
                    k, v = pair.split("=")
                    weights[int(k)] = float(v)
            out.append(RoundLog(
                round=int(row["round"]),
                selected=[int(i) for i in row["selected_ids"].split(";") if i],
                weights=weights,
                acc=float(row["acc"]),
                asr=float(row["asr"]) if row["asr"] else None,
                update_norm=float(row["update_norm"]),
            ))
    return out

