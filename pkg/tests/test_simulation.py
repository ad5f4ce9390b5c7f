import dataclasses

import numpy as np
import pytest

from fedsim.data import TriggerSpec, make_blobs, trigger_coords
from fedsim.model import MLPSpec, TrainConfig, accuracy, init_model
from fedsim.params import ConfigurationError, ParamVector
from fedsim.simulation import (
    AggregatorConfig,
    DataConfig,
    ScenarioConfig,
    assign_roles,
    build_environment,
    client_step,
    evaluate_asr,
    read_rounds_csv,
    run_scenario,
    summarize,
    write_rounds_csv,
)

SMALL = ScenarioConfig(
    n_clients=6, rounds=4, hidden=(8,), data=DataConfig(per_class=30, test_per_class=15),
    aggregator=AggregatorConfig(name="fedavg"),
)


def small(**kw):
    return dataclasses.replace(SMALL, **kw)


class TestRoles:
    def test_rounding(self):
        assert len(assign_roles(small(attack="backdoor", n_clients=10, attacker_fraction=0.25))) == 3
        assert len(assign_roles(small(attack="backdoor", n_clients=10, attacker_fraction=0.2))) == 2

    def test_none_attack_has_no_attackers(self):
        assert assign_roles(small(attack="none", attacker_fraction=0.5)) == frozenset()

    def test_seeded(self):
        cfg = small(attack="gaussian", n_clients=20, attacker_fraction=0.3)
        assert assign_roles(cfg) == assign_roles(cfg)

    def test_validation(self):
        with pytest.raises(ConfigurationError):
            small(attack="sybil")
        with pytest.raises(ConfigurationError):
            small(participation_fraction=0.0)


class TestClientStep:
    def setup_method(self):
        self.env = build_environment(SMALL)
        self.phi = init_model(SMALL.model_spec, 0)

    def test_gaussian_statistics(self):
        cfg = small(attack="gaussian")
        big = ParamVector.flat(np.zeros(20_000))
        delta, theta = client_step("gaussian", big, self.env.shards[0], cfg, 0, 0)
        assert abs(delta.values.mean()) < 0.005
        assert delta.values.std() == pytest.approx(0.05, rel=0.1)
        assert theta == big + delta

    def test_zero_learning_rate(self):
        cfg = small(train=TrainConfig(learning_rate=0.0))
        delta, theta = client_step("benign", self.phi, self.env.shards[0], cfg, 0, 0)
        assert np.all(delta.values == 0) and theta == self.phi

    def test_backdoor_without_poison_is_benign(self):
        cfg = small(gamma_p=0.0)
        a = client_step("benign", self.phi, self.env.shards[1], cfg, 2, 1)
        b = client_step("backdoor", self.phi, self.env.shards[1], cfg, 2, 1, self.env.trigger)
        assert a[0] == b[0] and a[1] == b[1]

    def test_poisoning_changes_update(self):
        a = client_step("benign", self.phi, self.env.shards[1], SMALL, 2, 1)
        b = client_step("label_flip", self.phi, self.env.shards[1], SMALL, 2, 1)
        assert a[0] != b[0]

    def test_empty_data(self):
        empty = self.env.shards[0].subset([])
        with pytest.raises(ValueError):
            client_step("benign", self.phi, empty, SMALL, 0, 0)


class TestAsr:
    spec = MLPSpec((64, 4))
    trigger = TriggerSpec(5, 5, 3.0, 0)

    def model(self, weights, bias):
        return ParamVector(np.concatenate([weights.reshape(-1), bias]), self.spec.layout())

    def test_constant_target(self):
        test = make_blobs(4, 64, 10, 0.1, 0)
        params = self.model(np.zeros((64, 4)), np.array([1.0, 0, 0, 0]))
        assert evaluate_asr(params, self.spec, test, self.trigger) == 1.0

    def test_patch_blind_perfect_classifier(self):
        test = make_blobs(4, 64, 10, 0.1, 0)
        w = np.zeros((64, 4))
        for c in range(4):
            w[np.arange(64) % 4 == c, c] = 1.0
        w[trigger_coords((8, 8), self.trigger)] = 0.0
        params = self.model(w, np.zeros(4))
        assert accuracy(params, self.spec, test) == 1.0
        assert evaluate_asr(params, self.spec, test, self.trigger) == 0.0

    def test_half(self):
        # class 1 and 2 rows: one always goes to the target under the trigger, the other never
        test = make_blobs(4, 64, 10, 0.1, 0)
        test = test.subset(np.flatnonzero(np.isin(test.labels, [1, 2])))
        w = np.zeros((64, 4))
        w[np.arange(64) % 4 == 1, 0] = 1.0
        w[np.arange(64) % 4 == 2, 2] = 1.0
        params = self.model(w, np.zeros(4))
        assert evaluate_asr(params, self.spec, test, self.trigger) == 0.5

    def test_all_target_undefined(self):
        test = make_blobs(4, 64, 10, 0.1, 0)
        test = test.subset(np.flatnonzero(test.labels == 0))
        params = self.model(np.zeros((64, 4)), np.zeros(4))
        with pytest.raises(ValueError):
            evaluate_asr(params, self.spec, test, self.trigger)
        assert evaluate_asr(params, self.spec, test, self.trigger, include_target=True) == 1.0


class TestRun:
    def test_single_client_zero_lr_keeps_model(self):
        cfg = small(n_clients=2, participation_fraction=0.5, rounds=1, train=TrainConfig(learning_rate=0.0))
        seen = []
        logs, summary = run_scenario(cfg, callback=lambda t, prev, cur: seen.append((prev, cur)))
        prev, cur = seen[0]
        assert prev == cur
        env = build_environment(cfg)
        assert logs[0].acc == accuracy(prev, cfg.model_spec, env.test)
        assert logs[0].selected and len(logs[0].selected) == 1

    def test_selection_size_constant(self):
        logs, _ = run_scenario(small(participation_fraction=0.4, rounds=6))
        assert {len(r.selected) for r in logs} == {3}

    def test_deterministic_across_workers(self, tmp_path):
        cfg = small(attack="backdoor", aggregator=AggregatorConfig(name="fedcpa"), rounds=3)
        a, _ = run_scenario(cfg)
        b, _ = run_scenario(cfg, workers=3)
        write_rounds_csv(a, tmp_path / "a.csv")
        write_rounds_csv(b, tmp_path / "b.csv")
        assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()

    def test_seed_changes_run(self):
        a, _ = run_scenario(small(master_seed=1))
        b, _ = run_scenario(small(master_seed=2))
        assert [r.acc for r in a] != [r.acc for r in b]

    @pytest.mark.parametrize("name", ["median", "trimmed_mean", "multi_krum", "foolsgold",
                                      "norm_bound", "rfa", "residual_base", "fedcpa"])
    def test_every_aggregator_runs(self, name):
        logs, summary = run_scenario(small(attack="label_flip", aggregator=AggregatorConfig(name=name), rounds=2))
        assert len(logs) == 2 and 0 <= summary.acc <= 1

    def test_rounds_csv_roundtrip(self, tmp_path):
        logs, _ = run_scenario(small(attack="backdoor", rounds=2))
        write_rounds_csv(logs, tmp_path / "r.csv")
        back = read_rounds_csv(tmp_path / "r.csv")
        assert back == logs
        header = (tmp_path / "r.csv").read_text().splitlines()[0]
        assert header == "round,acc,asr,update_norm,selected_ids,weights"

    def test_summary_window(self):
        logs, _ = run_scenario(small(rounds=4))
        s = summarize(logs, 10)
        assert s.window == 4 and s.asr is None
        assert s.acc == pytest.approx(np.mean([r.acc for r in logs]))
        assert summarize(logs, 2).acc == pytest.approx(np.mean([r.acc for r in logs[-2:]]))


def test_fedavg_fixture_reaches_accuracy():
    cfg = ScenarioConfig(n_clients=10, rounds=30, aggregator=AggregatorConfig(name="fedavg"))
    logs, _ = run_scenario(cfg)
    assert logs[-1].acc >= 0.9
