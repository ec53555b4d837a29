"""Tests for simulator experiments, audits and CSV export."""

from collections import Counter

import pytest

from bruijn_share.idspace import RingParams, full_zone, make_zone, split_zone, zone_contains
from bruijn_share.sim import (
    Metrics,
    SimConfig,
    coverage_violations,
    export_csv,
    run_churn_experiment,
    run_degree_experiment,
    run_experiment,
    run_lookup_experiment,
)

SMALL = RingParams(2, 4)


class TestSimConfig:
    def test_unknown_preset(self):
        with pytest.raises(ValueError, match="preset"):
            SimConfig(preset="flood")

    def test_too_few_nodes(self):
        with pytest.raises(ValueError):
            SimConfig(node_count=1)

    def test_leave_prob_range(self):
        with pytest.raises(ValueError):
            SimConfig(leave_prob=1.5)


class TestCoverage:
    def test_empty_ring_is_a_violation(self):
        assert coverage_violations([], SMALL) == 1

    def test_full_ring(self):
        assert coverage_violations([full_zone(SMALL)], SMALL) == 0

    def test_exact_partition(self):
        kept, given = split_zone(full_zone(SMALL), 0, SMALL)
        assert coverage_violations([kept, given], SMALL) == 0
        zones = [kept, given]
        for owner in (3, 12):
            zone = next(z for z in zones if zone_contains(z, owner, SMALL))
            zones.remove(zone)
            zones.extend(split_zone(zone, owner, SMALL))
        zones.sort(key=lambda z: z.start)
        assert len(zones) == 4
        assert coverage_violations(zones, SMALL) == 0
        assert coverage_violations(zones[:-1], SMALL) > 0

    def test_gap_and_overlap(self):
        assert coverage_violations([make_zone(0, 5, SMALL), make_zone(8, 15, SMALL)], SMALL) > 0
        assert coverage_violations([make_zone(0, 9, SMALL), make_zone(8, 15, SMALL)], SMALL) > 0


class TestMetrics:
    def test_degree_bound(self):
        metrics = Metrics(node_count=64, k=8)
        assert metrics.degree_bound == pytest.approx(16.0)

    def test_fractions(self):
        metrics = Metrics(node_count=4, k=2, out_degree_histogram=Counter({1: 2, 3: 1, 5: 1}))
        assert metrics.mean_out_degree == 2.5
        assert metrics.max_out_degree == 5
        assert metrics.fraction_over(4) == 0.25

    def test_success_rate_without_lookups(self):
        assert Metrics().success_rate == 0.0


class TestDegreeExperiment:
    def test_two_nodes(self):
        metrics = run_degree_experiment(SimConfig(node_count=2, seed=0))
        assert metrics.node_count == 2
        assert metrics.out_degree_histogram == Counter({1: 2})
        assert metrics.coverage_violations == 0

    def test_two_hundred_nodes(self):
        metrics = run_degree_experiment(SimConfig(node_count=200, seed=3))
        assert metrics.node_count == 200
        assert metrics.coverage_violations == 0
        assert metrics.edge_violations == 0
        assert metrics.key_violations == 0

    def test_run_experiment_dispatch(self):
        metrics = run_experiment(SimConfig(preset="degree", node_count=5, seed=1))
        assert metrics.preset == "degree"

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(3))
    def test_fifty_thousand_nodes(self, seed):
        metrics = run_degree_experiment(SimConfig(node_count=50_000, seed=seed))
        assert metrics.node_count == 50_000
        assert metrics.coverage_violations == 0
        assert 7.90 <= metrics.mean_out_degree <= 8.00
        assert metrics.fraction_over(2 * metrics.k) <= 0.01
        assert metrics.max_out_degree <= metrics.degree_bound
        assert metrics.bound_violations == 0
        in_total = sum(metrics.in_degree_histogram.values())
        assert in_total == 50_000
        assert (metrics.in_degree_histogram[7] + metrics.in_degree_histogram[8]) / in_total >= 0.99


class TestLookupExperiment:
    def test_eighty_nodes_all_found(self):
        metrics = run_lookup_experiment(SimConfig(preset="lookup", node_count=80, seed=1))
        assert metrics.lookups_issued == 80 * 25
        assert metrics.success_rate == 1.0
        assert metrics.max_hops <= 8

    @pytest.mark.slow
    @pytest.mark.parametrize("count", [120, 160, 200])
    def test_larger_networks(self, count):
        metrics = run_lookup_experiment(SimConfig(preset="lookup", node_count=count, seed=2))
        assert metrics.success_rate == 1.0
        assert metrics.max_hops <= 8


class TestChurnExperiment:
    def test_small_churn_run(self):
        config = SimConfig(preset="churn", node_count=20, seed=4, duration=900.0, leave_prob=0.1)
        metrics = run_churn_experiment(config)
        assert metrics.audits >= 1
        assert metrics.coverage_violations == 0
        assert metrics.lookups_issued > 0

    def test_no_churn(self):
        config = SimConfig(preset="churn", node_count=10, seed=4, duration=700.0, leave_prob=0.0)
        metrics = run_churn_experiment(config)
        assert metrics.leaves == 0
        assert metrics.node_count == 10

    @pytest.mark.slow
    @pytest.mark.parametrize("seed", range(5))
    def test_graceful_churn_success(self, seed):
        metrics = run_churn_experiment(SimConfig(preset="churn", node_count=160, seed=seed))
        assert metrics.success_rate >= 0.99


class TestExport:
    def test_deterministic(self, tmp_path):
        config = SimConfig(node_count=30, seed=7)
        first = export_csv(run_degree_experiment(config), tmp_path / "a.csv")
        second = export_csv(run_degree_experiment(config), tmp_path / "b.csv")
        assert first.read_text() == second.read_text()

    def test_layout(self, tmp_path):
        metrics = run_degree_experiment(SimConfig(node_count=2, seed=0))
        lines = export_csv(metrics, tmp_path / "out.csv").read_text().splitlines()
        assert lines[0] == "metric,value"
        assert lines[1] == "preset,degree"
        assert "nodes,2" in lines
        split = lines.index("degree,count")
        assert lines[split + 1:] == ["1,2"]

    def test_empty_metrics(self, tmp_path):
        path = export_csv(Metrics(), tmp_path / "empty.csv")
        assert path.read_text() == "metric,value\ndegree,count\n"
