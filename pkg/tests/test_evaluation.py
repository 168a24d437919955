import dataclasses
import io
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hisekt.config import RunConfig, fingerprint
from hisekt.errors import UndefinedMetricError
from hisekt.evaluation import (
    PipelineContext,
    VariantMetrics,
    accuracy,
    auc,
    run_experiment,
    run_variant,
    unimodal_or_plateau,
)
from hisekt.mrhin import TEMPLATES, PathInstance
from hisekt.pathscore import PathScore, ScoredInstance, select_top_k
from hisekt.seeding import derive_seed
from hisekt.synth import planted_csv


def pairwise_auc(labels, scores):
    """O(n^2) oracle: wins plus half-ties over all positive/negative pairs."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))


class TestAuc:
    def test_perfect_ranking(self):
        assert auc([1, 0], [0.9, 0.1]) == 1.0

    def test_all_tied_scores(self):
        assert auc([1, 0, 1, 0], [0.5, 0.5, 0.5, 0.5]) == 0.5

    def test_matches_pairwise_oracle_exactly(self):
        rng = np.random.default_rng(0)
        for trial in range(60):
            n = int(rng.integers(2, 100))
            labels = rng.integers(0, 2, n).tolist()
            if sum(labels) in (0, n):
                labels[0] = 1 - labels[0]
            if rng.random() < 0.5:
                scores = rng.choice([0.1, 0.3, 0.5, 0.7], size=n).tolist()  # tie-heavy
            else:
                scores = rng.random(n).tolist()
            assert auc(labels, scores) == pairwise_auc(labels, scores)

    def test_single_class_is_undefined(self):
        with pytest.raises(UndefinedMetricError):
            auc([1, 1], [0.2, 0.3])
        with pytest.raises(UndefinedMetricError):
            auc([0, 0], [0.2, 0.3])

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            auc([1, 0], [0.5])

    @settings(max_examples=60, deadline=None)
    @given(
        st.lists(
            # scores on a 1e-6 grid so the transforms below cannot merge
            # distinct values through float rounding
            st.tuples(st.integers(0, 1), st.floats(0, 1).map(lambda s: round(s, 6))),
            min_size=2,
            max_size=60,
        )
    )
    def test_invariant_under_increasing_transform(self, pairs):
        labels = [y for y, _ in pairs]
        scores = [s for _, s in pairs]
        if sum(labels) in (0, len(labels)):
            labels[0] = 1 - labels[0]
        base = auc(labels, scores)
        squashed = auc(labels, [3.0 * s + 1.0 for s in scores])
        exp = auc(labels, [float(np.exp(s)) for s in scores])
        assert base == pytest.approx(squashed, abs=1e-12)
        assert base == pytest.approx(exp, abs=1e-12)


class TestAccuracy:
    def test_acc_plus_error_is_one(self):
        labels = [1, 0, 1, 1, 0]
        outcomes = [1, 1, 1, 0, 0]
        err = sum(1 for y, o in zip(labels, outcomes) if y != o) / len(labels)
        assert accuracy(labels, outcomes) + err == pytest.approx(1.0)

    def test_empty_undefined(self):
        with pytest.raises(UndefinedMetricError):
            accuracy([], [])


class TestUnimodal:
    def test_rising_then_falling(self):
        assert unimodal_or_plateau([0.5, 0.7, 0.8, 0.78, 0.7])

    def test_plateau(self):
        assert unimodal_or_plateau([0.5, 0.7, 0.7, 0.7, 0.7])

    def test_monotone_decline_is_edge_case(self):
        assert unimodal_or_plateau([0.8, 0.7, 0.6])

    def test_valley_rejected(self):
        assert not unimodal_or_plateau([0.8, 0.5, 0.8], tol=0.01)


class TestPlantedSelection:
    def test_top_k_picks_planted_high_and_lowest_picks_planted_low(self):
        # plant two quality tiers and check the selected sets exactly
        high, low = [], []
        for i in range(6):
            inst_h = PathInstance(
                TEMPLATES["Q-K-Q"], (("Q", "QT"), ("K", "K1"), ("Q", f"QH{i}")), "K1"
            )
            inst_l = PathInstance(
                TEMPLATES["Q-K-Q"], (("Q", "QT"), ("K", "K1"), ("Q", f"QL{i}")), "K1"
            )
            high.append(ScoredInstance(inst_h, PathScore.build(4.0, 4.0, 4.0, 4.0)))
            low.append(ScoredInstance(inst_l, PathScore.build(1.0, 1.0, 1.0, 1.0)))
        mixed = low[:3] + high[:3] + low[3:] + high[3:]
        top = select_top_k(mixed, 6, "top")
        bottom = select_top_k(mixed, 6, "lowest")
        assert {s.instance.nodes for s in top} == {s.instance.nodes for s in high}
        assert {s.instance.nodes for s in bottom} == {s.instance.nodes for s in low}


@pytest.fixture(scope="module")
def planted_file(tmp_path_factory):
    csv, _ = planted_csv(
        n_bands=3, students_per_band=12, questions_per_band=10, band_gap=2.0,
        cross_rate=0.05, affinity=2.0, seed=3,
    )
    path = tmp_path_factory.mktemp("data") / "planted.csv"
    path.write_text(csv, encoding="utf-8")
    return str(path)


def small_cfg(planted_file, **overrides):
    base = dict(
        data=planted_file, seed=7, runs=1, n_walks=12, walk_len=12,
        top_k=3, top_s=2, pair_sample=2000, pair_source="paths",
    )
    base.update(overrides)
    return RunConfig(**base)


class TestRunExperiment:
    def test_report_structure_and_run_rows(self, planted_file):
        cfg = small_cfg(planted_file, runs=2, variants=("simu",))
        report = run_experiment(cfg)
        assert report.n > 0
        assert 0.0 <= report.acc <= 1.0 and 0.0 <= report.auc <= 1.0
        assert set(report.per_variant) == {"simu"}
        assert len(report.run_rows) == 2 * 2  # (full + simu) x 2 runs
        assert {row["run"] for row in report.run_rows} == {0, 1}
        mean_full = np.mean([r["auc"] for r in report.run_rows if r["variant"] == "full"])
        assert report.auc == pytest.approx(mean_full)

    def test_identical_config_reproduces_identical_report(self, planted_file):
        cfg = small_cfg(planted_file, variants=("rsimu",))
        a = run_experiment(cfg)
        b = run_experiment(cfg)
        assert a.to_json() == b.to_json()
        assert a.config_fingerprint == fingerprint(cfg)

    def test_simu_variant_is_noop_when_base_already_masks_peers(self, planted_file):
        cfg = small_cfg(planted_file, mask_simu=True, variants=("simu",))
        report = run_experiment(cfg)
        v = report.per_variant["simu"]
        assert v.acc == pytest.approx(report.acc)
        assert v.auc == pytest.approx(report.auc)

    def test_unknown_variant_rejected(self, planted_file):
        cfg = small_cfg(planted_file, variants=("bogus",))
        with pytest.raises(ValueError):
            run_experiment(cfg)

    def test_share_stage_caches_gives_identical_sampling(self, planted_file):
        cfg = small_cfg(planted_file)
        ctx1 = PipelineContext(cfg)
        run_seed = derive_seed(cfg.seed, "run", 0)
        base = run_variant(ctx1, None, run_seed)
        cfg2 = dataclasses.replace(cfg, top_k=2)
        ctx2 = PipelineContext(cfg2)
        ctx2.share_stage_caches(ctx1)
        other = run_variant(ctx2, None, run_seed)
        assert ctx2._instances is ctx1._instances
        assert isinstance(other, VariantMetrics)

    def test_json_report_is_parseable(self, planted_file):
        cfg = small_cfg(planted_file)
        report = run_experiment(cfg)
        payload = json.loads(report.to_json())
        assert payload["config_fingerprint"] == report.config_fingerprint
        table = report.to_table()
        assert "full" in table and "AUC" in table
