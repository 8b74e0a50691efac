import json
import math

import numpy as np
import pytest

from cxrscreen.errors import ValidationError
from cxrscreen.evaluate import (
    THRESHOLD_GRID_STEP,
    ConfidenceInterval,
    EvalReport,
    ScoreEntry,
    ScoreSet,
    auc,
    build_eval_report,
    confidence_interval,
    confusion_matrix,
    default_sweep_grid,
    load_report,
    operating_point,
    report_to_dict,
    roc_curve,
    save_report,
    score_histogram,
    threshold_for_sensitivity,
    threshold_sweep,
)
from cxrscreen.manifest import Label, Subgroup


from conftest import entry, mann_whitney, random_score_set

FOUR = ScoreSet(
    (
        entry(0.9, True, path="a"),
        entry(0.8, True, path="b"),
        entry(0.1, False, Subgroup.NORMAL, path="c"),
        entry(0.2, False, Subgroup.OTHER_DISEASE, path="d"),
    )
)


class TestOperatingPoint:
    def test_separating_threshold(self):
        op = operating_point(FOUR, 0.5)
        assert op.sensitivity == 1.0
        assert op.specificity == 1.0
        assert (op.tp, op.fn, op.tn, op.fp) == (2, 0, 2, 0)

    def test_threshold_above_max_score(self):
        op = operating_point(FOUR, 0.95)
        assert op.sensitivity == 0.0
        assert op.specificity == 1.0

    def test_tie_at_threshold_predicts_negative(self):
        op = operating_point(FOUR, 0.8)
        assert op.tp == 1  # the 0.8 entry is not counted

    def test_single_label_rejected(self):
        only_pos = ScoreSet((entry(0.5, True), entry(0.6, True)))
        with pytest.raises(ValidationError):
            operating_point(only_pos, 0.5)

    def test_counts_partition_the_set(self, score_rng):
        for _ in range(50):
            s = random_score_set(score_rng)
            t = float(score_rng.random())
            op = operating_point(s, t)
            assert op.tp + op.fn == len(s.positives)
            assert op.tn + op.fp == len(s.negatives)


class TestThresholdSweep:
    def test_hand_enumerated_fixture(self):
        pts = threshold_sweep(FOUR, [0.15, 0.5, 0.85])
        assert [(p.sensitivity, p.specificity) for p in pts] == [
            (1.0, 0.5),
            (1.0, 1.0),
            (0.5, 1.0),
        ]

    def test_boundary_thresholds(self):
        pts = threshold_sweep(FOUR, [0.0, 1.0])
        assert pts[0].sensitivity == 1.0
        assert pts[0].specificity == 0.0  # scores in (0,1): everything is > 0
        assert pts[-1].sensitivity == 0.0
        assert pts[-1].specificity == 1.0

    def test_unsorted_thresholds_rejected(self):
        with pytest.raises(ValidationError):
            threshold_sweep(FOUR, [0.5, 0.1])

    def test_monotone_over_random_sets(self, score_rng):
        for _ in range(100):
            s = random_score_set(score_rng)
            pts = threshold_sweep(s, default_sweep_grid(s))
            for a, b in zip(pts, pts[1:]):
                assert a.sensitivity >= b.sensitivity
                assert a.specificity <= b.specificity


class TestThresholdForSensitivity:
    def test_forty_positives_target_0975(self, score_rng):
        pos_scores = np.sort(score_rng.random(40) * 0.8 + 0.1)
        entries = [entry(float(s), True, path=f"p{i}") for i, s in enumerate(pos_scores)]
        entries += [entry(0.05, False, path="n0"), entry(0.06, False, path="n1")]
        s = ScoreSet(tuple(entries))
        t = threshold_for_sensitivity(s, 0.975)
        # 39/40 = 97.5%: threshold sits just below the 2nd-lowest positive
        assert pos_scores[0] <= t < pos_scores[1]
        assert operating_point(s, t).sensitivity >= 0.975

    def test_target_one_goes_below_minimum(self):
        t = threshold_for_sensitivity(FOUR, 1.0)
        assert t < 0.8
        assert operating_point(FOUR, t).sensitivity == 1.0

    def test_achieves_target_and_next_step_violates(self, score_rng):
        for _ in range(100):
            s = random_score_set(score_rng)
            t = threshold_for_sensitivity(s, 0.975)
            assert operating_point(s, t).sensitivity >= 0.975
            # the next grid multiple, not t + step: float addition can land
            # one ulp short of the true (k+1)-th multiple
            k = round(t / THRESHOLD_GRID_STEP)
            t_next = (k + 1) * THRESHOLD_GRID_STEP
            assert operating_point(s, t_next).sensitivity < 0.975

    def test_bad_target_rejected(self):
        with pytest.raises(ValidationError):
            threshold_for_sensitivity(FOUR, 0.0)
        with pytest.raises(ValidationError):
            threshold_for_sensitivity(FOUR, 1.5)


class TestConfidenceInterval:
    # half-widths computed independently at 40-digit precision, then frozen
    ORACLES = [
        (0.975, 40, 0.0483836232624221725927242295571215927119),
        (0.888, 3000, 0.0112852436039280959776787654805317584622),
        (0.905, 3000, 0.0104925618098409757870803548134179931358),
        (0.978, 3000, 0.0052489956372624277501310420384296043725),
        (0.813, 3000, 0.0139528048506384550522683034281180058910),
    ]

    def test_frozen_oracles(self):
        for accuracy, n, expected in self.ORACLES:
            ci = confidence_interval(accuracy, n)
            assert math.isclose(ci.r, expected, rel_tol=0, abs_tol=1e-15)

    def test_symmetry_about_half(self, score_rng):
        for _ in range(100):
            a = float(score_rng.random())
            n = int(score_rng.integers(1, 5000))
            assert confidence_interval(a, n).r == confidence_interval(1.0 - a, n).r

    def test_degenerate_endpoints(self):
        assert confidence_interval(1.0, 100).r == 0.0
        assert confidence_interval(0.0, 100).r == 0.0

    def test_validation(self):
        with pytest.raises(ValidationError):
            confidence_interval(1.2, 10)
        with pytest.raises(ValidationError):
            confidence_interval(0.5, 0)
        with pytest.raises(ValidationError):
            confidence_interval(0.5, 10, z=0.0)


class TestRocCurve:
    def test_perfect_separation_passes_through_corner(self):
        r = roc_curve(FOUR)
        assert (0.0, 1.0) in r
        assert auc(r) == 1.0

    def test_all_tied_is_the_diagonal(self):
        s = ScoreSet((entry(0.5, True), entry(0.5, True), entry(0.5, False)))
        r = roc_curve(s)
        assert r == [(0.0, 0.0), (1.0, 1.0)]
        assert auc(r) == 0.5

    def test_vertices_match_brute_force_enumeration(self, score_rng):
        for _ in range(50):
            s = random_score_set(score_rng, n_min=5, n_max=40)
            all_scores = sorted({e.score for e in s.entries})
            # thresholds between consecutive distinct scores, plus outside ones
            cuts = [all_scores[0] - 1.0]
            cuts += [(a + b) / 2 for a, b in zip(all_scores, all_scores[1:])]
            cuts += [all_scores[-1] + 1.0]
            expected = [(0.0, 0.0)]
            for t in sorted(cuts, reverse=True):
                op = operating_point(s, t)
                pt = (op.fp / (op.fp + op.tn), op.tp / (op.tp + op.fn))
                if pt != expected[-1]:
                    expected.append(pt)
            assert roc_curve(s) == expected

    def test_ranking_invariance_under_monotone_transform(self, score_rng):
        for _ in range(20):
            s = random_score_set(score_rng, n_min=5, n_max=60)
            transformed = ScoreSet(
                tuple(
                    ScoreEntry(e.score**3, e.label, e.subgroup, e.image_path)
                    for e in s.entries
                )
            )
            assert auc(roc_curve(s)) == pytest.approx(
                auc(roc_curve(transformed)), abs=1e-12
            )

    def test_monotone_vertices_required_by_auc(self):
        with pytest.raises(ValidationError):
            auc([(0.0, 0.0), (0.5, 0.5), (0.2, 0.7)])


class TestAuc:
    def test_matches_pairwise_oracle(self, score_rng):
        for _ in range(200):
            s = random_score_set(score_rng, n_min=2, n_max=50)
            assert abs(auc(roc_curve(s)) - mann_whitney(s)) < 1e-12


class TestConfusionMatrix:
    def test_hand_fixture(self):
        assert confusion_matrix(FOUR, 0.5) == [[2, 0], [0, 2]]

    def test_threshold_above_all(self):
        cm = confusion_matrix(FOUR, 2.0)
        assert cm == [[2, 0], [2, 0]]

    def test_consistent_with_operating_point(self, score_rng):
        for _ in range(50):
            s = random_score_set(score_rng)
            t = float(score_rng.random())
            op = operating_point(s, t)
            assert confusion_matrix(s, t) == [[op.tn, op.fp], [op.fn, op.tp]]


class TestScoreHistogram:
    def test_bin_edge_convention(self):
        s = ScoreSet((entry(0.5, True), entry(0.5, False)))
        h = score_histogram(s, 2)
        assert h["COVID"] == [0, 1]  # 0.5 lands in the upper [0.5, 1.0] bin
        assert h["NORMAL"] == [0, 1]

    def test_score_one_lands_in_last_bin(self):
        s = ScoreSet((entry(1.0, True), entry(0.2, False)))
        assert score_histogram(s, 10)["COVID"][9] == 1

    def test_matches_naive_loop(self, score_rng):
        for _ in range(30):
            s = random_score_set(score_rng)
            bins = int(score_rng.integers(1, 30))
            h = score_histogram(s, bins)
            naive = {g.value: [0] * bins for g in Subgroup}
            for e in s.entries:
                idx = min(int(e.score * bins), bins - 1)
                naive[e.subgroup.value][idx] += 1
            assert h == naive

    def test_totals_are_subgroup_sizes(self, score_rng):
        s = random_score_set(score_rng)
        h = score_histogram(s, 13)
        for g in Subgroup:
            assert sum(h[g.value]) == len(s.scores_for(g))


class TestEvalReport:
    def test_confusion_sums_to_set_size(self, score_rng):
        s = random_score_set(score_rng, n_min=20, n_max=80)
        rep = build_eval_report(s)
        assert sum(sum(row) for row in rep.confusion) == len(s.entries)
        assert 0.0 <= rep.auc <= 1.0

    def test_json_round_trip_with_pinned_fields(self, tmp_path, score_rng):
        s = random_score_set(score_rng, n_min=20, n_max=80)
        rep = build_eval_report(s)
        path = tmp_path / "report.json"
        save_report(rep, path, config_echo={"bins": 50})
        doc = load_report(path)
        for key in (
            "sweep",
            "roc",
            "auc",
            "confusion",
            "histograms",
            "sensitivity_ci",
            "specificity_ci",
        ):
            assert key in doc
        assert doc["auc"] == rep.auc
        assert doc["config"] == {"bins": 50}
        assert doc["confusion"] == rep.confusion
        assert set(doc["histograms"]) == {"COVID", "NORMAL", "OTHER_DISEASE"}
        assert doc["sweep"][0].keys() == {
            "threshold",
            "sensitivity",
            "specificity",
            "tp",
            "fn",
            "tn",
            "fp",
        }

    def test_operating_point_uses_target_sensitivity(self, score_rng):
        s = random_score_set(score_rng, n_min=50, n_max=100)
        rep = build_eval_report(s, target_sensitivity=0.9)
        op = operating_point(s, rep.threshold)
        assert op.sensitivity >= 0.9
        assert rep.sensitivity_ci.accuracy == op.sensitivity
        assert rep.sensitivity_ci.n == op.tp + op.fn
        assert rep.specificity_ci.accuracy == op.specificity
        assert rep.specificity_ci.n == op.tn + op.fp

    def test_non_finite_score_rejected(self):
        with pytest.raises(ValidationError):
            ScoreSet((entry(float("nan"), True), entry(0.2, False)))
