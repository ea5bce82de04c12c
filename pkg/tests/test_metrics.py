import math

import numpy as np
import pytest

from ltricd.codes import CodeKind, parse_code
from ltricd.metrics import (
    EmptyCorpusError,
    EvalPair,
    cg_at_k,
    classification_report,
    map_at_k,
    micro_prf_at_k,
    ndcg_at_k,
    report_at_k_table,
    topk_relevance,
    write_cg_curve_csv,
    write_report_csv,
)

import oracles


def codes(*names):
    return [parse_code(f"{100 + i:03d}", CodeKind.DIAGNOSIS) for i in names]


C1, C2, C3, X = codes(1, 2, 3, 77)


def pair(pred, gold):
    return EvalPair(predicted=list(pred), gold=list(gold))


class TestTopkRelevance:
    def test_all_relevant_within_topk(self):
        assert topk_relevance(pair([C1, C3, C2], [C1, C2, C3]), 3) == [True, True, True]

    def test_position_vs_membership(self):
        # Top-1 gold is c1; the first predicted position holds x.
        assert topk_relevance(pair([X, C1], [C1, C2]), 1) == [False]

    def test_empty_prediction(self):
        assert topk_relevance(pair([], [C1]), 4) == []

    def test_k_caps_both_sides(self):
        assert topk_relevance(pair([C2, C1], [C1, C2]), 1) == [False]
        assert topk_relevance(pair([C2, C1], [C1, C2]), 2) == [True, True]

    def test_k_validation(self):
        with pytest.raises(ValueError):
            topk_relevance(pair([], []), 0)


class TestMicroPrf:
    def test_perfect_single_doc(self):
        p, r, f1 = micro_prf_at_k([pair([C1, C2], [C1, C2])], 2)
        assert (p, r, f1) == (1.0, 1.0, 1.0)

    def test_k1_identity(self):
        pairs = [pair([C1], [C1, C2]), pair([X], [C2]), pair([C2, C1], [C2])]
        p, r, f1 = micro_prf_at_k(pairs, 1)
        assert p == r == f1

    def test_hand_arithmetic(self):
        # two docs: hits {1, 0}, preds {1, 2}, golds {1, 1} at K=2
        pairs = [pair([C1], [C1]), pair([X, C3], [C2])]
        p, r, _ = micro_prf_at_k(pairs, 2)
        assert p == pytest.approx(1 / 3)
        assert r == pytest.approx(1 / 2)

    def test_empty_corpus(self):
        with pytest.raises(EmptyCorpusError):
            micro_prf_at_k([], 1)

    def test_per_document_mode(self):
        pairs = [pair([C1, X], [C1]), pair([C2], [C1, C2])]
        p, r, f1 = micro_prf_at_k(pairs, 2, average="per_document")
        # doc1: P = 1/2 (1 hit of min(2,2)=2 slots), R = 1/1; doc2: P = 1/1, R = 1/2
        assert p == pytest.approx((0.5 + 1.0) / 2)
        assert r == pytest.approx((1.0 + 0.5) / 2)
        assert f1 == pytest.approx(2 * p * r / (p + r))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            micro_prf_at_k([pair([], [])], 1, average="macro")


class TestMapAtK:
    def test_definition_trace(self):
        assert map_at_k([pair([X, C1], [C1, C2])], 2) == pytest.approx(0.25)

    def test_perfect_ordering(self):
        assert map_at_k([pair([C1, C2, C3], [C1, C2, C3])], 3) == 1.0

    def test_k1_equals_precision_when_docs_nonempty(self):
        pairs = [pair([C1], [C1, C2]), pair([X], [C2]), pair([C2], [C2, C3])]
        p, _, _ = micro_prf_at_k(pairs, 1)
        assert map_at_k(pairs, 1) == pytest.approx(p)

    def test_docs_without_gold_skipped(self):
        pairs = [pair([C1], []), pair([C1], [C1])]
        assert map_at_k(pairs, 1) == 1.0


class TestNdcgAtK:
    def test_equal_scores_for_permuted_relevant_items(self):
        gold = [C1, C2, C3]
        a = ndcg_at_k([pair([C1, C3, C2], gold)], 3)
        b = ndcg_at_k([pair([C3, C2, C1], gold)], 3)
        assert a == b == 1.0

    def test_arithmetic_trace(self):
        got = ndcg_at_k([pair([X, C1], [C1, C2])], 2)
        want = (1 / math.log2(3)) / (1.0 + 1 / math.log2(3))
        assert got == pytest.approx(want, abs=1e-12)
        assert got == pytest.approx(0.3869, abs=5e-5)

    def test_top_code_correct(self):
        assert ndcg_at_k([pair([C1], [C1, C2])], 1) == 1.0

    def test_bounded_by_one(self):
        rng = np.random.default_rng(0)
        universe = codes(*range(10))
        for _ in range(200):
            gold = list(rng.permutation(universe))[: rng.integers(1, 6)]
            pred = list(rng.permutation(universe))[: rng.integers(0, 6)]
            k = int(rng.integers(1, 8))
            val = ndcg_at_k([pair(pred, gold)], k)
            assert 0.0 <= val <= 1.0 + 1e-12


class TestCgAtK:
    def test_two_term_mean(self):
        # construct pairs with NDCG@1 = 1.0 and NDCG@2 = 0.5 is fiddly; use
        # direct averaging instead
        pairs = [pair([C1, X], [C1, C2])]
        assert cg_at_k(pairs, 2) == pytest.approx(
            (ndcg_at_k(pairs, 1) + ndcg_at_k(pairs, 2)) / 2
        )

    def test_k1_equals_ndcg1(self):
        pairs = [pair([C1, C2], [C1, C3])]
        assert cg_at_k(pairs, 1) == ndcg_at_k(pairs, 1)

    def test_distinguishes_early_ranking(self):
        gold = [C1, C2, C3]
        early = cg_at_k([pair([C1, C3, C2], gold)], 3)
        late = cg_at_k([pair([C3, C2, C1], gold)], 3)
        assert early > late


def random_corpus(rng, n_docs=None):
    universe = codes(*range(12))
    pairs = []
    for _ in range(n_docs if n_docs is not None else rng.integers(1, 11)):
        gold = list(rng.permutation(universe))[: rng.integers(0, 7)]
        pred = list(rng.permutation(universe))[: rng.integers(0, 7)]
        pairs.append(pair(pred, gold))
    return pairs


class TestBruteForceEquivalence:
    def test_matches_loop_oracles_on_random_corpora(self):
        rng = np.random.default_rng(1234)
        for _ in range(220):
            pairs = random_corpus(rng)
            raw = [(p.predicted, p.gold) for p in pairs]
            k = int(rng.integers(1, 9))
            p, r, f1 = micro_prf_at_k(pairs, k)
            bp, br, bf1 = oracles.bf_micro_prf(raw, k)
            assert abs(p - bp) <= 1e-12 and abs(r - br) <= 1e-12 and abs(f1 - bf1) <= 1e-12
            assert abs(map_at_k(pairs, k) - oracles.bf_map(raw, k)) <= 1e-12
            assert abs(ndcg_at_k(pairs, k) - oracles.bf_ndcg(raw, k)) <= 1e-12
            assert abs(cg_at_k(pairs, k) - oracles.bf_cg(raw, k)) <= 1e-12


class TestReportTable:
    def test_row_layout(self):
        pairs = [pair([C1, C2], [C1, C2])]
        k_list = list(range(1, 12)) + [39]
        rows = report_at_k_table(pairs, k_list)
        assert [r.k for r in rows] == k_list

    def test_perfect_single_doc_all_ones(self):
        pairs = [pair([C1, C2, C3], [C1, C2, C3])]
        for row in report_at_k_table(pairs, [1, 2, 3]):
            for value in (row.f1, row.precision, row.recall, row.map, row.ndcg, row.cg):
                assert value == pytest.approx(1.0)

    def test_rows_independent_of_order(self):
        rng = np.random.default_rng(3)
        pairs = random_corpus(rng, n_docs=6)
        fwd = report_at_k_table(pairs, [1, 3, 5])
        rev = report_at_k_table(pairs, [5, 3, 1])
        assert [(r.k, r.f1, r.cg) for r in fwd] == [(r.k, r.f1, r.cg) for r in rev][::-1]

    def test_csv_emission(self, tmp_path):
        pairs = [pair([C1], [C1])]
        rows = report_at_k_table(pairs, [1, 2])
        path = tmp_path / "report.csv"
        write_report_csv(rows, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "K,F1,Prec,Rec,MAP,NDCG,CG"
        assert len(lines) == 3

    def test_cg_curve_csv(self, tmp_path):
        pairs = [pair([C1, X], [C1, C2])]
        path = tmp_path / "cg.csv"
        write_cg_curve_csv(pairs, 3, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "K,CG"
        assert len(lines) == 4
        assert float(lines[1].split(",")[1]) == pytest.approx(cg_at_k(pairs, 1), abs=1e-6)
        assert float(lines[3].split(",")[1]) == pytest.approx(cg_at_k(pairs, 3), abs=1e-6)


class TestClassificationReport:
    def test_perfect_predictor(self):
        gold = np.asarray([[1, 0, 1], [0, 1, 0]], dtype=float)
        report = classification_report(gold, gold.copy(), 0.5)
        for side in ("micro", "macro"):
            for metric, value in report[side].items():
                assert value == pytest.approx(1.0), (side, metric)

    def test_ignored_label_drags_macro_below_micro(self):
        gold = np.zeros((4, 2))
        gold[:, 0] = 1.0
        gold[0, 1] = 1.0
        probs = np.zeros((4, 2))
        probs[:, 0] = 0.9  # label 0 predicted perfectly, label 1 ignored
        report = classification_report(gold, probs, 0.5)
        assert report["macro"]["f1"] < report["micro"]["f1"]

    def test_hand_case_matches_confusion_matrix_oracle(self):
        gold = [[1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]
        probs = [[0.8, 0.3], [0.4, 0.9], [0.2, 0.6]]
        report = classification_report(np.asarray(gold), np.asarray(probs), 0.5)
        want = oracles.bf_confusion_report(gold, probs, 0.5)
        for side in ("micro", "macro"):
            assert report[side]["precision"] == pytest.approx(want[side][0], abs=1e-12)
            assert report[side]["recall"] == pytest.approx(want[side][1], abs=1e-12)
            assert report[side]["f1"] == pytest.approx(want[side][2], abs=1e-12)

    def test_auc_roc_matches_pairwise_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(30):
            labels = rng.integers(0, 2, size=12).astype(float)
            if labels.sum() in (0, 12):
                labels[0] = 1 - labels[0]
            scores = np.round(rng.random(12), 1)  # induce ties
            gold = labels[:, None]
            probs = scores[:, None]
            report = classification_report(gold, probs, 0.5)
            want = oracles.bf_auc_roc(labels.tolist(), scores.tolist())
            assert report["micro"]["auc_roc"] == pytest.approx(want, abs=1e-12)

    def test_auc_pr_perfect_and_inverted(self):
        gold = np.asarray([[1.0], [1.0], [0.0], [0.0]])
        perfect = np.asarray([[0.9], [0.8], [0.2], [0.1]])
        inverted = 1.0 - perfect
        assert classification_report(gold, perfect, 0.5)["micro"]["auc_pr"] == pytest.approx(1.0)
        assert classification_report(gold, inverted, 0.5)["micro"]["auc_pr"] < 0.6

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            classification_report(np.zeros((2, 3)), np.zeros((3, 2)), 0.5)
