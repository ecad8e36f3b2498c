from unittest import skipUnless

import numpy as np
from django.conf import settings
from django.test import SimpleTestCase
from hypothesis import given, settings as hypothesis_settings, strategies as st

from apps.adapters.layers import effective_update
from apps.expressiveness.verification import (
    BudgetError, LoraGroupSet, VerificationReport, compare_routed_fits, construct_grouped_dual,
    fit_lora_to_routed_target, numerical_rank, opposing_clusters, truncated_svd_fit, verify_cor1, verify_cor2,
    verify_prop1,
)
from apps.numeric.rng import Rng


class RankHelperTests(SimpleTestCase):
    def test_numerical_rank(self):
        rng = Rng(0)
        matrix = rng.normal((6, 2)) @ rng.child('b').normal((2, 5))
        self.assertEqual(numerical_rank(matrix), 2)
        self.assertEqual(numerical_rank(np.zeros((3, 3))), 0)

    def test_truncated_svd_is_exact_at_full_rank(self):
        matrix = Rng(1).normal((5, 3)) @ Rng(2).normal((3, 7))
        b, a, error = truncated_svd_fit(matrix, 3)
        self.assertEqual(b.shape, (5, 3))
        self.assertEqual(a.shape, (3, 7))
        self.assertLess(error, 1e-10)

    def test_truncated_svd_error_is_tail_energy(self):
        matrix = np.diag([3.0, 2.0, 1.0])
        _, _, error = truncated_svd_fit(matrix, 2)
        self.assertAlmostEqual(error, 1.0, places=12)


class Prop1Tests(SimpleTestCase):
    def test_rank_k_refit_is_exact(self):
        for seed in range(20):
            report = verify_prop1(3, 8, 8, seed)
            self.assertTrue(report.passed, report.to_dict())
            self.assertLessEqual(report.ranks['numerical_rank'], 3)

    def test_collinear_terms_collapse_to_rank_one(self):
        report = verify_prop1(3, 8, 8, 0, collinear=True)
        self.assertEqual(report.ranks['numerical_rank'], 1)
        self.assertLess(report.details['rank1_error'], 1e-10)

    def test_single_term(self):
        self.assertTrue(verify_prop1(1, 4, 6, 2).passed)

    def test_budget_exceeding_width(self):
        with self.assertRaises(BudgetError):
            verify_prop1(9, 8, 8, 0)

    @hypothesis_settings(max_examples=25, deadline=None)
    @given(st.integers(1, 6), st.integers(6, 10), st.integers(0, 10_000))
    def test_rank_never_exceeds_term_count(self, k, d, seed):
        report = verify_prop1(k, d, d, seed)
        self.assertLessEqual(report.ranks['numerical_rank'], k)


class Cor1Tests(SimpleTestCase):
    def test_rank_patterns(self):
        for pattern in ([2, 2, 2, 2], [4, 2, 1, 1]):
            for seed in range(20):
                report = verify_cor1(pattern, 16, 16, seed)
                self.assertTrue(report.passed, (pattern, seed, report.error))
                self.assertLessEqual(report.ranks['numerical_rank'], 8)

    def test_budget_error(self):
        with self.assertRaises(BudgetError):
            verify_cor1([4, 4], 6, 6, 0)
        with self.assertRaises(BudgetError):
            verify_cor1([2, 0], 6, 6, 0)


class GroupedDualTests(SimpleTestCase):
    def test_each_gate_reproduces_its_group(self):
        for seed in range(20):
            report = verify_cor2([2, 1], 4, 8, 6, seed)
            self.assertLess(report.error, 1e-12)
            self.assertEqual(report.ranks['gate_popcounts'], [2, 1])

    def test_construction_layout(self):
        groups = LoraGroupSet.random([2, 1], 5, 4, Rng(3))
        params, gates = construct_grouped_dual(groups, 4)
        np.testing.assert_array_equal(gates[0], [1.0, 1.0, 0.0, 0.0])
        np.testing.assert_array_equal(gates[1], [0.0, 0.0, 1.0, 0.0])
        np.testing.assert_array_equal(params.S.data[3], np.zeros(5))
        np.testing.assert_allclose(effective_update(params, np.ones(4)), groups.combined(), atol=1e-12)

    def test_single_group_filling_the_budget(self):
        self.assertLess(verify_cor2([3], 3, 6, 6, 1).error, 1e-12)

    def test_budget_error(self):
        groups = LoraGroupSet.random([3, 2], 6, 6, Rng(0))
        with self.assertRaises(BudgetError):
            construct_grouped_dual(groups, 4)


class RoutedFitTests(SimpleTestCase):
    def test_opposing_clusters_layout(self):
        positive, negative = opposing_clusters(d=2, per_cluster=16, seed=1)
        self.assertTrue(np.all(positive.inputs[:, 0] >= 0.5))
        self.assertTrue(np.all(negative.inputs[:, 0] <= -0.5))
        np.testing.assert_array_equal(positive.target, np.eye(2))
        np.testing.assert_array_equal(negative.target, -np.eye(2))

    def test_plain_lora_cannot_route(self):
        report = fit_lora_to_routed_target(opposing_clusters(seed=0), 4, steps=300)
        self.assertFalse(report.passed)
        self.assertGreater(report.error, 1e-2)

    def test_default_clusters_need_matrix_routing(self):
        for cluster in opposing_clusters(seed=3):
            self.assertGreaterEqual(cluster.inputs.shape[1], 2)
            self.assertGreaterEqual(numerical_rank(cluster.target), 2)

    def test_criteria_decide_the_verdict(self):
        report = VerificationReport(statement='routed_dual_lora', dims={}, error=1e-6, tolerance=1e-3)
        self.assertTrue(report.passed)
        report.criteria_met = False
        self.assertFalse(report.passed)
        self.assertFalse(report.to_dict()['passed'])
        report = VerificationReport(statement='routed_dual_lora', dims={}, error=1.0, tolerance=1e-3,
                                    criteria_met=True)
        self.assertTrue(report.passed)

    def test_unconverged_comparison_keeps_its_tolerance(self):
        report = compare_routed_fits([0, 1], steps=2)
        self.assertEqual(report.dims['d'], 2)
        self.assertEqual(report.tolerance, 1e-3)
        self.assertIs(report.criteria_met, False)
        self.assertFalse(report.passed)
        self.assertEqual(len(report.details['dual_mse']), 2)

    def test_budget_below_target_rank(self):
        with self.assertRaises(BudgetError):
            fit_lora_to_routed_target(opposing_clusters(d=2), 3, steps=1)

    @skipUnless(settings.RUN_EXPERIMENTS, 'long experiment; set DUALLORA_RUN_EXPERIMENTS=true')
    def test_dual_lora_learns_routing(self):
        report = compare_routed_fits(range(5), budget=4, steps=5000)
        self.assertTrue(report.passed, report.details)
