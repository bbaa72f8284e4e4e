#!/usr/bin/env python3
"""
Tests for the propagation simulator
"""

import os
import shutil
import sys
import tempfile
import time
import unittest

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from tests.test_config import full_acceptance, setup_test_environment, time_limit
setup_test_environment()

import dynamics
import norms
from dynamics import (
    DivergenceError,
    DynamicsConfig,
    GraphTopology,
    InputFormatError,
    NormPosition,
    OperatorKind,
    Propagation,
)
from metrics import LayerDiagnostics, near_zero_count
from norms import NormalizerConfig, NormVariant
from numerics import ContractViolationError, softmax_rows


def _norm(variant, **kwargs):
    return NormalizerConfig(NormVariant(variant), **kwargs)


class TestGraphTopology(unittest.TestCase):

    def test_edges_normalized(self):
        g = GraphTopology(3, frozenset({(1, 0), (0, 1), (2, 1)}))
        self.assertEqual(g.edges, frozenset({(0, 1), (1, 2)}))
        self.assertEqual(g.edge_count, 2)

    def test_rejects_bad_edges(self):
        with self.assertRaises(ContractViolationError):
            GraphTopology(2, frozenset({(0, 2)}))
        with self.assertRaises(ContractViolationError):
            GraphTopology(2, frozenset({(1, 1)}))
        with self.assertRaises(ContractViolationError):
            GraphTopology(0)

    def test_adjacency_with_self_loops(self):
        g = GraphTopology(3, frozenset({(0, 1)}))
        np.testing.assert_array_equal(g.adjacency(), [[1, 1, 0], [1, 1, 0], [0, 0, 1]])
        np.testing.assert_array_equal(g.degrees(), [2, 2, 1])

    def test_permuted(self):
        g = GraphTopology(3, frozenset({(0, 1)})).permuted([2, 0, 1])
        self.assertEqual(g.edges, frozenset({(0, 2)}))


class TestOperators(unittest.TestCase):

    def test_symmetric_gcn_operator(self):
        g = GraphTopology(3, frozenset({(0, 1), (1, 2)}))
        p = dynamics.gcn_operator(g)
        deg = np.array([2.0, 3.0, 2.0])
        a = g.adjacency()
        np.testing.assert_allclose(p, a / np.sqrt(np.outer(deg, deg)))
        np.testing.assert_allclose(p, p.T)

    def test_row_gcn_operator(self):
        g = GraphTopology(3, frozenset({(0, 1), (1, 2)}))
        p = dynamics.gcn_operator(g, OperatorKind.ROW)
        np.testing.assert_allclose(p.sum(axis=1), np.ones(3))

    def test_isolated_node_without_self_loop(self):
        g = GraphTopology(2, frozenset(), self_loops_added=False)
        with self.assertRaises(ContractViolationError):
            dynamics.gcn_operator(g)

    def test_complete_graph_operator_averages(self):
        p = dynamics.gcn_operator(dynamics.generate_graph('complete', 5))
        np.testing.assert_allclose(p, np.full((5, 5), 0.2))

    def test_attention_operator(self):
        h = np.random.default_rng(0).standard_normal((4, 3))
        np.testing.assert_allclose(dynamics.attention_operator(h, 2.0), softmax_rows(h @ h.T / 2.0))
        with self.assertRaises(ContractViolationError):
            dynamics.attention_operator(h, 0.0)


class TestStep(unittest.TestCase):

    def setUp(self):
        self.h = np.random.default_rng(1).standard_normal((4, 3))
        self.g = dynamics.generate_graph('ring', 4)
        self.p = dynamics.gcn_operator(self.g)

    def test_zero_input_attention(self):
        out, ops = dynamics.step(np.zeros((3, 2)), DynamicsConfig())
        np.testing.assert_array_equal(out, np.zeros((3, 2)))
        self.assertEqual(len(ops), 1)

    def test_residual_without_norm(self):
        cfg = DynamicsConfig(propagation=Propagation.GCN, residual=True)
        out, ops = dynamics.step(self.h, cfg, self.g)
        np.testing.assert_allclose(out, self.p @ self.h + self.h)
        self.assertIsNone(ops)

    def test_norm_positions(self):
        ln = _norm('layernorm')
        before = DynamicsConfig(propagation='gcn', residual=True, norm=ln,
                                norm_position=NormPosition.BEFORE_RESIDUAL)
        after = DynamicsConfig(propagation='gcn', residual=True, norm=ln,
                               norm_position=NormPosition.AFTER_RESIDUAL)
        out_before, _ = dynamics.step(self.h, before, self.g)
        out_after, _ = dynamics.step(self.h, after, self.g)
        np.testing.assert_allclose(out_before, norms.layer_norm(self.p @ self.h, ln) + self.h)
        np.testing.assert_allclose(out_after, norms.layer_norm(self.p @ self.h + self.h, ln))

    def test_heads_split_features(self):
        h = np.random.default_rng(2).standard_normal((5, 4))
        _, ops = dynamics.step(h, DynamicsConfig(heads=2))
        self.assertEqual(len(ops), 2)
        np.testing.assert_allclose(ops[0], softmax_rows(h[:, :2] @ h[:, :2].T))
        with self.assertRaises(ContractViolationError):
            dynamics.step(h, DynamicsConfig(heads=5))

    def test_gcn_needs_graph(self):
        with self.assertRaises(ContractViolationError):
            dynamics.step(self.h, DynamicsConfig(propagation='gcn'))


class TestRun(unittest.TestCase):

    def test_record_count_and_layer_zero(self):
        h = dynamics.standard_features(4, 2, 1)
        records = dynamics.run(h, DynamicsConfig(depth=1, seed=1))
        self.assertEqual(len(records), 2)
        self.assertEqual([r.layer_index for r in records], [0, 1])
        self.assertIsNone(records[0].attention_similarity)
        self.assertIsNotNone(records[1].attention_similarity)

    def test_deterministic(self):
        h = dynamics.standard_features(6, 3, 5)
        cfg = DynamicsConfig(depth=3, seed=5, mixing=True, norm=_norm('contranorm'))
        a = [r.to_record() for r in dynamics.run(h, cfg)]
        b = [r.to_record() for r in dynamics.run(h, cfg)]
        self.assertEqual(a, b)

    def test_complete_graph_collapse(self):
        h = dynamics.standard_features(16, 8, 0)
        g = dynamics.generate_graph('complete', 16)
        records = dynamics.run(h, DynamicsConfig(propagation='gcn', depth=32), g)
        self.assertLess(records[32].variance, 1e-6 * records[0].variance)

    def test_complete_graph_contranorm_keeps_variance(self):
        h = dynamics.standard_features(16, 8, 0)
        g = dynamics.generate_graph('complete', 16)
        cfg = DynamicsConfig(propagation='gcn', depth=32, residual=True,
                             norm=_norm('contranorm', scale=0.5, tau=1.0))
        records = dynamics.run(h, cfg, g)
        self.assertGreater(records[32].variance, 0.1 * records[0].variance)

    def test_contranorm_resists_attention_rank_collapse(self):
        for seed in range(3):
            h = dynamics.standard_features(16, 8, seed) / np.sqrt(8)
            vanilla = dynamics.run(h, DynamicsConfig(depth=8, seed=seed))
            contra = dynamics.run(h, DynamicsConfig(depth=8, seed=seed,
                                                    norm=_norm('contranorm', scale=1.0, tau=1.0)))
            self.assertLess(vanilla[-1].effective_rank, vanilla[0].effective_rank)
            self.assertGreater(contra[-1].effective_rank, vanilla[-1].effective_rank)

    def test_divergence_keeps_partial_records(self):
        h = dynamics.standard_features(4, 2, 0)
        g = dynamics.generate_graph('ring', 4)
        cfg = DynamicsConfig(propagation='gcn', depth=3, norm=_norm('contranorm-reg', scale=1e200))
        with self.assertRaises(DivergenceError) as ctx:
            dynamics.run(h, cfg, g)
        self.assertEqual(ctx.exception.layer_index, 1)
        self.assertEqual(len(ctx.exception.partial), 1)

    def test_node_relabeling_permutes_representations(self):
        rng = np.random.default_rng(17)
        perm = rng.permutation(12)
        h = dynamics.standard_features(12, 4, 17)
        h_perm = np.empty_like(h)
        h_perm[perm] = h
        g = dynamics.generate_graph('sbm', 12, p_in=0.6, p_out=0.2, seed=17)
        g_perm = g.permuted(perm)
        cfg = DynamicsConfig(propagation='gcn', residual=True, norm=_norm('contranorm', scale=0.5))
        a, b = h, h_perm
        for _ in range(4):
            a, _ = dynamics.step(a, cfg, g)
            b, _ = dynamics.step(b, cfg, g_perm)
            np.testing.assert_allclose(b[perm], a, rtol=0, atol=1e-12)

    def test_node_relabeling_leaves_diagnostics_unchanged(self):
        rng = np.random.default_rng(18)
        perm = rng.permutation(10)
        h = dynamics.standard_features(10, 4, 18)
        h_perm = np.empty_like(h)
        h_perm[perm] = h
        g = dynamics.generate_graph('ring', 10)
        cases = [
            (DynamicsConfig(propagation='gcn', depth=4, residual=True, norm=_norm('pairnorm')), g, g.permuted(perm)),
            (DynamicsConfig(depth=4, residual=True, seed=18, mixing=True, heads=2,
                            norm=_norm('contranorm-sg', scale=0.3)), None, None),
        ]
        for cfg, graph, graph_perm in cases:
            original = dynamics.run(h, cfg, graph)
            relabeled = dynamics.run(h_perm, cfg, graph_perm)
            for x, y in zip(original, relabeled):
                for name in LayerDiagnostics.FIELDS:
                    u, v = getattr(x, name), getattr(y, name)
                    if u is None:
                        self.assertIsNone(v)
                    else:
                        self.assertAlmostEqual(u, v, delta=1e-9 * (1.0 + abs(u)), msg=name)
                np.testing.assert_allclose(y.singular_values.as_array(), x.singular_values.as_array(),
                                           rtol=0, atol=1e-9)

    def test_misaligned_graph(self):
        with self.assertRaises(ContractViolationError):
            dynamics.run(np.ones((3, 2)), DynamicsConfig(propagation='gcn'), dynamics.generate_graph('ring', 4))


@unittest.skipUnless(full_acceptance(), "set CONTRANORM_FULL_ACCEPTANCE=1 for acceptance-size runs")
class TestAcceptanceDynamics(unittest.TestCase):

    def test_attention_rank_descends(self):
        started = time.perf_counter()
        monotone = 0
        for seed in range(20):
            h = dynamics.standard_features(64, 32, seed)
            base = DynamicsConfig(depth=32, residual=True, seed=seed, norm=_norm('layernorm'))
            records = dynamics.run(h, base)
            ranks = [r.effective_rank for r in records]
            if all(b <= a + 1e-6 for a, b in zip(ranks, ranks[1:])):
                monotone += 1
            contra = dynamics.run(h, DynamicsConfig(depth=32, residual=True, seed=seed,
                                                    norm=_norm('contranorm', scale=1.0, tau=1.0)))
            self.assertGreater(contra[-1].effective_rank, records[-1].effective_rank)
        self.assertGreaterEqual(monotone, 18)
        elapsed = time.perf_counter() - started
        self.assertLess(elapsed, time_limit('attention_rank'), msg=f"took {elapsed:.1f}s")

    def test_spectrum_ablation(self):
        for seed in range(10):
            h = dynamics.standard_features(32, 16, seed)
            counts = {}
            for variant in ('none', 'contranorm-sg', 'contranorm-full'):
                records = dynamics.run(h, DynamicsConfig(depth=12, residual=True, seed=seed, norm=_norm(variant)))
                counts[variant] = near_zero_count(records[12].singular_values)
            self.assertLess(counts['contranorm-sg'], counts['none'])
            self.assertLess(counts['contranorm-full'], counts['none'])


class TestGraphGeneration(unittest.TestCase):

    def test_ring(self):
        g = dynamics.generate_graph('ring', 5)
        self.assertEqual(g.edge_count, 5)
        self.assertIn((0, 4), g.edges)

    def test_sbm_seeded(self):
        a = dynamics.generate_graph('sbm', 20, p_in=0.8, p_out=0.1, seed=3)
        b = dynamics.generate_graph('sbm', 20, p_in=0.8, p_out=0.1, seed=3)
        self.assertEqual(a.edges, b.edges)
        with self.assertRaises(ContractViolationError):
            dynamics.generate_graph('sbm', 20, p_in=0.1, p_out=0.8)

    def test_sbm_edge_count_near_expectation(self):
        g = dynamics.generate_graph('sbm', 100, p_in=0.1, p_out=0.01, seed=7)
        within, across = 2 * (50 * 49 // 2), 50 * 50
        expected = 0.1 * within + 0.01 * across
        sigma = np.sqrt(0.1 * 0.9 * within + 0.01 * 0.99 * across)
        self.assertLess(abs(g.edge_count - expected), 4 * sigma)

    def test_standard_features_seeded(self):
        np.testing.assert_array_equal(dynamics.standard_features(3, 2, 9), dynamics.standard_features(3, 2, 9))
        self.assertFalse(np.array_equal(dynamics.standard_features(3, 2, 9), dynamics.standard_features(3, 2, 10)))


class TestFileIngestion(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp)

    def _file(self, name, text):
        path = os.path.join(self.tmp, name)
        with open(path, 'w', encoding='utf-8') as f:
            f.write(text)
        return path

    def test_load_graph(self):
        path = self._file('g.txt', "# ring\n0 1\n1 2\n2 0\n1 0\n2 2\n")
        g = dynamics.load_graph(path)
        self.assertEqual(g.node_count, 3)
        self.assertEqual(g.edges, frozenset({(0, 1), (1, 2), (0, 2)}))
        self.assertEqual(dynamics.load_graph(path, node_count=5).node_count, 5)

    def test_load_graph_errors_carry_line(self):
        path = self._file('bad.txt', "0 1\n1 x\n")
        with self.assertRaises(InputFormatError) as ctx:
            dynamics.load_graph(path)
        self.assertEqual(ctx.exception.line_number, 2)
        with self.assertRaises(InputFormatError):
            dynamics.load_graph(self._file('short.txt', "0 1\n"), node_count=1)

    def test_load_features(self):
        path = self._file('f.csv', "1,2\n3.5,-4\n\n")
        np.testing.assert_array_equal(dynamics.load_features(path), [[1.0, 2.0], [3.5, -4.0]])

    def test_load_features_errors(self):
        with self.assertRaises(InputFormatError):
            dynamics.load_features(self._file('ragged.csv', "1,2\n3\n"))
        with self.assertRaises(InputFormatError):
            dynamics.load_features(self._file('nan.csv', "1,nan\n"))
        with self.assertRaises(InputFormatError):
            dynamics.load_features(self._file('empty.csv', ""))

    def test_alignment(self):
        g = dynamics.generate_graph('ring', 3)
        dynamics.check_alignment(g, np.ones((3, 2)))
        with self.assertRaises(ContractViolationError):
            dynamics.check_alignment(g, np.ones((4, 2)))


if __name__ == '__main__':
    unittest.main()
