"""Exact-oracle property batteries for the learned-character toolkit.

Everything here runs through exhaustive enumeration on small trees; the
acceptance suite repeats the heavier sweeps at full scale.
"""

import itertools
import math

import numpy as np
import pytest

from conftest import induced_subtree_plan
from treemerge import ancestral
from treemerge.simulate import (
    CFNModel,
    PercolationConfig,
    distance_from_joint,
    exact_leaf_distribution,
    exact_learned_joint,
    exact_percolation_leaf_distribution,
    enumerate_topologies,
)
from treemerge.trees import Tree


def with_lengths(topology, value):
    t = topology.copy()
    for e in t.lengths:
        t.lengths[e] = value
    return t


class TestPercolationEquivalence:
    def test_all_small_topologies_uniform_lengths(self):
        for n_leaves in (2, 3, 4):
            for topo in enumerate_topologies([f"x{i}" for i in range(n_leaves)]):
                for length in (0.05, 0.17, 0.5):
                    t = with_lengths(topo, length)
                    model = CFNModel(t)
                    cfn = exact_leaf_distribution(model)
                    perc = exact_percolation_leaf_distribution(PercolationConfig.from_cfn(model))
                    assert np.allclose(cfn.probs, perc.probs, atol=1e-10)

    def test_mixed_lengths(self):
        rng = np.random.default_rng(41)
        topo = enumerate_topologies([f"x{i}" for i in range(5)])[7]
        for _ in range(10):
            t = topo.copy()
            for e in t.lengths:
                t.lengths[e] = float(rng.uniform(0.02, 0.6))
            model = CFNModel(t)
            cfn = exact_leaf_distribution(model)
            perc = exact_percolation_leaf_distribution(PercolationConfig.from_cfn(model))
            assert np.allclose(cfn.probs, perc.probs, atol=1e-10)


def plan_has_dictator_vote(plan):
    """True when some vote is decided by a single input regardless of the rest.

    Happens for weights like (2, 1): the heavy input outweighs the others
    plus the tie coin, the vote collapses to that input, and the learned
    value becomes conditionally independent of everything given the chain of
    dictators, so the triangle inequality holds with equality, not strictly.
    """
    for sub in plan.subtrees:
        total = sum(w for _, w in sub.boundary)
        if any(2 * w > total for _, w in sub.boundary):
            return True
    return False


class TestTriangleInequality:
    """Learned-root distances obey D(rho~, v) < D(rho, v) + D(rho, rho~)."""

    def check_instance(self, tree, root, leaf_subset, depth):
        model = CFNModel(tree, root=min(tree.adj))
        plan, span = induced_subtree_plan(tree, root, leaf_subset, depth)
        dictator = plan_has_dictator_vote(plan)
        probes = sorted(span - set(leaf_subset))
        for v in probes:
            joint = exact_learned_joint(model, [plan], [v, root])
            lhs = distance_from_joint(joint, 0, 1)
            d_root_v = tree.path_length(root, v)
            d_root_learned = distance_from_joint(joint, 0, 2)
            rhs = d_root_v + d_root_learned
            if v == root:
                assert lhs == pytest.approx(d_root_learned, abs=1e-10)
            else:
                assert lhs < rhs + 1e-12
                if not dictator:
                    assert lhs < rhs  # strict away from degenerate votes

    def test_five_leaf_battery(self):
        topo = enumerate_topologies([f"x{i}" for i in range(5)])[3]
        leaves = topo.leaves()
        for length in (0.08, 0.3):
            tree = with_lengths(topo, length)
            internal = [v for v in tree.nodes() if not tree.is_leaf(v)]
            for root in internal[:2]:
                for subset in itertools.combinations(leaves, 3):
                    self.check_instance(tree, root, list(subset), depth=2)

    def test_uneven_lengths(self):
        rng = np.random.default_rng(43)
        topo = enumerate_topologies([f"x{i}" for i in range(4)])[1]
        for _ in range(5):
            tree = topo.copy()
            for e in tree.lengths:
                tree.lengths[e] = float(rng.uniform(0.05, 0.5))
            internal = [v for v in tree.nodes() if not tree.is_leaf(v)]
            self.check_instance(tree, internal[0], tree.leaves()[:3], depth=1)


class TestQuartetOnLearnedValues:
    def test_fpm_me_exact_through_learned_representatives(self):
        # Four learned cherry roots around a central edge: the four-point
        # method on their exact pairwise distances recovers the grouping and
        # the middle length exactly (learning noise cancels).
        t = Tree()
        leaves = [t.add_node(f"x{i}") for i in range(8)]
        js = [t.add_node() for _ in range(4)]
        hubs = [t.add_node(), t.add_node()]
        pend = [0.11, 0.13, 0.09, 0.15, 0.12, 0.1, 0.14, 0.08]
        for i, j in enumerate(js):
            t.add_edge(leaves[2 * i], j, pend[2 * i])
            t.add_edge(leaves[2 * i + 1], j, pend[2 * i + 1])
        arm = [0.07, 0.09, 0.06, 0.1]
        t.add_edge(js[0], hubs[0], arm[0])
        t.add_edge(js[1], hubs[0], arm[1])
        t.add_edge(js[2], hubs[1], arm[2])
        t.add_edge(js[3], hubs[1], arm[3])
        middle = 0.123
        t.add_edge(hubs[0], hubs[1], middle)
        model = CFNModel(t)
        plans = []
        for j in js:
            kids = [v for v in t.neighbors(j) if t.is_leaf(v)]
            plans.append(ancestral.decompose(j, {j: kids, kids[0]: [], kids[1]: []}, 1))
        joint = exact_learned_joint(model, plans, [])
        d = {}
        for i in range(4):
            for k in range(i + 1, 4):
                d[(i, k)] = distance_from_joint(joint, i, k)

        def dist(i, k):
            return d[(min(i, k), max(i, k))] if i != k else 0.0

        from treemerge.distances import fpm, me

        out = fpm(dist, 0, 1, 2, 3)
        assert out.grouping == ((0, 1), (2, 3))
        est = me(dist, (0, 1), (2, 3))
        assert est == pytest.approx(middle, abs=1e-10)
