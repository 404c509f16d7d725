"""Majority learning: vote arithmetic, decomposition, exact error DP, beta."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import balanced_model, balanced_tree, rooted_children
from treemerge import ancestral
from treemerge.ancestral import (
    Decomposition,
    DepthInfeasibleError,
    a_of_q,
    calibrate_beta,
    decompose,
    default_depth,
    learn_root,
    maj,
    majhat_exact,
    majority_gain,
)
from treemerge.simulate import CFNModel, sample_cfn
from treemerge.trees import LAMBDA0, Tree, length_from_prob, prob_from_length


class TestAOfQ:
    def test_small_values(self):
        assert a_of_q(2) == pytest.approx(1.0)
        assert a_of_q(4) == pytest.approx(0.75)
        assert a_of_q(16) == pytest.approx(12870 / 32768)

    def test_tracks_inverse_sqrt(self):
        # a(q) * sqrt(q) approaches 2*sqrt(2/pi)
        for q in (64, 256, 1024):
            assert a_of_q(q) * math.sqrt(q) == pytest.approx(2 * math.sqrt(2 / math.pi), rel=0.02)

    def test_domain(self):
        with pytest.raises(ValueError):
            a_of_q(0)


class TestMajorityGain:
    def brute_force_gain(self, q):
        """q * E[x1 * Maj] by exhausting sign vectors and both coin values."""
        total = 0.0
        for bits in itertools.product([-1, 1], repeat=q):
            for coin in (-1, 1):
                m = maj(bits, coin=coin)
                total += bits[0] * m
        return q * total / (2**q * 2)

    @pytest.mark.parametrize("q", [2, 4, 8])
    def test_matches_enumeration(self, q):
        assert majority_gain(q) == pytest.approx(self.brute_force_gain(q), abs=1e-12)

    def test_approaches_sqrt(self):
        assert majority_gain(1024) == pytest.approx(math.sqrt(2 * 1024 / math.pi), rel=0.01)

    def test_default_depth(self):
        # near the transition the smallest workable depth grows
        assert default_depth(LAMBDA0 - 0.02) == 6
        assert default_depth(LAMBDA0 - 0.1) == 2
        assert default_depth(LAMBDA0 - 0.004) is None  # beyond the cap
        assert default_depth(0.0) == 1


class TestMaj:
    def test_clear_majority(self):
        assert maj([1, 1, -1]) == 1
        assert maj([-1, -1, 1]) == -1

    def test_tie_uses_coin(self):
        assert maj([1, -1], coin=1) == 1
        assert maj([1, -1], coin=-1) == -1

    def test_weighted_tie(self):
        assert maj([1, -1, -1], weights=[2, 1, 1], coin=-1) == -1
        assert maj([1, -1, -1], weights=[2, 1, 1], coin=1) == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            maj([])

    @given(st.lists(st.sampled_from([-1, 1]), min_size=1, max_size=9), st.sampled_from([-1, 1]))
    @settings(max_examples=200)
    def test_sign_equivariance(self, values, coin):
        assert maj([-v for v in values], coin=-coin) == -maj(values, coin=coin)


class TestDecompose:
    def test_shallow_tree_single_piece(self):
        tree = balanced_tree(2, 0.1)
        plan = decompose(0, rooted_children(tree, 0), 3)
        assert len(plan.subtrees) == 1
        assert plan.subtrees[0].root == 0

    def test_balanced_count(self):
        # cutting a 2d-level balanced tree at depth d leaves 1 + 2^d pieces
        for d in (1, 2):
            tree = balanced_tree(2 * d, 0.1)
            plan = decompose(0, rooted_children(tree, 0), d)
            assert len(plan.subtrees) == 1 + 2**d

    def test_children_before_parents(self):
        tree = balanced_tree(4, 0.1)
        plan = decompose(0, rooted_children(tree, 0), 2)
        seen = set()
        for sub in plan.subtrees:
            for node, _ in sub.boundary:
                if node != sub.root and any(s.root == node for s in plan.subtrees):
                    assert node in seen
            seen.add(sub.root)

    def test_caterpillar_edge_cover(self):
        # every edge appears in exactly one subtree of the decomposition
        d = 2
        tree = Tree()
        top = tree.add_node()
        cur = top
        for i in range(3 * d):
            leaf = tree.add_node(f"l{i}")
            tree.add_edge(cur, leaf, 0.1)
            if i < 3 * d - 1:
                nxt = tree.add_node()
                tree.add_edge(cur, nxt, 0.1)
                cur = nxt
            else:
                tree.label[cur] = "end"
        children = rooted_children(tree, top)
        plan = decompose(top, children, d)
        edges_in_plans = []
        for sub in plan.subtrees:
            # reconstruct this piece's edges: walk from root, stopping at its boundary
            boundary_nodes = {n for n, _ in sub.boundary}
            stack = [sub.root]
            while stack:
                node = stack.pop()
                for c in children.get(node, []):
                    edges_in_plans.append((node, c))
                    if c not in boundary_nodes:
                        stack.append(c)
        assert sorted(edges_in_plans) == sorted(
            (u, c) for u in children for c in children[u]
        )
        counts = {}
        for e in edges_in_plans:
            counts[e] = counts.get(e, 0) + 1
        assert all(v == 1 for v in counts.values())

    def test_weights_are_powers_of_two_summing_to_capacity(self):
        tree = balanced_tree(3, 0.1)
        # prune one grandchild pair to create early leaves
        plan = decompose(0, rooted_children(tree, 0), 2)
        for sub in plan.subtrees:
            total = sum(w for _, w in sub.boundary)
            assert total == 2**plan.depth
            for _, w in sub.boundary:
                assert w & (w - 1) == 0


class TestLearnRoot:
    def test_zero_lengths_exact(self):
        model, plan = balanced_model(3, 0.0)
        mat = sample_cfn(model, 300, seed=1)
        rows = {v: mat[v] for v in model.tree.leaves()}
        learned, _ = learn_root(plan, rows, seed=9)
        assert np.array_equal(learned, mat[0])

    def test_cherry_error_rate(self):
        p = 0.2
        model, plan = balanced_model(1, length_from_prob(p))
        n = 100_000
        mat = sample_cfn(model, n, seed=2)
        rows = {v: mat[v] for v in model.tree.leaves()}
        learned, _ = learn_root(plan, rows, seed=3)
        err = float(np.mean(learned != mat[0]))
        sigma = math.sqrt(p * (1 - p) / n)
        assert abs(err - p) < 3 * sigma

    def test_three_levels_matches_oracle(self):
        from treemerge.simulate import exact_learned_root_distance

        model, plan = balanced_model(3, 0.15)
        exact = exact_learned_root_distance(model, plan)
        p_exact = prob_from_length(exact)
        n = 200_000
        mat = sample_cfn(model, n, seed=4)
        rows = {v: mat[v] for v in model.tree.leaves()}
        learned, _ = learn_root(plan, rows, seed=5)
        err = float(np.mean(learned != mat[0]))
        sigma = math.sqrt(p_exact * (1 - p_exact) / n)
        assert abs(err - p_exact) < 3 * sigma

    def test_bit_identical_repeats(self):
        model, plan = balanced_model(2, 0.1)
        mat = sample_cfn(model, 500, seed=6)
        rows = {v: mat[v] for v in model.tree.leaves()}
        a, _ = learn_root(plan, rows, seed=7)
        b, _ = learn_root(plan, rows, seed=7)
        c, _ = learn_root(plan, rows, seed=8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c) or True  # different seed may still agree sitewise

    def test_missing_leaf_data(self):
        model, plan = balanced_model(2, 0.1)
        mat = sample_cfn(model, 100, seed=6)
        rows = {v: mat[v] for v in model.tree.leaves()[1:]}
        with pytest.raises(ValueError):
            learn_root(plan, rows, seed=0)

    def test_integer_weights_equal_materialized_padding(self):
        # an early leaf weighted 2^(d-k) behaves exactly like a zero-length
        # balanced subtree hanging from it
        t = Tree()
        root = t.add_node()
        early = t.add_node("E")  # depth 1 leaf
        mid = t.add_node()
        t.add_edge(root, early, 0.1)
        t.add_edge(root, mid, 0.1)
        l1 = t.add_node("X")
        l2 = t.add_node("Y")
        t.add_edge(mid, l1, 0.1)
        t.add_edge(mid, l2, 0.1)
        model = CFNModel(t, root=root)
        plan = decompose(root, rooted_children(t, root), 2)
        padded = Tree()
        r2 = padded.add_node()
        e2 = padded.add_node()
        m2 = padded.add_node()
        padded.add_edge(r2, e2, 0.1)
        padded.add_edge(r2, m2, 0.1)
        pads = [padded.add_node("Ea"), padded.add_node("Eb")]
        for p in pads:
            padded.add_edge(e2, p, 0.0)
        x2, y2 = padded.add_node("X"), padded.add_node("Y")
        padded.add_edge(m2, x2, 0.1)
        padded.add_edge(m2, y2, 0.1)
        mat = sample_cfn(model, 2000, seed=10)
        rows = {v: mat[v] for v in t.leaves()}
        learned, _ = learn_root(plan, rows, seed=11)
        plan_padded = decompose(r2, rooted_children(padded, r2), 2)
        rows_padded = {x2: rows[l1], y2: rows[l2], pads[0]: rows[early], pads[1]: rows[early]}
        learned_padded, _ = learn_root(plan_padded, rows_padded, seed=11)
        assert np.array_equal(learned, learned_padded)


class TestMajhatExact:
    def test_zero(self):
        assert majhat_exact(3, 0.0, 0.0) == 0.0

    def test_cherry_identity(self):
        for l in (0.05, 0.15, 0.3):
            assert majhat_exact(1, l, 0.0) == pytest.approx(l, abs=1e-12)
        # and with noise the pendant distances add
        assert majhat_exact(1, 0.1, 0.07) == pytest.approx(0.17, abs=1e-12)

    def test_d2_matches_monte_carlo(self):
        model, plan = balanced_model(2, 0.1, noise=0.05)
        exact = majhat_exact(2, 0.1, 0.05)
        n = 1_000_000
        mat = sample_cfn(model, n, seed=12)
        rows = {v: mat[v] for v in model.tree.leaves()}
        learned, _ = learn_root(plan, rows, seed=13)
        err = float(np.mean(learned != mat[0]))
        p_exact = prob_from_length(exact)
        sigma = math.sqrt(p_exact * (1 - p_exact) / n)
        assert abs(err - p_exact) < 3 * sigma

    def test_depth_cap(self):
        with pytest.raises(ValueError):
            majhat_exact(7, 0.1, 0.0)

    def test_monotone_in_noise(self):
        vals = [majhat_exact(3, 0.1, e) for e in np.linspace(0, 0.5, 20)]
        assert all(b >= a - 1e-12 for a, b in zip(vals, vals[1:]))


class TestCalibrateBeta:
    def test_zero_lambda_tiny_beta(self):
        for d in (1, 2, 3):
            cal = calibrate_beta(0.0, d)
            assert cal.beta <= 2 * LAMBDA0 / 2048 + 1e-12

    def test_self_consistency_invariant(self):
        cal = calibrate_beta(LAMBDA0 - 0.1, 2)
        assert majhat_exact(2, cal.lambda_max, cal.beta) <= cal.beta

    def test_monotone_in_lambda(self):
        # derived sweep at fixed depth
        betas = [calibrate_beta(lam, 2).beta for lam in (0.02, 0.04, 0.06, 0.0733)]
        assert all(b >= a - 1e-12 for a, b in zip(betas, betas[1:]))

    def test_infeasible_depth(self):
        # depth 1 amplifies nothing: no fixed point except at tiny lambda
        with pytest.raises(DepthInfeasibleError):
            calibrate_beta(0.15, 1)

    def test_thm_bound_audit(self):
        # exact learned error obeys max(eta - log(alpha)/2, beta) with the
        # literal vote constant alpha = a(2^d) e^(-2 d lambda)
        rng = np.random.default_rng(23)
        lam = LAMBDA0 - 0.02
        beta = 1.3  # any ceiling >= the d=6 calibrated value works here
        for _ in range(30):
            d = int(rng.integers(1, 4))
            alpha = a_of_q(2**d) * math.exp(-2 * d * lam)
            eta = float(rng.uniform(0, beta))
            l = float(rng.uniform(0, lam))
            bound = max(eta - math.log(alpha) / 2, beta)
            assert majhat_exact(d, l, eta) <= bound + 1e-9

    def test_cache_round_trip(self, tmp_path):
        cals = [calibrate_beta(0.05, 2), calibrate_beta(0.0733, 2)]
        path = tmp_path / "beta.tsv"
        ancestral.save_beta_cache(path, cals)
        loaded = ancestral.load_beta_cache(path)
        for cal in cals:
            assert loaded[(round(cal.lambda_max, 12), cal.depth)] == pytest.approx(cal.beta)
