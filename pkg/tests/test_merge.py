"""Reconstruction scenarios: connections, distances, guards, determinized runs."""

import math

import numpy as np
import pytest

from treemerge import distances, merge, scoring, simulate, trees
from treemerge.merge import CandidateSet, ExactBackend, MergeState, SequenceBackend, tree_merge
from treemerge.trees import LAMBDA0, Tree, edge_key

EPS = 0.004
BAND = (6 * EPS, LAMBDA0 - 3 * EPS)


def params_for(n, eps=EPS, depth=3):
    return distances.operating_params(10**6, n, 0.2, epsilon=eps, depth=depth)


def random_instance(n, seed, band=BAND):
    rng = np.random.default_rng(seed)
    return simulate.random_binary_tree([f"t{i:02d}" for i in range(n)], rng, band)


def exact_run(truth, n=None, eps=EPS, depth=3):
    n = n if n is not None else len(truth.taxa())
    return tree_merge(ExactBackend(truth), params_for(n, eps, depth))


def two_blocks_tree(middle):
    """Two four-leaf balanced blocks joined by a middle edge."""
    t = Tree()
    mids = []
    for side in range(2):
        hub = t.add_node()
        for c in range(2):
            j = t.add_node()
            t.add_edge(hub, j, 0.08)
            for k in range(2):
                leaf = t.add_node(f"s{side}{c}{k}")
                t.add_edge(j, leaf, 0.07)
        mids.append(hub)
    t.add_edge(mids[0], mids[1], middle)
    return t


class TestSmallExactRuns:
    def test_three_taxa(self):
        t = Tree()
        hub = t.add_node()
        for i, length in enumerate((0.1, 0.12, 0.14)):
            leaf = t.add_node(f"x{i}")
            t.add_edge(hub, leaf, length)
        result = exact_run(t)
        assert len(result.components) == 1
        rep = scoring.score_forest(result.components, t)
        assert rep.full_recovery
        assert rep.max_length_error < 1e-9

    @pytest.mark.parametrize("n,seed", [(8, 0), (8, 1), (12, 2), (16, 3)])
    def test_full_recovery_in_band(self, n, seed):
        truth = random_instance(n, seed)
        result = exact_run(truth)
        rep = scoring.score_forest(result.components, truth)
        assert rep.full_recovery
        assert rep.max_length_error < 1e-9

    def test_moderate_long_edge_still_recovers(self):
        # one edge between the proper cutoff and the hard ceiling is allowed
        truth = random_instance(16, 5)
        internal = [
            e for e in truth.edges() if not (truth.is_leaf(e[0]) or truth.is_leaf(e[1]))
        ]
        truth.lengths[internal[0]] = LAMBDA0 + 10 * EPS  # < 2*lambda0 - 5*eps at eps=0.004
        result = exact_run(truth)
        rep = scoring.score_forest(result.components, truth)
        assert rep.compatibility == 1.0

    def test_long_edge_splits_forest(self):
        # with eps >= lambda0/15 the same planted length exceeds the ceiling
        eps = 0.015
        band = (6 * eps, LAMBDA0 - 3 * eps)
        truth = random_instance(16, 5, band=band)
        internal = [
            e for e in truth.edges() if not (truth.is_leaf(e[0]) or truth.is_leaf(e[1]))
        ]
        truth.lengths[internal[0]] = LAMBDA0 + 10 * eps
        result = exact_run(truth, eps=eps)
        assert len(result.components) >= 2
        rep = scoring.score_forest(result.components, truth)
        assert rep.compatibility == 1.0

    def test_work_bounds(self):
        truth = random_instance(16, 6)
        result = exact_run(truth)
        n = 16
        assert result.telemetry.learned_sequences <= 3 * n
        assert result.telemetry.distance_evaluations <= 8 * n * n
        assert result.telemetry.iterations <= 4 * n * n


class TestTreeConnection:
    def test_two_cherries_resolve_to_pendant_edges(self):
        # two 2-leaf components joined by a long-enough path
        t = Tree()
        a, b = t.add_node("a"), t.add_node("b")
        c, d = t.add_node("c"), t.add_node("d")
        u, v = t.add_node(), t.add_node()
        t.add_edge(a, u, 0.1)
        t.add_edge(b, u, 0.1)
        t.add_edge(u, v, 0.12)
        t.add_edge(c, v, 0.1)
        t.add_edge(d, v, 0.1)
        result = exact_run(t)
        assert len(result.components) == 1
        rep = scoring.score_forest(result.components, t)
        assert rep.full_recovery

    def test_node_attachment_gives_three_edge_set(self):
        # zero middle edge: the attachment sits exactly at the block hubs
        truth = two_blocks_tree(0.0)
        result = exact_run(truth)
        # blocks resolve internally; the cross pair cannot (C1 or 3-edge set)
        assert len(result.components) == 2
        state = result.state
        cids = sorted(state.forest.comp_nodes)
        conn = state.tree_connection(
            cids[0], cids[1], state._full_cs(cids[0]), state._full_cs(cids[1])
        )
        assert conn is not None
        assert any(len(cs.edges) == 3 for cs in conn)

    def test_interior_attachment_gives_singletons(self):
        # both attachment edges are long (> 2 eps): unique singleton sets
        truth = random_instance(12, 7)
        result = exact_run(truth)
        assert len(result.components) == 1

    def test_no_seed_returns_none(self):
        truth = random_instance(8, 8)
        # separate two groups by an enormous edge: no communicating reps
        internal = [
            e for e in truth.edges() if not (truth.is_leaf(e[0]) or truth.is_leaf(e[1]))
        ]
        truth.lengths[internal[0]] = 12.0
        params = params_for(8)
        result = tree_merge(ExactBackend(truth), params)
        assert len(result.components) >= 2


class TestTreeDistanceExactness:
    def build_state(self, truth):
        result = exact_run(truth)
        return result.state, result

    def test_singleton_sets_exact(self):
        # in a fully recovered run every accepted middle equals the true length
        truth = random_instance(10, 9)
        state, result = self.build_state(truth)
        rep = scoring.score_forest(result.components, truth)
        assert rep.full_recovery and rep.max_length_error < 1e-9

    def test_three_edge_set_minimum_matches_true_length(self):
        # the last unmerged cherry attaches exactly at an existing node of the
        # big component; its true connecting path is the 0.08 half to the hub
        truth = two_blocks_tree(0.0)
        state, _ = self.build_state(truth)
        cids = sorted(state.forest.comp_nodes)
        conn = state.tree_connection(
            cids[0], cids[1], state._full_cs(cids[0]), state._full_cs(cids[1])
        )
        assert any(len(cs.edges) == 3 for cs in conn)
        d = state.tree_distance(conn[0], conn[1])
        assert d == pytest.approx(0.08, abs=1e-9)

    def test_perturbed_distances_stay_within_eps(self):
        # wrap the exact backend with adversarial +/- eps/2 noise per pair
        eps = 0.01
        truth = random_instance(8, 10, band=(6 * eps, LAMBDA0 - 3 * eps))
        params = params_for(8, eps=eps)

        class NoisyBackend(ExactBackend):
            def __init__(self, tree, eps, salt):
                super().__init__(tree)
                self._eps = eps
                self._salt = salt

            def _compute_distance(self, s1, s2):
                base = super()._compute_distance(s1, s2)
                rng = np.random.default_rng((self._salt, min(s1.serial, s2.serial), max(s1.serial, s2.serial)))
                return max(0.0, base + float(rng.uniform(-self._eps / 2, self._eps / 2)))

        clean = tree_merge(ExactBackend(truth), params)
        assert scoring.score_forest(clean.components, truth).full_recovery
        for salt in range(3):
            noisy = tree_merge(NoisyBackend(truth, eps, salt), params)
            rep = scoring.score_forest(noisy.components, truth)
            assert rep.compatibility == 1.0
            if rep.full_recovery:
                assert rep.max_length_error <= eps + 1e-9


class TestGuards:
    def test_c1_c2_thresholds(self):
        params = params_for(8)
        state = MergeState(ExactBackend(random_instance(8, 11)), params)
        good = ((("a", 0.05), ("b", 0.06)), None, 0.1)
        assert state._check_c1(good)
        bad_short = ((("a", 2 * EPS), ("b", 0.06)), None, 0.1)
        assert not state._check_c1(bad_short)
        # two long edges reject, one moderate long edge passes
        two_long = ((("a", LAMBDA0), ("b", LAMBDA0)), None, 0.1)
        cs = CandidateSet(anchor=0)
        assert not state._check_c2(0, 1, cs, cs, two_long)
        one_long = ((("a", LAMBDA0 - EPS), ("b", 0.05)), None, 0.1)
        assert state._check_c2(0, 1, cs, cs, one_long)
        too_long = ((("a", 2 * LAMBDA0 - 4 * EPS), ("b", 0.05)), None, 0.1)
        assert not state._check_c2(0, 1, cs, cs, too_long)

    def test_triangle_guard_scripted(self):
        params = params_for(8)
        state = MergeState(ExactBackend(random_instance(8, 12)), params)
        # T_k (cid 2) sits on the path between cids 0 and 1
        state._by_comp = {
            0: {1: 0.5, 2: 0.2},
            1: {0: 0.5, 2: 0.25},
            2: {0: 0.2, 1: 0.25},
        }
        hit = state._triangle_reject(0, 1, 0.5)
        assert hit is not None and hit[0] == 2  # 0.5 + 3eps > 0.45
        # T_k far away: no rejection
        state._by_comp = {
            0: {1: 0.5, 2: 1.2},
            1: {0: 0.5, 2: 1.25},
            2: {0: 1.2, 1: 1.25},
        }
        assert state._triangle_reject(0, 1, 0.5) is None
        # vacuous with two components
        state._by_comp = {0: {1: 0.5}, 1: {0: 0.5}}
        assert state._triangle_reject(0, 1, 0.5) is None

    def test_triangle_boundary_flagged(self):
        # exact equality at the guard threshold is surfaced, not silently kept
        params = params_for(8)
        state = MergeState(ExactBackend(random_instance(8, 13)), params)
        rhs = 0.5 + 3 * params.epsilon
        state._by_comp = {
            0: {1: 0.5, 2: rhs / 2},
            1: {0: 0.5, 2: rhs / 2},
            2: {0: rhs / 2, 1: rhs / 2},
        }
        hit = state._triangle_reject(0, 1, 0.5)
        assert hit is None  # strict inequality: equality does not reject
        state._by_comp[0][2] = rhs / 2 - 1e-6
        hit = state._triangle_reject(0, 1, 0.5)
        assert hit is not None and not hit[1]


class TestUpdateQueue:
    def test_queue_shrinks_when_no_others(self):
        # two taxa cannot merge (needs >= 3); use three and watch the queue drain
        t = random_instance(3, 14, band=(0.1, 0.15))
        result = exact_run(t)
        assert len(result.components) == 1
        assert result.telemetry.iterations == 2

    def test_inherited_candidates_scenario(self):
        # after a merge, a previously connected third component reconnects
        # through inherited candidate edges and the run still recovers fully
        truth = random_instance(10, 15)
        result = exact_run(truth)
        rep = scoring.score_forest(result.components, truth)
        assert rep.full_recovery

    def test_new_communication_scenario(self):
        # a component whose leaf pairs were initially too far communicates
        # once intermediate nodes exist; full recovery on a caterpillar
        t = Tree()
        prev = t.add_node("c00")
        first = t.add_node("c01")
        t.add_edge(prev, first, 0.12)
        anchor = prev
        for i in range(2, 12):
            hub = t.add_node()
            leaf = t.add_node(f"c{i:02d}")
            # extend from the previous leaf's edge
            nbr = t.neighbors(anchor)[0]
            old = t.edge_length(anchor, nbr)
            t.remove_edge(anchor, nbr)
            t.add_edge(anchor, hub, old / 2)
            t.add_edge(hub, nbr, old / 2)
            t.add_edge(hub, leaf, 0.12)
            anchor = leaf
        t.validate_binary()
        result = exact_run(t)
        rep = scoring.score_forest(result.components, t)
        assert rep.compatibility == 1.0


class TestSequenceMode:
    def test_statistical_recovery_small(self):
        truth = random_instance(8, 16)
        model = simulate.CFNModel(truth)
        mat = simulate.sample_cfn(model, 4000, seed=17)
        rows = {truth.label[v]: mat[v] for v in truth.leaves()}
        params = distances.operating_params(4000, 8, 0.2, epsilon=EPS, depth=3)
        result = tree_merge(rows, params, seed=18)
        rep = scoring.score_forest(result.components, truth)
        assert rep.full_recovery

    def test_determinism(self):
        truth = random_instance(8, 19)
        model = simulate.CFNModel(truth)
        mat = simulate.sample_cfn(model, 1500, seed=20)
        rows = {truth.label[v]: mat[v] for v in truth.leaves()}
        params = distances.operating_params(1500, 8, 0.2, epsilon=EPS, depth=3)
        r1 = tree_merge(rows, params, seed=21)
        r2 = tree_merge(rows, params, seed=21)
        assert r1.forest_newick() == r2.forest_newick()
        assert r1.log == r2.log

    def test_slots_write_once(self):
        truth = random_instance(8, 22)
        model = simulate.CFNModel(truth)
        mat = simulate.sample_cfn(model, 1500, seed=23)
        rows = {truth.label[v]: mat[v] for v in truth.leaves()}
        params = distances.operating_params(1500, 8, 0.2, epsilon=EPS, depth=3)
        result = tree_merge(rows, params, seed=24)
        state = result.state
        # every memoized slot belongs to a unique serial: no recomputation
        serials = [s.serial for s in state._clade_memo.values()]
        assert len(serials) == len(set(serials))
        assert result.telemetry.learned_sequences == len(serials)

    def test_saturated_inputs_tolerated(self):
        # far-apart taxa saturate at small N; the run must not crash
        truth = random_instance(10, 25, band=(0.3, 0.5))
        model = simulate.CFNModel(truth)
        mat = simulate.sample_cfn(model, 300, seed=26)
        rows = {truth.label[v]: mat[v] for v in truth.leaves()}
        params = distances.operating_params(300, 10, 0.2, epsilon=EPS, depth=3)
        result = tree_merge(rows, params, seed=27)
        rep = scoring.score_forest(result.components, truth)
        assert rep.n_components >= 1

    def test_needs_three_taxa(self):
        rows = {"a": np.ones(10, dtype=np.int8), "b": -np.ones(10, dtype=np.int8)}
        with pytest.raises(ValueError):
            tree_merge(rows, params_for(2))
