"""Character simulation and exact enumeration oracles.

Samplers cover the symmetric two-state model (with optional leaf noise),
its bond-percolation representation, and group-based models reducible to
the two-state model through a sign morphism. The exact_* functions compute
small-tree distributions by exhaustive enumeration and back every property
test in the suite; they are deliberately independent of the sampling code
paths they are used to check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .trees import Tree, edge_key, length_from_prob, prob_from_length

ENUMERATION_NODE_CAP = 20  # exhaustive oracles sum over 2^nodes states


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng(tuple(int(k) for k in key))


# -- models ------------------------------------------------------------------


@dataclass
class CFNModel:
    """Two-state symmetric model on a tree, with optional per-leaf noise.

    leaf_noise maps leaf node -> extra distance eta; the observed value at
    such a leaf is its true state flipped with probability
    (1 - exp(-2*eta)) / 2, independently per site.
    """

    tree: Tree
    lengths: dict | None = None
    root: int | None = None
    leaf_noise: dict[int, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.lengths is None:
            self.lengths = dict(self.tree.lengths)
        if self.root is None:
            self.root = min(self.tree.adj)
        for e in self.tree.edges():
            if e not in self.lengths:
                raise ValueError(f"edge {e} has no length")
            if self.lengths[e] < 0:
                raise ValueError(f"edge {e} has negative length")
        for v, eta in self.leaf_noise.items():
            if not self.tree.is_leaf(v):
                raise ValueError(f"noise on non-leaf node {v}")
            if eta < 0:
                raise ValueError("leaf noise must be nonnegative")

    def edge_prob(self, u: int, v: int) -> float:
        return prob_from_length(self.lengths[edge_key(u, v)])

    def noise_prob(self, v: int) -> float:
        return prob_from_length(self.leaf_noise.get(v, 0.0))


@dataclass
class PercolationConfig:
    """Bond representation: edge e survives with theta(e) = 1 - 2p(e)."""

    tree: Tree
    survival: dict[tuple[int, int], float]

    def __post_init__(self):
        for e in self.tree.edges():
            th = self.survival.get(e)
            if th is None or not (0.0 < th <= 1.0):
                raise ValueError(f"survival probability for edge {e} must be in (0, 1]")

    @classmethod
    def from_cfn(cls, model: CFNModel) -> "PercolationConfig":
        surv = {e: 1.0 - 2.0 * prob_from_length(model.lengths[e]) for e in model.tree.edges()}
        return cls(model.tree, surv)


class CharacterMatrix:
    """Site patterns, one +/-1 int8 row per keyed node or taxon."""

    def __init__(self, rows: dict, n_sites: int):
        if n_sites < 1:
            raise ValueError("need at least one site")
        self.n_sites = int(n_sites)
        self.rows = {}
        for k, r in rows.items():
            arr = np.asarray(r, dtype=np.int8)
            if arr.shape != (self.n_sites,):
                raise ValueError(f"row {k!r} has shape {arr.shape}")
            if not np.all(np.abs(arr) == 1):
                raise ValueError(f"row {k!r} has entries outside {{+1,-1}}")
            self.rows[k] = arr

    def __getitem__(self, key):
        return self.rows[key]

    def __contains__(self, key):
        return key in self.rows

    def keys(self):
        return self.rows.keys()

    def relabel(self, mapping: dict) -> "CharacterMatrix":
        return CharacterMatrix({mapping[k]: v for k, v in self.rows.items() if k in mapping}, self.n_sites)


def _ordered_edges(tree: Tree, root: int) -> list[tuple[int, int]]:
    """(parent, child) pairs in BFS order from the root."""
    out, seen, frontier = [], {root}, [root]
    while frontier:
        nxt = []
        for u in frontier:
            for v in tree.neighbors(u):
                if v not in seen:
                    seen.add(v)
                    out.append((u, v))
                    nxt.append(v)
        frontier = nxt
    return out


def sample_cfn(model: CFNModel, n_sites: int, seed: int) -> CharacterMatrix:
    """Draw i.i.d. site columns; leaf rows include the leaf-noise flips.

    Each node consumes its own RNG stream derived from (seed, node), so the
    output does not depend on traversal bookkeeping.
    """
    if n_sites < 1:
        raise ValueError("need at least one site")
    tree, root = model.tree, model.root
    rows: dict[int, np.ndarray] = {}
    rows[root] = (_rng(seed, root, 0).integers(0, 2, n_sites, dtype=np.int8) * 2 - 1)
    for parent, child in _ordered_edges(tree, root):
        p = model.edge_prob(parent, child)
        flips = _rng(seed, child, 1).random(n_sites) < p
        rows[child] = np.where(flips, -rows[parent], rows[parent]).astype(np.int8)
    for leaf, eta in model.leaf_noise.items():
        if eta > 0:
            q = prob_from_length(eta)
            flips = _rng(seed, leaf, 2).random(n_sites) < q
            rows[leaf] = np.where(flips, -rows[leaf], rows[leaf]).astype(np.int8)
    return CharacterMatrix(rows, n_sites)


def sample_percolation(config: PercolationConfig, n_sites: int, seed: int) -> CharacterMatrix:
    """Delete edges independently, then color surviving components uniformly.

    On a tree this is equivalent to: every node copies its parent when the
    connecting edge survives and otherwise draws a fresh uniform sign.
    """
    if n_sites < 1:
        raise ValueError("need at least one site")
    tree = config.tree
    root = min(tree.adj)
    fresh = {
        v: (_rng(seed, v, 3).integers(0, 2, n_sites, dtype=np.int8) * 2 - 1) for v in tree.adj
    }
    rows = {root: fresh[root]}
    for parent, child in _ordered_edges(tree, root):
        th = config.survival[edge_key(parent, child)]
        alive = _rng(seed, child, 4).random(n_sites) < th
        rows[child] = np.where(alive, rows[parent], fresh[child]).astype(np.int8)
    return CharacterMatrix(rows, n_sites)


# -- exact enumeration oracles ------------------------------------------------


@dataclass(frozen=True)
class LeafDistribution:
    """Probabilities over leaf sign vectors; bit i set <=> leaves[i] == +1."""

    leaves: tuple[int, ...]
    probs: np.ndarray

    def prob_of(self, assignment: dict[int, int]) -> float:
        idx = 0
        for i, leaf in enumerate(self.leaves):
            if assignment[leaf] == 1:
                idx |= 1 << i
        return float(self.probs[idx])


def _all_sign_assignments(nodes: list[int]) -> np.ndarray:
    """(2^k, k) matrix of +/-1 assignments; column j follows bit j."""
    k = len(nodes)
    if k > ENUMERATION_NODE_CAP:
        raise ValueError(f"{k} nodes exceeds the enumeration cap of {ENUMERATION_NODE_CAP}")
    idx = np.arange(1 << k, dtype=np.int64)
    bits = (idx[:, None] >> np.arange(k)) & 1
    return (bits * 2 - 1).astype(np.int8)


def _state_probabilities(model: CFNModel, nodes: list[int], signs: np.ndarray) -> np.ndarray:
    """P(full assignment) for every row of `signs` (uniform root, edge flips)."""
    col = {v: i for i, v in enumerate(nodes)}
    probs = np.full(signs.shape[0], 0.5)
    for u, v in model.tree.edges():
        p = model.edge_prob(u, v)
        agree = signs[:, col[u]] == signs[:, col[v]]
        probs *= np.where(agree, 1.0 - p, p)
    return probs


def exact_leaf_distribution(model: CFNModel) -> LeafDistribution:
    """Exact observed-leaf distribution by summing over all internal states."""
    nodes = model.tree.nodes()
    leaves = tuple(model.tree.leaves())
    signs = _all_sign_assignments(nodes)
    probs = _state_probabilities(model, nodes, signs)
    col = {v: i for i, v in enumerate(nodes)}

    # Fold leaf noise: distribute each state's mass over flipped observations.
    out = np.zeros(1 << len(leaves))
    leaf_cols = [col[v] for v in leaves]
    base_idx = np.zeros(signs.shape[0], dtype=np.int64)
    for i, c in enumerate(leaf_cols):
        base_idx |= ((signs[:, c] == 1).astype(np.int64)) << i
    np.add.at(out, base_idx, probs)
    for i, leaf in enumerate(leaves):
        q = model.noise_prob(leaf)
        if q > 0:
            flipped = out[np.arange(out.size) ^ (1 << i)]
            out = (1 - q) * out + q * flipped
    return LeafDistribution(leaves, out)


def exact_percolation_leaf_distribution(config: PercolationConfig) -> LeafDistribution:
    """Exact leaf distribution of the bond construction, by edge-mask sums.

    This enumerates survival masks and uniform component colorings directly;
    it shares no code with the state-space enumeration above.
    """
    tree = config.tree
    nodes = tree.nodes()
    leaves = tuple(tree.leaves())
    edges = tree.edges()
    if len(edges) > ENUMERATION_NODE_CAP:
        raise ValueError("too many edges for exact percolation enumeration")
    out = np.zeros(1 << len(leaves))
    for mask in range(1 << len(edges)):
        p_mask = 1.0
        parent = {v: v for v in nodes}

        def find(x):
            while parent[x] != x:
                parent[x] = parent[parent[x]]
                x = parent[x]
            return x

        for j, e in enumerate(edges):
            th = config.survival[e]
            if mask >> j & 1:
                p_mask *= th
                parent[find(e[0])] = find(e[1])
            else:
                p_mask *= 1.0 - th
        comp_of_leaf = [find(v) for v in leaves]
        comps = sorted(set(comp_of_leaf))
        weight = p_mask * 0.5 ** len(comps)
        comp_bit = {c: i for i, c in enumerate(comps)}
        for coloring in range(1 << len(comps)):
            idx = 0
            for i, c in enumerate(comp_of_leaf):
                if coloring >> comp_bit[c] & 1:
                    idx |= 1 << i
            out[idx] += weight
    return LeafDistribution(leaves, out)


def exact_pair_distance(model: CFNModel, u: int, v: int) -> float:
    """Distance between the observed values at u and v, by enumeration.

    Observed means noisy at leaves carrying noise. Returns math.inf when the
    disagreement probability reaches one half.
    """
    if u == v:
        return 0.0
    nodes = model.tree.nodes()
    signs = _all_sign_assignments(nodes)
    probs = _state_probabilities(model, nodes, signs)
    col = {n: i for i, n in enumerate(nodes)}
    disagree_states = signs[:, col[u]] != signs[:, col[v]]
    base = float(probs[disagree_states].sum())
    for end in (u, v):
        q = model.noise_prob(end)
        base = base * (1 - q) + (1 - base) * q
    if base >= 0.5:
        return math.inf
    return length_from_prob(base)


# -- learned-root oracle -------------------------------------------------------


def _cascade_plus_probability(plan, input_prob_plus: dict[int, np.ndarray]) -> np.ndarray:
    """P(learned root = +1) per enumeration row, for independent inputs.

    plan is an ancestral.Decomposition; input_prob_plus maps each clade leaf
    to its per-row probability of being observed +1. Subtree roots are
    resolved bottom-up; inside one vote the inputs are independent given the
    row, so the weighted-sum law is a sequence of two-point convolutions.
    """
    resolved = dict(input_prob_plus)
    for sub in plan.subtrees:
        total = sum(w for _, w in sub.boundary)
        dist = np.zeros((next(iter(resolved.values())).shape[0], 2 * total + 1))
        dist[:, total] = 1.0
        for node, w in sub.boundary:
            p = resolved[node]
            shifted_up = np.zeros_like(dist)
            shifted_dn = np.zeros_like(dist)
            shifted_up[:, w:] = dist[:, : dist.shape[1] - w]
            shifted_dn[:, : dist.shape[1] - w] = dist[:, w:]
            dist = shifted_up * p[:, None] + shifted_dn * (1.0 - p[:, None])
        plus = dist[:, total + 1 :].sum(axis=1) + 0.5 * dist[:, total]
        resolved[sub.root] = plus
    return resolved[plan.root]


def exact_learned_joint(model: CFNModel, plans, probe_nodes) -> dict:
    """Joint law of learned plan roots and true node states, by enumeration.

    Returns {(s_1..s_k, t_1..t_m): probability} over +/-1 outcomes for the
    given plans and probe nodes. Tie coins contribute half weight; leaf noise
    is drawn independently per plan, so plans must not share noisy leaves.
    """
    noisy = {v for v, e in model.leaf_noise.items() if e > 0}
    leaf_sets = []
    for plan in plans:
        roots = {s.root for s in plan.subtrees}
        lset = set()
        for sub in plan.subtrees:
            for node, _ in sub.boundary:
                if node not in roots:
                    lset.add(node)
        leaf_sets.append(lset)
    for i in range(len(plans)):
        for j in range(i + 1, len(plans)):
            shared = leaf_sets[i] & leaf_sets[j] & noisy
            if shared:
                raise ValueError(f"plans share noisy leaves {sorted(shared)}")

    nodes = model.tree.nodes()
    signs = _all_sign_assignments(nodes)
    probs = _state_probabilities(model, nodes, signs)
    col = {n: i for i, n in enumerate(nodes)}

    plan_plus = []
    for plan, lset in zip(plans, leaf_sets):
        inputs = {}
        for leaf in lset:
            q = model.noise_prob(leaf)
            plus_state = (signs[:, col[leaf]] == 1).astype(float)
            inputs[leaf] = plus_state * (1 - q) + (1 - plus_state) * q
        plan_plus.append(_cascade_plus_probability(plan, inputs))

    out: dict[tuple, float] = {}
    k, m = len(plans), len(probe_nodes)
    for outcome in range(1 << (k + m)):
        w = probs.copy()
        key = []
        for i in range(k):
            s = 1 if outcome >> i & 1 else -1
            key.append(s)
            w *= plan_plus[i] if s == 1 else (1.0 - plan_plus[i])
        ok = np.ones(signs.shape[0], dtype=bool)
        for j, node in enumerate(probe_nodes):
            s = 1 if outcome >> (k + j) & 1 else -1
            key.append(s)
            ok &= signs[:, col[node]] == s
        out[tuple(key)] = float(w[ok].sum())
    return out


def distance_from_joint(joint: dict, i: int, j: int) -> float:
    """Distance between coordinates i and j of an exact_learned_joint result."""
    mismatch = sum(p for key, p in joint.items() if key[i] != key[j])
    if mismatch >= 0.5:
        return math.inf
    return length_from_prob(mismatch)


def exact_learned_root_distance(model: CFNModel, plan) -> float:
    """Exact distance between a plan's learned root value and the true root."""
    joint = exact_learned_joint(model, [plan], [plan.root])
    return distance_from_joint(joint, 0, 1)


# -- group-based models --------------------------------------------------------


class GroupModel:
    """Evolution over a finite group: transitions depend only on a^{-1} b.

    elements are display symbols, table is the multiplication table over
    element indices, phi a +/-1 morphism used for the two-state reduction,
    and edge_dists maps each edge to a probability vector over step elements.
    """

    def __init__(self, tree: Tree, elements, table, phi, edge_dists):
        self.tree = tree
        self.elements = tuple(elements)
        self.table = np.asarray(table, dtype=np.int64)
        self.phi = np.asarray(phi, dtype=np.int8)
        self.edge_dists = {edge_key(*e): np.asarray(p, dtype=float) for e, p in edge_dists.items()}
        self._validate()

    def _validate(self):
        k = len(self.elements)
        if self.table.shape != (k, k):
            raise ValueError("multiplication table shape mismatch")
        if self.phi.shape != (k,):
            raise ValueError("morphism length mismatch")
        if not (np.any(self.phi == 1) and np.any(self.phi == -1)):
            raise ValueError("morphism must be non-trivial (onto both signs)")
        for a in range(k):
            for b in range(k):
                if self.phi[self.table[a, b]] != self.phi[a] * self.phi[b]:
                    raise ValueError("phi is not a morphism")
        for e in self.tree.edges():
            p = self.edge_dists.get(e)
            if p is None or p.shape != (k,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-12:
                raise ValueError(f"edge {e} needs a probability vector over the group")

    def projected_flip_probability(self, u: int, v: int) -> float:
        """Flip probability of the sign-projected chain along edge (u, v)."""
        p = self.edge_dists[edge_key(u, v)]
        return float(p[self.phi == -1].sum())


class GroupCharacterMatrix:
    """Element-index rows for each node of a group-model simulation."""

    def __init__(self, rows: dict, n_sites: int, elements: tuple):
        self.rows = {k: np.asarray(v, dtype=np.int64) for k, v in rows.items()}
        self.n_sites = n_sites
        self.elements = elements


def sample_group(model: GroupModel, n_sites: int, seed: int) -> GroupCharacterMatrix:
    """Uniform root over the group; each edge multiplies by a drawn step."""
    if n_sites < 1:
        raise ValueError("need at least one site")
    tree = model.tree
    root = min(tree.adj)
    k = len(model.elements)
    rows = {root: _rng(seed, root, 5).integers(0, k, n_sites)}
    for parent, child in _ordered_edges(tree, root):
        steps = _rng(seed, child, 6).choice(k, size=n_sites, p=model.edge_dists[edge_key(parent, child)])
        rows[child] = model.table[rows[parent], steps]
    return GroupCharacterMatrix(rows, n_sites, model.elements)


def project_group(matrix: GroupCharacterMatrix, model: GroupModel) -> CharacterMatrix:
    """Apply the sign morphism entrywise."""
    return CharacterMatrix({k: model.phi[v] for k, v in matrix.rows.items()}, matrix.n_sites)


KLEIN_ELEMENTS = ("A", "G", "C", "T")
# Z2 x Z2 written multiplicatively: A identity, G transition, C/T transversions.
KLEIN_TABLE = [
    [0, 1, 2, 3],
    [1, 0, 3, 2],
    [2, 3, 0, 1],
    [3, 2, 1, 0],
]
KLEIN_PHI = [1, 1, -1, -1]  # purine/pyrimidine sign


def kimura_model(tree: Tree, lengths: dict | None = None, transition_weight: float = 1.0) -> GroupModel:
    """Four-state model on Z2 x Z2 whose sign projection matches `lengths`.

    Per edge with projected flip probability p', the two transversion masses
    are p'/2 each and the transition mass is transition_weight * p'/2.
    transition_weight = 1 gives equal substitution rates (the classic
    four-state special case); other weights keep the projection unchanged.
    """
    lens = tree.lengths if lengths is None else lengths
    dists = {}
    for e in tree.edges():
        p_flip = prob_from_length(lens[e])
        pa = transition_weight * p_flip / 2.0
        pb = pg = p_flip / 2.0
        if pa + pb + pg >= 1.0:
            raise ValueError(f"edge {e} too long for transition weight {transition_weight}")
        dists[e] = np.array([1.0 - pa - pb - pg, pa, pb, pg])
    return GroupModel(tree, KLEIN_ELEMENTS, KLEIN_TABLE, KLEIN_PHI, dists)


def binary_group_model(tree: Tree, lengths: dict | None = None) -> GroupModel:
    """The two-element group-model base case: identical in law to the CFN chain."""
    lens = tree.lengths if lengths is None else lengths
    dists = {}
    for e in tree.edges():
        p = prob_from_length(lens[e])
        dists[e] = np.array([1.0 - p, p])
    return GroupModel(tree, ("0", "1"), [[0, 1], [1, 0]], [1, -1], dists)


# -- random instances ------------------------------------------------------------


def random_binary_tree(labels, rng: np.random.Generator, edge_range=(0.05, 0.15)) -> Tree:
    """Uniform labeled binary topology by sequential random edge attachment."""
    labels = list(labels)
    if len(labels) < 2:
        raise ValueError("need at least two taxa")
    lo, hi = edge_range

    def draw_len():
        return float(rng.uniform(lo, hi)) if hi > lo else float(lo)

    tree = Tree()
    a = tree.add_node(labels[0])
    b = tree.add_node(labels[1])
    tree.add_edge(a, b, draw_len())
    for name in labels[2:]:
        edges = tree.edges()
        u, v = edges[int(rng.integers(len(edges)))]
        old = tree.edge_length(u, v)
        mid = tree.subdivide(u, v, old / 2.0, old / 2.0)
        leaf = tree.add_node(name)
        tree.add_edge(mid, leaf, draw_len())
        # re-draw the split halves so all edges are i.i.d. uniform
        tree.lengths[edge_key(u, mid)] = draw_len()
        tree.lengths[edge_key(mid, v)] = draw_len()
    return tree


def enumerate_topologies(labels) -> list[Tree]:
    """All distinct binary topologies on the given taxa (unit edge lengths)."""
    labels = list(labels)
    base = Tree()
    a = base.add_node(labels[0])
    b = base.add_node(labels[1])
    base.add_edge(a, b, 1.0)
    trees = [base]
    for name in labels[2:]:
        nxt = []
        for t in trees:
            for u, v in t.edges():
                t2 = t.copy()
                mid = t2.subdivide(u, v, 1.0, 1.0)
                leaf = t2.add_node(name)
                t2.add_edge(mid, leaf, 1.0)
                nxt.append(t2)
        trees = nxt
    return trees
