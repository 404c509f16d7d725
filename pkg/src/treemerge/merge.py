"""Forest reconstruction by shortest-connection merging.

Components start as single taxa and are repeatedly joined along the
shortest reliably-estimated connecting path. Every candidate join must
pass the minimum-edge check (C1: all new edges at least 3*epsilon), the
long-edge check (C2: at most one edge per component above the proper
cutoff, and that one below 2*lambda0 - 5*epsilon), and a triangle guard
that protects edge-disjointness against a third component sitting on the
connecting path. Ancestral rows are learned bottom-up for every clade
whose estimated edges are all below the proper cutoff, and each learned
(node, direction) slot is written exactly once.

Two interchangeable backends feed the distance queries: SequenceBackend
estimates from +/-1 character rows (learned rows are weighted majorities),
while ExactBackend anchors every slot at its true position in a reference
tree and returns noiseless additive distances, which determinizes the
full-recovery and soundness guarantees for testing.
"""

from __future__ import annotations

import heapq
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .distances import ReconstructionParams, empirical_distance, fpm, is_saturated, me
from .trees import Tree, edge_key

_COIN_TAG = 7  # rng stream tag for tie-break coins


@dataclass(frozen=True)
class Slot:
    """A usable sequence: an observed taxon or a learned clade root."""

    serial: int
    node: int
    kind: str  # "leaf" | "clade"


class _BackendBase:
    def __init__(self):
        self._slots: list[Slot] = []
        self._dist_cache: dict[tuple[int, int], float] = {}
        self.n_distance_evaluations = 0
        self.n_learned = 0

    def _new_slot(self, node: int, kind: str) -> Slot:
        slot = Slot(len(self._slots), node, kind)
        self._slots.append(slot)
        return slot

    def distance(self, s1: Slot, s2: Slot) -> float:
        if s1.serial == s2.serial:
            return 0.0
        key = (s1.serial, s2.serial) if s1.serial < s2.serial else (s2.serial, s1.serial)
        hit = self._dist_cache.get(key)
        if hit is None:
            hit = self._compute_distance(s1, s2)
            self._dist_cache[key] = hit
            self.n_distance_evaluations += 1
        return hit


class SequenceBackend(_BackendBase):
    """Distance source backed by observed +/-1 rows and majority-learned rows."""

    def __init__(self, rows_by_label: dict, seed: int = 0):
        super().__init__()
        self.seed = int(seed)
        self.taxa = sorted(rows_by_label)
        lengths = {len(np.asarray(rows_by_label[t])) for t in self.taxa}
        if len(lengths) != 1:
            raise ValueError("all rows must have the same number of sites")
        self.n_sites = lengths.pop()
        self._rows: dict[int, np.ndarray] = {}
        self._leaf_rows = {t: np.asarray(rows_by_label[t], dtype=np.int8) for t in self.taxa}

    def new_leaf_slot(self, node: int, label: str) -> Slot:
        slot = self._new_slot(node, "leaf")
        self._rows[slot.serial] = self._leaf_rows[label]
        return slot

    def new_clade_slot(self, node: int, inputs) -> Slot:
        """Weighted majority over (slot, weight) inputs with a fresh tie coin."""
        slot = self._new_slot(node, "clade")
        acc = np.zeros(self.n_sites, dtype=np.int64)
        for src, weight in inputs:
            acc += self._rows[src.serial].astype(np.int64) * int(weight)
        rng = np.random.default_rng((self.seed, slot.serial, _COIN_TAG))
        coin = rng.integers(0, 2, self.n_sites, dtype=np.int8) * 2 - 1
        self._rows[slot.serial] = np.where(acc * 2 + coin > 0, 1, -1).astype(np.int8)
        self.n_learned += 1
        return slot

    def note_subdivision(self, new_node: int, a: int, b: int, witness: int) -> None:
        pass

    def _compute_distance(self, s1: Slot, s2: Slot) -> float:
        return empirical_distance(self._rows[s1.serial], self._rows[s2.serial])


class ExactBackend(_BackendBase):
    """Noiseless additive oracle over a reference tree.

    Every slot is anchored at a point of the reference tree: taxa at their
    leaves, nodes created by edge subdivision at the geometric attachment
    point (the median of the split edge's endpoints and a witness on the
    far side). Distances are exact path lengths, so learned rows behave as
    if ancestral learning had zero error.
    """

    def __init__(self, true_tree: Tree):
        super().__init__()
        self.tree = true_tree
        self.taxa = true_tree.taxa()
        self._leaf_of = {true_tree.label[v]: v for v in true_tree.leaves()}
        nodes = true_tree.nodes()
        self._idx = {v: i for i, v in enumerate(nodes)}
        n = len(nodes)
        self._dist = np.zeros((n, n))
        for v in nodes:
            self._fill_row(v)
        root = nodes[0]
        self._parent: dict[int, int] = {root: root}
        order = [root]
        for x in order:
            for y in true_tree.neighbors(x):
                if y not in self._parent:
                    self._parent[y] = x
                    order.append(y)
        self._pos: dict[int, tuple] = {}

    def _fill_row(self, v: int) -> None:
        i = self._idx[v]
        dist = {v: 0.0}
        frontier = [v]
        while frontier:
            nxt = []
            for x in frontier:
                for y in self.tree.neighbors(x):
                    if y not in dist:
                        dist[y] = dist[x] + self.tree.edge_length(x, y)
                        nxt.append(y)
            frontier = nxt
        for node, d in dist.items():
            self._dist[i, self._idx[node]] = d

    # -- point geometry ------------------------------------------------------

    def _node_dist(self, a: int, b: int) -> float:
        return float(self._dist[self._idx[a], self._idx[b]])

    def _point_node(self, p, x: int) -> float:
        if p[0] == "n":
            return self._node_dist(p[1], x)
        _, u, v, off = p
        length = self.tree.edge_length(u, v)
        return min(off + self._node_dist(u, x), (length - off) + self._node_dist(v, x))

    def _point_dist(self, p, q) -> float:
        if p[0] == "n":
            return self._point_node(q, p[1])
        if q[0] == "n":
            return self._point_node(p, q[1])
        _, pu, pv, poff = p
        _, qu, qv, qoff = q
        if (pu, pv) == (qu, qv):
            return abs(poff - qoff)
        length_p = self.tree.edge_length(pu, pv)
        return min(
            poff + self._node_dist(pu, qu) + qoff,
            poff + self._node_dist(pu, qv) + (self.tree.edge_length(qu, qv) - qoff),
            (length_p - poff) + self._node_dist(pv, qu) + qoff,
            (length_p - poff) + self._node_dist(pv, qv) + (self.tree.edge_length(qu, qv) - qoff),
        )

    def _edge_point(self, u: int, v: int, off: float):
        length = self.tree.edge_length(u, v)
        if off <= 1e-12:
            return ("n", u)
        if off >= length - 1e-12:
            return ("n", v)
        a, b = edge_key(u, v)
        return ("e", a, b, off if a == u else length - off)

    def _node_path(self, a: int, b: int) -> list[int]:
        ancestors = [a]
        x = a
        while self._parent[x] != x:
            x = self._parent[x]
            ancestors.append(x)
        rank = {n: i for i, n in enumerate(ancestors)}
        tail = [b]
        y = b
        while y not in rank:
            y = self._parent[y]
            tail.append(y)
        return ancestors[: rank[y] + 1] + tail[-2::-1]

    def _locate(self, p, q, m: float):
        """Point at distance m from p along the p->q path."""
        if m <= 1e-12:
            return p
        if p[0] == "e":
            _, u, v, off = p
            if q[0] == "e" and (q[1], q[2]) == (u, v):
                step = m if q[3] >= off else -m
                return self._edge_point(u, v, off + step)
            via_u = off + self._point_node(q, u)
            via_v = (self.tree.edge_length(u, v) - off) + self._point_node(q, v)
            if via_u <= via_v:
                if m <= off:
                    return self._edge_point(u, v, off - m)
                return self._locate(("n", u), q, m - off)
            rem = self.tree.edge_length(u, v) - off
            if m <= rem:
                return self._edge_point(u, v, off + m)
            return self._locate(("n", v), q, m - rem)
        start = p[1]
        if q[0] == "e":
            _, qu, qv, qoff = q
            via_u = self._node_dist(start, qu) + qoff
            via_v = self._node_dist(start, qv) + (self.tree.edge_length(qu, qv) - qoff)
            entry, into = (qu, qoff) if via_u <= via_v else (qv, self.tree.edge_length(qu, qv) - qoff)
            walk = self._node_dist(start, entry)
            if m <= walk:
                return self._locate(("n", start), ("n", entry), m)
            return self._edge_point(entry, qu if entry == qv else qv, min(m - walk, into))
        path = self._node_path(start, q[1])
        acc = 0.0
        for a, b in zip(path, path[1:]):
            step = self.tree.edge_length(a, b)
            if acc + step >= m - 1e-12:
                return self._edge_point(a, b, m - acc)
            acc += step
        return ("n", q[1])

    # -- backend interface -----------------------------------------------------

    def new_leaf_slot(self, node: int, label: str) -> Slot:
        slot = self._new_slot(node, "leaf")
        self._pos[node] = ("n", self._leaf_of[label])
        return slot

    def new_clade_slot(self, node: int, inputs) -> Slot:
        self.n_learned += 1
        return self._new_slot(node, "clade")

    def note_subdivision(self, new_node: int, a: int, b: int, witness: int) -> None:
        pa, pb, pw = self._pos[a], self._pos[b], self._pos[witness]
        m = 0.5 * (self._point_dist(pa, pb) + self._point_dist(pa, pw) - self._point_dist(pb, pw))
        self._pos[new_node] = self._locate(pa, pb, m)

    def true_position(self, node: int):
        return self._pos[node]

    def true_point_distance(self, p, q) -> float:
        return self._point_dist(p, q)

    def _compute_distance(self, s1: Slot, s2: Slot) -> float:
        return self._point_dist(self._pos[s1.node], self._pos[s2.node])


# -- forest state ----------------------------------------------------------------


@dataclass(frozen=True)
class CandidateSet:
    """Where a connecting path may attach: edges of a component, or a bare taxon."""

    edges: frozenset = frozenset()
    anchor: int | None = None

    @property
    def resolved(self) -> bool:
        return self.anchor is not None or len(self.edges) == 1

    def nodes(self) -> list[int]:
        if self.anchor is not None:
            return [self.anchor]
        return sorted({v for e in self.edges for v in e})


class Forest:
    """Node-disjoint components over a global integer node namespace.

    Direction tokens give each (node, incident edge side) a stable identity
    that survives edge subdivision, so learned-sequence slots keyed by token
    stay valid as components grow.
    """

    def __init__(self):
        self.labels: dict[int, str] = {}
        self.adj: dict[int, dict[int, float]] = {}
        self.comp_of: dict[int, int] = {}
        self.comp_nodes: dict[int, list[int]] = {}
        self.tokens: dict[tuple[int, int], int] = {}
        self._next_node = 0
        self._next_token = 0
        self._next_comp = 0

    def add_taxon(self, label: str) -> int:
        node = self._next_node
        self._next_node += 1
        self.labels[node] = label
        self.adj[node] = {}
        cid = self._next_comp
        self._next_comp += 1
        self.comp_of[node] = cid
        self.comp_nodes[cid] = [node]
        return node

    def is_taxon(self, v: int) -> bool:
        return v in self.labels

    def neighbors(self, v: int) -> list[int]:
        return sorted(self.adj[v])

    def edge_length(self, u: int, v: int) -> float:
        return self.adj[u][v]

    def edges_of(self, cid: int) -> list[tuple[int, int]]:
        out = []
        for v in self.comp_nodes[cid]:
            for w in self.adj[v]:
                if v < w:
                    out.append((v, w))
        return sorted(out)

    def token(self, v: int, toward: int) -> int:
        return self.tokens[(v, toward)]

    def _issue_token(self, v: int, toward: int) -> None:
        self.tokens[(v, toward)] = self._next_token
        self._next_token += 1

    def _add_edge(self, u: int, v: int, length: float) -> None:
        self.adj[u][v] = length
        self.adj[v][u] = length
        self._issue_token(u, v)
        self._issue_token(v, u)

    def subdivide(self, u: int, v: int, first: float, second: float) -> int:
        """Split edge (u,v) at a new node, transferring the outer tokens."""
        w = self._next_node
        self._next_node += 1
        self.adj[w] = {}
        cid = self.comp_of[u]
        self.comp_of[w] = cid
        self.comp_nodes[cid].append(w)
        del self.adj[u][v]
        del self.adj[v][u]
        self.tokens[(u, w)] = self.tokens.pop((u, v))
        self.tokens[(v, w)] = self.tokens.pop((v, u))
        self.adj[u][w] = first
        self.adj[w][u] = first
        self.adj[v][w] = second
        self.adj[w][v] = second
        self._issue_token(w, u)
        self._issue_token(w, v)
        return w

    def connect(self, u: int, v: int, length: float) -> int:
        """Join the components of u and v with a new edge; returns the new cid."""
        c1, c2 = self.comp_of[u], self.comp_of[v]
        self._add_edge(u, v, length)
        cid = self._next_comp
        self._next_comp += 1
        members = self.comp_nodes.pop(c1) + self.comp_nodes.pop(c2)
        self.comp_nodes[cid] = members
        for node in members:
            self.comp_of[node] = cid
        return cid

    def first_step(self, v: int, target: int) -> int:
        """Neighbor of v through which target is reached."""
        if target in self.adj[v]:
            return target
        prev = {v: v}
        frontier = [v]
        while frontier:
            nxt = []
            for x in frontier:
                for y in self.adj[x]:
                    if y not in prev:
                        prev[y] = x
                        if y == target:
                            while prev[y] != v:
                                y = prev[y]
                            return y
                        nxt.append(y)
            frontier = nxt
        raise ValueError(f"{target} not reachable from {v}")

    def clade_members(self, v: int, away: int) -> tuple[list[int], list[tuple[int, int]]]:
        """Nodes and edges of the clade rooted at v that excludes direction away."""
        nodes, edges = [v], []
        stack = [(v, away)]
        while stack:
            x, par = stack.pop()
            for y in sorted(self.adj[x]):
                if y != par:
                    nodes.append(y)
                    edges.append(edge_key(x, y))
                    stack.append((y, x))
        return nodes, edges

    def component_tree(self, cid: int) -> Tree:
        """Materialize one component as a standalone Tree."""
        tree = Tree()
        mapping = {}
        for v in sorted(self.comp_nodes[cid]):
            mapping[v] = tree.add_node(self.labels.get(v))
        for u, v in self.edges_of(cid):
            tree.add_edge(mapping[u], mapping[v], self.adj[u][v])
        return tree


# -- bookkeeping -------------------------------------------------------------------


@dataclass
class Telemetry:
    n_taxa: int = 0
    iterations: int = 0
    merges: int = 0
    rejections: dict = field(default_factory=dict)
    distance_evaluations: int = 0
    learned_sequences: int = 0
    runtime_seconds: float = 0.0

    def reject(self, reason: str) -> None:
        self.rejections[reason] = self.rejections.get(reason, 0) + 1


@dataclass
class MergeResult:
    components: list
    telemetry: Telemetry
    log: list
    state: "MergeState"

    def forest_newick(self, header=None) -> str:
        from .trees import forest_to_newick

        return forest_to_newick(self.components, header)


@dataclass
class _QueueEntry:
    key: float
    lo: int
    hi: int
    serial: int
    cs_lo: CandidateSet
    cs_hi: CandidateSet

    def cs_for(self, cid: int) -> CandidateSet:
        return self.cs_lo if cid == self.lo else self.cs_hi


def _pair(c1: int, c2: int) -> tuple[int, int]:
    return (c1, c2) if c1 < c2 else (c2, c1)


class MergeState:
    """Mutable run state: forest, queue, slot memos, and counters."""

    def __init__(self, backend, params: ReconstructionParams, seed: int = 0):
        self.backend = backend
        self.params = params
        self.forest = Forest()
        self.telemetry = Telemetry(n_taxa=len(backend.taxa))
        self.log: list[str] = []
        self._leaf_slots: dict[int, Slot] = {}
        self._clade_memo: dict[tuple[int, int], Slot] = {}
        self.long_edges: dict[int, frozenset] = {}
        self._heap: list = []
        self._live: dict[tuple[int, int], _QueueEntry] = {}
        self._by_comp: dict[int, dict[int, float]] = {}  # last-known keys; outlive queue residence
        self._ever_seen: set[tuple[int, int]] = set()
        self._entry_serial = 0
        for label in backend.taxa:
            node = self.forest.add_taxon(label)
            self._leaf_slots[node] = backend.new_leaf_slot(node, label)
            self.long_edges[self.forest.comp_of[node]] = frozenset()

    # -- slots -----------------------------------------------------------------

    def leaf_slot(self, node: int) -> Slot:
        return self._leaf_slots[node]

    def _dist(self, s1: Slot, s2: Slot) -> float:
        return self.backend.distance(s1, s2)

    def _clade_boundary(self, v: int, away: int):
        """Depth-bounded boundary of the clade at v: (node, parent, weight, is_cut)."""
        d = self.params.depth
        out = []
        stack = [(v, away, 0)]
        while stack:
            x, par, k = stack.pop()
            if k > 0 and self.forest.is_taxon(x):
                out.append((x, par, 1 << (d - k), False))
                continue
            if k == d:
                out.append((x, par, 1, True))
                continue
            for y in sorted(self.forest.adj[x]):
                if y != par:
                    stack.append((y, x, k + 1))
        out.sort()
        return out

    def clade_slot(self, v: int, away: int) -> Slot:
        """Learned slot for the clade at v excluding direction away (write-once)."""
        if self.forest.is_taxon(v):
            return self._leaf_slots[v]
        top_key = (v, self.forest.token(v, away))
        if top_key in self._clade_memo:
            return self._clade_memo[top_key]
        pending = [(v, away)]
        while pending:
            x, aw = pending[-1]
            key = (x, self.forest.token(x, aw))
            if key in self._clade_memo:
                pending.pop()
                continue
            boundary = self._clade_boundary(x, aw)
            missing = []
            for node, parent, _, is_cut in boundary:
                if is_cut and not self.forest.is_taxon(node):
                    k2 = (node, self.forest.token(node, parent))
                    if k2 not in self._clade_memo:
                        missing.append((node, parent))
            if missing:
                pending.extend(missing)
                continue
            inputs = []
            for node, parent, weight, is_cut in boundary:
                if is_cut and not self.forest.is_taxon(node):
                    src = self._clade_memo[(node, self.forest.token(node, parent))]
                else:
                    src = self._leaf_slots[node]
                inputs.append((src, weight))
            self._clade_memo[key] = self.backend.new_clade_slot(x, inputs)
            pending.pop()
        return self._clade_memo[top_key]

    def _longs_inside(self, v: int, away: int) -> list:
        cid = self.forest.comp_of[v]
        out = []
        for p, q in self.long_edges[cid]:
            if p == v:
                inside = q != away
            elif q == v:
                inside = p != away
            else:
                inside = self.forest.first_step(v, p) != away
            if inside:
                out.append(edge_key(p, q))
        return out

    def direction_rep(self, v: int, away: int) -> Slot:
        """Representative of the clade at v away from `away`.

        When the clade holds a long edge, descend to the nearest node whose
        own sub-clade is free of long edges and use that learned slot.
        """
        if self.forest.is_taxon(v):
            return self._leaf_slots[v]
        bad = set(self._longs_inside(v, away))
        if not bad:
            return self.clade_slot(v, away)
        order = []
        children: dict[int, list[int]] = {}
        stack = [(v, away)]
        while stack:
            x, par = stack.pop()
            order.append((x, par))
            kids = [y for y in sorted(self.forest.adj[x]) if y != par]
            children[x] = kids
            stack.extend((y, x) for y in kids)
        bad_below: dict[int, bool] = {}
        for x, par in reversed(order):
            flag = False
            for c in children[x]:
                if bad_below[c] or edge_key(x, c) in bad:
                    flag = True
            bad_below[x] = flag
        frontier = [(v, away)]
        while frontier:
            nxt = []
            for x, par in frontier:
                if x != v and not bad_below[x]:
                    return self.clade_slot(x, par)
                nxt.extend((y, x) for y in children[x])
            frontier = sorted(nxt)
        raise RuntimeError("no long-edge-free sub-clade found")  # taxa make this unreachable

    def proper_rep_at(self, v: int) -> Slot | None:
        """A learned slot rooted at v over a clade free of long edges."""
        if self.forest.is_taxon(v):
            return self._leaf_slots[v]
        for away in self.forest.neighbors(v):
            if not self._longs_inside(v, away):
                return self.clade_slot(v, away)
        return None

    # -- connection estimation ----------------------------------------------------

    def _corner_options(self, cs: CandidateSet):
        if cs.anchor is not None:
            return [("anchor", self._leaf_slots[cs.anchor])]
        edges = sorted(cs.edges)
        if len(edges) == 1:
            (a, b) = edges[0]
            return [("pair", self.direction_rep(a, b), self.direction_rep(b, a))]
        counts: dict[int, int] = {}
        for e in edges:
            for v in e:
                counts[v] = counts.get(v, 0) + 1
        center = max(counts, key=lambda v: (counts[v], -v))
        tips = sorted(v for e in edges for v in e if v != center)
        opts = []
        for skip in range(len(tips)):
            used = [t for i, t in enumerate(tips) if i != skip]
            opts.append(("pair", self.direction_rep(used[0], center), self.direction_rep(used[1], center)))
        return opts

    def _diameter_ok(self, slots) -> bool:
        cutoff = self.params.diameter_cutoff
        for i in range(len(slots)):
            for j in range(i + 1, len(slots)):
                if self._dist(slots[i], slots[j]) > cutoff:
                    return False
        return True

    def _estimate_between(self, opt1, opt2) -> float | None:
        if opt1[0] == "anchor" and opt2[0] == "anchor":
            d = self._dist(opt1[1], opt2[1])
            return None if (is_saturated(d) or d > self.params.diameter_cutoff) else d
        if opt1[0] == "anchor" or opt2[0] == "anchor":
            anchor = opt1 if opt1[0] == "anchor" else opt2
            pair = opt2 if opt1[0] == "anchor" else opt1
            slots = [anchor[1], pair[1], pair[2]]
            if not self._diameter_ok(slots):
                return None
            return 0.5 * (
                self._dist(anchor[1], pair[1])
                + self._dist(anchor[1], pair[2])
                - self._dist(pair[1], pair[2])
            )
        slots = [opt1[1], opt1[2], opt2[1], opt2[2]]
        if not self._diameter_ok(slots):
            return None
        return me(self._dist, (opt1[1], opt1[2]), (opt2[1], opt2[2]))

    def tree_distance(self, cs1: CandidateSet, cs2: CandidateSet) -> float | None:
        """Estimated connecting-path length; None when every route fails."""
        best = None
        for o1 in self._corner_options(cs1):
            for o2 in self._corner_options(cs2):
                est = self._estimate_between(o1, o2)
                if est is not None and (best is None or est < best):
                    best = est
        return best

    # -- connection search -------------------------------------------------------

    def _find_seed(self, cs1: CandidateSet, cs2: CandidateSet):
        """First (by canonical order) close pair of proper clade reps."""
        cutoff = self.params.seed_cutoff
        side2 = [(u2, self.proper_rep_at(u2)) for u2 in cs2.nodes()]
        side2 = [(u2, t2) for u2, t2 in side2 if t2 is not None]
        for u1 in cs1.nodes():
            if self.forest.is_taxon(u1):
                certs = [(self._leaf_slots[u1],)]
            else:
                reps = [self.direction_rep(nb, u1) for nb in self.forest.neighbors(u1)]
                certs = [
                    (reps[i], reps[j]) for i in range(len(reps)) for j in range(i + 1, len(reps))
                ]
            for u2, t2 in side2:
                for cert in certs:
                    if all(self._dist(r, t2) < cutoff for r in cert):
                        return u1, cert[0], u2, t2
        return None

    def _walk(self, cs: CandidateSet, start: int, target: Slot) -> CandidateSet | None:
        """Narrow a candidate edge set by quartet-guided descent toward target."""
        if cs.anchor is not None or len(cs.edges) == 1:
            return cs
        edges = set(cs.edges)
        u = start
        fuel = 4 * len(self.forest.comp_nodes[self.forest.comp_of[start]]) + 8
        while len(edges) > 1:
            fuel -= 1
            if fuel < 0:
                raise RuntimeError("connection walk failed to converge")
            if self.forest.is_taxon(u):
                nb = self.forest.neighbors(u)[0]
                _, clade_edges = self.forest.clade_members(nb, u)
                edges &= set(clade_edges) | {edge_key(u, nb)}
                u = nb
                continue
            nbrs = self.forest.neighbors(u)
            reps = {nb: self.direction_rep(nb, u) for nb in nbrs}
            outcome = fpm(self._dist, target, reps[nbrs[0]], reps[nbrs[1]], reps[nbrs[2]])
            if outcome.saturated:
                return None
            if outcome.degenerate:
                edges = {edge_key(u, nb) for nb in nbrs}
                break
            with_target = outcome.grouping[0] if target in outcome.grouping[0] else outcome.grouping[1]
            other = outcome.grouping[1] if target in outcome.grouping[0] else outcome.grouping[0]
            partner = with_target[0] if with_target[1] == target else with_target[1]
            x = next(nb for nb in nbrs if reps[nb] == partner)
            middle = me(self._dist, with_target, other)
            if middle < self.params.epsilon:
                edges = {edge_key(u, nb) for nb in nbrs}
                break
            _, clade_edges = self.forest.clade_members(x, u)
            edges &= set(clade_edges) | {edge_key(u, x)}
            if not edges:
                return None
            u = x
        return CandidateSet(edges=frozenset(edges))

    def tree_connection(self, c1: int, c2: int, cs1: CandidateSet, cs2: CandidateSet):
        """Locate the attachment edges of the c1-c2 connecting path.

        Returns (C1, C2) candidate sets (single edge, or three edges around a
        node when the attachment is too close to it), or None when no seed
        pair communicates or a walk loses the trail.
        """
        seed = self._find_seed(cs1, cs2)
        if seed is None:
            return None
        u1, rep1, u2, rep2 = seed
        r1 = self._walk(cs1, u1, rep2)
        if r1 is None:
            return None
        r2 = self._walk(cs2, u2, rep1)
        if r2 is None:
            return None
        return r1, r2

    # -- join evaluation -----------------------------------------------------------

    def _cross_rep(self, cs: CandidateSet) -> Slot:
        """A representative just beyond a side's attachment, for far corners."""
        if cs.anchor is not None:
            return self._leaf_slots[cs.anchor]
        (a, b) = sorted(cs.edges)[0]
        return self.direction_rep(a, b)

    def _split_edge_length(self, end: int, other: int, cross: Slot) -> float | None:
        """Estimated length from `end` to the new node subdividing (end, other)."""
        if self.forest.is_taxon(end):
            s_end = self._leaf_slots[end]
            r_other = self.direction_rep(other, end)
            if not self._diameter_ok([s_end, r_other, cross]):
                return None
            return 0.5 * (
                self._dist(s_end, r_other) + self._dist(s_end, cross) - self._dist(r_other, cross)
            )
        o1, o2 = [nb for nb in self.forest.neighbors(end) if nb != other]
        corners = [
            self.direction_rep(o1, end),
            self.direction_rep(o2, end),
            self.direction_rep(other, end),
            cross,
        ]
        if not self._diameter_ok(corners):
            return None
        return me(self._dist, (corners[0], corners[1]), (corners[2], corners[3]))

    def _plan_join(self, cs1: CandidateSet, cs2: CandidateSet, middle: float):
        """Lengths of all edges a join would create, or None on a guard failure.

        Returns (side1_lengths, side2_lengths, middle) where each side is
        either None (anchor side, no subdivision) or ((a, la), (b, lb)) for
        the halves of the split edge.
        """
        cross2 = self._cross_rep(cs2)
        cross1 = self._cross_rep(cs1)
        sides = []
        for cs, cross in ((cs1, cross2), (cs2, cross1)):
            if cs.anchor is not None:
                sides.append(None)
                continue
            (a, b) = sorted(cs.edges)[0]
            la = self._split_edge_length(a, b, cross)
            if la is None:
                return None
            lb = self._split_edge_length(b, a, cross)
            if lb is None:
                return None
            sides.append(((a, la), (b, lb)))
        return sides[0], sides[1], middle

    def _new_edge_lengths(self, plan) -> list[float]:
        side1, side2, middle = plan
        out = [middle]
        for side in (side1, side2):
            if side is not None:
                out.extend([side[0][1], side[1][1]])
        return out

    def _check_c1(self, plan) -> bool:
        return all(l >= self.params.min_edge for l in self._new_edge_lengths(plan))

    def _check_c2(self, c1: int, c2: int, cs1: CandidateSet, cs2: CandidateSet, plan) -> bool:
        cut = self.params.proper_cutoff
        all_longs = [l for l in self._new_edge_lengths(plan) if l >= cut]
        for cid, cs in ((c1, cs1), (c2, cs2)):
            split = None if cs.anchor is not None else sorted(cs.edges)[0]
            for e in self.long_edges[cid]:
                if e != split:  # a split edge is replaced by its (re-measured) halves
                    all_longs.append(self.forest.adj[e[0]][e[1]])
        if len(all_longs) > 1:
            return False
        if all_longs and all_longs[0] >= self.params.long_edge_max:
            return False
        return True

    def _triangle_reject(self, c1: int, c2: int, middle: float):
        """Step-4g guard: a third component strictly shortcuts the connection."""
        near1 = self._by_comp.get(c1, {})
        near2 = self._by_comp.get(c2, {})
        for ck in sorted(set(near1) & set(near2)):
            lhs = middle + 3.0 * self.params.epsilon
            rhs = near1[ck] + near2[ck]
            if lhs > rhs:
                boundary = abs(lhs - rhs) < 1e-12
                return ck, boundary
        return None

    # -- queue ----------------------------------------------------------------------

    def _insert(self, c1: int, c2: int, key: float, cs1: CandidateSet, cs2: CandidateSet) -> None:
        lo, hi = _pair(c1, c2)
        entry = _QueueEntry(
            key, lo, hi, self._entry_serial, cs1 if c1 == lo else cs2, cs2 if c1 == lo else cs1
        )
        self._entry_serial += 1
        self._live[(lo, hi)] = entry
        self._by_comp.setdefault(lo, {})[hi] = key
        self._by_comp.setdefault(hi, {})[lo] = key
        self._ever_seen.add((lo, hi))
        heapq.heappush(self._heap, (key, lo, hi, entry.serial))

    def _remove(self, c1: int, c2: int) -> None:
        # drops the queue entry; the last-known distance stays visible to the
        # triangle guard, which reasons over previously computed estimates
        lo, hi = _pair(c1, c2)
        self._live.pop((lo, hi), None)

    def _pop(self) -> _QueueEntry | None:
        while self._heap:
            key, lo, hi, serial = heapq.heappop(self._heap)
            entry = self._live.get((lo, hi))
            if entry is not None and entry.serial == serial:
                self._remove(lo, hi)
                return entry
        return None

    def _full_cs(self, cid: int) -> CandidateSet:
        nodes = self.forest.comp_nodes[cid]
        if len(nodes) == 1:
            return CandidateSet(anchor=nodes[0])
        return CandidateSet(edges=frozenset(edge_key(u, v) for u, v in self.forest.edges_of(cid)))

    # -- commit -----------------------------------------------------------------------

    def _commit(self, c1: int, c2: int, cs1: CandidateSet, cs2: CandidateSet, plan):
        side1, side2, middle = plan
        forest = self.forest
        replaced: dict[tuple[int, int], tuple] = {}

        witness2 = cs2.anchor if cs2.anchor is not None else sorted(cs2.edges)[0][0]
        witness1 = cs1.anchor if cs1.anchor is not None else sorted(cs1.edges)[0][0]
        if side1 is None:
            attach1 = cs1.anchor
        else:
            (a, la), (b, lb) = side1
            attach1 = forest.subdivide(a, b, la, lb)
            self.backend.note_subdivision(attach1, a, b, witness2)
            replaced[edge_key(a, b)] = (edge_key(a, attach1), edge_key(attach1, b))
        if side2 is None:
            attach2 = cs2.anchor
        else:
            (c, lc), (d, ld) = side2
            attach2 = forest.subdivide(c, d, lc, ld)
            self.backend.note_subdivision(attach2, c, d, witness1)
            replaced[edge_key(c, d)] = (edge_key(c, attach2), edge_key(attach2, d))

        new_cid = forest.connect(attach1, attach2, middle)

        cut = self.params.proper_cutoff
        longs = set(self.long_edges.pop(c1)) | set(self.long_edges.pop(c2))
        for old, halves in replaced.items():
            longs.discard(old)
            for h in halves:
                if forest.adj[h[0]][h[1]] >= cut:
                    longs.add(h)
        if middle >= cut:
            longs.add(edge_key(attach1, attach2))
        self.long_edges[new_cid] = frozenset(longs)

        self._learn_proper_clades(new_cid)

        quartet_edges = {edge_key(attach1, attach2)}
        for halves in replaced.values():
            quartet_edges.update(halves)
        new_nodes = []
        if side1 is not None:
            new_nodes.append(attach1)
        if side2 is not None:
            new_nodes.append(attach2)
        return new_cid, quartet_edges, new_nodes, replaced

    def _learn_proper_clades(self, cid: int) -> None:
        """Materialize the learned slot of every long-edge-free clade."""
        forest = self.forest
        longs = self.long_edges[cid]
        internals = sorted(v for v in forest.comp_nodes[cid] if not forest.is_taxon(v))
        if not longs:
            for v in internals:
                for away in forest.neighbors(v):
                    self.clade_slot(v, away)
            return
        (p, q) = sorted(longs)[0]
        toward: dict[int, int] = {}
        for root, blocked in ((p, q), (q, p)):
            stack = [(root, blocked)]
            while stack:
                x, par = stack.pop()
                for y in forest.adj[x]:
                    if y != par:
                        toward[y] = x
                        stack.append((y, x))
        toward[p] = q
        toward[q] = p
        for v in internals:
            self.clade_slot(v, toward[v])

    def _remap_cs(self, cs: CandidateSet, replaced: dict) -> CandidateSet:
        if cs.anchor is not None or not replaced:
            return cs
        edges = set()
        for e in cs.edges:
            if e in replaced:
                edges.update(replaced[e])
            else:
                edges.add(e)
        return CandidateSet(edges=frozenset(edges))

    def _update_queue(self, c1, c2, cs1, cs2, new_cid, quartet_edges, new_nodes, replaced, old_members):
        # Reconnection always restarts from the full edge sets. Inheriting the
        # stored candidate sets (preferring the first side, as the update
        # figure suggests) can hand TreeConnection a set that misses the true
        # attachment edge when the third component is in fact closer to the
        # other side of the merged pair; the walk then narrows inside the
        # wrong region and the pair is lost for good. Full sets keep the
        # caller obligation of the connection routine intact; the walk does
        # the narrowing.
        cutoff = self.params.queue_cutoff
        others = sorted(k for k in self.forest.comp_nodes if k != new_cid)
        new_slots = []
        for w in new_nodes:
            for away in self.forest.neighbors(w):
                hit = self._clade_memo.get((w, self.forest.token(w, away)))
                if hit is not None:
                    new_slots.append(hit)
        for ck in others:
            p1, p2 = _pair(c1, ck), _pair(c2, ck)
            ever = p1 in self._ever_seen or p2 in self._ever_seen
            conn_input = None
            if ever:
                conn_input = (self._full_cs(new_cid), self._full_cs(ck))
            elif new_slots:
                hit = False
                for t in sorted(self.forest.comp_nodes[ck]):
                    ts = self.proper_rep_at(t)
                    if ts is None:
                        continue
                    if any(self._dist(s, ts) < cutoff for s in new_slots):
                        hit = True
                        break
                if hit:
                    conn_input = (self._full_cs(new_cid), self._full_cs(ck))
            self._remove(c1, ck)
            self._remove(c2, ck)
            by_ck = self._by_comp.get(ck)
            if by_ck is not None:
                by_ck.pop(c1, None)  # guard history must not reference dead components
                by_ck.pop(c2, None)
            if conn_input is None:
                continue
            conn = self.tree_connection(new_cid, ck, conn_input[0], conn_input[1])
            if conn is None:
                continue
            dist = self.tree_distance(conn[0], conn[1])
            if dist is None:
                continue
            self._insert(new_cid, ck, dist, conn[0], conn[1])
        self._by_comp.pop(c1, None)
        self._by_comp.pop(c2, None)

    # -- main loop -------------------------------------------------------------------

    def run(self) -> MergeResult:
        start_time = time.perf_counter()
        params = self.params
        taxa_nodes = sorted(self._leaf_slots)
        for i, u in enumerate(taxa_nodes):
            for v in taxa_nodes[i + 1 :]:
                d = self._dist(self._leaf_slots[u], self._leaf_slots[v])
                if d < params.queue_cutoff:
                    self._insert(
                        self.forest.comp_of[u],
                        self.forest.comp_of[v],
                        d,
                        CandidateSet(anchor=u),
                        CandidateSet(anchor=v),
                    )

        while len(self.forest.comp_nodes) > 1:
            entry = self._pop()
            if entry is None:
                break
            self.telemetry.iterations += 1
            c1, c2 = entry.lo, entry.hi
            conn = self.tree_connection(c1, c2, entry.cs_lo, entry.cs_hi)
            if conn is None:
                self._log(entry, "reject", "no_connection")
                continue
            cs1, cs2 = conn
            if not (cs1.resolved and cs2.resolved):
                self._log(entry, "reject", "unresolved")
                continue
            if (cs1, cs2) == (entry.cs_lo, entry.cs_hi):
                middle = entry.key
            else:
                middle = self.tree_distance(cs1, cs2)
                if middle is None:
                    self._log(entry, "reject", "distance_fail")
                    continue
            plan = self._plan_join(cs1, cs2, middle)
            if plan is None:
                self._log(entry, "reject", "edge_fail")
                continue
            if not self._check_c1(plan):
                self._log(entry, "reject", "c1")
                continue
            if not self._check_c2(c1, c2, cs1, cs2, plan):
                self._log(entry, "reject", "c2")
                continue
            tri = self._triangle_reject(c1, c2, middle)
            if tri is not None:
                reason = "triangle_boundary" if tri[1] else "triangle"
                self._log(entry, "reject", reason)
                continue
            old_members = {
                c1: list(self.forest.comp_nodes[c1]),
                c2: list(self.forest.comp_nodes[c2]),
            }
            new_cid, quartet_edges, new_nodes, replaced = self._commit(c1, c2, cs1, cs2, plan)
            self._update_queue(
                c1, c2, cs1, cs2, new_cid, quartet_edges, new_nodes, replaced, old_members
            )
            self.telemetry.merges += 1
            self._log(entry, "merge", f"into_{new_cid}")

        self.telemetry.distance_evaluations = self.backend.n_distance_evaluations
        self.telemetry.learned_sequences = self.backend.n_learned
        self.telemetry.runtime_seconds = time.perf_counter() - start_time
        components = [
            self.forest.component_tree(cid)
            for cid in sorted(
                self.forest.comp_nodes,
                key=lambda c: min(self.forest.labels[v] for v in self.forest.comp_nodes[c] if v in self.forest.labels),
            )
        ]
        return MergeResult(components, self.telemetry, self.log, self)

    def _log(self, entry: _QueueEntry, decision: str, reason: str) -> None:
        if decision == "reject":
            self.telemetry.reject(reason)
        self.log.append(
            f"{self.telemetry.iterations}\t({entry.lo},{entry.hi})\tkey={entry.key:.6g}\t{decision}\t{reason}"
        )


def tree_merge(characters, params: ReconstructionParams, seed: int = 0) -> MergeResult:
    """Reconstruct an edge-disjoint forest from character data or a backend.

    characters may be a mapping from taxon label to +/-1 row (a
    SequenceBackend is built around it with the given seed), or an already
    constructed backend such as ExactBackend for determinized runs.
    """
    if hasattr(characters, "distance") and hasattr(characters, "taxa"):
        backend = characters
    else:
        rows = characters.rows if hasattr(characters, "rows") else characters
        backend = SequenceBackend(rows, seed)
    if len(backend.taxa) < 3:
        raise ValueError("need at least three taxa")
    return MergeState(backend, params, seed).run()
