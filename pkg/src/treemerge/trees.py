"""Unrooted trees with labeled leaves: the metric layer and Newick I/O.

Nodes are integer ids. Leaves carry taxon labels; internal nodes are
unlabeled and, in valid phylogenies, have degree exactly three. Edge
lengths live in expected-substitution units and convert to mutation
probabilities via p = (1 - exp(-2L)) / 2.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

LAMBDA0 = math.log(2.0) / 4.0  # phase-transition edge length of the two-state model


def length_from_prob(p: float) -> float:
    """Edge length for a per-site flip probability p in [0, 0.5)."""
    if not (0.0 <= p < 0.5):
        raise ValueError(f"flip probability must be in [0, 0.5), got {p}")
    return -0.5 * math.log1p(-2.0 * p)


def prob_from_length(length: float) -> float:
    """Per-site flip probability for a nonnegative edge length."""
    if not (length >= 0.0) or math.isnan(length):
        raise ValueError(f"edge length must be nonnegative, got {length}")
    return -0.5 * math.expm1(-2.0 * length)


def edge_key(u: int, v: int) -> tuple[int, int]:
    """Canonical (sorted) key for an undirected edge."""
    return (u, v) if u < v else (v, u)


class Tree:
    """Mutable undirected tree over integer node ids with per-edge lengths."""

    def __init__(self):
        self.adj: dict[int, list[int]] = {}
        self.lengths: dict[tuple[int, int], float] = {}
        self.label: dict[int, str] = {}
        self._next_id = 0

    # -- construction ------------------------------------------------------

    def add_node(self, label: str | None = None) -> int:
        node = self._next_id
        self._next_id += 1
        self.adj[node] = []
        if label is not None:
            self.label[node] = label
        return node

    def add_edge(self, u: int, v: int, length: float | None = None) -> None:
        if v in self.adj[u]:
            raise ValueError(f"edge ({u},{v}) already present")
        self.adj[u].append(v)
        self.adj[v].append(u)
        if length is not None:
            if length < 0:
                raise ValueError("edge length must be nonnegative")
            self.lengths[edge_key(u, v)] = float(length)

    def remove_edge(self, u: int, v: int) -> None:
        self.adj[u].remove(v)
        self.adj[v].remove(u)
        self.lengths.pop(edge_key(u, v), None)

    def subdivide(self, u: int, v: int, first: float, second: float) -> int:
        """Replace edge (u, v) by u-w-v with the given half lengths; return w."""
        if v not in self.adj[u]:
            raise ValueError(f"({u},{v}) is not an edge")
        self.remove_edge(u, v)
        w = self.add_node()
        self.add_edge(u, w, first)
        self.add_edge(w, v, second)
        return w

    def copy(self) -> "Tree":
        other = Tree()
        other.adj = {v: list(ns) for v, ns in self.adj.items()}
        other.lengths = dict(self.lengths)
        other.label = dict(self.label)
        other._next_id = self._next_id
        return other

    # -- queries -----------------------------------------------------------

    def nodes(self) -> list[int]:
        return sorted(self.adj)

    def edges(self) -> list[tuple[int, int]]:
        return sorted(edge_key(u, v) for u in self.adj for v in self.adj[u] if u < v)

    def neighbors(self, v: int) -> list[int]:
        return sorted(self.adj[v])

    def degree(self, v: int) -> int:
        return len(self.adj[v])

    def is_leaf(self, v: int) -> bool:
        return v in self.label

    def leaves(self) -> list[int]:
        return sorted(self.label)

    def taxa(self) -> list[str]:
        return sorted(self.label.values())

    def edge_length(self, u: int, v: int) -> float:
        return self.lengths[edge_key(u, v)]

    def path(self, u: int, v: int) -> list[int]:
        """Node sequence of the unique u-v path (BFS; raises if disconnected)."""
        if u == v:
            return [u]
        prev = {u: u}
        frontier = [u]
        while frontier:
            nxt = []
            for x in frontier:
                for y in self.adj[x]:
                    if y not in prev:
                        prev[y] = x
                        if y == v:
                            out = [v]
                            while out[-1] != u:
                                out.append(prev[out[-1]])
                            return out[::-1]
                        nxt.append(y)
            frontier = nxt
        raise ValueError(f"nodes {u} and {v} are in different components")

    def path_length(self, u: int, v: int, lengths: dict | None = None) -> float:
        """Sum of edge lengths along the unique u-v path."""
        lens = self.lengths if lengths is None else lengths
        p = self.path(u, v)
        return float(sum(lens[edge_key(a, b)] for a, b in zip(p, p[1:])))

    def validate_binary(self) -> None:
        """Check the phylogeny invariants: binary, connected, labels unique."""
        for v in self.adj:
            d = self.degree(v)
            if self.is_leaf(v):
                if len(self.adj) > 1 and d != 1:
                    raise ValueError(f"leaf {v} has degree {d}")
            elif d != 3:
                raise ValueError(f"internal node {v} has degree {d}")
        labels = list(self.label.values())
        if len(set(labels)) != len(labels):
            raise ValueError("duplicate taxon labels")
        if self.adj:
            seen = {next(iter(self.adj))}
            stack = list(seen)
            while stack:
                x = stack.pop()
                for y in self.adj[x]:
                    if y not in seen:
                        seen.add(y)
                        stack.append(y)
            if len(seen) != len(self.adj):
                raise ValueError("tree is not connected")

    def leaf_bipartitions(self) -> set[frozenset[str]]:
        """Nontrivial leaf-label bipartitions, one canonical side per split.

        The stored side is the one not containing the smallest taxon label,
        so sets compare across different node numberings.
        """
        taxa = self.taxa()
        if len(taxa) < 4:
            return set()
        anchor = taxa[0]
        out = set()
        for u, v in self.edges():
            side = self._leaf_labels_beyond(u, v)
            if anchor in side:
                side = set(taxa) - side
            if 2 <= len(side) <= len(taxa) - 2:
                out.add(frozenset(side))
        return out

    def _leaf_labels_beyond(self, u: int, v: int) -> set[str]:
        """Taxon labels on v's side of edge (u, v)."""
        out = set()
        stack = [(u, v)]
        while stack:
            parent, x = stack.pop()
            if self.is_leaf(x):
                out.add(self.label[x])
            for y in self.adj[x]:
                if y != parent:
                    stack.append((x, y))
        return out


@dataclass(frozen=True)
class Quartet:
    """Four items split into two pairs, with the connecting middle length."""

    pair1: tuple
    pair2: tuple
    middle: float | None = None


@dataclass(frozen=True)
class FourPointResult:
    grouping: tuple[tuple[int, int], tuple[int, int]]
    slack: float
    degenerate: bool


_GROUPINGS = (((0, 1), (2, 3)), ((0, 2), (1, 3)), ((0, 3), (1, 2)))


def four_point_check(d) -> FourPointResult:
    """Resolve a 4x4 distance matrix into its best pair grouping.

    Returns the grouping whose within-pair distance sum is smallest and the
    slack to the runner-up sum. A zero slack marks a degenerate (tied) input.
    """
    sums = []
    for (a, b), (c, dd) in _GROUPINGS:
        sums.append(d[a][b] + d[c][dd])
    order = sorted(range(3), key=lambda i: sums[i])
    slack = sums[order[1]] - sums[order[0]]
    return FourPointResult(_GROUPINGS[order[0]], slack, degenerate=(slack == 0.0))


# -- Newick ----------------------------------------------------------------


class NewickError(ValueError):
    """Malformed Newick input; carries the character position."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at position {position})")
        self.position = position


def parse_newick(text: str) -> Tree:
    """Parse one Newick line into an unrooted Tree.

    A two-child root is spliced away (its incident lengths are summed) so
    that "(A:0.1,B:0.1);" becomes a single A-B edge of length 0.2.
    """
    s = text.strip()
    if not s:
        raise NewickError("empty input", 0)
    if not s.endswith(";"):
        raise NewickError("missing terminating ';'", len(s) - 1)
    s = s[:-1]
    tree = Tree()
    pos = 0

    def parse_clade():
        nonlocal pos
        children = []
        if pos < len(s) and s[pos] == "(":
            pos += 1
            while True:
                children.append(parse_clade())
                if pos >= len(s):
                    raise NewickError("unbalanced '('", pos)
                if s[pos] == ",":
                    pos += 1
                    continue
                if s[pos] == ")":
                    pos += 1
                    break
                raise NewickError(f"unexpected character {s[pos]!r}", pos)
        start = pos
        while pos < len(s) and s[pos] not in "():,;":
            pos += 1
        name = s[start:pos].strip()
        length = None
        if pos < len(s) and s[pos] == ":":
            pos += 1
            lstart = pos
            while pos < len(s) and s[pos] not in "(),:;":
                pos += 1
            try:
                length = float(s[lstart:pos])
            except ValueError:
                raise NewickError(f"bad branch length {s[lstart:pos]!r}", lstart)
        if children:
            node = tree.add_node()
            for child, clen in children:
                tree.add_edge(node, child, 0.0 if clen is None else clen)
            return node, length
        if not name:
            raise NewickError("leaf without a label", start)
        return tree.add_node(name), length

    root, _ = parse_clade()
    if pos != len(s):
        raise NewickError(f"trailing input {s[pos:]!r}", pos)

    if tree.degree(root) == 2 and root not in tree.label:
        a, b = tree.adj[root]
        total = tree.edge_length(root, a) + tree.edge_length(root, b)
        tree.remove_edge(root, a)
        tree.remove_edge(root, b)
        del tree.adj[root]
        tree.add_edge(a, b, total)
    return tree


def _format_length(x: float) -> str:
    return f"{x:.10g}"


def to_newick(tree: Tree) -> str:
    """Serialize to a canonical Newick line.

    Children are ordered by their smallest descendant taxon and the tree is
    written from the internal node adjacent to the overall smallest taxon,
    which makes output independent of node numbering.
    """
    leaves = tree.leaves()
    if not leaves:
        raise ValueError("cannot serialize a tree with no labeled leaves")
    if len(tree.adj) == 1:
        return f"{tree.label[leaves[0]]};"
    min_leaf = min(leaves, key=lambda v: tree.label[v])
    if len(tree.adj) == 2:
        a, b = sorted(tree.adj, key=lambda v: tree.label[v])
        half = tree.edge_length(a, b) / 2.0
        return f"({tree.label[a]}:{_format_length(half)},{tree.label[b]}:{_format_length(half)});"

    min_tag: dict[tuple[int, int], str] = {}

    def tag(parent: int, node: int) -> str:
        key = (parent, node)
        if key not in min_tag:
            if tree.is_leaf(node):
                min_tag[key] = tree.label[node]
            else:
                min_tag[key] = min(tag(node, c) for c in tree.adj[node] if c != parent)
        return min_tag[key]

    def write(parent: int, node: int) -> str:
        length = _format_length(tree.edge_length(parent, node))
        if tree.is_leaf(node):
            return f"{tree.label[node]}:{length}"
        kids = sorted((c for c in tree.adj[node] if c != parent), key=lambda c: tag(node, c))
        inner = ",".join(write(node, c) for c in kids)
        return f"({inner}):{length}"

    root = tree.adj[min_leaf][0]
    kids = sorted(tree.adj[root], key=lambda c: tag(root, c))
    return "(" + ",".join(write(root, c) for c in kids) + ");"


def parse_forest(text: str) -> list[Tree]:
    """Parse a forest file: one Newick line per component, '#' lines ignored."""
    out = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            out.append(parse_newick(line))
    return out


def forest_to_newick(components: list[Tree], header: list[str] | None = None) -> str:
    """Serialize components one per line, optionally preceded by '#' headers."""
    lines = [f"# {h}" for h in (header or [])]
    lines.extend(to_newick(c) for c in components)
    return "\n".join(lines) + "\n"
