"""Scoring reconstructed forests against a reference tree.

Correctness of a forest is expressed through bipartitions: every internal
edge of an output component splits that component's taxa in two, and the
split is compatible with the reference exactly when the reference tree
restricted to those taxa displays it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .trees import Tree, edge_key


def restricted_bipartitions(truth: Tree, taxa_subset) -> set[frozenset]:
    """Nontrivial splits the reference induces on a taxa subset (canonical side)."""
    subset = set(taxa_subset)
    if len(subset) < 4:
        return set()
    anchor = min(subset)
    out = set()
    for u, v in truth.edges():
        side = truth._leaf_labels_beyond(u, v) & subset
        if anchor in side:
            side = subset - side
        if 2 <= len(side) <= len(subset) - 2:
            out.add(frozenset(side))
    return out


def restrict_tree(truth: Tree, taxa_subset) -> Tree:
    """Reference tree restricted to a taxa subset, path lengths preserved.

    Degree-two junctions introduced by the restriction are suppressed with
    their incident lengths summed, so edges of the result carry the true
    path length between the retained branch points.
    """
    subset = set(taxa_subset)
    keep_leaves = [v for v in truth.leaves() if truth.label[v] in subset]
    if len(keep_leaves) < 2:
        raise ValueError("need at least two retained taxa")
    # mark nodes on paths between kept leaves: those with >= 2 marked directions
    marked = set(keep_leaves)
    for i, a in enumerate(keep_leaves):
        for b in keep_leaves[i + 1 :]:
            marked.update(truth.path(a, b))
    out = Tree()
    mapping = {}
    for v in sorted(marked):
        if truth.is_leaf(v):
            mapping[v] = out.add_node(truth.label[v])
        elif sum(1 for w in truth.adj[v] if w in marked) >= 3:
            mapping[v] = out.add_node()
    for v in sorted(mapping):
        # walk each marked direction to the next mapped node, summing lengths
        for w in truth.adj[v]:
            if w not in marked:
                continue
            length = truth.edge_length(v, w)
            prev, cur = v, w
            while cur not in mapping:
                nxt = [x for x in truth.adj[cur] if x in marked and x != prev]
                prev, cur = cur, nxt[0]
                length += truth.edge_length(prev, cur)
            if mapping[v] < mapping[cur]:
                out.add_edge(mapping[v], mapping[cur], length)
    return out


@dataclass
class ScoreReport:
    full_recovery: bool
    n_components: int
    compatibility: float  # fraction of output bipartitions displayed by the truth
    recall: float  # fraction of the truth's bipartitions recovered
    n_output_bipartitions: int
    n_matched_bipartitions: int
    edge_length_errors: list = field(default_factory=list)
    max_length_error: float = 0.0
    mean_length_error: float = 0.0

    def to_tsv(self) -> str:
        rows = [
            ("full_recovery", str(self.full_recovery).lower()),
            ("components", str(self.n_components)),
            ("compatibility", f"{self.compatibility:.6f}"),
            ("recall", f"{self.recall:.6f}"),
            ("output_bipartitions", str(self.n_output_bipartitions)),
            ("matched_bipartitions", str(self.n_matched_bipartitions)),
            ("max_length_error", f"{self.max_length_error:.6g}"),
            ("mean_length_error", f"{self.mean_length_error:.6g}"),
        ]
        return "\n".join(f"{k}\t{v}" for k, v in rows) + "\n"


def score_forest(components: list[Tree], truth: Tree) -> ScoreReport:
    """Compare forest components against the reference tree.

    Components must cover disjoint subsets of the reference taxa. Length
    errors are collected over edges whose bipartition (within the component)
    matches the restricted reference, pendant edges included.
    """
    truth_taxa = set(truth.taxa())
    seen = set()
    for comp in components:
        taxa = set(comp.taxa())
        if not taxa <= truth_taxa:
            raise ValueError(f"forest taxa {sorted(taxa - truth_taxa)} not in reference")
        if taxa & seen:
            raise ValueError("forest components overlap in taxa")
        seen |= taxa

    truth_splits = truth.leaf_bipartitions()
    n_out = 0
    n_match = 0
    recovered = set()
    errors = []
    for comp in components:
        taxa = sorted(comp.taxa())
        if len(taxa) < 2:
            continue
        ref_splits = restricted_bipartitions(truth, taxa)
        comp_splits = comp.leaf_bipartitions()
        n_out += len(comp_splits)
        matched = comp_splits & ref_splits
        n_match += len(matched)
        # recovered reference splits: full-tree splits whose restriction is matched
        subset = set(taxa)
        anchor = min(subset)
        for full in truth_splits:
            side = full & subset
            if anchor in side:
                side = subset - side
            if 2 <= len(side) <= len(subset) - 2 and frozenset(side) in matched:
                recovered.add(full)
        errors.extend(_matched_length_errors(comp, truth, taxa))

    single = len(components) == 1 and set(components[0].taxa()) == truth_taxa
    full_recovery = bool(
        single and components[0].leaf_bipartitions() == truth_splits
    )
    compatibility = 1.0 if n_out == 0 else n_match / n_out
    recall = 0.0 if not truth_splits else len(recovered) / len(truth_splits)
    report = ScoreReport(
        full_recovery=full_recovery,
        n_components=len(components),
        compatibility=compatibility,
        recall=recall,
        n_output_bipartitions=n_out,
        n_matched_bipartitions=n_match,
        edge_length_errors=errors,
    )
    if errors:
        report.max_length_error = max(errors)
        report.mean_length_error = sum(errors) / len(errors)
    return report


def _matched_length_errors(comp: Tree, truth: Tree, taxa) -> list[float]:
    if len(taxa) < 2:
        return []
    ref = restrict_tree(truth, taxa)
    ref_by_split = _splits_with_lengths(ref)
    out = []
    for split, length in _splits_with_lengths(comp).items():
        if split in ref_by_split:
            out.append(abs(length - ref_by_split[split]))
    return out


def _splits_with_lengths(tree: Tree) -> dict[frozenset, float]:
    """Every edge's leaf split (canonical side, pendants included) -> length."""
    taxa = tree.taxa()
    anchor = taxa[0]
    out = {}
    for u, v in tree.edges():
        side = tree._leaf_labels_beyond(u, v)
        if anchor in side:
            side = set(taxa) - side
        out[frozenset(side)] = tree.edge_length(u, v)
    return out
