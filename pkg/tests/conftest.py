"""Shared builders for small model trees used across the suite."""

import numpy as np
import pytest

from treemerge import ancestral
from treemerge.simulate import CFNModel
from treemerge.trees import Tree


def chain_tree(lengths, labels=None):
    """Path graph with the given edge lengths; leaves at both ends."""
    t = Tree()
    labels = labels or [f"c{i}" for i in range(len(lengths) + 1)]
    prev = t.add_node(labels[0])
    for i, length in enumerate(lengths):
        cur = t.add_node(labels[i + 1] if i == len(lengths) - 1 else None)
        t.add_edge(prev, cur, length)
        prev = cur
    return t


def balanced_tree(depth, length):
    """Rooted balanced binary tree; node 0 is the root, leaves labeled."""
    t = Tree()
    root = t.add_node()
    frontier = [(root, 0)]
    leaf_idx = 0
    while frontier:
        node, k = frontier.pop(0)
        if k == depth:
            t.label[node] = f"L{leaf_idx:02d}"
            leaf_idx += 1
            continue
        for _ in range(2):
            child = t.add_node()
            t.add_edge(node, child, length)
            frontier.append((child, k + 1))
    return t


def rooted_children(tree, root):
    """Children map of a tree rooted at `root`."""
    children = {}
    stack = [(root, None)]
    while stack:
        node, parent = stack.pop()
        kids = [n for n in tree.neighbors(node) if n != parent]
        children[node] = kids
        stack.extend((k, node) for k in kids)
    return children


def balanced_model(depth, length, noise=0.0):
    """(CFNModel, learning plan) for the uniform balanced tree."""
    tree = balanced_tree(depth, length)
    leaf_noise = {v: noise for v in tree.leaves()} if noise > 0 else {}
    model = CFNModel(tree, root=0, leaf_noise=leaf_noise)
    plan = ancestral.decompose(0, rooted_children(tree, 0), depth)
    return model, plan


def induced_subtree_plan(tree, root, leaf_subset, depth):
    """Learning plan over the union of tree paths from root to the chosen leaves.

    Returns (plan, span_nodes): span_nodes are all tree nodes the induced
    subtree passes through (the eligible probe set before removing leaves).
    """
    span = {root}
    children = {}
    for leaf in leaf_subset:
        path = tree.path(root, leaf)
        span.update(path)
        for parent, child in zip(path, path[1:]):
            children.setdefault(parent, [])
            if child not in children[parent]:
                children[parent].append(child)
    for leaf in leaf_subset:
        children.setdefault(leaf, [])
    plan = ancestral.decompose(root, children, depth)
    return plan, span
