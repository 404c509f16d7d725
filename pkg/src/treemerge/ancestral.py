"""Ancestral sequence learning by recursive weighted majority.

A rooted clade is cut into depth-bounded subtrees; each subtree root is
voted from its boundary, leaves at early depth k getting weight 2^(d-k)
(the integer-weight equivalent of padding with zero-length subtrees). The
exact dynamic program majhat_exact gives the learned-root error for the
uniform balanced case and drives the numeric calibration of the noise
bound beta.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from .trees import LAMBDA0, length_from_prob, prob_from_length

MAX_EXACT_DEPTH = 6  # majhat_exact works on 2^d-leaf balanced trees


def a_of_q(q: int) -> float:
    """2^(1-q) * C(q, floor(q/2)), evaluated exactly then rounded to float."""
    if q < 1:
        raise ValueError("q must be a positive integer")
    return float(Fraction(math.comb(q, q // 2), 1 << (q - 1)))


def majority_gain(q: int) -> float:
    """Correlation amplification of an unbiased q-input majority vote.

    Equals q * E[x_1 * Maj(x_1..x_q)] for i.i.d. uniform signs, which is
    q * C(q, q/2) / 2^q for even q: the factor by which a small common
    correlation is multiplied by one vote. Approaches sqrt(2q/pi).
    """
    if q < 2 or q % 2:
        raise ValueError("q must be a positive even integer")
    return float(Fraction(q * math.comb(q, q // 2), 1 << q))


def depth_is_feasible(lambda_max: float, depth: int) -> bool:
    """Whether a depth-d vote amplifies signal at edge lengths <= lambda_max."""
    return majority_gain(1 << depth) * math.exp(-2.0 * depth * lambda_max) > 1.0


def default_depth(lambda_max: float, cap: int = MAX_EXACT_DEPTH) -> int | None:
    """Smallest feasible decomposition depth, or None if none is <= cap."""
    if lambda_max <= 0:
        return 1
    for d in range(1, cap + 1):
        if depth_is_feasible(lambda_max, d):
            return d
    return None


def maj(values, weights=None, coin: int = 1) -> int:
    """Weighted majority of +/-1 values; the coin breaks exact ties."""
    values = list(values)
    if not values:
        raise ValueError("majority of an empty sequence")
    if weights is None:
        weights = [1] * len(values)
    total = sum(w * x for w, x in zip(weights, values)) + 0.5 * coin
    return 1 if total > 0 else -1


# -- decomposition ---------------------------------------------------------


@dataclass(frozen=True)
class SubtreePlan:
    """One depth-bounded piece: its root and weighted boundary entries."""

    root: int
    boundary: tuple[tuple[int, int], ...]  # (node, weight); weight = 2^(d - depth)


@dataclass(frozen=True)
class Decomposition:
    """Edge-disjoint depth-<=d subtrees of a rooted clade, children first."""

    root: int
    depth: int
    subtrees: tuple[SubtreePlan, ...]

    def cut_nodes(self) -> set[int]:
        return {s.root for s in self.subtrees} - {self.root}


def decompose(root: int, children_of, depth: int) -> Decomposition:
    """Cut a rooted clade at topological depth multiples of `depth`.

    children_of maps node -> child sequence. Paths stop at depth d (the cut
    node roots a deeper subtree) or at childless nodes (clade leaves, which
    get weight 2^(d - k) at depth k).
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    plans = []
    pending = [root]
    while pending:
        rho = pending.pop()
        boundary = []
        stack = [(rho, 0)]
        while stack:
            node, k = stack.pop()
            kids = list(children_of.get(node, ()) if hasattr(children_of, "get") else children_of(node))
            if k > 0 and (k == depth or not kids):
                boundary.append((node, 1 << (depth - k)))
                if kids:
                    pending.append(node)
                continue
            if k == 0 and not kids:
                boundary.append((node, 1 << depth))
                continue
            for c in kids:
                stack.append((c, k + 1))
        boundary.sort()
        plans.append(SubtreePlan(rho, tuple(boundary)))
    # children-before-parents: a subtree must follow every subtree rooted at
    # one of its cut nodes, so emit in reverse discovery order
    plans.reverse()
    return Decomposition(root, depth, tuple(plans))


def learn_root(decomp: Decomposition, leaf_rows: dict, seed: int, coin_key=None):
    """Bottom-up weighted-majority learning over all sites at once.

    leaf_rows maps every clade leaf to its observed +/-1 row. Tie coins are
    fresh per (site, vote node), drawn from a stream keyed by the node (or
    by coin_key(node) when given). Returns (root_row, rows_at_subtree_roots).
    """
    rows = dict(leaf_rows)
    learned = {}
    n_sites = None
    for sub in decomp.subtrees:
        acc = None
        for node, w in sub.boundary:
            if node not in rows:
                raise ValueError(f"missing character data for clade leaf {node}")
            row = rows[node].astype(np.int64)
            if n_sites is None:
                n_sites = row.shape[0]
            acc = row * w if acc is None else acc + row * w
        key = sub.root if coin_key is None else coin_key(sub.root)
        coin = np.random.default_rng((int(seed), int(key))).integers(0, 2, n_sites, dtype=np.int8) * 2 - 1
        value = np.where(acc * 2 + coin > 0, 1, -1).astype(np.int8)
        rows[sub.root] = value
        learned[sub.root] = value
    return learned[decomp.root], learned


def balanced_children(depth: int) -> tuple[int, dict[int, list[int]]]:
    """Rooted d-level balanced binary tree as (root, children map), ids 0.."""
    children: dict[int, list[int]] = {0: []}
    nxt = 1
    frontier = [(0, 0)]
    while frontier:
        node, k = frontier.pop(0)
        if k == depth:
            continue
        kids = [nxt, nxt + 1]
        nxt += 2
        children[node] = kids
        for c in kids:
            children[c] = []
            frontier.append((c, k + 1))
    return 0, children


# -- exact error of the balanced-tree vote -----------------------------------


def majhat_exact(depth: int, edge_len: float, leaf_noise: float) -> float:
    """Exact learned-root distance for the uniform d-level balanced tree.

    All 2^d leaves sit at depth d with edge length edge_len everywhere and
    independent leaf noise leaf_noise. Conditioning on the root, the law of
    the vote total is propagated upward by flip-mixing and convolution.
    Returns math.inf when the error probability reaches one half.
    """
    if not (0 <= depth <= MAX_EXACT_DEPTH):
        raise ValueError(f"depth must be in [0, {MAX_EXACT_DEPTH}]")
    if edge_len < 0 or leaf_noise < 0:
        raise ValueError("lengths must be nonnegative")
    if depth == 0:
        return float(leaf_noise)
    p_noise = prob_from_length(leaf_noise)
    p_edge = prob_from_length(edge_len)
    # dist over leaf value given true leaf state +1, support {-1, +1}
    dist = np.array([p_noise, 1.0 - p_noise])
    for _ in range(depth):
        child = (1.0 - p_edge) * dist + p_edge * dist[::-1]
        dist = np.convolve(child, child)
    mid = (dist.size - 1) // 2
    err = float(dist[:mid].sum() + 0.5 * dist[mid])
    if err >= 0.5:
        return math.inf
    return length_from_prob(err)


class DepthInfeasibleError(ValueError):
    """No self-consistent noise bound exists on the search grid."""


@dataclass(frozen=True)
class BetaCalibration:
    lambda_max: float
    depth: int
    beta: float
    value: float  # exact learned-root distance at (lambda_max, beta)


BETA_GRID_SIZE = 2048
BETA_GRID_BLOCK = 2.0 * LAMBDA0
BETA_GRID_BLOCKS = 8  # marginal depths have fixed points well past 2*lambda0

_beta_memo: dict[tuple[float, int], BetaCalibration] = {}


def calibrate_beta(
    lambda_max: float, depth: int, grid_size: int = BETA_GRID_SIZE, exhaustive: bool = False
) -> BetaCalibration:
    """Smallest grid beta with majhat_exact(depth, lambda_max, beta) <= beta.

    The returned beta closes the recursion: feeding noise beta back through
    one depth-d vote at worst-case uniform edge lengths does not exceed beta.
    The grid covers (0, 2*lambda0] densely and extends in equal blocks up to
    16*lambda0 before giving up. The self-consistent betas form an interval
    (the vote error grows monotonically in its input noise, with slope
    crossing one only once), so the smallest grid point is located by a
    coarse probe plus binary search; exhaustive=True forces the plain linear
    scan instead, for cross-checking. Raises DepthInfeasibleError when no
    grid point closes the recursion (raise depth).
    """
    if lambda_max < 0:
        raise ValueError("lambda_max must be nonnegative")
    key = (round(float(lambda_max), 12), int(depth))
    if key in _beta_memo and grid_size == BETA_GRID_SIZE and not exhaustive:
        return _beta_memo[key]
    step = BETA_GRID_BLOCK / grid_size
    total = grid_size * BETA_GRID_BLOCKS

    def beta_at(i: int) -> float:
        return i * step

    def ok(i: int) -> bool:
        # tolerance absorbs float round-trip noise at exact fixed points
        # (e.g. depth 1 at lambda_max 0), far below the grid step
        return majhat_exact(depth, lambda_max, beta_at(i)) <= beta_at(i) + 1e-12

    found = None
    if exhaustive:
        for i in range(1, total + 1):
            if ok(i):
                found = i
                break
    else:
        coarse = sorted({max(1, total * k // 32) for k in range(1, 33)})
        prev = 0
        for i in coarse:
            if ok(i):
                lo, hi = prev + 1, i
                while lo < hi:
                    mid = (lo + hi) // 2
                    if ok(mid):
                        hi = mid
                    else:
                        lo = mid + 1
                found = lo
                break
            prev = i
    if found is None:
        raise DepthInfeasibleError(
            f"no self-consistent noise bound at depth {depth} for lambda_max {lambda_max:.6g}"
        )
    beta = beta_at(found)
    result = BetaCalibration(float(lambda_max), int(depth), beta, majhat_exact(depth, lambda_max, beta))
    if grid_size == BETA_GRID_SIZE and not exhaustive:
        _beta_memo[key] = result
    return result


def iterated_noise_bound(lambda_max: float, depth: int, rounds: int) -> float:
    """Noise after a fixed number of learning rounds, starting noiseless.

    Used for practical parameter choices when no fixed point exists at the
    working depth: the recursion depth of a finite reconstruction is bounded,
    so the iterate is an honest bound for that many rounds.
    """
    eta = 0.0
    for _ in range(max(1, rounds)):
        nxt = majhat_exact(depth, lambda_max, eta)
        if math.isinf(nxt):
            return eta if eta > 0 else BETA_GRID_MAX
        eta = nxt
    return eta


# -- calibration cache --------------------------------------------------------


def save_beta_cache(path, entries) -> None:
    """Write '(lambda_max, depth) -> beta' rows as plain text."""
    with open(path, "w") as fh:
        fh.write("# lambda_max\tdepth\tbeta\n")
        for cal in entries:
            fh.write(f"{cal.lambda_max:.12g}\t{cal.depth}\t{cal.beta:.12g}\n")


def load_beta_cache(path) -> dict[tuple[float, int], float]:
    out = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            lam, depth, beta = line.split("\t")
            out[(round(float(lam), 12), int(depth))] = float(beta)
    return out
