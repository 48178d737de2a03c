"""Chordal graph machinery and the clique-based SDP relaxation.

The pipeline: extend the network graph to a chordal supergraph by symbolic
elimination in a (statically computed) minimum-degree order, collect maximal
cliques from the elimination order, build a maximum-overlap-weight clique
tree (which then satisfies the running intersection property), optionally
merge cliques greedily, and emit one real PSD block per clique per period
with overlap equalities along tree edges only.

Reconstruction goes the other way: averaged clique entries form a partial
matrix, a Schur-complement completion in reverse elimination order restores a
full PSD matrix on the original chordal pattern, and the standard rank-one
projection recovers voltages.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from . import relax
from .conic import ConicProgram
from .netmodel import MarketInstance, Network

__all__ = [
    "CliqueDecomposition",
    "NonChordalError",
    "DisconnectedCliqueGraphError",
    "chordal_extension",
    "mcs_peo",
    "is_peo",
    "is_chordal",
    "maximal_cliques",
    "clique_tree",
    "clique_cost",
    "merge_cliques",
    "decompose_network",
    "decomposition_to_dict",
    "emit_chordal_sdp",
    "assemble_w",
    "psd_complete",
    "reconstruct_chordal",
    "verify_rip",
]


class NonChordalError(ValueError):
    """Input graph fails the perfect-elimination-ordering check."""


class DisconnectedCliqueGraphError(ValueError):
    """Cliques do not overlap into a single connected component."""


Adjacency = dict[int, set[int]]


def _copy_adj(adj: Adjacency) -> Adjacency:
    return {v: set(nbrs) for v, nbrs in adj.items()}


def chordal_extension(adj: Adjacency) -> tuple[Adjacency, tuple[int, ...]]:
    """Chordal supergraph by symbolic elimination; returns (graph, order).

    Vertices are eliminated in minimum-degree order computed once up front
    from the input degrees (ties break on the smaller vertex).  The
    elimination order is itself a perfect elimination ordering of the
    returned graph.
    """
    order = tuple(sorted(adj, key=lambda v: (len(adj[v]), v)))
    pos = {v: k for k, v in enumerate(order)}
    out = _copy_adj(adj)
    for v in order:
        later = [w for w in out[v] if pos[w] > pos[v]]
        for idx, a in enumerate(later):
            for b in later[idx + 1 :]:
                out[a].add(b)
                out[b].add(a)
    return out, order


def is_peo(adj: Adjacency, order) -> bool:
    """True when each vertex's later neighbors form a clique."""
    pos = {v: k for k, v in enumerate(order)}
    for v in order:
        later = [w for w in adj[v] if pos[w] > pos[v]]
        for idx, a in enumerate(later):
            for b in later[idx + 1 :]:
                if b not in adj[a]:
                    return False
    return True


def mcs_peo(adj: Adjacency) -> tuple[int, ...]:
    """Maximum cardinality search ordering (a PEO iff the graph is chordal)."""
    weights = {v: 0 for v in adj}
    visited: list[int] = []
    remaining = set(adj)
    while remaining:
        v = max(remaining, key=lambda u: (weights[u], -u))
        visited.append(v)
        remaining.discard(v)
        for w in adj[v]:
            if w in remaining:
                weights[w] += 1
    return tuple(reversed(visited))


def is_chordal(adj: Adjacency) -> bool:
    return is_peo(adj, mcs_peo(adj))


def maximal_cliques(adj: Adjacency, peo) -> list[frozenset]:
    """Maximal cliques of a chordal graph from its elimination ordering."""
    pos = {v: k for k, v in enumerate(peo)}
    candidates = []
    for v in peo:
        later = [w for w in adj[v] if pos[w] > pos[v]]
        for idx, a in enumerate(later):
            for b in later[idx + 1 :]:
                if b not in adj[a]:
                    raise NonChordalError(
                        f"later neighbors of {v} are not a clique ({a}, {b} non-adjacent)"
                    )
        candidates.append(frozenset([v, *later]))
    candidates.sort(key=lambda c: (-len(c), sorted(c)))
    cliques: list[frozenset] = []
    for cand in candidates:
        if not any(cand <= kept for kept in cliques):
            cliques.append(cand)
    return cliques


def clique_tree(cliques: list[frozenset]) -> tuple[tuple[int, int], ...]:
    """Maximum-weight spanning tree of the clique graph, w = overlap size.

    For cliques of a chordal graph any maximum-weight tree satisfies the
    running intersection property.
    """
    k = len(cliques)
    if k == 1:
        return ()
    edges = []
    for i in range(k):
        for j in range(i + 1, k):
            w = len(cliques[i] & cliques[j])
            if w > 0:
                edges.append((-w, i, j))
    edges.sort()
    parent = list(range(k))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    tree = []
    for _negw, i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            tree.append((i, j))
    if len(tree) != k - 1:
        raise DisconnectedCliqueGraphError(
            f"clique graph has {k - len(tree)} components"
        )
    return tuple(sorted(tree))


def verify_rip(cliques, tree_edges) -> bool:
    """Explicit running-intersection check: cliques holding any vertex form a subtree."""
    k = len(cliques)
    nbrs = {i: set() for i in range(k)}
    for i, j in tree_edges:
        nbrs[i].add(j)
        nbrs[j].add(i)
    vertices = set().union(*cliques) if cliques else set()
    for v in vertices:
        holders = {i for i, c in enumerate(cliques) if v in c}
        start = next(iter(holders))
        seen = {start}
        stack = [start]
        while stack:
            i = stack.pop()
            for j in nbrs[i]:
                if j in holders and j not in seen:
                    seen.add(j)
                    stack.append(j)
        if seen != holders:
            return False
    return True


@dataclass(frozen=True)
class CliqueDecomposition:
    """Chordal extension, cliques, tree, elimination order, and entry owners.

    ``chordal_adj`` and ``peo`` always describe the original extension; merged
    cliques are unions and need not stay cliques of that graph.  ``eta_*``
    map each vertex / network edge to the smallest-index clique containing it.
    """

    chordal_adj: dict
    peo: tuple
    cliques: tuple
    tree_edges: tuple
    eta_vertex: dict
    eta_edge: dict

    @property
    def num_cliques(self) -> int:
        return len(self.cliques)


def _build_eta(cliques, adj: Adjacency):
    eta_vertex, eta_edge = {}, {}
    for v in adj:
        for idx, c in enumerate(cliques):
            if v in c:
                eta_vertex[v] = idx
                break
        else:
            raise NonChordalError(f"vertex {v} not covered by any clique")
    for v in adj:
        for w in adj[v]:
            if v < w:
                for idx, c in enumerate(cliques):
                    if v in c and w in c:
                        eta_edge[v, w] = idx
                        break
                else:
                    raise NonChordalError(f"edge ({v},{w}) not covered by any clique")
    return eta_vertex, eta_edge


def clique_cost(size: int) -> int:
    """gamma(A) = |A| (|A|+1) / 2, the variable count of a clique block."""
    return size * (size + 1) // 2


def merge_cliques(
    decomposition: CliqueDecomposition,
    target_fraction: float,
    network_adj: Adjacency | None = None,
) -> CliqueDecomposition:
    """Greedy merging along tree edges until <= ceil(fraction * k0) cliques.

    Each step contracts the tree edge minimizing the problem-size change
    gamma(Ci u Cj) - gamma(Ci) - gamma(Cj) - gamma(Ci n Cj); ties break on the
    smallest clique index pair.
    """
    cliques = {i: set(c) for i, c in enumerate(decomposition.cliques)}
    tree = {tuple(sorted(e)) for e in decomposition.tree_edges}
    k0 = len(cliques)
    target = max(1, math.ceil(target_fraction * k0))

    while len(cliques) > target and tree:
        best = None
        for i, j in sorted(tree):
            ci, cj = cliques[i], cliques[j]
            delta = (
                clique_cost(len(ci | cj))
                - clique_cost(len(ci))
                - clique_cost(len(cj))
                - clique_cost(len(ci & cj))
            )
            if best is None or delta < best[0]:
                best = (delta, i, j)
        _, i, j = best
        cliques[i] |= cliques[j]
        del cliques[j]
        new_tree = set()
        for a, b in tree:
            a = i if a == j else a
            b = i if b == j else b
            if a != b:
                new_tree.add((min(a, b), max(a, b)))
        tree = new_tree

    index_map = {old: new for new, old in enumerate(sorted(cliques))}
    merged = tuple(frozenset(cliques[old]) for old in sorted(cliques))
    tree_edges = tuple(
        sorted((min(index_map[a], index_map[b]), max(index_map[a], index_map[b])) for a, b in tree)
    )
    adj = network_adj if network_adj is not None else decomposition.chordal_adj
    eta_vertex, eta_edge = _build_eta(merged, adj)
    return replace(
        decomposition,
        cliques=merged,
        tree_edges=tree_edges,
        eta_vertex=eta_vertex,
        eta_edge=eta_edge,
    )


def decompose_network(network: Network, merge_fraction: float = 0.1) -> CliqueDecomposition:
    """Full pipeline from a network graph to a merged clique decomposition."""
    adj = network.adjacency()
    chordal_adj, peo = chordal_extension(adj)
    cliques = maximal_cliques(chordal_adj, peo)
    tree = clique_tree(cliques)
    eta_vertex, eta_edge = _build_eta(cliques, adj)
    decomposition = CliqueDecomposition(
        chordal_adj=chordal_adj,
        peo=peo,
        cliques=tuple(cliques),
        tree_edges=tree,
        eta_vertex=eta_vertex,
        eta_edge=eta_edge,
    )
    if merge_fraction < 1.0:
        decomposition = merge_cliques(decomposition, merge_fraction, network_adj=adj)
    return decomposition


def decomposition_to_dict(decomposition: CliqueDecomposition) -> dict:
    return {
        "cliques": [sorted(c) for c in decomposition.cliques],
        "tree_edges": [list(e) for e in decomposition.tree_edges],
        "peo": list(decomposition.peo),
    }


def save_decomposition(decomposition: CliqueDecomposition, path):
    with open(path, "w") as fh:
        json.dump(decomposition_to_dict(decomposition), fh, indent=1)
        fh.write("\n")


# -- emission ------------------------------------------------------------------


@dataclass
class ChordalHandles:
    blocks: dict  # (clique_index, t) -> PsdBlock
    positions: dict  # clique_index -> {vertex: local position}
    decomposition: CliqueDecomposition


def emit_chordal_sdp(
    instance: MarketInstance,
    program: ConicProgram,
    variables,
    decomposition: CliqueDecomposition,
) -> ChordalHandles:
    """Per-clique real PSD blocks with overlap equalities along tree edges.

    Each clique of m buses becomes a block of dimension 2m with interleaved
    (d, q) indexing; flow, voltage, and reference rows address entries through
    the owner map.
    """
    net = instance.network
    coef = variables.coefficients
    ref = net.index[net.ref_bus]
    handles = ChordalHandles(blocks={}, positions={}, decomposition=decomposition)

    for ci, clique in enumerate(decomposition.cliques):
        members = sorted(clique)
        handles.positions[ci] = {v: k for k, v in enumerate(members)}
        for t in range(instance.periods):
            handles.blocks[ci, t] = program.add_psd_block(
                2 * len(members), f"Wc{ci}t{t}"
            )

    def entry(ci, t, v, dv, w, dw):
        pos = handles.positions[ci]
        block = handles.blocks[ci, t]
        return block.entry(2 * pos[v] + dv, 2 * pos[w] + dw)

    # overlap equalities: full real sub-block for shared vertices, tree edges only
    for i, j in decomposition.tree_edges:
        shared = sorted(decomposition.cliques[i] & decomposition.cliques[j])
        labels = [(v, d) for v in shared for d in (0, 1)]
        for a in range(len(labels)):
            for b in range(a + 1):
                (v, dv), (w, dw) = labels[a], labels[b]
                for t in range(instance.periods):
                    program.add_eq(
                        [
                            (entry(i, t, v, dv, w, dw), 1.0),
                            (entry(j, t, v, dv, w, dw), -1.0),
                        ],
                        0.0,
                        tag="overlap",
                    )

    for v_id, w_id, line in net.directed_lines():
        kv, kw = net.index[v_id], net.index[w_id]
        ci = decomposition.eta_edge[(min(kv, kw), max(kv, kw))]
        g, b = line.g, line.b
        for t in range(instance.periods):
            w_re = [
                (entry(ci, t, kv, 0, kv, 0), 1.0),
                (entry(ci, t, kv, 1, kv, 1), 1.0),
                (entry(ci, t, kv, 0, kw, 0), -1.0),
                (entry(ci, t, kv, 1, kw, 1), -1.0),
            ]
            w_im = [
                (entry(ci, t, kv, 0, kw, 1), 1.0),
                (entry(ci, t, kv, 1, kw, 0), -1.0),
            ]
            p_expr = [(var, g * c) for var, c in w_re] + [(var, b * c) for var, c in w_im]
            q_expr = [(var, -b * c) for var, c in w_re] + [(var, g * c) for var, c in w_im]
            relax._flow_definition(
                program, variables.p_flow[v_id, w_id, t], p_expr, coef.eps_p, tag="flow-p"
            )
            relax._flow_definition(
                program, variables.q_flow[v_id, w_id, t], q_expr, coef.eps_q, tag="flow-q"
            )

    for bus in net.buses:
        k = net.index[bus.id]
        ci = decomposition.eta_vertex[k]
        for t in range(instance.periods):
            diag = [
                (entry(ci, t, k, 0, k, 0), 1.0),
                (entry(ci, t, k, 1, k, 1), 1.0),
            ]
            program.add_le([(v, -c) for v, c in diag], -bus.v_min ** 2, tag="v-lo")
            program.add_le(diag, bus.v_max ** 2, tag="v-hi")

    ci_ref = decomposition.eta_vertex[ref]
    for t in range(instance.periods):
        program.add_eq([(entry(ci_ref, t, ref, 0, ref, 0), 1.0)], 1.0, tag="ref")
        program.add_eq([(entry(ci_ref, t, ref, 1, ref, 1), 1.0)], 0.0, tag="ref")
        program.add_eq([(entry(ci_ref, t, ref, 1, ref, 0), 1.0)], 0.0, tag="ref")
        for w in net.neighbors[net.ref_bus]:
            kw = net.index[w]
            ci = decomposition.eta_edge[(min(ref, kw), max(ref, kw))]
            program.add_eq([(entry(ci, t, ref, 1, kw, 0), 1.0)], 0.0, tag="ref-q-row")
            program.add_eq([(entry(ci, t, ref, 1, kw, 1), 1.0)], 0.0, tag="ref-q-row")

    relax._thermal_soc(instance, program, variables)
    return handles


# -- reconstruction -------------------------------------------------------------


def assemble_w(clique_values: dict, cliques, n: int):
    """Average clique matrices into a partial n x n matrix.

    ``cliques[i]`` lists the global indices matching the rows of
    ``clique_values[i]``; entries covered by no clique are flagged unknown.
    Returns (matrix, known_mask).
    """
    acc = np.zeros((n, n))
    count = np.zeros((n, n), dtype=int)
    for ci, members in enumerate(cliques):
        block = np.asarray(clique_values[ci])
        idx = np.asarray(members, dtype=int)
        acc[np.ix_(idx, idx)] += block
        count[np.ix_(idx, idx)] += 1
    known = count > 0
    with np.errstate(invalid="ignore"):
        out = np.where(known, acc / np.maximum(count, 1), 0.0)
    return out, known


def psd_complete(partial: np.ndarray, adj: Adjacency, peo) -> np.ndarray:
    """Schur-complement PSD completion over a chordal pattern.

    Processes vertices in reverse elimination order; missing blocks between
    the current vertex and already-processed non-neighbors are filled through
    the separator clique with a pseudoinverse (robust to singular blocks).
    Entries of ``partial`` outside the chordal pattern (adjacency plus
    diagonal) are ignored; pattern entries are copied through unchanged.
    """
    n = len(peo)
    partial = np.asarray(partial, dtype=float)
    w = np.zeros((n, n))
    for v in range(n):
        w[v, v] = partial[v, v]
        for u in adj[v]:
            w[v, u] = partial[v, u]
            w[u, v] = partial[u, v]

    processed: list[int] = []
    for i in range(n - 1, -1, -1):
        v = peo[i]
        u_v = [u for u in processed if u in adj[v]]
        t_v = [u for u in processed if u not in adj[v]]
        if u_v and t_v:
            w_su = w[np.ix_([v], u_v)]
            w_uu = w[np.ix_(u_v, u_v)]
            w_tu = w[np.ix_(t_v, u_v)]
            fill = w_su @ np.linalg.pinv(w_uu) @ w_tu.T
            w[np.ix_([v], t_v)] = fill
            w[np.ix_(t_v, [v])] = fill.T
        processed.append(v)
    return w


def _blowup_real(decomposition: CliqueDecomposition):
    """Expand bus-level chordal structure to interleaved (d, q) real indices."""
    adj = decomposition.chordal_adj
    real_adj: Adjacency = {}
    for v in adj:
        real_adj[2 * v] = {2 * v + 1}
        real_adj[2 * v + 1] = {2 * v}
    for v in adj:
        for w in adj[v]:
            for dv in (0, 1):
                for dw in (0, 1):
                    real_adj[2 * v + dv].add(2 * w + dw)
    real_peo = tuple(2 * v + d for v in decomposition.peo for d in (0, 1))
    return real_adj, real_peo


def reconstruct_chordal(instance: MarketInstance, x, handles: ChordalHandles):
    """assemble -> complete -> rank-one projection; returns (profile, ratio)."""
    net = instance.network
    decomposition = handles.decomposition
    real_adj, real_peo = _blowup_real(decomposition)
    real_cliques = [
        [2 * v + d for v in sorted(c) for d in (0, 1)] for c in decomposition.cliques
    ]
    rows = []
    ratio = 0.0
    for t in range(instance.periods):
        values = {
            ci: handles.blocks[ci, t].matrix_values(x)
            for ci in range(decomposition.num_cliques)
        }
        partial, _known = assemble_w(values, real_cliques, 2 * net.n_buses)
        full = psd_complete(partial, real_adj, real_peo)
        volts, r = relax.reconstruct_shor(full, net.index[net.ref_bus])
        rows.append(volts)
        ratio = max(ratio, r)
    return relax.VoltageProfile(np.array(rows)), ratio
